import numpy as np
import pytest

from dbadapt import checkpoint as C
from dbadapt.adapter import init_adapter, init_head
from dbadapt.transformer import ModelConfig, SiteScales, init_model, model_tensors


def test_model_roundtrip(tmp_path):
    cfg = ModelConfig(num_blocks=2, model_dim=8, ffn_dim=8, seq_len=3, patch_dim=2)
    m = init_model(cfg, seed=4)
    m.scales = [SiteScales(attn_shift=0.5, out_scale=2.0), SiteScales(ln1_max=3.0)]
    back = C.load_model(C.save_model(m, tmp_path / "m.npz"))
    assert back.config == cfg
    assert back.scales == m.scales
    for a, b in zip(model_tensors(m), model_tensors(back)):
        np.testing.assert_array_equal(a, b)


def test_adapter_roundtrip(tmp_path):
    th, eta = init_adapter(3, 8, 2, seed=1), init_head(8, 4, seed=2)
    th.alpha = np.array([0.1, -0.2, 0.3])
    t2, e2 = C.load_adapter(C.save_adapter(th, eta, tmp_path / "a.npz"))
    np.testing.assert_array_equal(t2.alpha, th.alpha)
    np.testing.assert_array_equal(t2.w_up, th.w_up)
    np.testing.assert_array_equal(e2.weight, eta.weight)


def test_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        C.load_model(tmp_path / "missing.npz")
    path = C.save_adapter(init_adapter(1, 4, 1), init_head(4, 2), tmp_path / "a.npz")
    with pytest.raises(C.CheckpointError):
        C.load_model(path)
    np.savez(tmp_path / "bare.npz", x=np.zeros(2))
    with pytest.raises(C.CheckpointError):
        C.load_adapter(tmp_path / "bare.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(C.CheckpointError):
        C.load_adapter(tmp_path / "junk.npz")
