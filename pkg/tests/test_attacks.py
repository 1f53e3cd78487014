import numpy as np
import pytest

from dbadapt import attacks as X
from dbadapt.kernels import KernelConfig
from dbadapt.privacy import Permutation, apply_permutation
from dbadapt.transformer import ModelConfig, calibrate, init_model


def test_pairwise_l2_oracle(rng):
    a = rng.normal(size=(3, 2, 2))
    b = rng.normal(size=(3, 2, 2))
    d = X.pairwise_l2(a, b)
    for i in range(3):
        for j in range(3):
            assert d[i, j] == pytest.approx(np.sqrt(((a[i] - b[j]) ** 2).sum()))
    with pytest.raises(ValueError):
        X.pairwise_l2(a, b[:2])


def test_assignment_recovers_planted_permutation(rng):
    d = rng.uniform(1, 2, size=(6, 6))
    perm = rng.permutation(6)
    d[np.arange(6), perm] = 0.0
    for greedy in (False, True):
        assert np.array_equal(X.match_permutation(d, greedy).mapping, perm)
    with pytest.raises(ValueError):
        X.match_permutation(np.zeros((2, 3)))


def test_hungarian_beats_greedy_on_trap():
    # greedy grabs the 0 and is forced into the 10; optimum is 1 + 1
    d = np.array([[0.0, 1.0], [1.0, 10.0]])
    assert X.match_permutation(d).mapping.tolist() == [1, 0]
    assert X.match_permutation(d, greedy=True).mapping.tolist() == [0, 1]


def test_greedy_ties_break_toward_lower_indices():
    assert X.match_permutation(np.ones((3, 3)), greedy=True).is_identity()


def test_attack_pair_on_identical_features(rng):
    b = rng.normal(size=(8, 4, 3))
    pa, pb = Permutation(rng.permutation(8)), Permutation(rng.permutation(8))
    res = X.attack_pair(apply_permutation(b, pa), apply_permutation(b, pb), pa, pb, 1, 2)
    assert res.accuracy == 1.0
    assert res.inferred_mapping == res.true_mapping
    assert res.gap == 1


def test_attack_on_unrelated_features_is_near_chance():
    accs = []
    for s in range(200):
        r = np.random.default_rng(s)
        pa, pb = Permutation(r.permutation(8)), Permutation(r.permutation(8))
        accs.append(X.attack_pair(r.normal(size=(8, 5)), r.normal(size=(8, 5)), pa, pb, 1, 3).accuracy)
    assert abs(np.mean(accs) - 1 / 8) < 0.05


def test_experiment_shapes_and_csvs(tmp_path, rng):
    cfg = ModelConfig(num_blocks=3, model_dim=8, num_heads=2, ffn_dim=16, seq_len=4, num_classes=2, patch_dim=3)
    model = init_model(cfg, seed=0)
    x = rng.normal(size=(20, 4, 3))
    model.scales = calibrate(model, x, KernelConfig())
    summary = X.attack_experiment(model, x, KernelConfig(), batch_size=5, seeds=3)
    assert set(summary.by_gap) == {1, 2}
    assert summary.chance == 0.2
    assert len(summary.example_pairs) == 3
    d = summary.to_dict()
    assert set(d["accuracy_by_gap"]) == {"1", "2"}
    paths = X.write_distance_csvs(summary.example_pairs, tmp_path)
    assert sorted(p.name for p in paths) == ["distances_b1_b2.csv", "distances_b1_b3.csv", "distances_b2_b3.csv"]
    assert np.loadtxt(paths[0], delimiter=",").shape == (5, 5)
    with pytest.raises(ValueError):
        X.attack_experiment(model, x, KernelConfig(), batch_size=50)
    with pytest.raises(ValueError):
        X.attack_by_gap([], [], 0)
