"""Exit criteria, each at its stated tolerance and runtime budget.

Run alone with ``pytest -m acceptance``.  Known-unmet sub-checks are marked
``xfail(strict=True)``: the assertion keeps the stated tolerance, and the
summary line for that criterion reads FAIL.
"""

import dataclasses as dc
import json
import math
import time

import numpy as np
import pytest

from dbadapt import audit, bench, cli, he
from dbadapt import kernels as K
from dbadapt import privacy as P
from dbadapt import transformer as T
from dbadapt.attacks import attack_experiment
from dbadapt.autodiff import Tensor, parameter
from dbadapt.checkpoint import load_model
from dbadapt.config import ExperimentConfig
from dbadapt.pipeline import build_backbone, task_data
from dbadapt.protocol import aggregation as G
from dbadapt.protocol.messages import SERVER
from dbadapt.protocol.runner import comm_cost_model, flatten_params, run_adaptation, run_plaintext_oracle, setup_federation

pytestmark = pytest.mark.acceptance

EXACT_HE = he.EncryptionParams(noise_tolerance=0.0)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


@pytest.fixture(scope="module")
def distilled(tmp_path_factory):
    """Default config distilled through the CLI; the metrics CSV is what criterion 11 inspects."""
    out = tmp_path_factory.mktemp("accept") / "run"
    with Timer() as t:
        code = cli.main(["distill", "--out", str(out)])
    assert code == 0
    return out, load_model(out / "student.npz"), t.seconds


# 1


def test_c01_kernel_golden_values(criterion):
    with Timer() as t:
        golden = K.quad_gelu(0.0) == 0.5 and K.quad_gelu(-1.0) == 0.375
        x = np.linspace(0.05, 1.95, 1000)
        errs = [np.abs(K.goldschmidt_inverse(x, d) - (1 - (1 - x) ** (2 ** (d + 1))) / x).max() for d in (3, 7)]
    ok = golden and max(errs) <= 1e-12 and t.seconds < 1
    criterion(1, ok, f"golden GELU {golden}, max closed-form error {max(errs):.2e}, {t.seconds:.3f}s")
    assert ok


# 2


def test_c02_taylor_remainder(criterion):
    with Timer() as t:
        worst = max(abs(K.approx_exp(x, 6) - math.exp(x)) / K.exp_remainder_bound(x, 6) for x in np.linspace(-2, 2, 401))
    ok = worst <= 1 and t.seconds < 1
    criterion(2, ok, f"max error/bound {worst:.3f} over 401 points, {t.seconds:.3f}s")
    assert ok


# 3


def test_c03_permutation_algebra(criterion):
    rng = np.random.default_rng(3)
    with Timer() as t:
        cycles_ok = all(
            P.cycle_product(P.gen_permutations(int(rng.integers(1, 33)), int(rng.integers(1, 17)), rng).relative_products).is_identity()
            for _ in range(10_000)
        )
        witnesses = P.proposition1_witnesses(3)
        space = P.search_space(16)
    ok = cycles_ok and witnesses == 6 and space == 20_922_789_888_000 and t.seconds < 30
    criterion(3, ok, f"10^4 cycle products identity {cycles_ok}, witnesses(3)={witnesses}, 16!={space}, {t.seconds:.1f}s")
    assert ok


# 4


def test_c04_sbs_statistics(criterion):
    with Timer() as t:
        freq = P.sbs_masks(12, 100_000, 4).mean(axis=0)[5:]
        big = P.sbs_masks(12, 1_000_000, 5)
        no_consecutive = not np.any(big[:, 1:] & big[:, :-1])
        expected = P.sbs_expected_count(12, 1)
    freq_dev = float(np.abs(freq - 1 / 3).max())
    ok = freq_dev <= 0.02 and no_consecutive and 3.85 <= expected <= 4.15 and t.seconds < 60
    criterion(4, ok, f"max |freq - 1/3| blocks 6-12 {freq_dev:.4f}, no consecutive in 10^6 {no_consecutive}, E[S]={expected:.4f}, {t.seconds:.1f}s")
    assert ok


# 5


def test_c05_protocol_equals_oracle(criterion, distilled):
    _, student, _ = distilled
    base = ExperimentConfig()
    cfg = dc.replace(base, he=EXACT_HE, federation=dc.replace(base.federation, rounds=10).defenses_off())
    with Timer() as t:
        train, test = task_data(cfg)
        report = run_adaptation(setup_federation(student, cfg, train, test), parallel=3)
        oracle = run_plaintext_oracle(student, cfg, train, test)
    diff = np.abs(
        flatten_params(report["adapter"]["theta"], report["adapter"]["eta"])
        - flatten_params(oracle["adapter"]["theta"], oracle["adapter"]["eta"])
    ).max()
    ok = diff <= 1e-9 and t.seconds < 300
    criterion(5, ok, f"max parameter difference {diff:.2e} after 10 rounds (K=3, L=3, d=16), {t.seconds:.1f}s")
    assert ok


# 6


def test_c06_defenses_keep_accuracy(criterion):
    gaps = []
    with Timer() as t:
        for seed in range(5):
            cfg = ExperimentConfig().with_seed(seed)
            student = build_backbone(cfg).student
            train, test = task_data(cfg)
            on = run_adaptation(setup_federation(student, cfg, train, test), parallel=3)
            off = run_adaptation(setup_federation(student, cfg, train, test, fed=cfg.federation.defenses_off()), parallel=3)
            gaps.append(on["final_balanced_accuracy"] - off["final_balanced_accuracy"])
    mean_gap = float(np.mean(gaps))
    ok = abs(mean_gap) <= 0.05 and t.seconds < 900
    per_seed = ", ".join(f"{g:+.3f}" for g in gaps)
    criterion(6, ok, f"mean on-off balanced accuracy {mean_gap:+.4f} (per seed {per_seed}), {t.seconds:.0f}s")
    assert ok


# 7


def test_c07_secure_aggregation(criterion):
    exact, worst_corr = True, 0.0
    with Timer() as t:
        for k in (2, 5, 10):
            for seed in range(100):
                rng = np.random.default_rng([k, seed])
                ups = [rng.normal(size=10_000) for _ in range(k)]
                agg, subs = G.secure_aggregate(ups, seed=seed, round=1, return_submissions=True)
                with np.errstate(over="ignore"):
                    plain = G.ring_sum([G.to_fixed(u) for u in ups])
                exact &= bool(np.array_equal(G.to_fixed(agg), plain))
                worst_corr = max(worst_corr, abs(float(np.corrcoef(G.from_fixed(subs[0]), ups[0])[0, 1])))
    ok = exact and worst_corr < 0.1 and t.seconds < 30
    criterion(7, ok, f"bit-exact {exact} over 300 aggregations, max |corr| {worst_corr:.4f}, {t.seconds:.1f}s")
    assert ok


# 8


def test_c08_cost_model_and_ledger(criterion, distilled):
    _, student, _ = distilled
    base = ExperimentConfig()
    cfg = dc.replace(base, federation=dc.replace(base.federation, rounds=5))
    with Timer() as t:
        mb = comm_cost_model(1, 12, 17.33)
        train, test = task_data(cfg)
        comm = run_adaptation(setup_federation(student, cfg, train, test), parallel=3)["comm"]
    overhead = comm["metadata_overhead"]
    ok = abs(mb - 207.96) <= 0.01 and 0 <= overhead <= 0.01 and t.seconds < 60
    criterion(8, ok, f"cost model {mb:.2f} MB, ledger overhead {overhead:.4%}, {t.seconds:.1f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="577x768 float32 is 1.77 MB, not 6.21 MB; see decisions ledger")
def test_c08_bench_sizes(criterion):
    with Timer() as t:
        plain, cipher = bench.ir_size_rows(ExperimentConfig().bench, he.EncryptionParams())
    ok = plain.within_tolerance and cipher.within_tolerance and t.seconds < 60
    criterion(8, ok, f"bench IR plaintext {plain.mb:.4f} MB vs 6.21, ciphertext {cipher.mb:.4f} MB vs 17.33 (1% tolerance)")
    assert ok


# 9


@pytest.fixture(scope="module")
def attack_summary():
    base = ExperimentConfig()
    cfg = dc.replace(base, model=dc.replace(base.model, num_blocks=6))
    with Timer() as t:
        student = build_backbone(cfg).student
        _, test = task_data(cfg)
        summary = attack_experiment(student, test.x, cfg.kernels, batch_size=8, seeds=10)
    return summary, t.seconds


def test_c09_gap1_pairing(criterion, attack_summary):
    s, seconds = attack_summary
    ok = s.by_gap[1] > 3 * s.chance and seconds < 600
    criterion(9, ok, f"gap-1 accuracy {s.by_gap[1]:.3f} vs 3x chance {3 * s.chance:.3f}, {seconds:.0f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="residual stream keeps samples apart at every gap; see decisions ledger")
def test_c09_far_gaps_near_chance(criterion, attack_summary):
    s, _ = attack_summary
    far = {g: a for g, a in s.by_gap.items() if g >= 2}
    ok = all(abs(a - s.chance) <= 0.15 for a in far.values())
    criterion(9, ok, "gap>=2 accuracy " + ", ".join(f"g{g}={a:.3f}" for g, a in far.items()) + f" vs chance {s.chance:.3f} +-0.15")
    assert ok


# 10


def test_c10_double_blind_audit(criterion, distilled):
    _, student, _ = distilled
    cfg = ExperimentConfig()
    with Timer() as t:
        train, test = task_data(cfg)
        fed = setup_federation(student, cfg, train, test)
        a = run_adaptation(fed, parallel=3)["audit"]
        clean = a["server_decrypts_of_client_keys"] == 0 and a["client_block_reads"] == 0 and not a["violations"]
        client = fed.clients[0]
        with audit.recording() as log:
            with audit.acting_as(SERVER):
                he.decrypt(client.key, fed.server.datasets[client.client_id].x)
            with audit.acting_as(client.client_id):
                fed.server.blocks.block(0)
        caught = log.server_decrypts_of_client_keys() == 1 and log.client_block_reads() == 1
        try:
            log.assert_clean()
            caught = False
        except audit.DoubleBlindViolation:
            pass
    ok = clean and caught and t.seconds < 300
    criterion(10, ok, f"full run decrypts/reads {a['server_decrypts_of_client_keys']}/{a['client_block_reads']}, injected violations caught {caught}, {t.seconds:.1f}s")
    assert ok


# 11


def _numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def _grad_ok(loss_fn, x) -> bool:
    p = parameter(x.copy())
    loss_fn(p).backward()
    num = _numeric_grad(lambda v: float(loss_fn(Tensor(v)).data), x.copy())
    return bool(np.allclose(p.grad, num, rtol=1e-4, atol=1e-8))


def test_c11_distillation(criterion, distilled):
    out, _, distill_seconds = distilled
    with Timer() as t:
        cfg = json.loads((out / "config.json").read_text())
        s1 = cfg["distill"]["stage1_epochs"]
        lines = (out / "distill_metrics.csv").read_text().splitlines()
        cols = lines[0].split(",")
        rows = [dict(zip(cols, line.split(","))) for line in lines[1:]]
        stage1 = [r for r in rows if r["stage"] == "1"]
        boundary_ok = int(stage1[-1]["epoch"]) == s1 and int(rows[len(stage1)]["stage"]) == 2
        drop = 1 - float(stage1[-1]["loss_total"]) / float(stage1[0]["loss_total"])
        rng = np.random.default_rng(11)
        t_att = rng.normal(size=(2, 2, 4, 4))
        t_hid = rng.normal(size=(2, 4, 8))
        t_log = rng.normal(size=(4, 3)) * 3
        grads = [
            _grad_ok(lambda s: T.attention_distill_loss(s, t_att, 2), rng.normal(size=t_att.shape)),
            _grad_ok(lambda s: T.hidden_distill_loss(s, t_hid), rng.normal(size=t_hid.shape)),
            _grad_ok(lambda s: T.prediction_distill_loss(s, t_log, 5.0), rng.normal(size=t_log.shape)),
        ]
    seconds = distill_seconds + t.seconds
    ok = s1 == 15 and drop >= 0.5 and boundary_ok and all(grads) and seconds < 600
    criterion(11, ok, f"stage-I loss drop {drop:.1%} over {s1} epochs, boundary at epoch {stage1[-1]['epoch']} {boundary_ok}, gradient checks {grads}, {seconds:.0f}s")
    assert ok
