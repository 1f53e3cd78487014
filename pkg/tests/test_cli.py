import json
import shutil

import pytest

from dbadapt import cli
from dbadapt.config import ExperimentConfig


def small_config(tmp_path, **federation):
    d = ExperimentConfig().to_dict()
    d["distill"].update(stage1_epochs=2, stage2_epochs=1, teacher_epochs=3)
    d["data"].update(num_aux=64, num_train=96, num_test=48)
    d["federation"].update({"rounds": 2, "local_steps": 2, **federation})
    d["attack"].update(seeds=2)
    path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def distilled(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = small_config(tmp)
    out = tmp / "run"
    assert cli.main(["distill", "--config", cfg, "--out", str(out)]) == 0
    return tmp, cfg, out


def test_distill_outputs(distilled):
    _, _, out = distilled
    for name in ["student.npz", "teacher.npz", "distill_metrics.csv", "teacher_loss.csv", "config.json", "distill_summary.json"]:
        assert (out / name).is_file(), name
    lines = (out / "distill_metrics.csv").read_text().splitlines()
    stages = [row.split(",")[1] for row in lines[1:]]
    assert stages == ["1", "1", "1", "2"]


def test_adapt_is_deterministic(distilled, tmp_path):
    _, cfg, out = distilled
    runs = []
    for name, par in [("a", "1"), ("b", "3")]:
        target = tmp_path / name
        assert cli.main(["adapt", "--config", cfg, "--out", str(target), "--checkpoint", str(out / "student.npz"), "--parallel", par]) == 0
        runs.append(target)
    for f in ["adapt_rounds.csv", "comm_ledger.csv", "adapt_rounds.jsonl", "adapt_report.json"]:
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes(), f
    report = json.loads((runs[0] / "adapt_report.json").read_text())
    assert report["audit"]["violations"] == []
    assert [r["round"] for r in report["rounds"]] == [0, 1, 2]


def test_adapt_oracle_matches(distilled, tmp_path):
    _, cfg, out = distilled
    target = tmp_path / "o"
    shutil.copy(out / "student.npz", target.with_suffix(".npz"))
    assert cli.main(["adapt", "--oracle", "--config", cfg, "--out", str(target), "--checkpoint", str(target.with_suffix(".npz"))]) == 0
    report = json.loads((target / "adapt_report.json").read_text())
    assert report["defenses"] == {"permutation": False, "sbs": "off"}
    oracle = json.loads((target / "oracle_report.json").read_text())
    assert report["final_balanced_accuracy"] == oracle["final_balanced_accuracy"]


def test_zero_rounds(distilled, tmp_path):
    tmp, _, out = distilled
    cfg = small_config(tmp, rounds=0)
    target = tmp_path / "z"
    assert cli.main(["adapt", "--config", cfg, "--out", str(target), "--checkpoint", str(out / "student.npz")]) == 0
    report = json.loads((target / "adapt_report.json").read_text())
    assert report["final_balanced_accuracy"] == report["initial_balanced_accuracy"]


def test_attack_bench_report(distilled):
    _, cfg, out = distilled
    assert cli.main(["attack", "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["bench-he", "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["report", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert {"attack", "bench-he", "distill"} <= set(summary["outputs"])
    assert sorted(p.name for p in (out / "attack_distances").iterdir())[0] == "distances_b1_b2.csv"


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["adapt", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"federation": {"sbs": "sometimes"}}')
    assert cli.main(["adapt", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["adapt", "--out", str(tmp_path / "empty")]) == cli.EXIT_MISSING
    assert cli.main(["report", "--out", str(tmp_path / "empty")]) == cli.EXIT_MISSING
    assert cli.main(["adapt", "--parallel", "0"]) == cli.EXIT_CONFIG
    assert "missing artifact" in capsys.readouterr().err
