"""Command-line driver.

    dbadapt distill  --config cfg.json --out runs/a
    dbadapt adapt    --out runs/a [--oracle] [--parallel 4]
    dbadapt attack   --out runs/a
    dbadapt bench-he --out runs/a
    dbadapt report   --out runs/a

Exit codes: 0 ok, 1 runtime failure, 2 configuration error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .attacks import attack_experiment, write_distance_csvs
from .bench import run_bench
from .config import ConfigError, ExperimentConfig
from .pipeline import build_backbone, task_data
from .protocol.runner import run_adaptation, run_plaintext_oracle, setup_federation

logger = logging.getLogger("dbadapt")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

STUDENT = "student.npz"
TEACHER = "teacher.npz"
OUTPUTS = {
    "distill": "distill_summary.json",
    "adapt": "adapt_report.json",
    "oracle": "oracle_report.json",
    "attack": "attack_summary.json",
    "bench-he": "bench_he.json",
}


class MissingArtifact(FileNotFoundError):
    pass


def _num(v):
    return f"{v:.12g}" if isinstance(v, float) else v


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, rows: list, columns: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else _num(r.get(c)) for c in columns])


def load_config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = ExperimentConfig.load(path)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_student(out: Path, args):
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / STUDENT
    if not path.is_file():
        raise MissingArtifact(f"student checkpoint not found: {path} (run `dbadapt distill` first)")
    return checkpoint.load_model(path)


def cmd_distill(cfg: ExperimentConfig, args) -> dict:
    out = _out_dir(cfg)
    bb = build_backbone(cfg)
    checkpoint.save_model(bb.teacher, out / TEACHER)
    checkpoint.save_model(bb.student, out / STUDENT)
    cols = ["epoch", "stage", "loss_attention", "loss_hidden", "loss_prediction", "loss_total", "student_accuracy"]
    write_csv(out / "distill_metrics.csv", bb.distill_rows, cols)
    write_csv(out / "teacher_loss.csv", [{"epoch": i + 1, "loss": v} for i, v in enumerate(bb.teacher_history)], ["epoch", "loss"])
    stage1 = [r for r in bb.distill_rows if r["stage"] == 1]
    summary = {
        "stage1_initial_loss": bb.distill_rows[0]["loss_total"],
        "stage1_final_loss": stage1[-1]["loss_total"] if stage1 else None,
        "final_student_accuracy": bb.distill_rows[-1]["student_accuracy"],
        "epochs": len(bb.distill_rows) - 1,
        "stage1_epochs": cfg.distill.stage1_epochs,
        "seed": cfg.seed,
    }
    write_json(out / "config.json", cfg.to_dict())
    write_json(out / OUTPUTS["distill"], summary)
    return summary


def _strip_adapter(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "adapter"}


def cmd_adapt(cfg: ExperimentConfig, args) -> dict:
    out = _out_dir(cfg)
    student = _load_student(out, args)
    if student.config != cfg.model:
        raise ConfigError("checkpoint model does not match the config's model section")
    train, test = task_data(cfg)
    fed_cfg = cfg.federation.defenses_off() if args.oracle else cfg.federation
    fed = setup_federation(student, cfg, train, test, fed=fed_cfg)
    report = run_adaptation(fed, parallel=args.parallel)
    adapter = report["adapter"]
    checkpoint.save_adapter(adapter["theta"], adapter["eta"], out / "adapter.npz")
    report = _strip_adapter(report)
    report["defenses"] = {"permutation": fed_cfg.permutation, "sbs": fed_cfg.sbs}
    cols = ["round", "balanced_accuracy", "mse", "loss"]
    write_csv(out / "adapt_rounds.csv", report["rounds"], cols)
    with open(out / "adapt_rounds.jsonl", "w") as fh:
        for entry in fed.round_logs:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    ledger_rows = [
        {"round": m.round, "sender": m.sender, "receiver": m.receiver, "tag": m.tag, "kind": m.kind, "bytes": m.nbytes, "block": m.block}
        for m in fed.ledger.messages
    ]
    write_csv(out / "comm_ledger.csv", ledger_rows, ["round", "sender", "receiver", "tag", "kind", "bytes", "block"])
    if args.oracle:
        oracle = _strip_adapter(run_plaintext_oracle(student, cfg, train, test, fed=fed_cfg))
        write_json(out / OUTPUTS["oracle"], oracle)
        report["oracle_final_balanced_accuracy"] = oracle["final_balanced_accuracy"]
    write_json(out / OUTPUTS["adapt"], report)
    return report


def cmd_attack(cfg: ExperimentConfig, args) -> dict:
    out = _out_dir(cfg)
    student = _load_student(out, args)
    _, test = task_data(cfg)
    a = cfg.attack
    summary = attack_experiment(student, test.x, cfg.kernels, a.batch_size, a.seeds, constrained=cfg.federation.sbs == "constrained", seed=cfg.seed)
    write_distance_csvs(summary.example_pairs, out / "attack_distances")
    result = summary.to_dict()
    write_json(out / OUTPUTS["attack"], result)
    return result


def cmd_bench_he(cfg: ExperimentConfig, args) -> dict:
    out = _out_dir(cfg)
    student = None
    path = out / STUDENT
    if path.is_file():
        student = checkpoint.load_model(path)
    result = run_bench(cfg, model=student)
    write_json(out / OUTPUTS["bench-he"], result)
    write_csv(out / "bench_he_sizes.csv", result["ir_sizes"], ["name", "bytes", "mb", "reference_mb", "relative_error", "within_tolerance"])
    return result


def cmd_report(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.output_dir)
    found = {name: json.loads((out / f).read_text()) for name, f in OUTPUTS.items() if (out / f).is_file()}
    if not found:
        raise MissingArtifact(f"no run outputs in {out}")
    summary = {"outputs": sorted(found)}
    if "distill" in found:
        d = found["distill"]
        summary["distill"] = {k: d[k] for k in ("stage1_initial_loss", "stage1_final_loss", "final_student_accuracy")}
    for name in ("adapt", "oracle"):
        if name in found:
            summary[name] = {"final_balanced_accuracy": found[name]["final_balanced_accuracy"]}
    if "adapt" in found:
        summary["adapt"]["metadata_overhead"] = found["adapt"]["comm"]["metadata_overhead"]
        summary["adapt"]["audit"] = found["adapt"]["audit"]
    if "attack" in found:
        summary["attack"] = found["attack"]
    if "bench-he" in found:
        summary["bench-he"] = {r["name"]: r["mb"] for r in found["bench-he"]["ir_sizes"]}
    write_json(out / "summary.json", summary)
    return summary


COMMANDS = {
    "distill": cmd_distill,
    "adapt": cmd_adapt,
    "attack": cmd_attack,
    "bench-he": cmd_bench_he,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults apply if omitted")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="dbadapt", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("distill", parents=[common], help="pretrain the teacher and distill the approximated student")
    adapt = sub.add_parser("adapt", parents=[common], help="federated adapter training over the encrypted protocol")
    adapt.add_argument("--checkpoint", help="student checkpoint (default: <out>/student.npz)")
    adapt.add_argument("--oracle", action="store_true", help="defenses off, plus the plaintext oracle run for comparison")
    adapt.add_argument("--parallel", type=int, default=os.cpu_count() or 1, help="client worker threads")
    attack = sub.add_parser("attack", parents=[common], help="feature-similarity pairing attack")
    attack.add_argument("--checkpoint", help="student checkpoint (default: <out>/student.npz)")
    sub.add_parser("bench-he", parents=[common], help="encrypted-inference cost table")
    sub.add_parser("report", parents=[common], help="collect run outputs into summary.json")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "parallel", 1) < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, checkpoint.CheckpointError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(_brief(args.command, result), sort_keys=True))
    return EXIT_OK


def _brief(command: str, result: dict) -> dict:
    if command == "adapt":
        keys = ("final_balanced_accuracy", "initial_balanced_accuracy", "oracle_final_balanced_accuracy")
        return {k: result[k] for k in keys if k in result}
    if command == "bench-he":
        return {r["name"]: r["mb"] for r in result["ir_sizes"]}
    return result


if __name__ == "__main__":
    sys.exit(main())
