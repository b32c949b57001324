"""Command-line entry point.

    mdmtl VERB [--config FILE] [--set key=value ...] [--out-dir DIR] ...

Verbs: gen, train, distill, eval, grid, lr-trace. The config is a JSON file
(layout in the README); ``--set`` overrides single keys using dotted
paths, e.g. ``--set train.epochs=5``. ``MDMTL_OUT_DIR`` overrides the config's
output directory, and ``--out-dir`` overrides both.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure (missing or
malformed input, failed grid), 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .data import DataConfigError, ParseError, generate_synthetic_suite, load_dataset, save_dataset
from .distill import save_distilled
from .experiment import (TEACHER_OF, ExperimentConfig, apply_overrides, distill_stage,
                         headline_metrics, make_suite, run_ablation_grid, run_variant,
                         stage_config)
from .model import CheckpointError, ConfigError, checkpoint_meta, load_model
from .optim import DivergenceError
from .trainer import VARIANTS, RunReport, confusion_matrix, evaluate

log = logging.getLogger("mdmtl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3
OUT_DIR_ENV = "MDMTL_OUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_experiment(args) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    raw = apply_overrides(raw, args.set or [])
    out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV)
    if out_dir:
        raw["out_dir"] = out_dir
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(exp: ExperimentConfig) -> Path:
    path = Path(exp.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _resolve_task(tasks, token: str) -> int:
    for t in tasks:
        if t.name == token:
            return t.task_id
    try:
        j = int(token)
    except ValueError:
        raise ConfigError(f"unknown task {token!r}; have {[t.name for t in tasks]}") from None
    if not 0 <= j < len(tasks):
        raise ConfigError(f"task id {j} out of range")
    return j


def _print_metrics(label: str, report: RunReport, exp: ExperimentConfig, suite) -> None:
    m = headline_metrics(report, suite)
    parts = [f"{k}={v:.4f}" for k, v in m.items()]
    print(f"{label}: status={report.status} steps={len(report.loss_trace)} " + " ".join(parts))


def _write_run(out: Path, stem: str, model, report: RunReport, exp: ExperimentConfig) -> None:
    report.stages.setdefault("experiment", exp.to_dict())
    report.save(out / f"{stem}.report")
    report.write_step_csv(out / f"{stem}.csv")
    model.save(out / f"{stem}.ckpt", extra={"train": report.config, "experiment": exp.to_dict()})


# ------------------------------------------------------------------ verbs


def cmd_gen(args, exp: ExperimentConfig) -> int:
    out = _out_dir(exp)
    sets = generate_synthetic_suite(exp.suite, exp.suite_seed)
    files = []
    for ds in sets:
        path = out / f"{ds.dataset_id}_{ds.name or 'dataset'}.dataset"
        save_dataset(ds, path)
        files.append({"dataset": ds.dataset_id, "name": ds.name, "path": path.name,
                      "sha256": _sha256(path)})
    manifest = {"config": exp.to_dict(), "files": files}
    _atomic_text(out / "suite.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    tasks = sets[0].tasks
    print("tasks: " + ", ".join(f"{t.name}({t.num_classes})" for t in tasks))
    held = exp.suite.heldout_dataset
    for ds in sets:
        labeled = ",".join(tasks[j].name for j in sorted(ds.labeled_tasks))
        role = "held-out" if ds.dataset_id == held else "train"
        print(f"  [{ds.dataset_id}] {ds.name:<18} domain={ds.domain_id} labels={labeled:<10} "
              f"train={len(ds.train_idx):<5} test={len(ds.test_idx):<5} {role}")
    print(f"wrote {len(sets)} dataset files and suite.json to {out}")
    return EXIT_OK


def cmd_train(args, exp: ExperimentConfig) -> int:
    out = _out_dir(exp)
    suite = make_suite(exp)
    model, report = run_variant(exp, args.variant, args.seed, suite)
    _write_run(out, f"{args.variant}_{args.seed}", model, report, exp)
    _print_metrics(f"{args.variant} seed={args.seed}", report, exp, suite)
    return EXIT_DIVERGED if report.status == "diverged" else EXIT_OK


def cmd_distill(args, exp: ExperimentConfig) -> int:
    if args.variant not in TEACHER_OF:
        raise ConfigError(f"{args.variant!r} is not a distillation variant; "
                          f"choose from {sorted(TEACHER_OF)}")
    out = _out_dir(exp)
    suite = make_suite(exp)
    base = exp.base_train(args.seed)
    expected = stage_config(TEACHER_OF[args.variant], base).model_config(suite.registry())
    teacher = load_model(args.teacher)
    if teacher.config.num_classes != expected.num_classes or \
            teacher.config.input_dim != expected.input_dim:
        raise CheckpointError(f"{args.teacher}: teacher does not match the suite's tasks/features")
    distilled: list = []
    student, report = distill_stage(exp, args.variant, suite, teacher, base, distilled)
    report.stages["teacher"] = {"checkpoint": str(args.teacher),
                                "sha256": _sha256(Path(args.teacher))}
    ddir = out / "distilled"
    ddir.mkdir(exist_ok=True)
    for dd in distilled:
        save_distilled(dd, ddir / f"{dd.dataset_id}_{dd.spec.name or 'dataset'}.distilled")
    _write_run(out, f"{args.variant}_{args.seed}", student, report, exp)
    filled = sum(dd.filled_count() for dd in distilled)
    print(f"distilled {filled} label slots into {len(distilled)} files under {ddir}")
    _print_metrics(f"{args.variant} seed={args.seed}", report, exp, suite)
    return EXIT_DIVERGED if report.status == "diverged" else EXIT_OK


def cmd_eval(args, exp: ExperimentConfig) -> int:
    model = load_model(args.checkpoint)
    ds = load_dataset(args.dataset)
    task = _resolve_task(ds.tasks, args.task)
    if ds.dim != model.config.input_dim:
        raise CheckpointError(f"{args.checkpoint}: model expects {model.config.input_dim} "
                              f"features, {args.dataset} has {ds.dim}")
    acc = evaluate(model, ds, task)
    cm = confusion_matrix(model, ds, task)
    tname = ds.tasks[task].name
    echo = {"checkpoint": str(args.checkpoint), "checkpoint_meta": checkpoint_meta(args.checkpoint),
            "dataset": str(args.dataset), "dataset_sha256": _sha256(Path(args.dataset)),
            "task": tname}
    path = _out_dir(exp) / f"eval_{Path(args.dataset).stem}_{tname}.confusion.csv"
    lines = ["# config: " + json.dumps(echo, sort_keys=True),
             "true/pred," + ",".join(str(c) for c in range(cm.shape[1]))]
    lines += [f"{r}," + ",".join(str(v) for v in row) for r, row in enumerate(cm)]
    _atomic_text(path, "\n".join(lines) + "\n")
    print(f"accuracy {tname} on {Path(args.dataset).name}: {acc:.6f} (n={int(cm.sum())})")
    print(f"confusion matrix: {path}")
    return EXIT_OK


def cmd_grid(args, exp: ExperimentConfig) -> int:
    out = _out_dir(exp)

    def progress(cell, report):
        status = "FAILED" if report is None else report.status
        log.info("cell %s seed=%d: %s", cell[0], cell[1], status)

    rows, reports = run_ablation_grid(exp, out, progress)
    keys = ("target_in_domain", "target_heldout", "domain_gap")
    print(f"{'variant':<24}" + "".join(f"{k:>24}" for k in keys) + f"{'failed':>8}")
    for r in rows:
        cells = "".join(
            f"{r.get(k + '_mean', float('nan')):>14.4f} ± {r.get(k + '_std', float('nan')):<7.4f}"
            for k in keys)
        print(f"{r['variant']:<24}{cells}{r['failed']:>8}")
    print(f"grid CSV: {out / 'grid.csv'}")
    if all(rep is None for rep in reports.values()):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_lr_trace(args, exp: ExperimentConfig) -> int:
    path = Path(args.report)
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    report = RunReport.load(path)
    dest = Path(args.output) if args.output else _out_dir(exp) / f"{path.stem}.lr.csv"
    tmp = dest.with_name(dest.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write("# config: " + json.dumps(report.config, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(("step", "loss", "lr", "event"))
        for step, loss, lr, event in report.lr_trace:
            w.writerow((step, repr(loss), repr(lr), event))
    tmp.replace(dest)
    events = sum(1 for r in report.lr_trace if r[3] != "none")
    print(f"{len(report.lr_trace)} steps, {events} lr events -> {dest}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted path); repeatable")
    common.add_argument("--out-dir", help=f"output directory (overrides ${OUT_DIR_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mdmtl", description="Multi-dataset multi-task training experiments.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="generate the synthetic suite")

    t = sub.add_parser("train", parents=[common], help="train one variant for one seed")
    t.add_argument("--variant", default="2MD-MTL", choices=VARIANTS)
    t.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("distill", parents=[common],
                       help="label with a teacher checkpoint and retrain a student")
    d.add_argument("--teacher", required=True, help="teacher checkpoint (.ckpt)")
    d.add_argument("--variant", default="Distill-2MD-MTL", choices=sorted(TEACHER_OF))
    d.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="dataset file written by gen")
    e.add_argument("--task", required=True, help="task name or id")

    sub.add_parser("grid", parents=[common], help="run the variant x seed ablation grid")

    lt = sub.add_parser("lr-trace", parents=[common], help="export a report's lr trace as CSV")
    lt.add_argument("--report", required=True)
    lt.add_argument("-o", "--output")
    return p


VERBS = {"gen": cmd_gen, "train": cmd_train, "distill": cmd_distill, "eval": cmd_eval,
         "grid": cmd_grid, "lr-trace": cmd_lr_trace}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = _load_experiment(args)
        return VERBS[args.verb](args, exp)
    except (ParseError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DataConfigError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
