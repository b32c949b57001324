"""Variant pipelines, the ablation grid and the experiment config file."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DatasetSpec, Registry, SuiteConfig, generate_synthetic_suite
from .distill import DistilledDataset, TransformSet, build_union, teacher_label
from .domain_adapt import DAConfig
from .model import ConfigError, Model
from .trainer import VARIANTS, RunReport, TrainConfig, train

TEACHER_OF = {
    "Distill-Baseline": "Baseline",
    "Distill-2MD-MTL": "2MD-MTL",
    "Distill-DA-2MD-MTL": "DA-2MD-MTL",
    "DR-Distill-DA-2MD-MTL": "DA-2MD-MTL",
}


@dataclass(frozen=True)
class DistillConfig:
    threshold: float = 0.0
    transforms: tuple[str, ...] = ("identity", "feature-flip")
    student_mode: str = "auto"  # auto: single-task for Distill-Baseline, mtl otherwise
    teacher_best: bool = True  # teacher = best validation target accuracy, not last epoch

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        bad = set(self.transforms) - {"identity", "feature-flip"}
        if bad:
            raise ConfigError(f"unknown transform(s) {sorted(bad)}")
        if self.student_mode not in ("auto", "mtl", "single-task"):
            raise ConfigError(f"unknown student_mode {self.student_mode!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    suite_seed: int = 0
    train: Mapping = field(default_factory=dict)
    distill: DistillConfig = field(default_factory=DistillConfig)
    variants: tuple[str, ...] = VARIANTS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variant(s) {bad}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        TrainConfig.from_dict(dict(self.train))  # validates keys early

    def base_train(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**dict(self.train), "seed": seed,
                                      "target_task": self.suite.target_task})

    def to_dict(self) -> dict:
        return {
            "suite": self.suite.to_dict(),
            "suite_seed": self.suite_seed,
            "train": _jsonable(dict(self.train)),
            "distill": {"threshold": self.distill.threshold,
                        "transforms": list(self.distill.transforms),
                        "student_mode": self.distill.student_mode,
                        "teacher_best": self.distill.teacher_best},
            "variants": list(self.variants),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        allowed = {"suite", "suite_seed", "train", "distill", "variants", "seeds", "out_dir",
                   "workers"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        kw = dict(d)
        if "suite" in kw:
            kw["suite"] = SuiteConfig.from_dict(kw["suite"])
        if "distill" in kw:
            try:
                kw["distill"] = DistillConfig(**kw["distill"])
            except TypeError as exc:
                raise ConfigError(f"distill: {exc}") from None
        return cls(**kw)


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, DAConfig):
        return {"margin": obj.margin, "triplets_per_batch": obj.triplets_per_batch,
                "strength": obj.strength, "enabled": obj.enabled}
    return obj


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key.sub=value`` overrides; values parse as JSON when possible."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a mapping")
        node[parts[-1]] = parsed
    return raw


# --------------------------------------------------------------- suite roles


@dataclass
class Suite:
    datasets: list[DatasetSpec]
    config: SuiteConfig

    @property
    def heldout(self) -> DatasetSpec | None:
        h = self.config.heldout_dataset
        return None if h < 0 else self.datasets[h]

    @property
    def training(self) -> list[DatasetSpec]:
        h = self.config.heldout_dataset
        return [ds for ds in self.datasets if ds.dataset_id != h and len(ds.train_idx)]

    def registry(self) -> Registry:
        return Registry.from_datasets(self.training)

    @property
    def target_source(self) -> DatasetSpec:
        return self.datasets[self.registry().sources[self.config.target_task]]

    def test_sets(self) -> list[DatasetSpec]:
        return [ds for ds in self.datasets if len(ds.test_idx)]


def make_suite(cfg: ExperimentConfig) -> Suite:
    return Suite(generate_synthetic_suite(cfg.suite, cfg.suite_seed), cfg.suite)


# --------------------------------------------------------------- variants


def stage_config(variant: str, base: TrainConfig, student: bool = False,
                 distill: DistillConfig | None = None) -> TrainConfig:
    """Training config for one stage of ``variant``."""
    target = base.target_task
    batch = sum(base.quota.values())
    da_on = replace(base.da, enabled=True)
    da_off = replace(base.da, enabled=False)
    if variant == "Baseline":
        return replace(base, variant=variant, quota={target: batch}, mode="mtl", da=da_off)
    if variant == "2MD-MTL":
        return replace(base, variant=variant, mode="mtl", da=da_off)
    if variant == "DA-2MD-MTL":
        return replace(base, variant=variant, mode="mtl", da=da_on)
    if not student:
        return stage_config(TEACHER_OF[variant], base)
    mode = (distill.student_mode if distill else "auto")
    if mode == "auto":
        mode = "single-task" if variant == "Distill-Baseline" else "mtl"
    uses_da = "DA" in variant
    regime = "dynamic" if variant.startswith("DR-") else base.lr_regime
    return replace(base, variant=variant, mode=mode, da=da_on if uses_da else da_off,
                   lr_regime=regime)


def distill_datasets(teacher: Model, suite: Suite, cfg: DistillConfig, variant: str,
                     target: int) -> list[DistilledDataset]:
    """Fill missing labels on every training dataset."""
    out = []
    for ds in suite.training:
        if variant == "Distill-Baseline":
            fill = [target] if target not in ds.labeled_tasks else []
        else:
            fill = [t.task_id for t in ds.tasks if t.task_id not in ds.labeled_tasks]
        if not fill:
            continue
        transforms = TransformSet.default(ds.flip if "feature-flip" in cfg.transforms else None)
        out.append(teacher_label(teacher, ds, fill, transforms, cfg.threshold))
    return out


def _stage_summary(report: RunReport) -> dict:
    return {"test": report.test, "status": report.status, "best_epoch": report.best_epoch,
            "steps": len(report.loss_trace), "wall_clock_s": report.wall_clock_s}


def run_variant(exp: ExperimentConfig, variant: str, seed: int, suite: Suite | None = None,
                teachers: dict | None = None) -> tuple[Model, RunReport]:
    """Train ``variant`` for one seed (teacher stage first for Distill rows).

    ``teachers`` caches ``(teacher variant, seed) -> (model, report)`` so the
    grid trains each teacher once.
    """
    suite = suite or make_suite(exp)
    base = exp.base_train(seed)
    registry = suite.registry()
    tests = suite.test_sets()
    if variant not in TEACHER_OF:
        return train(stage_config(variant, base), registry, tests)

    tv = TEACHER_OF[variant]
    key = (tv, seed)
    if teachers is not None and key in teachers:
        teacher, t_report = teachers[key]
    else:
        t_cfg = replace(stage_config(tv, base), keep_best=exp.distill.teacher_best)
        teacher, t_report = train(t_cfg, registry, tests)
        if teachers is not None:
            teachers[key] = (teacher, t_report)
    student, report = distill_stage(exp, variant, suite, teacher, base)
    report.stages["teacher"] = {"variant": tv, **_stage_summary(t_report)}
    return student, report


def distill_stage(exp: ExperimentConfig, variant: str, suite: Suite, teacher: Model,
                  base: TrainConfig, distilled_out: list | None = None
                  ) -> tuple[Model, RunReport]:
    """Label the training sets with ``teacher`` and retrain a fresh student."""
    registry = suite.registry()
    t0 = time.perf_counter()
    distilled = distill_datasets(teacher, suite, exp.distill, variant, base.target_task)
    if distilled_out is not None:
        distilled_out.extend(distilled)
    union = build_union(suite.training, distilled, registry.sources)
    t_distill = time.perf_counter() - t0
    student, report = retrain_student(union, stage_config(variant, base, True, exp.distill),
                                      suite.test_sets())
    report.stages = {
        "distill": {
            "filled": {str(d.dataset_id): d.filled_count() for d in distilled},
            "wall_clock_s": t_distill,
        },
        "student": _stage_summary(report),
    }
    return student, report


def retrain_student(union: Registry, cfg: TrainConfig, test_sets=None):
    """Fresh student (same architecture, new init) trained on the union."""
    if cfg.mode == "single-task" and cfg.target_task is None:
        raise ConfigError("single-task student needs a target task")
    return train(cfg, union, test_sets)


# --------------------------------------------------------------- grid


def headline_metrics(report: RunReport, suite: Suite) -> dict[str, float]:
    """Target-task accuracy in-domain, on the held-out domain, and their gap."""
    tname = suite.config.tasks[suite.config.target_task][0]
    src = suite.target_source
    out = {"target_in_domain": report.test.get(src.name or str(src.dataset_id), {}).get(tname,
                                                                                       math.nan)}
    h = suite.heldout
    if h is not None:
        out["target_heldout"] = report.test.get(h.name or str(h.dataset_id), {}).get(tname,
                                                                                    math.nan)
        out["domain_gap"] = out["target_in_domain"] - out["target_heldout"]
    for ds in suite.training:
        for j in sorted(ds.labeled_tasks):
            if j == suite.config.target_task:
                continue
            name = suite.config.tasks[j][0]
            val = report.test.get(ds.name or str(ds.dataset_id), {}).get(name)
            if val is not None:
                out[f"{name}_in_domain"] = val
    return out


def _grid_cell(args):
    exp, variant, seed = args
    suite = make_suite(exp)
    _, report = run_variant(exp, variant, seed, suite)
    return variant, seed, report


def run_ablation_grid(exp: ExperimentConfig, out_dir=None, progress=None
                      ) -> tuple[list[dict], dict]:
    """Every (variant, seed) cell; returns ``(rows, reports)``.

    ``rows`` holds mean/std per variant over the successful seeds. Failed or
    diverged cells are recorded and skipped in the statistics.
    """
    suite = make_suite(exp)
    reports: dict[tuple[str, int], RunReport | None] = {}
    errors: dict[tuple[str, int], str] = {}
    cells = [(v, s) for s in exp.seeds for v in exp.variants]
    if exp.workers > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as pool:
            futures = {cell: pool.submit(_grid_cell, (exp, *cell)) for cell in cells}
            for cell, fut in futures.items():
                try:
                    _, _, reports[cell] = fut.result()
                except Exception as exc:  # noqa: BLE001 - grid must continue
                    reports[cell], errors[cell] = None, repr(exc)
    else:
        teachers: dict = {}
        for cell in cells:
            try:
                reports[cell] = run_variant(exp, cell[0], cell[1], suite, teachers)[1]
            except Exception as exc:  # noqa: BLE001 - grid must continue
                reports[cell], errors[cell] = None, repr(exc)
            if progress:
                progress(cell, reports[cell])
    rows = summarize(exp, suite, reports, errors)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for (variant, seed), rep in reports.items():
            if rep is not None:
                rep.save(out_dir / f"{variant}_{seed}.report")
                rep.write_step_csv(out_dir / f"{variant}_{seed}.csv")
        write_grid_csv(rows, out_dir / "grid.csv", exp)
    return rows, reports


def summarize(exp: ExperimentConfig, suite: Suite, reports, errors=None) -> list[dict]:
    errors = errors or {}
    rows = []
    for variant in exp.variants:
        per_seed = []
        failed = 0
        for seed in exp.seeds:
            rep = reports.get((variant, seed))
            if rep is None or rep.status != "ok":
                failed += 1
                continue
            per_seed.append(headline_metrics(rep, suite))
        row = {"variant": variant, "seeds": len(per_seed), "failed": failed}
        keys = sorted({k for m in per_seed for k in m})
        for k in keys:
            vals = np.array([m[k] for m in per_seed if k in m], dtype=float)
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


def write_grid_csv(rows: list[dict], path, exp: ExperimentConfig | None = None) -> None:
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        if exp is not None:
            fh.write("# config: " + json.dumps(exp.to_dict(), sort_keys=True) + "\n")
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    os.replace(tmp, path)
