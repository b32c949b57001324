"""Data distillation: fill missing task labels with a trained teacher.

The teacher scores every sample under each input transform, the softmax
outputs are averaged, and the argmax becomes a hard label. Ground-truth
labels are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import (MISSING, DataConfigError, DatasetSpec, FeatureFlip, ParseError, Registry,
                   _atomic_write, _fmt_header, _parse_header, _read_dataset, _record_line)
from .model import Model, predict_proba

GROUND_TRUTH, DISTILLED, UNFILLED = 0, 1, 2


@dataclass(frozen=True)
class Transform:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.fn(x)


IDENTITY = Transform("identity", lambda x: x)


class TransformSet(tuple):
    """Ordered collection of input transforms; always contains the identity."""

    def __new__(cls, transforms: Sequence[Transform] = (IDENTITY,)):
        transforms = tuple(transforms)
        if not any(t.name == "identity" for t in transforms):
            raise ValueError("a transform set must include the identity")
        return super().__new__(cls, transforms)

    @classmethod
    def default(cls, flip: FeatureFlip | None) -> "TransformSet":
        if flip is None:
            return cls((IDENTITY,))
        return cls((IDENTITY, Transform("feature-flip", flip)))


@dataclass(frozen=True, eq=False)
class DistilledDataset:
    spec: DatasetSpec  # filled labels; ground-truth cells identical to the source
    provenance: np.ndarray  # n x t of GROUND_TRUTH / DISTILLED / UNFILLED
    confidence: np.ndarray  # n x t, NaN outside distilled cells

    @property
    def dataset_id(self) -> int:
        return self.spec.dataset_id

    def filled_count(self, task: int | None = None) -> int:
        cells = self.provenance == DISTILLED
        return int(cells.sum() if task is None else cells[:, task].sum())


def aggregate_predictions(prob_sets: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Average per-transform probabilities; returns ``(labels, confidence)``.

    Values are sorted along the transform axis before summing, which makes the
    result exactly independent of transform order.
    """
    mean = np.sort(np.stack(prob_sets), axis=0).sum(axis=0) / len(prob_sets)
    return mean.argmax(axis=1), mean.max(axis=1)


def teacher_label(teacher: Model, dataset: DatasetSpec, tasks_to_fill: Sequence[int],
                  transforms: TransformSet | None = None, threshold: float = 0.0
                  ) -> DistilledDataset:
    tasks_to_fill = sorted(set(int(t) for t in tasks_to_fill))
    clash = set(tasks_to_fill) & dataset.labeled_tasks
    if clash:
        raise DataConfigError(
            f"dataset {dataset.dataset_id} already labels task(s) {sorted(clash)}; "
            "ground truth is never overwritten")
    if transforms is None:
        transforms = TransformSet.default(dataset.flip)
    labels = dataset.labels.copy()
    provenance = np.where(labels == MISSING, UNFILLED, GROUND_TRUTH)
    confidence = np.full(labels.shape, np.nan)
    labeled = set(dataset.labeled_tasks)
    for task in tasks_to_fill:
        probs = [predict_proba(teacher, task, tr(dataset.features)) for tr in transforms]
        hard, conf = aggregate_predictions(probs)
        keep = conf >= threshold
        labels[keep, task] = hard[keep]
        provenance[keep, task] = DISTILLED
        confidence[keep, task] = conf[keep]
        if keep.any():
            labeled.add(task)
    spec = dataset.replace(labels=labels, labeled_tasks=frozenset(labeled))
    return DistilledDataset(spec, provenance, confidence)


def build_union(originals: Sequence[DatasetSpec], distilled: Sequence[DistilledDataset],
                sources: dict[int, int] | None = None) -> Registry:
    """Registry with each distilled dataset replacing its source.

    Task sources default to those of the originals, so batch quotas keep
    drawing from the same datasets; the extra labels ride along in the mask.
    """
    by_id = {ds.dataset_id: ds for ds in originals}
    if len(by_id) != len(originals):
        raise DataConfigError("duplicate dataset id among originals")
    seen = set()
    for dd in distilled:
        if dd.dataset_id in seen:
            raise DataConfigError(f"dataset id {dd.dataset_id} distilled twice")
        if dd.dataset_id not in by_id:
            raise DataConfigError(f"distilled dataset {dd.dataset_id} has no original")
        seen.add(dd.dataset_id)
    if sources is None:
        sources = Registry.from_datasets(list(originals)).sources
    merged = [by_id[i] for i in by_id]
    replaced = {dd.dataset_id: dd.spec for dd in distilled}
    merged = [replaced.get(ds.dataset_id, ds) for ds in merged]
    return Registry.from_datasets(merged, sources)


def ground_truth_intact(original: DatasetSpec, candidate: DatasetSpec) -> bool:
    """Every label present in ``original`` is bit-identical in ``candidate``."""
    present = original.labels != MISSING
    return bool(np.array_equal(original.labels[present], candidate.labels[present]))


# --------------------------------------------------------------- file format


def _provenance_field(kind: int, conf: float) -> str:
    if kind == GROUND_TRUTH:
        return "g"
    if kind == DISTILLED:
        return f"d:{conf!r}"
    return "_"


def save_distilled(dd: DistilledDataset, path) -> None:
    spec = dd.spec
    lines = _fmt_header(spec, {"provenance": "1"})
    order = np.concatenate([spec.train_idx, spec.test_idx])
    if not np.array_equal(order, np.arange(len(spec))):
        raise DataConfigError("distilled dataset must have a contiguous train/test split")
    for i in range(len(spec)):
        prov = [_provenance_field(int(k), float(c))
                for k, c in zip(dd.provenance[i], dd.confidence[i])]
        lines.append(_record_line(spec.features[i], spec.labels[i], prov))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def load_distilled(path) -> DistilledDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"distilled dataset file not found: {path}")
    header, _ = _parse_header(path.read_text().splitlines())
    n_tasks = int(header["tasks"])
    spec, _, extra = _read_dataset(path, n_extra=n_tasks)
    n = len(spec)
    provenance = np.empty((n, n_tasks), dtype=np.int64)
    confidence = np.full((n, n_tasks), np.nan)
    for r, fields in enumerate(extra):
        for j, f in enumerate(fields):
            lab = spec.labels[r, j]
            if f == "g" and lab != MISSING:
                provenance[r, j] = GROUND_TRUTH
            elif f == "_" and lab == MISSING:
                provenance[r, j] = UNFILLED
            elif f.startswith("d:") and lab != MISSING:
                provenance[r, j] = DISTILLED
                try:
                    confidence[r, j] = float(f[2:])
                except ValueError:
                    raise ParseError(f"record {r}: bad confidence {f!r}") from None
            else:
                raise ParseError(f"record {r}: provenance {f!r} inconsistent with label")
    return DistilledDataset(spec, provenance, confidence)
