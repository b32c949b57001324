"""Datasets, the synthetic multi-domain suite, and mixed-task batch composition.

Labels are stored as an ``n x t`` integer matrix where :data:`MISSING` marks a
task the sample carries no label for. ``MISSING`` is negative, so it can never
be confused with a class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MISSING = -1


class DataConfigError(ValueError):
    pass


class ParseError(ValueError):
    """Malformed dataset file. ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class CompositionError(RuntimeError):
    pass


class EpochExhausted(Exception):
    """A dataset cannot fill its quota from the rest of its epoch permutation."""

    def __init__(self, dataset_id: int):
        self.dataset_id = dataset_id
        super().__init__(f"dataset {dataset_id} exhausted for this epoch")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    num_classes: int


@dataclass(frozen=True)
class FeatureFlip:
    """Involutive signed permutation ``x -> sign * x[perm]``."""

    perm: tuple[int, ...]
    sign: tuple[float, ...]

    def __post_init__(self):
        perm = np.asarray(self.perm)
        sign = np.asarray(self.sign)
        if not np.array_equal(perm[perm], np.arange(len(perm))):
            raise DataConfigError("flip permutation is not an involution")
        if not np.all(sign * sign[perm] == 1.0):
            raise DataConfigError("flip signs are not consistent with an involution")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x[..., list(self.perm)] * np.asarray(self.sign)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator) -> "FeatureFlip":
        if dim % 2:
            raise DataConfigError("feature-flip needs an even feature dimension")
        order = rng.permutation(dim)
        perm = np.empty(dim, dtype=int)
        sign = np.empty(dim)
        for i, j in zip(order[0::2], order[1::2]):
            s = rng.choice([-1.0, 1.0])
            perm[i], perm[j] = j, i
            sign[i] = sign[j] = s
        return cls(tuple(int(p) for p in perm), tuple(float(s) for s in sign))

    def matrix(self) -> np.ndarray:
        """The map as a matrix ``F`` with ``F @ x == flip(x)``."""
        m = np.zeros((len(self.perm), len(self.perm)))
        m[np.arange(len(self.perm)), list(self.perm)] = self.sign
        return m


@dataclass(frozen=True)
class SampleRecord:
    features: np.ndarray
    labels: tuple[int, ...]
    dataset_id: int
    domain_id: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DatasetSpec:
    dataset_id: int
    domain_id: int
    tasks: tuple[TaskSpec, ...]
    labeled_tasks: frozenset[int]
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    name: str = ""
    flip: FeatureFlip | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "train_idx", _frozen(self.train_idx, np.int64))
        object.__setattr__(self, "test_idx", _frozen(self.test_idx, np.int64))
        object.__setattr__(self, "labeled_tasks", frozenset(int(t) for t in self.labeled_tasks))
        self.validate()

    def validate(self) -> None:
        n, t = self.labels.shape
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataConfigError(f"features {self.features.shape} vs labels {self.labels.shape}")
        if t != len(self.tasks):
            raise DataConfigError(f"label matrix has {t} columns for {len(self.tasks)} tasks")
        if not self.labeled_tasks:
            raise DataConfigError("a dataset must label at least one task")
        for task in self.tasks:
            col = self.labels[:, task.task_id]
            present = col != MISSING
            if task.task_id not in self.labeled_tasks and present.any():
                raise DataConfigError(f"task {task.task_id} labels present but not declared")
            if np.any(present & ((col < 0) | (col >= task.num_classes))):
                raise DataConfigError(f"task {task.task_id} label outside [0, {task.num_classes})")
        if n and not np.all((self.labels != MISSING).any(axis=1)):
            raise DataConfigError("every sample needs at least one label")
        both = np.concatenate([self.train_idx, self.test_idx])
        if not np.array_equal(np.sort(both), np.arange(n)):
            raise DataConfigError("train/test split is not a disjoint cover of the samples")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(self.features[i], tuple(int(v) for v in self.labels[i]),
                            self.dataset_id, self.domain_id)

    def equals(self, other: "DatasetSpec") -> bool:
        return (
            self.dataset_id == other.dataset_id
            and self.domain_id == other.domain_id
            and self.tasks == other.tasks
            and self.labeled_tasks == other.labeled_tasks
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_idx, other.train_idx)
            and np.array_equal(self.test_idx, other.test_idx)
            and self.flip == other.flip
        )

    def replace(self, **changes) -> "DatasetSpec":
        fields = dict(
            dataset_id=self.dataset_id, domain_id=self.domain_id, tasks=self.tasks,
            labeled_tasks=self.labeled_tasks, features=self.features, labels=self.labels,
            train_idx=self.train_idx, test_idx=self.test_idx, name=self.name, flip=self.flip,
        )
        fields.update(changes)
        return DatasetSpec(**fields)


@dataclass
class Registry:
    """Datasets available to a run plus the dataset each task is drawn from."""

    tasks: tuple[TaskSpec, ...]
    datasets: dict[int, DatasetSpec]
    sources: dict[int, int]

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(len(ids))):
            raise DataConfigError(f"task ids must be contiguous from 0, got {ids}")
        for task, ds in self.sources.items():
            if ds not in self.datasets:
                raise DataConfigError(f"task {task} sourced from unknown dataset {ds}")
            if task not in self.datasets[ds].labeled_tasks:
                raise DataConfigError(f"dataset {ds} does not label task {task}")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @classmethod
    def from_datasets(cls, datasets: Sequence[DatasetSpec],
                      sources: Mapping[int, int] | None = None) -> "Registry":
        tasks = datasets[0].tasks
        by_id = {}
        for ds in datasets:
            if ds.dataset_id in by_id:
                raise DataConfigError(f"duplicate dataset id {ds.dataset_id}")
            if ds.tasks != tasks:
                raise DataConfigError("datasets disagree on the task universe")
            by_id[ds.dataset_id] = ds
        if sources is None:
            sources = {}
            for ds in datasets:
                if len(ds) == 0 or len(ds.train_idx) == 0:
                    continue
                for t in sorted(ds.labeled_tasks):
                    sources.setdefault(t, ds.dataset_id)
        return cls(tasks, by_id, dict(sources))


@dataclass(frozen=True)
class BatchQuota:
    """Samples per task; each task's samples come from its source dataset."""

    counts: Mapping[int, int]

    def __post_init__(self):
        if not self.counts:
            raise DataConfigError("empty quota")
        if any(int(c) < 1 for c in self.counts.values()):
            raise DataConfigError(f"all quotas must be >= 1, got {dict(self.counts)}")

    @property
    def batch_size(self) -> int:
        return int(sum(self.counts.values()))


@dataclass
class MaskedBatch:
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    dataset_ids: np.ndarray
    domain_ids: np.ndarray
    rows: np.ndarray  # sample index within its dataset

    @property
    def size(self) -> int:
        return self.features.shape[0]


class BatchComposer:
    """Draws mixed-task batches without replacement per dataset epoch.

    ``pools`` restricts each dataset to a subset of sample indices (default:
    its training split). Each dataset keeps an independent permutation.
    """

    def __init__(self, registry: Registry, quota: BatchQuota, rng: np.random.Generator,
                 pools: Mapping[int, np.ndarray] | None = None):
        self.registry = registry
        self.quota = quota
        self.rng = rng
        self.plan: list[tuple[int, int]] = []  # (dataset id, count) in task order
        for task in sorted(quota.counts):
            if task not in registry.sources:
                raise CompositionError(f"no training dataset for task {task}")
            self.plan.append((registry.sources[task], int(quota.counts[task])))
        self.pools = {}
        for ds_id, _ in self.plan:
            pool = registry.datasets[ds_id].train_idx if pools is None else pools[ds_id]
            self.pools[ds_id] = np.asarray(pool, dtype=np.int64)
        need: dict[int, int] = {}
        for ds_id, n in self.plan:
            need[ds_id] = need.get(ds_id, 0) + n
        for ds_id, n in need.items():
            if len(self.pools[ds_id]) < n:
                raise CompositionError(
                    f"dataset {ds_id} has {len(self.pools[ds_id])} samples, quota needs {n}"
                )
        self._need = need
        self._perm: dict[int, np.ndarray] = {}
        self._cursor: dict[int, int] = {}
        for ds_id in sorted(need):
            self.reshuffle(ds_id)

    def reshuffle(self, dataset_id: int) -> None:
        self._perm[dataset_id] = self.pools[dataset_id][self.rng.permutation(len(self.pools[dataset_id]))]
        self._cursor[dataset_id] = 0

    def remaining(self, dataset_id: int) -> int:
        return len(self._perm[dataset_id]) - self._cursor[dataset_id]

    def compose(self) -> MaskedBatch:
        for ds_id in sorted(self._need):
            if self.remaining(ds_id) < self._need[ds_id]:
                raise EpochExhausted(ds_id)
        feats, labels, ds_ids, dom_ids, rows = [], [], [], [], []
        for ds_id, n in self.plan:
            ds = self.registry.datasets[ds_id]
            c = self._cursor[ds_id]
            idx = self._perm[ds_id][c:c + n]
            self._cursor[ds_id] = c + n
            feats.append(ds.features[idx])
            labels.append(ds.labels[idx])
            ds_ids.append(np.full(n, ds_id))
            dom_ids.append(np.full(n, ds.domain_id))
            rows.append(idx)
        order = self.rng.permutation(self.quota.batch_size)
        lab = np.concatenate(labels)[order]
        return MaskedBatch(
            features=np.concatenate(feats)[order],
            labels=lab,
            mask=(lab != MISSING).astype(np.float64),
            dataset_ids=np.concatenate(ds_ids)[order],
            domain_ids=np.concatenate(dom_ids)[order],
            rows=np.concatenate(rows)[order],
        )


def compose_batch(composer: BatchComposer) -> MaskedBatch:
    return composer.compose()


# ------------------------------------------------------------- synthetic suite


@dataclass(frozen=True)
class DatasetGen:
    name: str
    domain: int
    labeled_tasks: tuple[int, ...]
    size: int
    test_fraction: float = 0.2


@dataclass(frozen=True)
class SuiteConfig:
    """Latent-factor generator settings.

    A latent ``z = (z_rel, z_nuis)`` is standard normal. Task ``j`` labels are
    ``argmax(W_j z_rel + label_noise * eps)``; features are
    ``A_dom z + b_dom + obs_noise * eps`` with ``A_dom = A + domain_shift * E_dom``
    and ``b_dom`` of scale ``domain_offset``. ``A``, ``E_dom`` and ``b_dom``
    commute with the feature flip (relevant directions even, nuisance
    directions odd), so flipping a sample yields another valid sample with the
    same labels.
    """

    tasks: tuple[tuple[str, int], ...] = (("age", 2), ("gender", 2), ("emotion", 7))
    relevant_dim: int = 2
    nuisance_dim: int = 6
    feature_dim: int = 32
    label_noise: float = 0.1
    obs_noise: float = 0.3
    domain_shift: float = 0.6
    domain_offset: float = 1.0
    datasets: tuple[DatasetGen, ...] = (
        DatasetGen("age", 0, (0,), 2000),
        DatasetGen("gender", 1, (1,), 2000),
        DatasetGen("emotion", 2, (2,), 600),
        DatasetGen("emotion-heldout", 3, (2,), 1000, test_fraction=1.0),
    )
    target_task: int = 2
    heldout_dataset: int = 3
    identity_domains: bool = False

    def to_dict(self) -> dict:
        return {
            "tasks": [list(t) for t in self.tasks],
            "relevant_dim": self.relevant_dim,
            "nuisance_dim": self.nuisance_dim,
            "feature_dim": self.feature_dim,
            "label_noise": self.label_noise,
            "obs_noise": self.obs_noise,
            "domain_shift": self.domain_shift,
            "domain_offset": self.domain_offset,
            "datasets": [
                {"name": d.name, "domain": d.domain, "labeled_tasks": list(d.labeled_tasks),
                 "size": d.size, "test_fraction": d.test_fraction}
                for d in self.datasets
            ],
            "target_task": self.target_task,
            "heldout_dataset": self.heldout_dataset,
            "identity_domains": self.identity_domains,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SuiteConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise DataConfigError(f"unknown suite key(s): {sorted(unknown)}")
        kw = dict(d)
        if "tasks" in kw:
            kw["tasks"] = tuple((str(n), int(c)) for n, c in kw["tasks"])
        if "datasets" in kw:
            kw["datasets"] = tuple(
                DatasetGen(x["name"], int(x["domain"]), tuple(x["labeled_tasks"]), int(x["size"]),
                           float(x.get("test_fraction", 0.2)))
                for x in kw["datasets"]
            )
        return cls(**kw)


@dataclass
class SyntheticTruth:
    """Generator internals, kept so tests can build oracle classifiers."""

    task_weights: list[np.ndarray]
    mixing: dict[int, np.ndarray]
    offsets: dict[int, np.ndarray]
    latents: dict[int, np.ndarray] = field(default_factory=dict)
    flip: FeatureFlip | None = None


def _check_suite(cfg: SuiteConfig) -> None:
    t = len(cfg.tasks)
    if t == 0:
        raise DataConfigError("suite declares no tasks")
    if any(c < 2 for _, c in cfg.tasks):
        raise DataConfigError("every task needs >= 2 classes")
    if cfg.relevant_dim < 1 or cfg.nuisance_dim < 0:
        raise DataConfigError("latent dims must be relevant >= 1, nuisance >= 0")
    if cfg.feature_dim < 2 or cfg.feature_dim % 2:
        raise DataConfigError("feature_dim must be even and >= 2")
    if cfg.identity_domains and cfg.feature_dim != cfg.relevant_dim + cfg.nuisance_dim:
        raise DataConfigError("identity domains need feature_dim == latent dim")
    for d in cfg.datasets:
        if not d.labeled_tasks or any(not 0 <= j < t for j in d.labeled_tasks):
            raise DataConfigError(f"dataset {d.name!r} labels unknown tasks {d.labeled_tasks}")
        if d.size < 1:
            raise DataConfigError(f"dataset {d.name!r} is empty")
        if not 0.0 <= d.test_fraction <= 1.0:
            raise DataConfigError(f"dataset {d.name!r} test_fraction outside [0, 1]")
    if not 0 <= cfg.target_task < t:
        raise DataConfigError("target_task out of range")
    if not (-1 <= cfg.heldout_dataset < len(cfg.datasets)):
        raise DataConfigError("heldout_dataset out of range")


def _eigen_basis(flip_matrix: np.ndarray, parity: int, n_cols: int, rng) -> np.ndarray:
    proj = 0.5 * (np.eye(len(flip_matrix)) + parity * flip_matrix)
    return proj @ rng.standard_normal((len(flip_matrix), n_cols))


def generate_synthetic_suite(cfg: SuiteConfig, seed: int,
                             return_truth: bool = False):
    """Build every dataset of the suite from one shared latent model."""
    _check_suite(cfg)
    rng = np.random.default_rng(seed)
    tasks = tuple(TaskSpec(i, name, c) for i, (name, c) in enumerate(cfg.tasks))
    d, lr, ln = cfg.feature_dim, cfg.relevant_dim, cfg.nuisance_dim
    flip = FeatureFlip.random(d, rng)
    fm = flip.matrix()
    task_w = [rng.standard_normal((c, lr)) for _, c in cfg.tasks]

    def mixing_matrix():
        rel = _eigen_basis(fm, +1, lr, rng)
        nuis = _eigen_basis(fm, -1, ln, rng)
        # sqrt(2 / d) keeps feature variance near 1 per latent coordinate
        return np.hstack([rel, nuis]) * np.sqrt(2.0 / d)

    base = mixing_matrix()
    domains = sorted({g.domain for g in cfg.datasets})
    mixing, offsets = {}, {}
    for dom in domains:
        if cfg.identity_domains:
            mixing[dom] = np.eye(d)
            offsets[dom] = np.zeros(d)
        else:
            mixing[dom] = base + cfg.domain_shift * mixing_matrix()
            offsets[dom] = cfg.domain_offset * _eigen_basis(fm, +1, 1, rng)[:, 0]

    truth = SyntheticTruth(task_w, mixing, offsets, flip=flip)
    out = []
    for ds_id, g in enumerate(cfg.datasets):
        z = rng.standard_normal((g.size, lr + ln))
        labels = np.full((g.size, len(tasks)), MISSING, dtype=np.int64)
        for j in g.labeled_tasks:
            scores = z[:, :lr] @ task_w[j].T
            scores = scores + cfg.label_noise * rng.standard_normal(scores.shape)
            labels[:, j] = scores.argmax(axis=1)
        feats = z @ mixing[g.domain].T + offsets[g.domain]
        feats = feats + cfg.obs_noise * rng.standard_normal(feats.shape)
        n_test = int(round(g.test_fraction * g.size))
        perm = rng.permutation(g.size)
        # train records first so the on-disk order encodes the split
        order = np.concatenate([np.sort(perm[n_test:]), np.sort(perm[:n_test])])
        n_train = g.size - n_test
        truth.latents[ds_id] = z[order]
        out.append(DatasetSpec(
            dataset_id=ds_id, domain_id=g.domain, tasks=tasks,
            labeled_tasks=frozenset(g.labeled_tasks), features=feats[order],
            labels=labels[order], train_idx=np.arange(n_train),
            test_idx=np.arange(n_train, g.size), name=g.name, flip=flip,
        ))
    if return_truth:
        return out, truth
    return out


# --------------------------------------------------------------- file format

_MAGIC = "#mdmtl-dataset v1"
_HEADER_KEYS = ("tasks", "classes", "dim", "dataset", "domain", "labeled", "count", "train")


def _fmt_header(spec: DatasetSpec, extra: Mapping[str, str] = ()) -> list[str]:
    bitmask = sum(1 << t for t in spec.labeled_tasks)
    lines = [
        _MAGIC,
        f"tasks={len(spec.tasks)}",
        "task_names=" + ",".join(t.name for t in spec.tasks),
        "classes=" + ",".join(str(t.num_classes) for t in spec.tasks),
        f"dim={spec.dim}",
        f"dataset={spec.dataset_id}",
        f"domain={spec.domain_id}",
        f"labeled={bitmask}",
        f"count={len(spec)}",
        f"train={len(spec.train_idx)}",
        f"name={spec.name}",
    ]
    if spec.flip is not None:
        lines.append("flip_perm=" + ",".join(str(p) for p in spec.flip.perm))
        lines.append("flip_sign=" + ",".join(repr(s) for s in spec.flip.sign))
    for k, v in dict(extra).items():
        lines.append(f"{k}={v}")
    lines.append("---")
    return lines


def _contiguous_split(spec: DatasetSpec) -> bool:
    n_train = len(spec.train_idx)
    return (np.array_equal(spec.train_idx, np.arange(n_train))
            and np.array_equal(spec.test_idx, np.arange(n_train, len(spec))))


def _record_line(feats: np.ndarray, labels: np.ndarray, extra_fields: Sequence[str] = ()) -> str:
    parts = [repr(float(v)) for v in feats]
    parts += ["_" if v == MISSING else str(int(v)) for v in labels]
    parts += list(extra_fields)
    return ",".join(parts)


def save_dataset(spec: DatasetSpec, path) -> None:
    """Write ``spec`` atomically. Records are stored train split first."""
    if not _contiguous_split(spec):
        order = np.concatenate([spec.train_idx, spec.test_idx])
        spec = spec.replace(features=spec.features[order], labels=spec.labels[order],
                            train_idx=np.arange(len(spec.train_idx)),
                            test_idx=np.arange(len(spec.train_idx), len(spec)))
    lines = _fmt_header(spec)
    for i in range(len(spec)):
        lines.append(_record_line(spec.features[i], spec.labels[i]))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _parse_header(lines: list[str]) -> tuple[dict[str, str], int]:
    if not lines or lines[0].strip() != _MAGIC:
        raise ParseError("missing dataset header magic", 1)
    header: dict[str, str] = {}
    for i, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if line == "---":
            missing = [k for k in _HEADER_KEYS if k not in header]
            if missing:
                raise ParseError(f"header lacks key(s) {missing}", i)
            return header, i
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"malformed header line {line!r}", i)
        header[key] = value
    raise ParseError("header not terminated by '---'", len(lines))


def _int_list(value: str, line: int) -> list[int]:
    try:
        return [int(v) for v in value.split(",")] if value else []
    except ValueError:
        raise ParseError(f"expected integers, got {value!r}", line) from None


def _read_dataset(path, n_extra: int = 0):
    """Parse a dataset file; returns ``(spec, header, extra_columns)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    lines = path.read_text().splitlines()
    header, body_start = _parse_header(lines)
    try:
        n_tasks = int(header["tasks"])
        dim = int(header["dim"])
        count = int(header["count"])
        n_train = int(header["train"])
        ds_id = int(header["dataset"])
        dom_id = int(header["domain"])
        bitmask = int(header["labeled"])
    except ValueError as exc:
        raise ParseError(f"non-integer header value ({exc})", 1) from None
    classes = _int_list(header["classes"], 1)
    if len(classes) != n_tasks:
        raise ParseError(f"classes lists {len(classes)} tasks, header says {n_tasks}", 1)
    names = header.get("task_names", "").split(",") if header.get("task_names") else [
        f"task{j}" for j in range(n_tasks)]
    tasks = tuple(TaskSpec(j, names[j], classes[j]) for j in range(n_tasks))
    labeled = frozenset(j for j in range(n_tasks) if bitmask >> j & 1)
    flip = None
    if "flip_perm" in header:
        try:
            flip = FeatureFlip(tuple(_int_list(header["flip_perm"], 1)),
                               tuple(float(s) for s in header["flip_sign"].split(",")))
        except (KeyError, ValueError, DataConfigError) as exc:
            raise ParseError(f"bad flip specification ({exc})", 1) from None

    body = [ln for ln in lines[body_start:]]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != count:
        raise ParseError(f"expected {count} records, found {len(body)} (truncated file?)",
                         body_start + len(body) + 1)
    feats = np.empty((count, dim))
    labels = np.empty((count, n_tasks), dtype=np.int64)
    extra: list[list[str]] = []
    width = dim + n_tasks + n_extra
    for r, line in enumerate(body):
        lineno = body_start + r + 1
        fields = line.split(",")
        if len(fields) != width:
            raise ParseError(f"record {r} has {len(fields)} fields, expected {width}", lineno)
        try:
            feats[r] = [float(v) for v in fields[:dim]]
        except ValueError:
            raise ParseError(f"record {r}: non-numeric feature", lineno) from None
        if not np.all(np.isfinite(feats[r])):
            raise ParseError(f"record {r}: non-finite feature", lineno)
        for j, v in enumerate(fields[dim:dim + n_tasks]):
            if v == "_":
                labels[r, j] = MISSING
                continue
            try:
                lab = int(v)
            except ValueError:
                raise ParseError(f"record {r}: bad label {v!r} for task {j}", lineno) from None
            if not 0 <= lab < classes[j]:
                raise ParseError(
                    f"record {r}: label {lab} outside [0, {classes[j]}) for task {j}", lineno)
            labels[r, j] = lab
        extra.append(fields[dim + n_tasks:])
    try:
        spec = DatasetSpec(
            dataset_id=ds_id, domain_id=dom_id, tasks=tasks, labeled_tasks=labeled,
            features=feats, labels=labels, train_idx=np.arange(n_train),
            test_idx=np.arange(n_train, count), name=header.get("name", ""), flip=flip,
        )
    except DataConfigError as exc:
        raise ParseError(str(exc)) from None
    return spec, header, extra


def load_dataset(path) -> DatasetSpec:
    return _read_dataset(path)[0]
