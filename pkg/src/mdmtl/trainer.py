"""Training loop for the mixed-task network.

One step: compose a mixed batch, run the trunk and every task head, build the
per-sample loss matrix, mask it, weight the per-task means, optionally add the
adversarial triplet term, back-propagate once, update the GradNorm weights,
take a momentum step, then advance the learning-rate schedule.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from .data import MISSING, BatchComposer, BatchQuota, DatasetSpec, EpochExhausted, Registry
from .domain_adapt import DAConfig, adversarial_total, discriminator_input, mine_triplets, triplet_loss
from .model import ConfigError, Model, ModelConfig, init_model, predict_proba
from .mtl_loss import TaskWeights, gradnorm_update, masked_task_losses, weighted_total
from .optim import DivergenceError, LRTrace, OptState, Schedule, momentum_step

VARIANTS = (
    "Baseline",
    "2MD-MTL",
    "DA-2MD-MTL",
    "Distill-Baseline",
    "Distill-2MD-MTL",
    "Distill-DA-2MD-MTL",
    "DR-Distill-DA-2MD-MTL",
)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "2MD-MTL"
    epochs: int = 40
    quota: Mapping[int, int] = field(default_factory=lambda: {0: 8, 1: 8, 2: 16})
    mode: str = "mtl"  # or "single-task": only target head and trunk learn
    target_task: int = 2
    lr_regime: str = "exponential"
    lr0: float = 1e-2
    momentum: float = 0.9
    decay_rate: float = 0.1
    decay_steps: float = 5000.0
    dr_k: int = 5
    dr_window: int = 50
    dr_tolerance: float = 0.01
    dr_exponent_step: str = "global"
    gradnorm: bool = True
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    reduction: str = "mean"
    da: DAConfig = field(default_factory=lambda: DAConfig(enabled=False))
    val_fraction: float = 0.1
    keep_best: bool = False
    seed: int = 0
    trunk_widths: tuple[int, ...] = (64, 32)
    head_widths: tuple[int, ...] = ()
    disc_widths: tuple[int, ...] = (32,)
    embed_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "quota", {int(k): int(v) for k, v in dict(self.quota).items()})
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.mode not in ("mtl", "single-task"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.mode == "single-task" and self.target_task is None:
            raise ConfigError("single-task mode needs a target task")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if isinstance(self.da, Mapping):
            object.__setattr__(self, "da", DAConfig(**self.da))
        for name in ("trunk_widths", "head_widths", "disc_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quota"] = {str(k): v for k, v in self.quota.items()}
        for name in ("trunk_widths", "head_widths", "disc_widths"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train key(s): {sorted(unknown)}")
        kw = dict(d)
        defaults = cls()
        for key, value in kw.items():
            ref = getattr(defaults, key)
            if isinstance(ref, bool):
                ok = isinstance(value, bool)
            elif isinstance(ref, (int, float)):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            elif isinstance(ref, str):
                ok = isinstance(value, str)
            else:
                ok = True
            if not ok:
                raise ConfigError(f"train key {key!r}: expected {type(ref).__name__}, "
                                  f"got {value!r}")
        if "quota" in kw:
            try:
                kw["quota"] = {int(k): int(v) for k, v in kw["quota"].items()}
            except (AttributeError, TypeError, ValueError):
                raise ConfigError(f"train key 'quota': expected task->count mapping, "
                                  f"got {kw['quota']!r}") from None
        if "da" in kw and isinstance(kw["da"], Mapping):
            kw["da"] = DAConfig(**kw["da"])
        return cls(**kw)

    def model_config(self, registry: Registry) -> ModelConfig:
        d = next(iter(registry.datasets.values())).dim
        return ModelConfig(
            input_dim=d, trunk_widths=self.trunk_widths,
            num_classes=tuple(t.num_classes for t in registry.tasks),
            head_widths=self.head_widths, disc_widths=self.disc_widths,
            embed_dim=self.embed_dim, seed=self.seed,
        )


@dataclass
class RunReport:
    config: dict
    seed: int
    status: str = "ok"
    epochs: list[dict] = field(default_factory=list)
    test: dict[str, dict[str, float]] = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)
    step_log: list[dict] = field(default_factory=list)
    lr_trace: list[tuple] = field(default_factory=list)
    stages: dict[str, Any] = field(default_factory=dict)
    best_epoch: int | None = None
    wall_clock_s: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["lr_trace"] = [list(r) for r in self.lr_trace]
        if not timing:
            d.pop("wall_clock_s")
            for stage in d["stages"].values():
                if isinstance(stage, dict):
                    stage.pop("wall_clock_s", None)
        return d

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "RunReport":
        d = json.loads(Path(path).read_text())
        d["lr_trace"] = [tuple(r) for r in d.get("lr_trace", [])]
        return cls(**d)

    def write_step_csv(self, path) -> None:
        """Per-step losses, task weights and lr; the first line echoes the config."""
        lines = ["# config: " + json.dumps(self.config, sort_keys=True)]
        keys = list(self.step_log[0]) if self.step_log else ["step"]
        lines.append(",".join(keys))
        for row in self.step_log:
            lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                                  for k in keys))
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(path)


def split_validation(registry: Registry, fraction: float, seed: int
                     ) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Seed-deterministic carve-out of ``fraction`` of each training split."""
    rng = np.random.default_rng([seed, 0x5A11D])
    train, val = {}, {}
    for ds_id in sorted(registry.datasets):
        idx = registry.datasets[ds_id].train_idx
        perm = rng.permutation(len(idx))
        n_val = int(round(fraction * len(idx)))
        val[ds_id] = np.sort(idx[perm[:n_val]])
        train[ds_id] = np.sort(idx[perm[n_val:]])
    return train, val


def accuracy(model: Model, features: np.ndarray, labels: np.ndarray, task: int) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = predict_proba(model, task, features).argmax(axis=1)
    return float(np.mean(pred == labels))


def evaluate(model: Model, dataset: DatasetSpec, task: int, split: str = "test") -> float:
    """Argmax accuracy on the dataset's test split (ground-truth labels only)."""
    if task not in dataset.labeled_tasks:
        raise ValueError(f"dataset {dataset.dataset_id} does not label task {task}")
    idx = dataset.test_idx if split == "test" else dataset.train_idx
    labels = dataset.labels[idx, task]
    keep = labels != MISSING
    return accuracy(model, dataset.features[idx][keep], labels[keep], task)


def confusion_matrix(model: Model, dataset: DatasetSpec, task: int) -> np.ndarray:
    n_cls = dataset.tasks[task].num_classes
    idx = dataset.test_idx
    labels = dataset.labels[idx, task]
    keep = labels != MISSING
    pred = predict_proba(model, task, dataset.features[idx][keep]).argmax(axis=1)
    cm = np.zeros((n_cls, n_cls), dtype=np.int64)
    np.add.at(cm, (labels[keep], pred), 1)
    return cm


@dataclass
class StepResult:
    task_losses: np.ndarray
    total: float
    grads: dict[str, np.ndarray]
    names: list[str]
    active: list[int]
    da_loss: float = 0.0
    n_triplets: int = 0
    norms: np.ndarray | None = None


def train_step(model: Model, batch, cfg: TrainConfig, weights: TaskWeights,
               rng: np.random.Generator, trained_tasks) -> StepResult:
    """Forward + single backward; returns gradients by parameter name."""
    fwd = model.forward()
    h = fwd.shared(batch.features)
    mask = batch.mask
    active = [j for j in trained_tasks if mask[:, j].any()]
    columns = []
    for j in active:
        logits = fwd.task_head(j, h)
        targets = np.where(batch.labels[:, j] == MISSING, 0, batch.labels[:, j])
        columns.append(ad.softmax_xent(logits, targets))
    L = ad.stack_columns(columns)
    per_task = masked_task_losses(L, mask[:, active], cfg.reduction)
    total = weighted_total(per_task, weights.omega[active])

    da_loss, n_triplets = 0.0, 0
    root = total
    if cfg.da.enabled:
        triplets = mine_triplets(batch.dataset_ids, cfg.da, rng)
        if triplets:
            emb = fwd.discriminator(discriminator_input(h, cfg.da.strength))
            obj = adversarial_total(total, triplet_loss(emb, triplets, cfg.da.margin),
                                    cfg.da.strength)
            root = obj.backward_root
            da_loss, n_triplets = obj.discriminator_objective, len(triplets)
    result = ad.backward(fwd.graph, root)
    task_losses = np.zeros(model.config.num_tasks)
    task_losses[active] = per_task.values
    res = StepResult(task_losses, total.item(), fwd.grads(result), list(fwd.leaves), active,
                     da_loss, n_triplets)

    if cfg.gradnorm and len(active) > 1:
        w_leaf = fwd.leaves[model.last_trunk_weight]
        norms = np.zeros(model.config.num_tasks)
        for pos, j in enumerate(active):
            g = ad.backward(fwd.graph, ad.index(per_task, pos), wrt=[w_leaf])[w_leaf.node_id]
            norms[j] = weights.omega[j] * np.linalg.norm(g)
        res.norms = norms
    return res



def _make_schedule(cfg: TrainConfig) -> Schedule:
    if cfg.lr_regime == "dynamic":
        return Schedule("dynamic", cfg.lr0, k=cfg.dr_k, window=cfg.dr_window,
                        tolerance=cfg.dr_tolerance, exponent_step=cfg.dr_exponent_step)
    return Schedule(cfg.lr_regime, cfg.lr0, cfg.decay_rate, cfg.decay_steps)


def _evaluate_splits(model: Model, registry: Registry, pools: Mapping[int, np.ndarray],
                     tasks) -> dict[str, float]:
    out = {}
    for ds_id, ds in sorted(registry.datasets.items()):
        idx = pools.get(ds_id)
        if idx is None or len(idx) == 0:
            continue
        for j in tasks:
            lab = ds.labels[idx, j]
            keep = lab != MISSING
            if keep.any():
                out[f"{ds.name or ds_id}/{registry.tasks[j].name}"] = accuracy(
                    model, ds.features[idx][keep], lab[keep], j)
    return out


def train(cfg: TrainConfig, registry: Registry, test_sets=None, init: Model | None = None,
          log_every: int = 1) -> tuple[Model, RunReport]:
    """Run one training stage.

    ``test_sets`` are scored on their test split at the end (default: the
    registry's datasets). Pass the original datasets plus the held-out domain
    when the registry carries distilled labels. Returns the final model, or
    the best validation checkpoint when ``cfg.keep_best`` is set.
    """
    start = time.perf_counter()
    quota = BatchQuota(cfg.quota)
    unknown = [t for t in quota.counts if t not in registry.sources]
    if unknown:
        raise ConfigError(f"quota task(s) {unknown} have no training dataset")
    if cfg.mode == "single-task":
        if not any(cfg.target_task in ds.labeled_tasks for ds in registry.datasets.values()):
            raise ConfigError(f"target task {cfg.target_task} is labeled by no dataset")
        trained_tasks = [cfg.target_task]
    else:
        trained_tasks = sorted(quota.counts)

    model = init if init is not None else init_model(cfg.model_config(registry))
    rng = np.random.default_rng([cfg.seed, 0xBA7C4])
    da_rng = np.random.default_rng([cfg.seed, 0xDA])
    train_pools, val_pools = split_validation(registry, cfg.val_fraction, cfg.seed)
    composer = BatchComposer(registry, quota, rng, train_pools)
    epoch_driver = max(composer._need, key=lambda i: (len(composer.pools[i]), -i))

    weights = TaskWeights.uniform(model.config.num_tasks, cfg.gradnorm_alpha, cfg.gradnorm_lr)
    opt = OptState(momentum=cfg.momentum, lr=cfg.lr0)
    sched = _make_schedule(cfg)
    trace = LRTrace()
    report = RunReport(config=cfg.to_dict(), seed=cfg.seed)
    best_score, best_params = -1.0, None
    step = 0
    task_names = [t.name for t in registry.tasks]

    try:
        for epoch in range(cfg.epochs):
            while True:
                try:
                    batch = composer.compose()
                except EpochExhausted as exc:
                    composer.reshuffle(exc.dataset_id)
                    if exc.dataset_id == epoch_driver:
                        break
                    continue
                res = train_step(model, batch, cfg, weights, da_rng, trained_tasks)
                if not np.isfinite(res.total):
                    raise DivergenceError(f"non-finite loss at step {step}")
                if res.norms is not None:
                    weights = gradnorm_update(weights, res.task_losses, res.norms, res.active)
                opt.lr = sched.lr
                momentum_step(model.params, res.grads, opt, res.names)
                event = sched.update(res.total)
                report.loss_trace.append(res.total)
                trace.add(step, res.total, opt.lr, event)
                if step % log_every == 0:
                    row = {"step": step, "epoch": epoch}
                    for j, name in enumerate(task_names):
                        row[f"loss_{name}"] = float(res.task_losses[j])
                    for j, name in enumerate(task_names):
                        row[f"w_{name}"] = float(weights.omega[j])
                    row["total"] = res.total
                    row["l_da"] = float(res.da_loss)
                    row["triplets"] = res.n_triplets
                    row["lr"] = opt.lr
                    report.step_log.append(row)
                step += 1
            metrics = {"epoch": epoch, "val": _evaluate_splits(model, registry, val_pools,
                                                                trained_tasks)}
            report.epochs.append(metrics)
            if cfg.keep_best:
                src = registry.datasets[registry.sources.get(cfg.target_task, epoch_driver)]
                idx = val_pools[src.dataset_id]
                lab = src.labels[idx, cfg.target_task]
                keep = lab != MISSING
                score = accuracy(model, src.features[idx][keep], lab[keep], cfg.target_task)
                if score > best_score:
                    best_score, best_params = score, model.copy().params
                    report.best_epoch = epoch
    except DivergenceError:
        report.status = "diverged"

    if cfg.keep_best and best_params is not None:
        model = Model(model.config, best_params)
    if test_sets is None:
        test_sets = list(registry.datasets.values())
    report.test = final_metrics(model, test_sets)
    report.lr_trace = list(trace.rows)
    report.wall_clock_s = time.perf_counter() - start
    return model, report


def final_metrics(model: Model, datasets) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for ds in datasets:
        if len(ds.test_idx) == 0:
            continue
        key = ds.name or str(ds.dataset_id)
        out[key] = {}
        for j in sorted(ds.labeled_tasks):
            labels = ds.labels[ds.test_idx, j]
            if (labels != MISSING).any():
                out[key][ds.tasks[j].name] = evaluate(model, ds, j)
    return out
