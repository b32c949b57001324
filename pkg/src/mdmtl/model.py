"""Shared-trunk multi-task network with per-task heads and a discriminator head.

Parameters live as plain float64 arrays keyed by name (``trunk.0.w``,
``head.2.b``, ``disc.1.w``...). Each forward pass registers the arrays it
touches as leaves of a fresh :class:`~mdmtl.autodiff.Graph`; the returned
:class:`Forward` keeps the name -> leaf mapping so gradients can be read back
by name after :func:`~mdmtl.autodiff.backward`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

GROUPS = ("trunk", "head", "disc")


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint file does not match the expected configuration."""


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    trunk_widths: tuple[int, ...]
    num_classes: tuple[int, ...]
    head_widths: tuple[int, ...] = ()
    disc_widths: tuple[int, ...] = ()
    embed_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        object.__setattr__(self, "num_classes", tuple(int(c) for c in self.num_classes))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        object.__setattr__(self, "disc_widths", tuple(int(w) for w in self.disc_widths))
        if self.input_dim <= 0:
            raise ConfigError("input_dim must be positive")
        if not self.trunk_widths:
            raise ConfigError("need at least one trunk layer")
        widths = self.trunk_widths + self.head_widths + self.disc_widths
        if any(w <= 0 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if not self.num_classes:
            raise ConfigError("need at least one task")
        if any(c < 2 for c in self.num_classes):
            raise ConfigError(f"every task needs >= 2 classes, got {self.num_classes}")
        if self.embed_dim < 2:
            raise ConfigError("discriminator embedding dim must be >= 2")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    @property
    def num_tasks(self) -> int:
        return len(self.num_classes)

    @property
    def trunk_dim(self) -> int:
        return self.trunk_widths[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _layer_dims(in_dim, widths, out_dim=None):
    dims = [in_dim, *widths] if out_dim is None else [in_dim, *widths, out_dim]
    return list(zip(dims[:-1], dims[1:]))


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.params if group is None or self.group_of(n) == group]

    def head_names(self, task: int) -> list[str]:
        prefix = f"head.{task}."
        return [n for n in self.params if n.startswith(prefix)]

    @property
    def last_trunk_weight(self) -> str:
        return f"trunk.{len(self.config.trunk_widths) - 1}.w"

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def forward(self) -> "Forward":
        return Forward(self)

    # ------------------------------------------------------------ checkpoints

    def save(self, path, extra: dict | None = None) -> None:
        """Atomic ``.npz`` write; ``extra`` is JSON metadata stored alongside."""
        path = Path(path)
        arrays = {f"p:{k}": v for k, v in self.params.items()}
        meta = json.dumps({"config": self.config.to_dict(), "digest": self.config.digest(),
                           "extra": extra or {}})
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, __meta__=np.array(meta), **arrays)
        tmp.replace(path)


def init_model(cfg: ModelConfig) -> Model:
    """Uniform fan-in init ``U(-sqrt(3/fan_in), sqrt(3/fan_in))``, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}

    def dense(prefix, fan_in, fan_out):
        bound = np.sqrt(3.0 / fan_in)
        params[f"{prefix}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.b"] = np.zeros(fan_out)

    for i, (a, b) in enumerate(_layer_dims(cfg.input_dim, cfg.trunk_widths)):
        dense(f"trunk.{i}", a, b)
    for task, n_cls in enumerate(cfg.num_classes):
        for i, (a, b) in enumerate(_layer_dims(cfg.trunk_dim, cfg.head_widths, n_cls)):
            dense(f"head.{task}.{i}", a, b)
    for i, (a, b) in enumerate(_layer_dims(cfg.trunk_dim, cfg.disc_widths, cfg.embed_dim)):
        dense(f"disc.{i}", a, b)
    return Model(cfg, params)


def checkpoint_meta(path) -> dict:
    """The JSON metadata block of a checkpoint (config, digest, extra)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data["__meta__"]))


def load_model(path, expected: ModelConfig | None = None) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {k[2:]: data[k].copy() for k in data.files if k.startswith("p:")}
    cfg = ModelConfig.from_dict(meta["config"])
    if cfg.digest() != meta["digest"]:
        raise CheckpointError(f"{path}: embedded config hash does not match its config")
    if expected is not None and expected.digest() != cfg.digest():
        raise CheckpointError(
            f"{path}: checkpoint config {cfg.digest()} != expected {expected.digest()}"
        )
    reference = init_model(cfg)
    if set(reference.params) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the config")
    for name, arr in reference.params.items():
        if params[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {params[name].shape}, config implies {arr.shape}"
            )
    return Model(cfg, params)


class Forward:
    """One define-by-run pass over a model."""

    def __init__(self, model: Model):
        self.model = model
        self.graph = ad.Graph()
        self.graph.owner = self
        self.leaves: dict[str, ad.Tensor] = {}

    def param(self, name: str) -> ad.Tensor:
        t = self.leaves.get(name)
        if t is None:
            t = self.graph.leaf(self.model.params[name])
            self.leaves[name] = t
        return t

    def input(self, values) -> ad.Tensor:
        return self.graph.constant(values)

    def _dense(self, prefix: str, x: ad.Tensor) -> ad.Tensor:
        return ad.add_bias(ad.matmul(x, self.param(f"{prefix}.w")), self.param(f"{prefix}.b"))

    def shared(self, features) -> ad.Tensor:
        x = features if isinstance(features, ad.Tensor) else self.input(features)
        if x.values.ndim != 2 or x.shape[1] != self.model.config.input_dim:
            raise ad.DimensionError(
                f"features shape {x.shape} vs input_dim {self.model.config.input_dim}"
            )
        for i in range(len(self.model.config.trunk_widths)):
            x = ad.relu(self._dense(f"trunk.{i}", x))
        return x

    def task_head(self, task: int, trunk: ad.Tensor) -> ad.Tensor:
        if not 0 <= task < self.model.config.num_tasks:
            raise KeyError(f"unknown task id {task}")
        n_layers = len(self.model.config.head_widths) + 1
        x = trunk
        for i in range(n_layers):
            x = self._dense(f"head.{task}.{i}", x)
            if i < n_layers - 1:
                x = ad.relu(x)
        return x

    def discriminator(self, trunk: ad.Tensor) -> ad.Tensor:
        n_layers = len(self.model.config.disc_widths) + 1
        x = trunk
        for i in range(n_layers):
            x = self._dense(f"disc.{i}", x)
            if i < n_layers - 1:
                x = ad.relu(x)
        return ad.normalize_rows(x)

    def grads(self, result: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        """Gradient arrays by parameter name; untouched parameters get zeros."""
        out = {}
        for name, arr in self.model.params.items():
            leaf = self.leaves.get(name)
            g = None if leaf is None else result.get(leaf.node_id)
            out[name] = np.zeros_like(arr) if g is None else g
        return out


def forward_shared(model: Model, features) -> ad.Tensor:
    return Forward(model).shared(features)


def forward_task_head(model: Model, task: int, trunk: ad.Tensor) -> ad.Tensor:
    fwd = _forward_for(model, trunk)
    return fwd.task_head(task, trunk)


def forward_discriminator(model: Model, trunk: ad.Tensor) -> ad.Tensor:
    return _forward_for(model, trunk).discriminator(trunk)


def _forward_for(model: Model, trunk: ad.Tensor) -> Forward:
    # reuse the pass that produced ``trunk`` so parameters share one graph
    fwd = getattr(trunk.graph, "owner", None)
    if fwd is None or fwd.model is not model:
        fwd = Forward(model)
    return fwd


def predict_proba(model: Model, task: int, features) -> np.ndarray:
    fwd = Forward(model)
    logits = fwd.task_head(task, fwd.shared(features)).values
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)
