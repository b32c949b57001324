"""Masked multi-task loss and GradNorm task weighting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

MIN_WEIGHT = 1e-3
ZERO_LOSS_EPS = 1e-8


def loss_matrix(per_task: list[ad.Tensor]) -> ad.Tensor:
    """Stack per-sample loss vectors (one per task) into a ``b x t`` matrix."""
    return ad.stack_columns(per_task)


def masked_task_losses(losses: ad.Tensor, mask: np.ndarray, reduction: str = "mean",
                       expected_tasks=None) -> ad.Tensor:
    """Per-task loss: masked mean (or sum) over each column.

    ``expected_tasks`` lists columns that must have at least one valid cell;
    an empty one means the batch was composed wrongly.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if expected_tasks is not None:
        counts = mask.sum(axis=0)
        empty = [j for j in expected_tasks if counts[j] == 0]
        if empty:
            raise ValueError(f"no valid samples for task(s) {empty} in this batch")
    return ad.masked_column_reduce(losses, mask, reduction)


def weighted_total(task_losses: ad.Tensor, weights) -> ad.Tensor:
    """``sum_i w_i L_i`` with the weights held constant."""
    w = weights.omega if isinstance(weights, TaskWeights) else weights
    return ad.dot_const(task_losses, w)


@dataclass
class TaskWeights:
    omega: np.ndarray
    alpha: float = 1.5
    lr: float = 0.025
    initial_losses: np.ndarray | None = None
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def uniform(cls, num_tasks: int, alpha: float = 1.5, lr: float = 0.025) -> "TaskWeights":
        return cls(np.ones(num_tasks), alpha, lr)

    @property
    def num_tasks(self) -> int:
        return len(self.omega)


def _renormalize(w: np.ndarray, total: float) -> np.ndarray:
    """Scale ``w`` to sum to ``total`` keeping every entry >= MIN_WEIGHT."""
    w = np.maximum(w, MIN_WEIGHT)
    pinned = np.zeros(len(w), dtype=bool)
    while True:
        free = ~pinned
        budget = total - MIN_WEIGHT * pinned.sum()
        out = np.where(pinned, MIN_WEIGHT, w * budget / w[free].sum())
        low = free & (out < MIN_WEIGHT)
        if not low.any():
            return out
        pinned |= low


def gradnorm_update(weights: TaskWeights, task_losses, grad_norms,
                    active=None) -> TaskWeights:
    """One GradNorm step on the task weights.

    ``grad_norms[i]`` is the norm of the gradient of ``omega_i * L_i`` with
    respect to the last shared layer. The balancing loss
    ``sum_i |G_i - mean(G) * r_i ** alpha|`` is differentiated with respect to
    ``omega`` with the targets held fixed, so ``dG_i/d omega_i = G_i / omega_i``.

    ``active`` restricts the update to a subset of tasks (the rest keep their
    weight); renormalization then keeps the active weights summing to their
    count.
    """
    losses = np.asarray(task_losses, dtype=np.float64)
    g = np.asarray(grad_norms, dtype=np.float64)
    t = weights.num_tasks
    act = np.arange(t) if active is None else np.asarray(sorted(active), dtype=int)
    if np.any(g < 0):
        raise ValueError("gradient norms must be non-negative")

    initial = weights.initial_losses
    if initial is None:
        initial = losses.copy()
        zero = initial[act] <= 0.0
        if np.any(zero):
            log.warning("zero initial loss for task(s) %s; using %g", act[zero], ZERO_LOSS_EPS)
            initial[act[zero]] = ZERO_LOSS_EPS

    omega = weights.omega.copy()
    ratio = losses[act] / initial[act]
    rate = ratio / ratio.mean()
    target = g[act].mean() * rate ** weights.alpha
    unit_norm = g[act] / omega[act]
    step = np.sign(g[act] - target) * unit_norm
    omega[act] = _renormalize(omega[act] - weights.lr * step, len(act))
    return TaskWeights(omega, weights.alpha, weights.lr, initial, weights.history)
