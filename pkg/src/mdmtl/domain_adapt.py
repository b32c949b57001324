"""Triplet-loss dataset discriminator and adversarial loss assembly.

The discriminator head embeds trunk features; a triplet hinge pulls samples
of the same dataset together and pushes other datasets away. The head is
trained to lower that loss while the trunk, behind a gradient-reversal node,
is trained to raise it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class DAConfig:
    margin: float = 0.2
    triplets_per_batch: int = 32
    strength: float = 1.0  # gradient-reversal scale on the trunk
    enabled: bool = True

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.triplets_per_batch < 1:
            raise ValueError("triplets_per_batch must be >= 1")


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


def mine_triplets(dataset_ids, cfg: DAConfig, rng: np.random.Generator) -> list[Triplet]:
    """Dataset-balanced random triplets from one batch.

    Anchor datasets take turns so every eligible dataset (>= 2 rows in the
    batch) supplies floor(T/d) or ceil(T/d) anchors, with the extra anchors
    going to a random subset. Positives come from the anchor's dataset,
    negatives uniformly from all rows of other datasets.
    """
    ids = np.asarray(dataset_ids)
    groups = {int(k): np.flatnonzero(ids == k) for k in np.unique(ids)}
    eligible = sorted(k for k, rows in groups.items() if len(rows) >= 2)
    if len(groups) < 2 or not eligible:
        return []
    n_trip = cfg.triplets_per_batch
    base, extra = divmod(n_trip, len(eligible))
    counts = dict.fromkeys(eligible, base)
    for k in rng.choice(eligible, size=extra, replace=False):
        counts[int(k)] += 1

    out = []
    for k in eligible:
        rows = groups[k]
        others = np.flatnonzero(ids != k)
        for _ in range(counts[k]):
            a, p = rng.choice(rows, size=2, replace=False)
            n = rng.choice(others)
            out.append(Triplet(int(a), int(p), int(n)))
    return out


def triplet_loss(embeddings: ad.Tensor, triplets: list[Triplet], margin: float) -> ad.Tensor:
    if not triplets:
        return ad.triplet_hinge(embeddings, [], [], [], margin)
    a, p, n = (np.array(col) for col in zip(*triplets))
    return ad.triplet_hinge(embeddings, a, p, n, margin)


def discriminator_input(trunk: ad.Tensor, strength: float) -> ad.Tensor:
    """Trunk features as seen by the discriminator (gradient reversed)."""
    return ad.grad_reverse(trunk, strength)


class AdversarialObjective(NamedTuple):
    backward_root: ad.Tensor  # task total + L_DA, differentiated once
    network_objective: float  # sum_i w_i L_i - strength * L_DA
    discriminator_objective: float  # L_DA


def adversarial_total(task_total: ad.Tensor, da_loss: ad.Tensor,
                      strength: float = 1.0) -> AdversarialObjective:
    """Combine the weighted task loss with the triplet loss.

    ``da_loss`` must have been computed on :func:`discriminator_input`, so one
    backward pass from ``backward_root`` gives the discriminator head
    ``+dL_DA``, the trunk ``d(task) - strength * dL_DA`` and the task heads
    their task gradients only.
    """
    t, d = task_total.item(), da_loss.item()
    if not (np.isfinite(t) and np.isfinite(d)):
        raise FloatingPointError("non-finite loss in adversarial objective")
    return AdversarialObjective(ad.add(task_total, da_loss), t - strength * d, d)
