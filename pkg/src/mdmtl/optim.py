"""Heavy-ball momentum SGD and the two learning-rate regimes.

The dynamic regime watches the training loss. When a window of recent losses
shows too little improvement it fires an *event*: the first ``k - 1`` events
of a cycle shrink the rate by ``0.1 ** (step / 10**k)``; the ``k``-th restores
the initial rate and starts a new cycle.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np


class DivergenceError(FloatingPointError):
    """Training loss became non-finite."""


@dataclass
class OptState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: float = 0.9
    lr: float = 1e-2


def momentum_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
                  opt: OptState, names=None) -> None:
    """In place: ``v <- momentum * v + g``; ``theta <- theta - lr * v``.

    ``names`` limits the update to a subset of parameters; the others and
    their velocity buffers are left untouched.
    """
    for name in (params if names is None else names):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = opt.momentum * v + g
        opt.velocity[name] = v
        params[name] = p - opt.lr * v


def exponential_lr(step: int, lr0: float, decay_rate: float, decay_steps: float) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return lr0 * decay_rate ** (step / decay_steps)


EVENT_NONE, EVENT_DROP, EVENT_RESET = "none", "drop", "reset"


@dataclass
class LRState:
    lr_max: float = 1e-2
    lr: float = 1e-2
    k: int = 5
    window: int = 50
    tolerance: float = 0.01
    events: int = 0
    step: int = 0
    exponent_step: str = "global"  # or "cycle": steps since the cycle began
    cycle_start: int = 0
    history: tuple[float, ...] = ()
    diverged: bool = False
    last_event: str = EVENT_NONE

    @classmethod
    def initial(cls, lr_max: float = 1e-2, k: int = 5, window: int = 50,
                tolerance: float = 0.01, exponent_step: str = "global") -> "LRState":
        if lr_max <= 0 or k < 1 or window < 2:
            raise ValueError("need lr_max > 0, k >= 1, window >= 2")
        if exponent_step not in ("global", "cycle"):
            raise ValueError(f"unknown exponent_step {exponent_step!r}")
        return cls(lr_max=lr_max, lr=lr_max, k=k, window=window, tolerance=tolerance,
                   exponent_step=exponent_step)


def stalled(history, tolerance: float) -> bool:
    """Older-half mean minus newer-half mean is below ``tolerance`` of the older mean."""
    half = len(history) // 2
    older = sum(history[:half]) / half
    newer = sum(history[half:]) / (len(history) - half)
    return (older - newer) < tolerance * older


def apply_event(state: LRState) -> LRState:
    """Fire one stall event at ``state.step``."""
    if state.events < state.k - 1:
        t = state.step if state.exponent_step == "global" else state.step - state.cycle_start
        lr = state.lr * 0.1 ** (t / 10 ** state.k)
        return replace(state, lr=lr, events=state.events + 1, history=(), last_event=EVENT_DROP)
    return replace(state, lr=state.lr_max, events=0, cycle_start=state.step, history=(),
                   last_event=EVENT_RESET)


def dynamic_lr_update(state: LRState, loss: float) -> LRState:
    """Advance the controller by one optimizer step. Pure: returns a new state."""
    if state.diverged:
        return replace(state, step=state.step + 1, last_event=EVENT_NONE)
    if not math.isfinite(loss):
        return replace(state, step=state.step + 1, diverged=True, last_event=EVENT_NONE)
    state = replace(state, step=state.step + 1, last_event=EVENT_NONE,
                    history=(state.history + (float(loss),))[-state.window:])
    if len(state.history) == state.window and stalled(state.history, state.tolerance):
        state = apply_event(state)
    return state


class LRTrace:
    """Per-step ``(step, loss, lr, event)`` rows for the lr-trace CSV."""

    FIELDS = ("step", "loss", "lr", "event")

    def __init__(self):
        self.rows: list[tuple[int, float, float, str]] = []

    def add(self, step: int, loss: float, lr: float, event: str) -> None:
        self.rows.append((step, loss, lr, event))

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for step, loss, lr, event in self.rows:
                w.writerow([step, repr(loss), repr(lr), event])


class Schedule:
    """Uniform front for the exponential and dynamic regimes."""

    def __init__(self, regime: str = "exponential", lr0: float = 1e-2,
                 decay_rate: float = 0.1, decay_steps: float = 10_000, **dynamic):
        if regime not in ("exponential", "dynamic", "constant"):
            raise ValueError(f"unknown lr regime {regime!r}")
        self.regime = regime
        self.lr0 = lr0
        self.decay_rate = decay_rate
        self.decay_steps = decay_steps
        self.state = LRState.initial(lr_max=lr0, **dynamic) if regime == "dynamic" else None
        self.step = 0

    @property
    def lr(self) -> float:
        if self.regime == "dynamic":
            return self.state.lr
        if self.regime == "constant":
            return self.lr0
        return exponential_lr(self.step, self.lr0, self.decay_rate, self.decay_steps)

    @property
    def diverged(self) -> bool:
        return self.state is not None and self.state.diverged

    def update(self, loss: float) -> str:
        """Record the step's loss; returns the event type."""
        self.step += 1
        if self.regime != "dynamic":
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at step {self.step}")
            return EVENT_NONE
        self.state = dynamic_lr_update(self.state, loss)
        if self.state.diverged:
            raise DivergenceError(f"non-finite loss {loss} at step {self.step}")
        return self.state.last_event
