import math

import numpy as np
import pytest

from mdmtl.optim import (DivergenceError, LRState, LRTrace, OptState, Schedule, dynamic_lr_update,
                         exponential_lr, momentum_step)

# decreasing loss until this step, flat afterwards; the first stall event then
# lands on step 100000 exactly
FLAT_FROM = 99_972


def scripted_loss(step):
    return 0.999 ** min(step, FLAT_FROM)


def oracle_schedule(losses, lr_max=1e-2, k=5, window=50, tol=0.01):
    """Independent scalar simulation of the stall-driven schedule.

    Returns the lr after each step and the list of (step, kind) events.
    """
    lr, count, buf = lr_max, 0, []
    lrs, events = [], []
    for step, loss in enumerate(losses, start=1):
        buf.append(loss)
        if len(buf) > window:
            buf.pop(0)
        if len(buf) == window:
            h = window // 2
            old = sum(buf[:h]) / h
            new = sum(buf[h:]) / (window - h)
            if old - new < tol * old:
                if count < k - 1:
                    lr = lr * 0.1 ** (step / 10 ** k)
                    count += 1
                    events.append((step, "drop"))
                else:
                    lr = lr_max
                    count = 0
                    events.append((step, "reset"))
                buf = []
        lrs.append(lr)
    return lrs, events


def test_momentum_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    momentum_step(params, {"w": np.zeros(2)}, OptState(lr=0.1))
    assert params["w"].tolist() == [1.0, -2.0]


def test_momentum_first_step():
    params = {"w": np.array([1.0, -2.0])}
    momentum_step(params, {"w": np.array([0.5, 0.25])}, OptState(lr=0.1))
    np.testing.assert_array_equal(params["w"], np.array([1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]))


def test_momentum_quadratic_recurrence():
    # f(x) = 1.5 x^2, f'(x) = 3x
    params = {"x": np.array(2.0)}
    opt = OptState(lr=0.05)
    x, v = 2.0, 0.0
    for _ in range(3):
        momentum_step(params, {"x": 3.0 * params["x"]}, opt)
        v = 0.9 * v + 3.0 * x
        x = x - 0.05 * v
        assert abs(float(params["x"]) - x) <= 1e-12


def test_momentum_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptState())


def test_momentum_subset():
    params = {"a": np.ones(2), "b": np.ones(2)}
    opt = OptState(lr=1.0)
    momentum_step(params, {"a": np.ones(2), "b": np.ones(2)}, opt, names=["a"])
    assert params["b"].tolist() == [1.0, 1.0] and "b" not in opt.velocity


def test_exponential_examples():
    assert exponential_lr(0, 1e-2, 0.1, 1000) == 1e-2
    assert exponential_lr(1000, 1e-2, 0.1, 1000) == pytest.approx(1e-3, rel=1e-15)
    seq = [exponential_lr(s, 1e-2, 0.1, 500) for s in range(0, 5000, 7)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        exponential_lr(-1, 1e-2, 0.1, 10)


def test_improving_stream_never_fires():
    state = LRState.initial()
    for step in range(1, 10_001):
        state = dynamic_lr_update(state, 0.999 ** step)
        assert state.last_event == "none"
    assert state.lr == 1e-2 and state.step == 10_000


def test_event_at_step_1e5():
    state = LRState(step=10 ** 5 - 50)
    for _ in range(50):
        state = dynamic_lr_update(state, 1.0)
    assert state.step == 10 ** 5 and state.last_event == "drop"
    assert state.lr == 1e-3


def test_five_events_reset():
    state = LRState.initial()
    kinds, lrs = [], []
    for _ in range(250):
        state = dynamic_lr_update(state, 2.0)
        if state.last_event != "none":
            kinds.append(state.last_event)
            lrs.append(state.lr)
    assert kinds == ["drop"] * 4 + ["reset"]
    assert all(a > b for a, b in zip(lrs[:4], lrs[1:4]))
    assert lrs[-1] == 1e-2 and state.events == 0
    # the cycle minimum equals lr_max times the product of the applied factors
    expected = 1e-2
    for step in (50, 100, 150, 200):
        expected *= 0.1 ** (step / 10 ** 5)
    assert lrs[3] == expected


def test_scripted_trace_matches_oracle():
    n = FLAT_FROM + 300
    losses = [scripted_loss(s) for s in range(1, n + 1)]
    want_lrs, want_events = oracle_schedule(losses)
    state, got_lrs, got_events = LRState.initial(), [], []
    for loss in losses:
        state = dynamic_lr_update(state, loss)
        got_lrs.append(state.lr)
        if state.last_event != "none":
            got_events.append((state.step, state.last_event))
    assert got_events == want_events
    assert got_lrs == want_lrs  # bit-for-bit
    assert want_events[0] == (100_000, "drop")
    assert got_lrs[100_000 - 1] == 1e-3
    assert want_events[4][1] == "reset" and got_lrs[want_events[4][0] - 1] == 1e-2


def test_cycle_exponent_option():
    state = LRState.initial(exponent_step="cycle")
    state = LRState(**{**state.__dict__, "step": 1000, "cycle_start": 900})
    for _ in range(50):
        state = dynamic_lr_update(state, 1.0)
    assert state.lr == 1e-2 * 0.1 ** (150 / 10 ** 5)


def test_controller_is_pure():
    state = LRState.initial(window=4)
    for v in (1.0, 1.0, 1.0):
        state = dynamic_lr_update(state, v)
    snapshot = state.__dict__.copy()
    a = dynamic_lr_update(state, 1.0)
    b = dynamic_lr_update(state, 1.0)
    assert a == b and state.__dict__ == snapshot


def test_lr_stays_in_range():
    rng = np.random.default_rng(0)
    state = LRState.initial(window=6)
    for _ in range(3000):
        state = dynamic_lr_update(state, float(rng.random()))
        assert 0 < state.lr <= state.lr_max
        assert 0 <= state.events < state.k


def test_nonfinite_freezes_and_signals():
    state = LRState.initial()
    state = dynamic_lr_update(state, math.nan)
    assert state.diverged
    frozen = dynamic_lr_update(state, 1.0)
    assert frozen.lr == state.lr and frozen.diverged
    sched = Schedule("dynamic", 1e-2)
    with pytest.raises(DivergenceError):
        sched.update(math.inf)
    with pytest.raises(DivergenceError):
        Schedule("exponential").update(math.nan)


def test_schedule_front():
    s = Schedule("exponential", 1e-2, 0.1, 100)
    for _ in range(100):
        s.update(1.0)
    assert s.lr == pytest.approx(1e-3, rel=1e-15)
    assert Schedule("constant", 0.3).lr == 0.3
    with pytest.raises(ValueError):
        Schedule("cosine")


def test_lr_trace_csv(tmp_path):
    tr = LRTrace()
    tr.add(1, 0.5, 1e-2, "none")
    tr.add(2, 0.25, 1e-3, "drop")
    tr.write(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr,event"
    assert lines[2] == "2,0.25,0.001,drop"
