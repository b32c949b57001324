"""Acceptance criteria, one test each, printing a PASS/FAIL line per criterion.

The oracles live in the unit-test modules; these tests rerun them at the
acceptance tolerances and add the experiment-level checks. Criteria 7 and 8
share one full ablation grid (7 variants x 5 seeds on the default suite).
"""

import time

import numpy as np
import pytest

from mdmtl import autodiff as ad
from mdmtl.distill import build_union, ground_truth_intact, teacher_label
from mdmtl.domain_adapt import DAConfig, mine_triplets, triplet_loss
from mdmtl.experiment import ExperimentConfig, make_suite, run_ablation_grid, run_variant
from mdmtl.mtl_loss import TaskWeights, gradnorm_update
from mdmtl.optim import LRState, dynamic_lr_update
from mdmtl.trainer import train
from gradcheck import numeric_grad, rel_error
import test_autodiff as t_ad
import test_distill as t_dist
import test_domain_adapt as t_da
import test_model as t_model
import test_mtl_loss as t_mtl
import test_optim as t_opt

GRADCHECK_TOL = 1e-4
N_INSTANCES = 20
TIE = 0.005  # half a point of accuracy


def verdict(capsys, number, title, failures, detail=""):
    line = f"{'PASS' if not failures else 'FAIL'} criterion {number}: {title}"
    if detail:
        line += f" [{detail}]"
    with capsys.disabled():
        print("\n" + line)
        for f in failures:
            print(f"    {f}")
    assert not failures, failures


def collect(checks):
    """Run named zero-argument checks and return messages for those that fail."""
    failures = []
    for name, fn in checks:
        try:
            fn()
        except AssertionError as exc:
            failures.append(f"{name}: {exc}".strip()[:300])
    return failures


# 1. gradient integrity ---------------------------------------------------

def _op_cases(rng):
    """(name, build, arrays) for every differentiable op, random shapes per instance."""
    p = t_ad.project
    b, k, n = rng.integers(2, 7, 3)
    x = rng.standard_normal((b, k))
    relu_in = np.where(np.abs(x) < 1e-3, 0.5, x)
    targets = rng.integers(0, k, b)
    rows = rng.integers(0, b, b + 2)
    mask = (rng.random((b, k)) < 0.6).astype(float)
    mask[0] = 1.0
    wts = rng.random(k) + 0.5
    trip = [rng.integers(0, b, 4) for _ in range(3)]
    i = int(rng.integers(0, k))
    return [
        ("matmul", lambda g, a, c: p(ad.matmul(a, c)), (x, rng.standard_normal((k, n)))),
        ("add_bias", lambda g, a, c: p(ad.add_bias(a, c)), (x, rng.standard_normal(k))),
        ("relu", lambda g, a: p(ad.relu(a)), (relu_in,)),
        ("softmax_xent", lambda g, a: p(ad.softmax_xent(a, targets)), (2 * x,)),
        ("l2sq", lambda g, u, v: ad.l2sq(u, v), (x[0], rng.standard_normal(k))),
        ("normalize_rows", lambda g, a: p(ad.normalize_rows(a)), (x,)),
        # margin 10 keeps every hinge active, away from the kink
        ("triplet_hinge", lambda g, e: ad.triplet_hinge(e, *trip, margin=10.0), (x,)),
        ("stack_columns", lambda g, u, v: p(ad.stack_columns([u, v])),
         (x[:, 0].copy(), rng.standard_normal(b))),
        ("masked_column_reduce",
         lambda g, a: ad.dot_const(ad.masked_column_reduce(a, mask), wts), (x,)),
        ("dot_const", lambda g, a: ad.dot_const(a, x), (rng.standard_normal((b, k)),)),
        ("index", lambda g, a: ad.mul(ad.index(a, i), ad.index(a, i)), (x[0],)),
        ("take_rows", lambda g, a: p(ad.take_rows(a, rows)), (x,)),
        ("add", lambda g, a, c: p(ad.add(a, c)), (x, rng.standard_normal((b, k)))),
        ("sub", lambda g, a, c: p(ad.sub(a, c)), (x, rng.standard_normal((b, k)))),
        ("mul", lambda g, a, c: p(ad.mul(a, c)), (x, rng.standard_normal((b, k)))),
        ("scale", lambda g, a: p(ad.scale(a, -1.7)), (x,)),
        ("total", lambda g, a: ad.total(ad.mul(a, a)), (x,)),
        ("mean", lambda g, a: ad.mean(ad.mul(a, a)), (x,)),
    ]


def _gradcheck_op(name, build, arrays):
    arrays = [np.array(a, dtype=float) for a in arrays]
    grads = t_ad.analytic(build, *arrays)
    worst = 0.0
    for arr, ga in zip(arrays, grads):
        gn = numeric_grad(t_ad.scalar_fn(build, *arrays), arr)
        worst = max(worst, rel_error(ga, gn))
    assert worst < GRADCHECK_TOL, f"{name} rel error {worst:.2e}"
    return worst


def _gradcheck_reverse(seed):
    # identity forward, so the finite-difference slope is +1 and the
    # recorded gradient must be exactly -strength times it
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    strength = float(rng.uniform(0.1, 2.0))
    ga = t_ad.analytic(lambda g, a: t_ad.project(ad.grad_reverse(a, strength)), x)[0]
    gn = numeric_grad(t_ad.scalar_fn(lambda g, a: t_ad.project(a), x), x)
    err = rel_error(ga, -strength * gn)
    assert err < GRADCHECK_TOL, f"grad_reverse rel error {err:.2e}"
    return err


def test_criterion_1_gradient_integrity(capsys):
    start = time.perf_counter()
    failures, worst, count = [], 0.0, 0
    for seed in range(N_INSTANCES):
        for name, build, arrays in _op_cases(np.random.default_rng(seed)):
            try:
                worst = max(worst, _gradcheck_op(name, build, arrays))
            except AssertionError as exc:
                failures.append(f"seed {seed}: {exc}")
            count += 1
        try:
            worst = max(worst, _gradcheck_reverse(seed))
        except AssertionError as exc:
            failures.append(f"seed {seed}: {exc}")
        count += 1
    failures += collect((f"full network seed {s}",
                         lambda s=s: t_model.test_full_network_gradcheck(s))
                        for s in range(N_INSTANCES))
    count += N_INSTANCES
    elapsed = time.perf_counter() - start
    if elapsed >= 30:
        failures.append(f"runtime {elapsed:.1f} s >= 30 s")
    verdict(capsys, 1, "finite-difference checks on every op and the composed network", failures,
            f"{count} instances, worst op rel err {worst:.1e}, {elapsed:.1f} s")


# 2. mask-loss oracle equivalence ------------------------------------------

def test_criterion_2_mask_oracle(capsys):
    start = time.perf_counter()
    failures = collect([(f"split-batch seed {s}", lambda s=s: t_mtl.test_split_batch_oracle(s))
                        for s in range(10)])
    failures += collect([(f"masked cells seed {s}",
                          lambda s=s: t_mtl.test_masked_cells_do_not_leak(s)) for s in range(5)])
    # unequal quotas as used in training
    x, labels, ws = t_mtl.mixed_batch(7, quotas=(32, 32, 64))
    _, _, out = t_mtl.masked_losses(x, labels, ws)
    worst = 0.0
    for j, w in enumerate(ws):
        keep = labels[:, j] >= 0
        g = ad.Graph()
        single = ad.mean(ad.softmax_xent(ad.matmul(g.constant(x[keep]), g.leaf(w)), labels[keep, j]))
        worst = max(worst, abs(out.values[j] - single.item()))
    if worst > 1e-12:
        failures.append(f"32/32/64 batch differs by {worst:.2e}")
    elapsed = time.perf_counter() - start
    if elapsed >= 5:
        failures.append(f"runtime {elapsed:.1f} s >= 5 s")
    verdict(capsys, 2, "masked per-task losses equal filtered sub-batch losses", failures,
            f"max diff {worst:.1e}, {elapsed:.2f} s")


# 3. GradNorm invariants ----------------------------------------------------

def test_criterion_3_gradnorm(capsys):
    failures = collect([
        ("scalar oracle", t_mtl.test_gradnorm_scalar_oracle),
        ("multi-step oracle", t_mtl.test_gradnorm_scalar_oracle_multi_step),
        ("symmetric tasks", t_mtl.test_gradnorm_symmetric_tasks_stay_uniform),
    ])
    rng = np.random.default_rng(11)
    worst = 0.0
    for t in (2, 3, 5):
        w = TaskWeights.uniform(t)
        for _ in range(200):
            w = gradnorm_update(w, list(rng.random(t) + 0.1), list(rng.random(t) * 3))
            worst = max(worst, abs(w.omega.sum() - t))
    if worst > 1e-9:
        failures.append(f"sum of weights drifted by {worst:.2e}")
    verdict(capsys, 3, "GradNorm normalization, symmetry and scalar oracle", failures,
            f"max |sum w - t| {worst:.1e}")


# 4. triplet / DA correctness -------------------------------------------------

def test_criterion_4_domain_adaptation(capsys):
    failures = collect([(f"scalar recompute seed {s}",
                         lambda s=s: t_da.test_hinge_scalar_recompute(s)) for s in range(10)])
    failures += collect([(f"routing seed {s} strength {lam}",
                          lambda s=s, lam=lam: t_da.test_gradient_routing_two_pass(s, lam))
                         for s in range(5) for lam in (1.0, 0.3)])
    rng = np.random.default_rng(0)
    ids = np.repeat([0, 1, 2], 4)
    trips = mine_triplets(ids, DAConfig(triplets_per_batch=24), rng)
    row = t_da.unit_rows(rng.standard_normal((1, 5)))
    value = triplet_loss(ad.Graph().leaf(np.tile(row, (12, 1))), trips, 0.2).item()
    if value != 0.2:
        failures.append(f"identical embeddings gave {value!r}, expected exactly 0.2")
    verdict(capsys, 4, "triplet loss, exact margin and gradient routing", failures,
            f"identical-embedding loss {value!r}")


# 5. dynamic LR trace -----------------------------------------------------------

def test_criterion_5_dynamic_lr(capsys):
    n = t_opt.FLAT_FROM + 300
    losses = [t_opt.scripted_loss(s) for s in range(1, n + 1)]
    want_lrs, want_events = t_opt.oracle_schedule(losses)
    state, got_lrs, got_events = LRState.initial(lr_max=1e-2, k=5), [], []
    for loss in losses:
        state = dynamic_lr_update(state, loss)
        got_lrs.append(state.lr)
        if state.last_event != "none":
            got_events.append((state.step, state.last_event))
    failures = []
    if got_lrs != want_lrs:
        first = next(i for i, (a, b) in enumerate(zip(got_lrs, want_lrs)) if a != b)
        failures.append(f"lr differs from oracle first at step {first + 1}")
    if got_events != want_events:
        failures.append(f"events {got_events} vs oracle {want_events}")
    if not want_events or want_events[0] != (100_000, "drop") or got_lrs[100_000 - 1] != 1e-3:
        failures.append("first event is not the factor-0.1 drop at step 100000")
    kinds = [k for _, k in got_events]
    if kinds[:5] != ["drop"] * 4 + ["reset"] or got_lrs[got_events[4][0] - 1] != 1e-2:
        failures.append(f"fifth event does not reset to lr_max: {kinds[:5]}")
    verdict(capsys, 5, "dynamic schedule matches the scalar oracle bit-for-bit", failures,
            f"{n} steps, events at {[s for s, _ in got_events]}")


# 6. distillation conservation -----------------------------------------------------

def test_criterion_6_distillation(capsys):
    failures = collect([
        ("pipeline conservation", t_dist.test_full_pipeline_conservation),
        ("permutation/idempotence", t_dist.test_aggregation_idempotent_and_permutation_invariant),
        ("duplicate identity", t_dist.test_duplicate_identity_transform_idempotent),
        ("threshold 1+eps", t_dist.test_high_threshold_reduces_to_plain_training),
    ])
    # the same audit on the default suite with an untrained teacher
    exp = ExperimentConfig(train={"epochs": 1})
    suite = make_suite(exp)
    teacher, _ = train(exp.base_train(0), suite.registry(), [])
    distilled = [teacher_label(teacher, ds, sorted(set(range(3)) - ds.labeled_tasks))
                 for ds in suite.training]
    union = build_union(suite.training, distilled)
    n_in, n_out = sum(len(d) for d in suite.training), sum(len(d) for d in union.datasets.values())
    if n_in != n_out:
        failures.append(f"union has {n_out} samples, expected {n_in}")
    if not all(ground_truth_intact(ds, union.datasets[ds.dataset_id]) for ds in suite.training):
        failures.append("ground truth modified on the default suite")
    verdict(capsys, 6, "ground truth intact, counts conserved, aggregation invariant", failures,
            f"{n_in} samples audited")


# 7 and 8. ablation grid --------------------------------------------------------------

@pytest.fixture(scope="module")
def grid():
    exp = ExperimentConfig()
    start = time.perf_counter()
    rows, reports = run_ablation_grid(exp)
    elapsed = time.perf_counter() - start
    return exp, {r["variant"]: r for r in rows}, reports, elapsed


def _fmt(rows, variant, key="target_heldout_mean"):
    return f"{variant} {100 * rows[variant][key]:.1f}"


@pytest.mark.slow
def test_criterion_7_ablation_ordering(capsys, grid):
    exp, rows, _, elapsed = grid
    failures = [f"{v}: {r['failed']} failed seeds" for v, r in rows.items() if r["failed"]]
    held = {v: r["target_heldout_mean"] for v, r in rows.items()}
    gap = {v: r["domain_gap_mean"] for v, r in rows.items()}
    if not held["2MD-MTL"] - held["Baseline"] >= 0.03:
        failures.append(f"2MD-MTL - Baseline = {100 * (held['2MD-MTL'] - held['Baseline']):.2f} "
                        "points < 3")
    if not held["Distill-2MD-MTL"] >= held["2MD-MTL"] - TIE:
        failures.append("Distill-2MD-MTL below 2MD-MTL")
    if not held["Distill-DA-2MD-MTL"] >= held["Distill-Baseline"] - TIE:
        failures.append("Distill-DA-2MD-MTL below Distill-Baseline")
    if not gap["DA-2MD-MTL"] < gap["2MD-MTL"]:
        failures.append(f"DA gap {gap['DA-2MD-MTL']:.3f} not below 2MD-MTL gap "
                        f"{gap['2MD-MTL']:.3f}")
    if elapsed >= 600:
        failures.append(f"grid runtime {elapsed:.0f} s >= 600 s")
    with capsys.disabled():
        print()
        for v, r in rows.items():
            print(f"    {v:<22} held-out {100 * r['target_heldout_mean']:5.1f} "
                  f"+- {100 * r['target_heldout_std']:4.1f}  in-domain "
                  f"{100 * r['target_in_domain_mean']:5.1f}  gap {100 * r['domain_gap_mean']:5.1f}")
    verdict(capsys, 7, "ablation ordering on held-out target accuracy", failures,
            f"{len(exp.variants)}x{len(exp.seeds)} grid in {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_8_cross_domain(capsys, grid):
    exp, rows, reports, _ = grid
    suite = make_suite(exp)
    chance = 1.0 / suite.heldout.tasks[exp.suite.target_task].num_classes
    failures = []
    if suite.target_source.dataset_id == suite.heldout.dataset_id:
        failures.append("held-out dataset is also the target-task training source")
    held_ids = {ds.dataset_id for ds in suite.training}
    if suite.heldout.dataset_id in held_ids:
        failures.append("held-out dataset appears in training")
    acc = rows["2MD-MTL"]["target_heldout_mean"]
    if not acc - chance >= 0.10:
        failures.append(f"held-out accuracy {acc:.3f} within 10 points of chance {chance:.3f}")
    verdict(capsys, 8, "held-out domain beats chance without target labels there", failures,
            f"2MD-MTL {100 * acc:.1f} vs chance {100 * chance:.1f}")


# 9. determinism ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_determinism(capsys, grid):
    exp, _, reports, _ = grid
    failures = []
    checked = []
    for variant in ("DA-2MD-MTL", "Distill-DA-2MD-MTL"):
        _, rerun = run_variant(exp, variant, 0)
        first = reports[(variant, 0)]
        if rerun.to_dict(timing=False) != first.to_dict(timing=False):
            failures.append(f"{variant} seed 0 report differs on rerun")
        if rerun.loss_trace != first.loss_trace:
            failures.append(f"{variant} seed 0 loss trace differs on rerun")
        checked.append(f"{variant} ({len(first.loss_trace)} steps)")
    # a fresh small suite built twice from the same config
    small = ExperimentConfig(train={"epochs": 1, "lr_regime": "dynamic", "dr_window": 4})
    a, b = run_variant(small, "2MD-MTL", 3)[1], run_variant(small, "2MD-MTL", 3)[1]
    if a.to_dict(timing=False) != b.to_dict(timing=False):
        failures.append("dynamic-lr run differs on rerun")
    verdict(capsys, 9, "config+seed reruns reproduce reports bit-for-bit", failures,
            ", ".join(checked))
