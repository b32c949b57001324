import math
from dataclasses import replace

import numpy as np
import pytest

from mdmtl.data import (BatchComposer, BatchQuota, DatasetGen, DatasetSpec, Registry, SuiteConfig,
                        TaskSpec, generate_synthetic_suite)
from mdmtl.domain_adapt import DAConfig
from mdmtl.experiment import ExperimentConfig, make_suite, run_ablation_grid, run_variant, \
    stage_config
from mdmtl.model import ConfigError, ModelConfig, Model, init_model
from mdmtl.mtl_loss import TaskWeights
from mdmtl.trainer import (RunReport, TrainConfig, confusion_matrix, evaluate, train, train_step)


def three_task_suite(seed=0, **kw):
    cfg = SuiteConfig(datasets=(DatasetGen("a", 0, (0,), 160), DatasetGen("b", 1, (1,), 160),
                                DatasetGen("c", 2, (2,), 120)), heldout_dataset=-1, **kw)
    return generate_synthetic_suite(cfg, seed=seed)


def small_train(**kw):
    base = dict(epochs=2, quota={0: 4, 1: 4, 2: 4}, trunk_widths=(12,), disc_widths=(8,),
                embed_dim=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_separable_baseline_fits():
    cfg = SuiteConfig(tasks=(("t", 2),), relevant_dim=1, nuisance_dim=1, feature_dim=2,
                      label_noise=0.0, obs_noise=0.0, identity_domains=True,
                      datasets=(DatasetGen("a", 0, (0,), 400),), target_task=0,
                      heldout_dataset=-1)
    ds = generate_synthetic_suite(cfg, seed=0)[0]
    tc = TrainConfig(variant="Baseline", quota={0: 16}, target_task=0, epochs=50,
                     trunk_widths=(8,), lr0=0.05, val_fraction=0.0, seed=0)
    model, report = train(tc, Registry.from_datasets([ds]))
    assert report.status == "ok"
    assert evaluate(model, ds, 0, split="train") >= 0.99


def test_one_task_mtl_equals_baseline():
    ds = three_task_suite()[2]
    reg = Registry.from_datasets([ds])
    _, a = train(small_train(variant="Baseline", quota={2: 8}), reg)
    _, b = train(small_train(variant="2MD-MTL", quota={2: 8}), reg)
    assert a.loss_trace == b.loss_trace
    assert a.test == b.test


def test_single_step_touches_all_heads():
    reg = Registry.from_datasets(three_task_suite())
    cfg = small_train(quota={0: 2, 1: 2, 2: 2})
    model = init_model(cfg.model_config(reg))
    batch = BatchComposer(reg, BatchQuota(cfg.quota), np.random.default_rng(0)).compose()
    res = train_step(model, batch, cfg, TaskWeights.uniform(3), np.random.default_rng(1),
                     [0, 1, 2])
    assert res.grads["trunk.0.w"].any()
    for j in range(3):
        assert res.grads[f"head.{j}.0.w"].any(), j
    assert res.norms is not None and np.all(res.norms > 0)
    assert res.active == [0, 1, 2]


def test_da_step_reports_triplets():
    reg = Registry.from_datasets(three_task_suite())
    cfg = small_train(da=DAConfig(triplets_per_batch=6))
    model = init_model(cfg.model_config(reg))
    batch = BatchComposer(reg, BatchQuota(cfg.quota), np.random.default_rng(0)).compose()
    res = train_step(model, batch, cfg, TaskWeights.uniform(3), np.random.default_rng(1),
                     [0, 1, 2])
    assert res.n_triplets == 6 and res.da_loss > 0
    assert res.grads["disc.0.w"].any()


def oracle_model(truth, d_latent, n_rel, num_classes):
    """ReLU network computing W z_rel exactly on identity-domain features."""
    cfg = ModelConfig(input_dim=d_latent, trunk_widths=(2 * d_latent,), num_classes=num_classes,
                      seed=0)
    m = init_model(cfg)
    eye = np.eye(d_latent)
    m.params["trunk.0.w"] = np.hstack([eye, -eye])  # relu(x) - relu(-x) == x
    m.params["trunk.0.b"] = np.zeros(2 * d_latent)
    for j, w in enumerate(truth.task_weights):
        full = np.zeros((d_latent, w.shape[0]))
        full[:n_rel] = w.T
        m.params[f"head.{j}.0.w"] = np.vstack([full, -full])
        m.params[f"head.{j}.0.b"] = np.zeros(w.shape[0])
    return Model(cfg, m.params)


def test_evaluate_oracle_matches_generator():
    cfg = SuiteConfig(tasks=(("e", 7),), relevant_dim=2, nuisance_dim=2, feature_dim=4,
                      label_noise=0.3, obs_noise=0.0, identity_domains=True,
                      datasets=(DatasetGen("a", 0, (0,), 2000),), target_task=0,
                      heldout_dataset=-1)
    (ds,), truth = generate_synthetic_suite(cfg, seed=1, return_truth=True)
    model = oracle_model(truth, 4, 2, (7,))
    z = truth.latents[0][ds.test_idx, :2]
    bayes = float(np.mean((z @ truth.task_weights[0].T).argmax(axis=1) == ds.labels[ds.test_idx, 0]))
    assert abs(evaluate(model, ds, 0) - bayes) < 1e-12
    assert bayes < 1.0  # label noise is real


def test_evaluate_chance_level_and_pure():
    rng = np.random.default_rng(0)
    n = 2000
    ds = DatasetSpec(0, 0, (TaskSpec(0, "e", 7),), {0}, rng.standard_normal((n, 6)),
                     rng.integers(0, 7, (n, 1)), np.arange(0), np.arange(n))
    model = init_model(ModelConfig(input_dim=6, trunk_widths=(16,), num_classes=(7,), seed=4))
    acc = evaluate(model, ds, 0)
    sigma = math.sqrt((1 / 7) * (6 / 7) / n)
    assert abs(acc - 1 / 7) < 3 * sigma
    assert evaluate(model, ds, 0) == acc
    cm = confusion_matrix(model, ds, 0)
    assert cm.sum() == n and np.trace(cm) == round(acc * n)


def test_evaluate_unlabeled_task():
    ds = three_task_suite()[0]
    model = init_model(small_train().model_config(Registry.from_datasets(three_task_suite())))
    with pytest.raises(ValueError, match="does not label"):
        evaluate(model, ds, 2)


def test_training_determinism():
    reg = Registry.from_datasets(three_task_suite())
    cfg = small_train(da=DAConfig(triplets_per_batch=8), lr_regime="dynamic")
    m1, r1 = train(cfg, reg)
    m2, r2 = train(cfg, reg)
    assert r1.to_dict(timing=False) == r2.to_dict(timing=False)
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)


def test_disabling_da_reproduces_2md():
    reg = Registry.from_datasets(three_task_suite())
    base = small_train()
    da_off = replace(stage_config("DA-2MD-MTL", base), da=DAConfig(enabled=False))
    _, a = train(da_off, reg)
    _, b = train(stage_config("2MD-MTL", base), reg)
    assert a.loss_trace == b.loss_trace


def test_baseline_uses_one_task():
    cfg = stage_config("Baseline", small_train())
    assert list(cfg.quota) == [2] and sum(cfg.quota.values()) == 12


def test_epoch_driven_by_largest_dataset():
    sets = three_task_suite()
    reg = Registry.from_datasets(sets)
    cfg = small_train(epochs=1, val_fraction=0.0)
    _, rep = train(cfg, reg)
    assert len(rep.loss_trace) == len(sets[0].train_idx) // 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    reg = Registry.from_datasets(three_task_suite())
    _, rep = train(small_train(lr0=1e12, gradnorm=False, lr_regime="constant"), reg)
    assert rep.status == "diverged"
    assert rep.loss_trace and len(rep.loss_trace) < 2 * (128 // 4)


def test_first_step_uses_initial_lr():
    reg = Registry.from_datasets(three_task_suite())
    _, rep = train(small_train(epochs=1), reg)
    assert rep.lr_trace[0][2] == 1e-2
    assert rep.lr_trace[1][2] < 1e-2


def test_config_errors():
    with pytest.raises(ConfigError):
        TrainConfig(variant="Nope")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})
    reg = Registry.from_datasets(three_task_suite()[:1])
    with pytest.raises(ConfigError):
        train(small_train(), reg)


def test_report_roundtrip(tmp_path):
    reg = Registry.from_datasets(three_task_suite())
    _, rep = train(small_train(epochs=1), reg)
    rep.save(tmp_path / "r.report")
    back = RunReport.load(tmp_path / "r.report")
    assert back.to_dict() == rep.to_dict()
    rep.write_step_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("# config: ")
    header = lines[1].split(",")
    assert header[:2] == ["step", "epoch"] and "w_emotion" in header and "lr" in header


def tiny_experiment(**kw):
    suite = SuiteConfig(datasets=(DatasetGen("age", 0, (0,), 120), DatasetGen("gender", 1, (1,), 120),
                                  DatasetGen("emotion", 2, (2,), 100),
                                  DatasetGen("heldout", 3, (2,), 80, test_fraction=1.0)))
    base = dict(suite=suite, train={"epochs": 1, "quota": {"0": 4, "1": 4, "2": 4},
                                    "trunk_widths": [8], "disc_widths": [4], "embed_dim": 4})
    base.update(kw)
    return ExperimentConfig(**base)


def test_grid_single_cell_equals_run():
    exp = tiny_experiment(variants=("2MD-MTL",), seeds=(3,))
    rows, reports = run_ablation_grid(exp)
    _, direct = run_variant(exp, "2MD-MTL", 3)
    assert reports[("2MD-MTL", 3)].loss_trace == direct.loss_trace
    (row,) = rows
    assert row["seeds"] == 1 and row["failed"] == 0
    assert row["target_heldout_mean"] == direct.test["heldout"]["emotion"]
    assert row["target_heldout_std"] == 0.0


def test_grid_statistics_and_determinism(tmp_path):
    exp = tiny_experiment(variants=("Baseline", "Distill-Baseline"), seeds=(0, 1, 2))
    rows, reports = run_ablation_grid(exp, tmp_path)
    rows2, _ = run_ablation_grid(exp)
    assert rows == rows2
    for row in rows:
        vals = [RunReport.load(tmp_path / f"{row['variant']}_{s}.report").test["heldout"]["emotion"]
                for s in exp.seeds]
        assert row["target_heldout_mean"] == pytest.approx(np.mean(vals), abs=1e-12)
        assert row["target_heldout_std"] == pytest.approx(np.std(vals, ddof=1), abs=1e-12)
    lines = (tmp_path / "grid.csv").read_text().splitlines()
    assert lines[0].startswith("# config:")
    assert len(lines) == 2 + len(exp.variants)
    rep = reports[("Distill-Baseline", 0)]
    assert set(rep.stages) == {"teacher", "distill", "student"}
    assert rep.config["mode"] == "single-task"


def test_grid_records_failures(monkeypatch):
    import mdmtl.experiment as ex

    real = ex.run_variant

    def flaky(exp, variant, seed, *a, **k):
        if seed == 1:
            raise RuntimeError("boom")
        return real(exp, variant, seed, *a, **k)

    monkeypatch.setattr(ex, "run_variant", flaky)
    rows, reports = ex.run_ablation_grid(tiny_experiment(variants=("Baseline",), seeds=(0, 1)))
    assert reports[("Baseline", 1)] is None
    assert rows[0]["failed"] == 1 and rows[0]["seeds"] == 1


def test_suite_roles():
    suite = make_suite(ExperimentConfig())
    assert [d.name for d in suite.training] == ["age", "gender", "emotion"]
    assert suite.heldout.name == "emotion-heldout"
    assert suite.target_source.name == "emotion"
