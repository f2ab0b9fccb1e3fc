#!/usr/bin/env python3
"""
Tests for the training objective and the Trainer loop
"""

import os
import sys
import math

import numpy as np

os.environ.setdefault('NPCA_VERBOSE', 'False')
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from neuralpca.autodiff import Tape
from neuralpca.config import RunConfig
from neuralpca.data import two_spiral, make_splits, dataset_from_spec, Dataset
from neuralpca.checkpoint import build_model
from neuralpca.evaluation import corrupt, linear_svm_classify
from neuralpca.density import BaseDensity, gaussian_entropy_per_dim
from neuralpca.flow import FlowModel, ActNorm, AffineCoupling, build_variant
from neuralpca.trainer import (Trainer, train, objective, objective_value, evaluate_nll, epoch_averages,
                               MetricsRow)
from neuralpca.error_handling import NumericalAbortError, InsufficientBatchError


def gaussian_dataset(n_points=4000, dim=2, seed=0, rho=0.0):
    rng = np.random.default_rng(seed)
    corr = np.full((dim, dim), rho) + (1.0 - rho) * np.eye(dim)
    x = rng.standard_normal((n_points, dim)) @ np.linalg.cholesky(corr).T
    return Dataset(x=x, labels=np.zeros(n_points), splits=make_splits(n_points, rng), meta={'image': False})


def small_config(**overrides):
    base = dict(variant='Baseline', dataset={'kind': 'two_spiral', 'n_points': 2000}, depth=2, width=16,
                iterations=200, batch_size=100, eval_every=50, lr=1e-3, seed=0)
    base.update(overrides)
    return RunConfig(**base)


def test_objective_identity_flow():
    print("🧪 Testing objective on an identity flow...")
    x = np.random.default_rng(0).standard_normal((50, 3))
    base = BaseDensity.isotropic(3)
    tape = Tape()
    j = objective(tape, tape.constant(x), tape.constant(np.zeros((50, 1))), tape.constant(0.0), base)
    assert abs(j.value[0, 0] - np.mean(base.log_prob(x))) < 1e-12
    print("✅ J equals the mean base log-density")


def test_objective_scaling_flow():
    print("🧪 Testing objective of a 1-D scaling flow...")
    x = np.random.default_rng(1).standard_normal((200, 1))
    flow = FlowModel(1, [ActNorm(1, scale=2.0)])
    z, logdet = flow.forward(x)
    expected = float(np.mean(-0.5 * (2.0 * x[:, 0]) ** 2 - 0.5 * math.log(2.0 * math.pi) + math.log(2.0)))
    assert abs(objective_value(z, logdet, 0.0, BaseDensity.isotropic(1)) - expected) < 1e-12
    print("✅ Log-det of the scaling enters J")


def test_initial_nll_matches_entropy():
    print("🧪 Testing NLL of an identity-initialized flow on Gaussian data...")
    data = gaussian_dataset(10000, 2, seed=2)
    model = build_variant('Baseline', 2, depth=2, width=8)
    nll = evaluate_nll(model, data.x, 500)
    assert abs(nll / 2 - gaussian_entropy_per_dim()) < 0.05
    print("✅ Per-dim NLL close to the Gaussian entropy")


def test_zero_iterations_freezes_only():
    print("🧪 Testing a run with zero iterations...")
    cfg = small_config(variant='Neural-PCA', iterations=0)
    data = two_spiral(2000, seed=0)
    model = build_variant('Neural-PCA', 2, depth=2, width=16)
    before = {k: v.copy() for k, v in model.parameters().items()}
    state = Trainer(cfg, data, model, verbose=False).train()
    assert state.iteration == 0 and state.metrics == []
    for name, value in model.parameters().items():
        assert np.array_equal(value, before[name]), f"{name} changed"
    assert model.is_frozen and model.block.stats.batch_count == 14
    print("✅ Only the statistics pass runs")


def test_training_reduces_nll_and_is_deterministic():
    print("🧪 Testing a short Two-Spiral run...")
    data = two_spiral(2000, seed=0)
    cfg = small_config()
    runs = []
    for _ in range(2):
        model = build_variant('Baseline', 2, depth=2, width=16, seed=cfg.seed)
        state = train(cfg, data, model, verbose=False)
        runs.append(state)
    first, second = runs
    assert [r.as_csv_row() for r in first.metrics] == [r.as_csv_row() for r in second.metrics]
    averages = epoch_averages(first.metrics)
    assert len(averages) == 15
    assert averages[-1] < averages[0], f"NLL did not improve: {averages[0]} -> {averages[-1]}"
    assert first.best_val_nll is not None
    assert all(np.isfinite(r.train_nll) for r in first.metrics)
    print("✅ NLL improves and reruns are bit-identical")


def test_neural_pca_eval_matches_train_mode():
    print("🧪 Testing frozen statistics against batch statistics...")
    data = gaussian_dataset(2000, 2, seed=1, rho=0.8)
    cfg = small_config(variant="Neural-PCA", iterations=150)
    model = build_variant('Neural-PCA', 2, depth=2, width=16, seed=cfg.seed)
    train(cfg, data, model, verbose=False)
    x_train, _ = data.split('train')
    eval_nll = evaluate_nll(model, x_train, 100)
    model.train()
    train_nll = evaluate_nll(model, x_train, 100)
    model.eval()
    assert abs(eval_nll - train_nll) < 0.1 * abs(train_nll) + 0.1, f"{eval_nll} vs {train_nll}"
    print("✅ Eval-mode NLL tracks train-mode NLL")


def test_persistent_nan_aborts():
    print("🧪 Testing abort after consecutive non-finite steps...")
    data = gaussian_dataset(2000, 2)
    cfg = small_config(iterations=100)
    model = build_variant('Baseline', 2, depth=1, width=8)
    for layer in model.flow.layers:
        if isinstance(layer, AffineCoupling):
            layer.params['w1'][...] = np.nan
    try:
        Trainer(cfg, data, model, verbose=False).train()
        raise AssertionError("expected NumericalAbortError")
    except NumericalAbortError as e:
        assert e.exit_code == 4
    print("✅ Training aborts with exit code 4")


def test_batch_size_checks():
    print("🧪 Testing batch size validation...")
    data = gaussian_dataset(100, 2)
    cfg = small_config(batch_size=500)
    try:
        Trainer(cfg, data, build_variant('Baseline', 2, depth=1, width=8), verbose=False).train()
        raise AssertionError("expected InsufficientBatchError")
    except InsufficientBatchError:
        pass
    print("✅ Oversized batches rejected")


def test_epoch_averages():
    print("🧪 Testing epoch averages...")
    rows = [MetricsRow(1, 0, 1e-3, 2.0), MetricsRow(2, 0, 1e-3, 4.0), MetricsRow(3, 1, 1e-3, None, skipped=True),
            MetricsRow(4, 1, 1e-3, 1.0)]
    assert epoch_averages(rows) == [3.0, 1.0]
    print("✅ Skipped rows excluded")


CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs')
ACCEPTANCE_SEEDS = (0, 1, 2)
_shipped_runs = {}


def shipped_run(config_name, seed):
    """Train a shipped config once per seed; returns (model, state, dataset)"""
    key = (config_name, seed)
    if key not in _shipped_runs:
        cfg = RunConfig.load(os.path.join(CONFIG_DIR, config_name)).with_overrides(seed=seed)
        data = dataset_from_spec(cfg.dataset, seed=cfg.seed)
        model = build_model(cfg, data.dim)
        _shipped_runs[key] = (model, train(cfg, data, model, verbose=False), data)
    return _shipped_runs[key]


def svm_accuracies(model, data):
    """Linear SVM test accuracy on full latents and with the trailing latent dropped"""
    x_train, y_train = data.split('train')
    x_test, y_test = data.split('test')
    z_train, z_test = model.forward(x_train)[0], model.forward(x_test)[0]
    full = linear_svm_classify(z_train, y_train, None, None, z_test, y_test, seed=0)
    dropped = linear_svm_classify(corrupt(z_train, 1, 'trailing').data, y_train, None, None,
                                  corrupt(z_test, 1, 'trailing').data, y_test, seed=0)
    return full, dropped


def test_two_spiral_epoch_nll_decreases():
    print("🧪 Testing epoch-average NLL of the shipped Two-Spiral Neural-PCA config...")
    curves = [epoch_averages(shipped_run('two_spiral_neural_pca.json', seed)[1].metrics)
              for seed in ACCEPTANCE_SEEDS]
    length = min(len(c) for c in curves)
    mean_curve = np.mean([c[:length] for c in curves], axis=0)
    decreasing = float(np.mean(np.diff(mean_curve) < 0))
    assert decreasing >= 0.9, f"only {decreasing:.3f} of epoch pairs decrease"
    assert mean_curve[-1] < 1.0, f"final epoch NLL {mean_curve[-1]}"
    print(f"✅ {decreasing:.1%} of consecutive epochs improve")


def test_two_spiral_separation():
    print("🧪 Testing linear separability of trained Two-Spiral latents...")
    pca = [svm_accuracies(*shipped_run('two_spiral_neural_pca.json', seed)[::2]) for seed in ACCEPTANCE_SEEDS]
    baseline = [svm_accuracies(*shipped_run('two_spiral_baseline.json', seed)[::2]) for seed in ACCEPTANCE_SEEDS]
    full = float(np.median([a for a, _ in pca]))
    dropped = float(np.median([b for _, b in pca]))
    baseline_dropped = float(np.median([b for _, b in baseline]))
    assert full >= 0.97, f"full-latent accuracy {full}"
    assert dropped >= 0.90, f"trailing-dropped accuracy {dropped}"
    assert dropped - baseline_dropped >= 0.10, f"Neural-PCA {dropped} vs Baseline {baseline_dropped}"
    print(f"✅ Median accuracy {full:.3f} full, {dropped:.3f} without the trailing latent "
          f"(Baseline {baseline_dropped:.3f})")


def test_image_smoke_bpd():
    print("🧪 Testing bits per dim over a short image run...")
    cfg = RunConfig.load(os.path.join(CONFIG_DIR, 'synthetic_images_smoke.json')).with_overrides(
        dataset={'kind': 'synthetic_images', 'n_points': 1000, 'side': 8, 'n_classes': 2},
        iterations=100, batch_size=128, eval_every=50)
    data = dataset_from_spec(cfg.dataset, seed=cfg.seed)
    model = build_model(cfg, data.dim)
    state = train(cfg, data, model, verbose=False)
    bpd = np.array([row.bpd for row in state.metrics])
    assert bpd.size == 100 and np.all(np.isfinite(bpd))
    assert bpd[-10:].mean() < bpd[:10].mean(), f"BPD {bpd[:10].mean()} -> {bpd[-10:].mean()}"
    print(f"✅ BPD falls from {bpd[:10].mean():.2f} to {bpd[-10:].mean():.2f}")


TESTS = [
    ("Objective Identity", test_objective_identity_flow),
    ("Objective Scaling", test_objective_scaling_flow),
    ("Initial NLL", test_initial_nll_matches_entropy),
    ("Zero Iterations", test_zero_iterations_freezes_only),
    ("Training Determinism", test_training_reduces_nll_and_is_deterministic),
    ("Eval vs Train NLL", test_neural_pca_eval_matches_train_mode),
    ("NaN Abort", test_persistent_nan_aborts),
    ("Batch Size Checks", test_batch_size_checks),
    ("Epoch Averages", test_epoch_averages),
    ("Two-Spiral Epoch NLL", test_two_spiral_epoch_nll_decreases),
    ("Two-Spiral Separation", test_two_spiral_separation),
    ("Image Smoke BPD", test_image_smoke_bpd),
]


def main():
    print("🚀 TRAINER TEST SUITE")
    print("=" * 50)
    results = []
    for name, test in TESTS:
        try:
            test()
            results.append((name, True))
        except Exception as e:
            print(f"❌ {name} failed: {e}")
            results.append((name, False))

    print("\n" + "=" * 50)
    print("🎯 TEST RESULTS SUMMARY")
    print("=" * 50)
    passed = sum(1 for _, ok in results if ok)
    for name, ok in results:
        print(f"{name:.<30} {'✅ PASS' if ok else '❌ FAIL'}")
    print("-" * 50)
    print(f"Passed: {passed}/{len(results)}")
    return passed == len(results)


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
