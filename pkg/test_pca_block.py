#!/usr/bin/env python3
"""
Tests for the PCA block: zero-offset BatchNorm, per-batch rotation and the statistics pass
"""

import os
import sys
import math

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from neuralpca.pca_block import PcaBlock, freeze_statistics
from neuralpca.autodiff import Tape, finite_difference_grad, numerical_jacobian
from neuralpca.density import BaseDensity
from neuralpca.trainer import objective, train
from neuralpca.config import RunConfig
from neuralpca.data import two_spiral
from neuralpca.flow import build_variant
from neuralpca.linalg import is_special_orthogonal
from neuralpca.evaluation import rotation_distance_histogram
from neuralpca.error_handling import InsufficientBatchError, MissingStatisticsError


def axis_aligned_batch(repeats=16):
    """Zero-mean orthogonal columns with variances 4 and 1"""
    a = np.tile([1.0, -1.0, 1.0, -1.0], repeats)
    b = np.tile([1.0, 1.0, -1.0, -1.0], repeats)
    return np.stack([2.0 * a, b], axis=1)


def correlated_batches(count, size, seed):
    corr = np.array([[1.0, 0.8, 0.3], [0.8, 1.0, 0.5], [0.3, 0.5, 1.0]])
    chol = np.linalg.cholesky(corr)
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((size, 3)) @ chol.T * [1.0, 3.0, 0.5] + [2.0, -1.0, 0.0] for _ in range(count)]


def test_batchnorm_standardizes():
    print("🧪 Testing zero-offset BatchNorm...")
    rng = np.random.default_rng(0)
    x = rng.normal([5.0, -3.0], [2.0, 0.5], (200, 2))
    block = PcaBlock(2, use_rotation=False)
    block.log_alpha[...] = np.log([[3.0, 0.5]])
    z, logdet = block.forward(x)
    assert np.max(np.abs(z.mean(axis=0))) < 1e-12
    assert np.allclose(z.var(axis=0), np.array([9.0, 0.25]) * x.var(axis=0) / (x.var(axis=0) + block.eps))
    assert np.allclose(logdet, logdet[0])

    standardized = (x - x.mean(axis=0)) / x.std(axis=0)
    block = PcaBlock(2, use_rotation=False)
    block.log_alpha[...] = math.log(2.0)
    _, logdet = block.forward(standardized)
    assert abs(logdet[0] - 2.0 * math.log(2.0)) < 1e-4
    print("✅ BatchNorm centers, rescales and reports log(alpha) - log(sigma)")


def test_batchnorm_logdet_matches_jacobian():
    print("🧪 Testing BatchNorm log-det with statistics held fixed...")
    rng = np.random.default_rng(1)
    x = rng.normal(1.0, 2.0, (64, 4))
    block = PcaBlock(4)
    block.log_alpha[...] = rng.normal(0.0, 0.5, (1, 4))
    _, logdet = block.forward(x)
    mean, var, v = block.current_statistics()
    jac = numerical_jacobian(lambda s: block.apply_with_statistics(s[None, :], mean, var, v), x[0])
    assert abs(logdet[0] - np.linalg.slogdet(jac)[1]) < 1e-6
    print("✅ Block log-det equals the per-sample Jacobian log-det")


def test_pca_axis_aligned_and_rotated():
    print("🧪 Testing the rotation layer on known covariances...")
    z = axis_aligned_batch()
    block = PcaBlock(2)
    out, logdet = block.pca_forward(z)
    assert np.allclose(out, z, atol=1e-12) and np.all(logdet == 0.0)

    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    rotated = z @ np.array([[c, -s], [s, c]]).T
    out, _ = block.pca_forward(rotated)
    assert np.allclose(out.var(axis=0), [4.0, 1.0], rtol=1e-6)
    print("✅ Rotation recovers the principal axes")


def test_forward_sorts_and_decorrelates():
    print("🧪 Testing sorted, decorrelated block outputs...")
    for seed in range(5):
        batch = correlated_batches(1, 256, seed)[0]
        block = PcaBlock(3)
        out, _ = block.forward(batch)
        variances = out.var(axis=0)
        assert np.all(np.diff(variances) <= 1e-12), f"variances not sorted: {variances}"
        gram = out.T @ out
        assert np.max(np.abs(gram - np.diag(np.diag(gram)))) < 1e-8 * np.max(gram)
        assert is_special_orthogonal(block.last_batch_v)
    print("✅ Outputs are decorrelated with non-increasing variance")


def test_eval_mode_variance_ordering():
    print("🧪 Testing variance ordering of held-out latents in eval mode...")
    data = two_spiral(2000, seed=0)
    cfg = RunConfig(variant='Neural-PCA', dataset={'kind': 'two_spiral', 'n_points': 2000}, depth=2, width=16,
                    iterations=300, batch_size=100, eval_every=100, seed=0)
    model = build_variant('Neural-PCA', 2, depth=2, width=16, seed=0)
    train(cfg, data, model, verbose=False)
    assert model.is_frozen
    x_test, _ = data.split('test')
    variances = model.forward(x_test)[0].var(axis=0)
    assert np.all(variances[1:] <= 1.05 * variances[:-1]), f"held-out variances {variances}"
    print("✅ Frozen statistics keep the leading latent widest")


def test_freeze_identical_batches():
    print("🧪 Testing statistics pass over identical batches...")
    batch = correlated_batches(1, 128, 11)[0]
    block = PcaBlock(3)
    block.forward(batch)
    v = block.last_batch_v.copy()
    stats = freeze_statistics(block, None, [batch, batch, batch])
    assert np.allclose(stats.v_tilde, v, atol=1e-10)
    assert np.allclose(stats.mu_bar, batch.mean(axis=0))
    assert np.allclose(stats.sigma_bar, batch.var(axis=0))
    assert stats.batch_count == 3 and block.mode == 'eval'
    assert len(block.batch_rotations) == 3
    print("✅ Identical batches reproduce the batch statistics")


def test_freeze_concentrates_rotations():
    print("🧪 Testing rotation concentration across batches...")
    block = PcaBlock(3)
    stats = block.freeze_statistics(None, correlated_batches(50, 512, 12))
    assert is_special_orthogonal(stats.v_tilde)
    report = rotation_distance_histogram(block.batch_rotations, stats.v_tilde)
    assert report['mean'] < 0.2 and report['max'] < 0.5, f"spread too large: {report['mean']}, {report['max']}"
    print("✅ Batch rotations cluster around the mean rotation")


def test_eval_mode_round_trip_and_single_sample():
    print("🧪 Testing eval mode...")
    batches = correlated_batches(4, 64, 13)
    block = PcaBlock(3)
    block.log_alpha[...] = [[0.2, -0.1, 0.3]]
    block.freeze_statistics(None, batches)
    x = batches[0]
    z, logdet = block.forward(x)
    assert np.max(np.abs(block.inverse(z) - x)) < 1e-10
    single, _ = block.forward(x[:1])
    assert np.allclose(single, z[:1])
    assert np.allclose(logdet, logdet[0])
    print("✅ Frozen block is invertible and batch-independent")


def test_block_errors():
    print("🧪 Testing block error conditions...")
    block = PcaBlock(3)
    try:
        block.eval()
        raise AssertionError("expected MissingStatisticsError")
    except MissingStatisticsError:
        pass
    try:
        block.forward(np.ones((1, 3)))
        raise AssertionError("expected InsufficientBatchError for one sample")
    except InsufficientBatchError:
        pass
    try:
        block.forward(np.random.default_rng(0).standard_normal((2, 3)))
        raise AssertionError("expected InsufficientBatchError for batch < dim")
    except InsufficientBatchError:
        pass
    try:
        PcaBlock(3).inverse(np.zeros((1, 3)))
        raise AssertionError("expected MissingStatisticsError before any batch")
    except MissingStatisticsError:
        pass
    print("✅ Block errors raised")


def test_batchnorm_logdet_gradient():
    print("🧪 Testing the gradient of J through the PCA block...")
    rng = np.random.default_rng(14)
    h = correlated_batches(1, 64, 14)[0]
    block = PcaBlock(3)
    block.log_alpha[...] = rng.normal(0.0, 0.3, (1, 3))
    base = BaseDensity.non_isotropic([1.0, 0.55, 0.1])

    def alpha_grad(stop_bn_gradient):
        tape = Tape()
        log_alpha = tape.variable(block.log_alpha)
        z, logdet_bn = block.forward_tape(tape, tape.constant(h), log_alpha)
        j = objective(tape, z, tape.constant(np.zeros((64, 1))), logdet_bn, base, stop_bn_gradient)
        tape.backward(j)
        return tape.grad(log_alpha)

    live = alpha_grad(False)
    mean, var, v = block.current_statistics()

    def latent_only(la):
        block.log_alpha[...] = la
        return float(np.mean(base.log_prob(block.apply_with_statistics(h, mean, var, v))))

    start = block.log_alpha.copy()
    expected = finite_difference_grad(latent_only, start.copy())
    block.log_alpha[...] = start
    # d/dlog_alpha of sum(log_alpha) is one per dimension; V stays constant
    assert np.max(np.abs(live - (expected + 1.0))) < 1e-6
    assert np.max(np.abs(alpha_grad(True) - expected)) < 1e-6
    print("✅ log_alpha gets the latent term plus the live log-det term")


def test_objective_invariant_to_flow_scale():
    print("🧪 Testing that J is flat along a global rescaling of h...")
    h = correlated_batches(1, 64, 15)[0]
    block = PcaBlock(3)
    base = BaseDensity.non_isotropic([1.0, 0.55, 0.1])

    def scale_grad(stop_bn_gradient):
        tape = Tape()
        log_c = tape.variable(np.zeros((1, 1)))
        scaled = tape.constant(h) * tape.exp(log_c)
        z, logdet_bn = block.forward_tape(tape, scaled, tape.constant(block.log_alpha))
        j = objective(tape, z, tape.scale(log_c, 3.0), logdet_bn, base, stop_bn_gradient)
        tape.backward(j)
        return float(tape.grad(log_c)[0, 0])

    # standardization cancels the scale up to the BatchNorm eps
    assert abs(scale_grad(False)) < 1e-2
    # with the log-det stopped, J rewards expanding h by n per unit log-scale
    assert abs(scale_grad(True) - 3.0) < 1e-2
    print("✅ Scaling h changes neither z nor J")


TESTS = [
    ("BatchNorm Standardizes", test_batchnorm_standardizes),
    ("BatchNorm Logdet", test_batchnorm_logdet_matches_jacobian),
    ("PCA Known Axes", test_pca_axis_aligned_and_rotated),
    ("Sorted Decorrelated", test_forward_sorts_and_decorrelates),
    ("Eval Variance Ordering", test_eval_mode_variance_ordering),
    ("Freeze Identical", test_freeze_identical_batches),
    ("Rotation Concentration", test_freeze_concentrates_rotations),
    ("Eval Mode", test_eval_mode_round_trip_and_single_sample),
    ("Block Errors", test_block_errors),
    ("BatchNorm Logdet Gradient", test_batchnorm_logdet_gradient),
    ("Flow Scale Invariance", test_objective_invariant_to_flow_scale),
]


def main():
    print("🚀 PCA BLOCK TEST SUITE")
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
