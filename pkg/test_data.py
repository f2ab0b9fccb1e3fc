#!/usr/bin/env python3
"""
Tests for dataset generators, IDX parsing and split/batch helpers
"""

import os
import sys
import gzip
import shutil
import tempfile

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from neuralpca.data import (two_spiral, embedded_manifold, synthetic_images, load_idx_images, write_idx_files,
                            make_splits, iterate_batches, batch_partition, iterate_partition,
                            dataset_from_spec)
from neuralpca.error_handling import DataFormatError, NeuralPCAError


def idx_fixture(folder, count=6, side=28, gz=False):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (count, side, side)).astype(np.uint8)
    pixels[0] = 0
    pixels[1] = 255
    labels = np.arange(count) % 10
    images_path = os.path.join(folder, 'images.idx')
    labels_path = os.path.join(folder, 'labels.idx')
    write_idx_files(images_path, labels_path, pixels, labels)
    if gz:
        for path in (images_path, labels_path):
            with open(path, 'rb') as src, gzip.open(path + '.gz', 'wb') as dst:
                shutil.copyfileobj(src, dst)
        images_path, labels_path = images_path + '.gz', labels_path + '.gz'
    return images_path, labels_path, pixels, labels


def expect_format_error(images, labels, **kwargs):
    try:
        load_idx_images(images, labels, **kwargs)
        raise AssertionError("expected DataFormatError")
    except DataFormatError:
        pass


def test_two_spiral():
    print("🧪 Testing Two-Spiral generation...")
    data = two_spiral(1000, seed=3)
    assert data.x.shape == (1000, 2) and data.dim == 2
    assert np.sum(data.labels == 0) == np.sum(data.labels == 1) == 500
    again = two_spiral(1000, seed=3)
    assert np.array_equal(data.x, again.x)
    assert not np.array_equal(data.x, two_spiral(1000, seed=4).x)

    clean = two_spiral(400, noise_std=0.0, turns=1.75, seed=0)
    arm = clean.x[clean.labels == 0]
    radius = np.linalg.norm(arm, axis=1)
    t = radius * 2.0 * np.pi * 1.75
    assert np.allclose(arm, radius[:, None] * np.stack([np.cos(t), np.sin(t)], axis=1), atol=1e-12)
    assert np.allclose(clean.x[clean.labels == 1], -arm)
    try:
        two_spiral(999)
        raise AssertionError("expected rejection of an odd point count")
    except NeuralPCAError:
        pass
    print("✅ Balanced, deterministic spirals with the right geometry")


def test_splits():
    print("🧪 Testing train/val/test splits...")
    splits = make_splits(1000, np.random.default_rng(0))
    sizes = [splits[name].size for name in ('train', 'val', 'test')]
    assert sizes == [700, 100, 200]
    union = np.concatenate(list(splits.values()))
    assert np.array_equal(np.sort(union), np.arange(1000))
    data = two_spiral(1000, seed=0)
    x_val, y_val = data.split('val')
    assert x_val.shape == (100, 2) and y_val.shape == (100,)
    try:
        data.split('holdout')
        raise AssertionError("expected unknown split error")
    except NeuralPCAError:
        pass
    print("✅ Splits are disjoint and cover every point")


def test_embedded_manifold():
    print("🧪 Testing embedded manifold data...")
    exact = embedded_manifold(n_ambient=16, n_intrinsic=4, n_points=2000, noise_std=0.0, seed=1)
    assert exact.x.shape == (2000, 16)
    assert np.linalg.matrix_rank(exact.x, tol=1e-8) == 4

    noisy = embedded_manifold(n_ambient=16, n_intrinsic=4, n_points=2000, noise_std=0.01, seed=1)
    eigvals = np.sort(np.linalg.eigvalsh(np.cov(noisy.x, rowvar=False)))[::-1]
    assert eigvals[:4].sum() / eigvals.sum() >= 0.95
    assert set(np.unique(noisy.labels)) == {0.0, 1.0, 2.0, 3.0}
    try:
        embedded_manifold(n_ambient=4, n_intrinsic=5)
        raise AssertionError("expected rejection of n_intrinsic > n_ambient")
    except NeuralPCAError:
        pass
    print("✅ Points lie near a 4-dimensional subspace")


def test_synthetic_images():
    print("🧪 Testing synthetic images...")
    data = synthetic_images(200, side=8, n_classes=4, seed=0)
    assert data.x.shape == (200, 64) and data.is_image
    assert data.x.min() >= 0.0 and data.x.max() < 1.0
    assert np.array_equal(data.x, synthetic_images(200, side=8, n_classes=4, seed=0).x)
    print("✅ Dequantized pixels stay in [0, 1)")


def test_idx_loading():
    print("🧪 Testing IDX parsing...")
    folder = tempfile.mkdtemp()
    try:
        images, labels, pixels, targets = idx_fixture(folder)
        data = load_idx_images(images, labels, pad_to=32, dequantize_pixels=False)
        assert data.x.shape == (6, 1024) and data.meta['image_shape'] == [32, 32]
        grid = data.x.reshape(6, 32, 32)
        assert np.array_equal(grid[:, 2:30, 2:30], pixels.astype(np.float64))
        assert np.all(grid[:, :2, :] == 0.0) and np.all(grid[:, :, 30:] == 0.0)
        assert np.all(data.x[0] == 0.0)
        assert np.array_equal(data.labels, targets.astype(np.float64))

        unpadded = load_idx_images(images, labels, pad_to=None, dequantize_pixels=False)
        assert unpadded.x.shape == (6, 784)

        noisy = load_idx_images(images, labels, pad_to=None, dequantize_pixels=True, seed=1)
        assert np.all(noisy.x[1] >= 255.0 / 256.0) and np.all(noisy.x[1] < 1.0)
        assert np.all(noisy.x[0] >= 0.0) and np.all(noisy.x[0] < 1.0 / 256.0)

        gz_images, gz_labels, _, _ = idx_fixture(folder, gz=True)
        zipped = load_idx_images(gz_images, gz_labels, dequantize_pixels=False)
        assert np.array_equal(zipped.x, data.x)

        spec = {'kind': 'idx', 'images': images, 'labels': labels, 'pad_to': 32, 'dequantize': False}
        assert np.array_equal(dataset_from_spec(spec).x, data.x)
    finally:
        shutil.rmtree(folder, ignore_errors=True)
    print("✅ IDX files padded, flattened and dequantized")


def test_idx_errors():
    print("🧪 Testing IDX error handling...")
    folder = tempfile.mkdtemp()
    try:
        images, labels, pixels, targets = idx_fixture(folder)
        expect_format_error(os.path.join(folder, 'missing.idx'), labels)
        expect_format_error(images, labels, pad_to=16)

        with open(images, 'rb') as f:
            blob = f.read()
        truncated = os.path.join(folder, 'truncated.idx')
        with open(truncated, 'wb') as f:
            f.write(blob[:-10])
        expect_format_error(truncated, labels)

        bad_magic = os.path.join(folder, 'bad_magic.idx')
        with open(bad_magic, 'wb') as f:
            f.write(b'\x00\x00\x08\x04' + blob[4:])
        expect_format_error(bad_magic, labels)

        other_images = os.path.join(folder, 'other_images.idx')
        other_labels = os.path.join(folder, 'other_labels.idx')
        write_idx_files(other_images, other_labels, pixels[:4], targets[:4])
        expect_format_error(images, other_labels)
    finally:
        shutil.rmtree(folder, ignore_errors=True)
    print("✅ Malformed IDX input rejected")


def test_iterate_batches():
    print("🧪 Testing batch iteration...")
    x = np.arange(25.0).reshape(25, 1)
    batches = list(iterate_batches(x, 10, np.random.default_rng(0)))
    assert [b.shape[0] for b in batches] == [10, 10]
    seen = np.concatenate(batches)[:, 0]
    assert np.unique(seen).size == 20
    full = list(iterate_batches(x, 10, np.random.default_rng(0), drop_last=False))
    assert [b.shape[0] for b in full] == [10, 10, 5]
    assert np.array_equal(np.sort(np.concatenate(full)[:, 0]), x[:, 0])
    try:
        list(iterate_batches(x, 0, np.random.default_rng(0)))
        raise AssertionError("expected rejection of batch size 0")
    except NeuralPCAError:
        pass
    print("✅ Batches are shuffled without repetition")


def test_fixed_partition():
    print("🧪 Testing the fixed batch partition...")
    x = np.arange(55.0).reshape(55, 1)
    partition = batch_partition(55, 10, np.random.default_rng(0))
    assert [idx.size for idx in partition] == [10] * 5
    assert np.unique(np.concatenate(partition)).size == 50
    first = list(iterate_partition(x, partition, np.random.default_rng(1)))
    second = list(iterate_partition(x, partition, np.random.default_rng(2)))
    members = sorted(tuple(np.sort(b[:, 0])) for b in first)
    assert members == sorted(tuple(np.sort(b[:, 0])) for b in second)
    orders = {tuple(tuple(b[:, 0]) for b in iterate_partition(x, partition, np.random.default_rng(s)))
              for s in range(8)}
    assert len(orders) > 1
    print("✅ Epochs reorder the same batches")


TESTS = [
    ("Two Spiral", test_two_spiral),
    ("Splits", test_splits),
    ("Embedded Manifold", test_embedded_manifold),
    ("Synthetic Images", test_synthetic_images),
    ("IDX Loading", test_idx_loading),
    ("IDX Errors", test_idx_errors),
    ("Batch Iteration", test_iterate_batches),
    ("Fixed Partition", test_fixed_partition),
]


def main():
    print("🚀 DATA TEST SUITE")
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
