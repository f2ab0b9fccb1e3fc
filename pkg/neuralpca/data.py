"""
Datasets: Two-Spiral, embedded low-dimensional manifolds, synthetic byte images and IDX image files
Every generator is deterministic given its seed and returns train/val/test index splits
"""

import os
import gzip
import struct
from dataclasses import dataclass, field
from typing import Dict, Any, Iterator, List, Optional, Tuple

import numpy as np

from .error_handling import DataFormatError, NeuralPCAError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)
SPLIT_NAMES = ('train', 'val', 'test')


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    splits: Dict[str, np.ndarray]
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def is_image(self) -> bool:
        return bool(self.meta.get('image', False))

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise NeuralPCAError('data', f"unknown split {name!r}")
        idx = self.splits[name]
        return self.x[idx], self.labels[idx]


def make_splits(count: int, rng: np.random.Generator, fractions=DEFAULT_FRACTIONS) -> Dict[str, np.ndarray]:
    """Disjoint sorted index sets covering 0..count-1"""
    if count < len(SPLIT_NAMES):
        raise NeuralPCAError('data', f"need at least {len(SPLIT_NAMES)} points to split, got {count}")
    perm = rng.permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    bounds = [0, n_train, n_train + n_val, count]
    return {name: np.sort(perm[bounds[i]:bounds[i + 1]]) for i, name in enumerate(SPLIT_NAMES)}


def iterate_batches(x: np.ndarray, batch_size: int, rng: np.random.Generator,
                    drop_last: bool = True) -> Iterator[np.ndarray]:
    """One shuffled pass over x"""
    if batch_size < 1:
        raise NeuralPCAError('data', f"batch size must be positive, got {batch_size}")
    perm = rng.permutation(x.shape[0])
    stop = x.shape[0] - x.shape[0] % batch_size if drop_last else x.shape[0]
    for start in range(0, stop, batch_size):
        yield x[perm[start:start + batch_size]]


def batch_partition(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Disjoint index batches drawn once per run; the remainder of count // batch_size is dropped"""
    if batch_size < 1:
        raise NeuralPCAError('data', f"batch size must be positive, got {batch_size}")
    perm = rng.permutation(count)
    return [perm[start:start + batch_size] for start in range(0, count - count % batch_size, batch_size)]


def iterate_partition(x: np.ndarray, partition: List[np.ndarray], rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One pass over a fixed partition, batches visited in a shuffled order"""
    for i in rng.permutation(len(partition)):
        yield x[partition[i]]


def two_spiral(n_points: int = 10000, noise_std: float = 0.02, turns: float = 1.75, seed: int = 0) -> Dataset:
    """Two interleaved spirals; class 1 is the point reflection of class 0"""
    if n_points <= 0 or n_points % 2:
        raise NeuralPCAError('data', f"n_points must be positive and even, got {n_points}")
    rng = np.random.default_rng(seed)
    half = n_points // 2
    t = rng.uniform(0.0, 2.0 * np.pi * turns, size=half)
    r = t / (2.0 * np.pi * turns)
    arm = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    x = np.concatenate([arm, -arm], axis=0)
    x = x + noise_std * rng.standard_normal(x.shape)
    labels = np.concatenate([np.zeros(half), np.ones(half)])
    return Dataset(x=x, labels=labels, splits=make_splits(n_points, rng),
                   meta={'generator': 'two_spiral', 'n_points': n_points, 'noise_std': noise_std,
                         'turns': turns, 'seed': seed, 'image': False})


def embedded_manifold(n_ambient: int = 16, n_intrinsic: int = 4, n_points: int = 6000, noise_std: float = 0.01,
                      n_classes: int = 4, seed: int = 0, separation: float = 3.0) -> Dataset:
    """Class-conditional Gaussian mixture in R^n_intrinsic, rotated into R^n_ambient plus off-manifold noise"""
    if not 0 < n_intrinsic <= n_ambient:
        raise NeuralPCAError('data', f"need 0 < n_intrinsic <= n_ambient, got {n_intrinsic}, {n_ambient}")
    if n_classes < 1 or n_points < n_classes:
        raise NeuralPCAError('data', f"invalid n_classes {n_classes} for {n_points} points")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n_ambient, n_ambient)))
    embedding = q[:, :n_intrinsic]

    centers = separation * rng.standard_normal((n_classes, n_intrinsic))
    labels = np.arange(n_points) % n_classes
    latent = centers[labels] + rng.standard_normal((n_points, n_intrinsic))
    x = latent @ embedding.T
    if noise_std > 0:
        x = x + noise_std * rng.standard_normal(x.shape)
    return Dataset(x=x, labels=labels.astype(np.float64), splits=make_splits(n_points, rng),
                   meta={'generator': 'embedded_manifold', 'n_ambient': n_ambient, 'n_intrinsic': n_intrinsic,
                         'n_points': n_points, 'noise_std': noise_std, 'n_classes': n_classes, 'seed': seed,
                         'separation': separation, 'embedding': embedding, 'image': False})


def dequantize(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """(p + U[0, 1)) / 256, strictly inside [0, 1)"""
    return (pixels.astype(np.float64) + rng.uniform(0.0, 1.0, size=pixels.shape)) / 256.0


def synthetic_images(n_points: int = 2000, side: int = 16, n_classes: int = 2, seed: int = 0) -> Dataset:
    """Byte images of noisy stripes whose orientation and frequency encode the class"""
    if side < 2 or n_classes < 1:
        raise NeuralPCAError('data', f"invalid image side {side} or class count {n_classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_points) % n_classes
    rows, cols = np.mgrid[0:side, 0:side]
    pixels = np.empty((n_points, side * side))
    for i, label in enumerate(labels):
        freq = 1 + label // 2
        coord = rows if label % 2 == 0 else cols
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pattern = 0.5 + 0.4 * np.sin(2.0 * np.pi * freq * coord / side + phase)
        noisy = pattern + 0.05 * rng.standard_normal(pattern.shape)
        pixels[i] = np.clip(np.round(255.0 * noisy), 0, 255).ravel()
    x = dequantize(pixels, rng)
    return Dataset(x=x, labels=labels.astype(np.float64), splits=make_splits(n_points, rng),
                   meta={'generator': 'synthetic_images', 'n_points': n_points, 'side': side,
                         'n_classes': n_classes, 'seed': seed, 'image': True, 'image_shape': [side, side]})


def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise DataFormatError(f"file not found: {path}")
    opener = gzip.open if path.endswith('.gz') else open
    with opener(path, 'rb') as f:
        return f.read()


def _parse_idx_images(blob: bytes, path: str) -> np.ndarray:
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated IDX image header")
    magic, count, rows, cols = struct.unpack('>IIII', blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad image magic 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(blob) < expected:
        raise DataFormatError(f"{path}: truncated, expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def _parse_idx_labels(blob: bytes, path: str) -> np.ndarray:
    if len(blob) < 8:
        raise DataFormatError(f"{path}: truncated IDX label header")
    magic, count = struct.unpack('>II', blob[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(blob) < 8 + count:
        raise DataFormatError(f"{path}: truncated, expected {8 + count} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=8)


def load_idx_images(images: str, labels: str, pad_to: Optional[int] = 32, dequantize_pixels: bool = True,
                    seed: int = 0) -> Dataset:
    """Parse an IDX image/label pair (plain or gzipped), zero-pad, flatten row-major and dequantize"""
    pixels = _parse_idx_images(_read_bytes(images), images)
    targets = _parse_idx_labels(_read_bytes(labels), labels)
    if pixels.shape[0] != targets.shape[0]:
        raise DataFormatError(f"{pixels.shape[0]} images but {targets.shape[0]} labels")

    count, rows, cols = pixels.shape
    if pad_to:
        if pad_to < rows or pad_to < cols:
            raise DataFormatError(f"pad_to={pad_to} is smaller than the {rows}x{cols} images")
        top, left = (pad_to - rows) // 2, (pad_to - cols) // 2
        padded = np.zeros((count, pad_to, pad_to), dtype=np.uint8)
        padded[:, top:top + rows, left:left + cols] = pixels
        pixels = padded
    side_r, side_c = pixels.shape[1:]
    flat = pixels.reshape(count, side_r * side_c)

    rng = np.random.default_rng(seed)
    x = dequantize(flat, rng) if dequantize_pixels else flat.astype(np.float64)
    return Dataset(x=x, labels=targets.astype(np.float64), splits=make_splits(count, rng),
                   meta={'generator': 'idx', 'images': images, 'labels': labels, 'pad_to': pad_to,
                         'dequantize': dequantize_pixels, 'seed': seed, 'image': True,
                         'image_shape': [int(side_r), int(side_c)]})


def dataset_from_spec(spec: Dict[str, Any], seed: int = 0) -> Dataset:
    """Build a dataset from the `dataset` section of a run config"""
    params = dict(spec)
    kind = params.pop('kind')
    params.setdefault('seed', seed)
    if kind == 'two_spiral':
        return two_spiral(**params)
    if kind == 'embedded_manifold':
        return embedded_manifold(**params)
    if kind == 'synthetic_images':
        return synthetic_images(**params)
    if kind == 'idx':
        if 'dequantize' in params:
            params['dequantize_pixels'] = params.pop('dequantize')
        return load_idx_images(**params)
    raise NeuralPCAError('data', f"unknown dataset kind {kind!r}")


def write_idx_files(images_path: str, labels_path: str, pixels: np.ndarray, labels: np.ndarray):
    """Write an IDX image/label pair, used for fixtures"""
    pixels = np.asarray(pixels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    with open(images_path, 'wb') as f:
        f.write(struct.pack('>IIII', IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, 'wb') as f:
        f.write(struct.pack('>II', IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
