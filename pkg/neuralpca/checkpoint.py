"""
Binary tensor container used for checkpoints, latent files and dataset caches

Layout: b"NPCA" | uint32 LE version | uint32 LE metadata length | JSON metadata |
little-endian float64 tensors concatenated in the order metadata["tensors"] lists them
"""

import os
import json
import struct
import hashlib
from collections import OrderedDict
from typing import Dict, Any, Tuple, Optional

import numpy as np

from .autodiff import AdamState
from .config import RunConfig
from .data import SPLIT_NAMES, Dataset, dataset_from_spec
from .error_handling import CheckpointError, ConfigError
from .flow import ModelVariant, build_variant
from .pca_block import PcaStatistics

MAGIC = b"NPCA"
FORMAT_VERSION = 1
HEADER = struct.Struct('<4sII')


def save_container(path: str, tensors: Dict[str, np.ndarray], metadata: Dict[str, Any]):
    """Write atomically: temp file in the same folder, then rename"""
    entries = []
    payload = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype='<f8'))
        entries.append({'name': name, 'shape': list(arr.shape)})
        payload.append(arr.tobytes())
    meta = dict(metadata)
    meta['tensors'] = entries
    meta_bytes = json.dumps(meta, sort_keys=True).encode('utf-8')

    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        for chunk in payload:
            f.write(chunk)
    os.replace(tmp_path, path)


def load_container(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}")
    if len(blob) < HEADER.size:
        raise CheckpointError(f"{path} is truncated (no header)")
    magic, version, meta_len = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path} has bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has unsupported format version {version}")
    offset = HEADER.size
    if len(blob) < offset + meta_len:
        raise CheckpointError(f"{path} is truncated (metadata)")
    try:
        metadata = json.loads(blob[offset:offset + meta_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has corrupt metadata: {e}")
    offset += meta_len

    tensors = OrderedDict()
    for entry in metadata.get('tensors', []):
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if len(blob) < offset + nbytes:
            raise CheckpointError(f"{path} is truncated (tensor {entry['name']})")
        tensors[entry['name']] = np.frombuffer(blob, dtype='<f8', count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - offset} trailing bytes")
    return tensors, metadata


# ---- model checkpoints -------------------------------------------------

def model_tensors(model: ModelVariant) -> Dict[str, np.ndarray]:
    tensors = OrderedDict((f"param.{name}", value) for name, value in model.parameters().items())
    block = model.block
    if block is not None and block.stats is not None:
        tensors['stats.mu_bar'] = block.stats.mu_bar
        tensors['stats.sigma_bar'] = block.stats.sigma_bar
        if block.stats.v_tilde is not None:
            tensors['stats.v_tilde'] = block.stats.v_tilde
        if block.batch_rotations:
            tensors['stats.batch_rotations'] = np.stack(block.batch_rotations)
    return tensors


def save_checkpoint(path: str, model: ModelVariant, run_config: RunConfig,
                    optimizer: Optional[AdamState] = None, extra: Optional[Dict[str, Any]] = None):
    tensors = model_tensors(model)
    if optimizer is not None:
        for name in optimizer.m:
            tensors[f"adam_m.{name}"] = optimizer.m[name]
            tensors[f"adam_v.{name}"] = optimizer.v[name]
    block = model.block
    metadata = {
        'kind': 'model',
        'variant': model.name,
        'dim': model.dim,
        'config': run_config.to_dict(),
        'config_hash': run_config.config_hash,
        'has_stats': bool(block is not None and block.stats is not None),
        'has_rotation': bool(block is not None and block.stats is not None and block.stats.v_tilde is not None),
        'stats_batches': block.stats.batch_count if block is not None and block.stats is not None else 0,
        'actnorm_initialized': [layer.initialized for layer in model.flow.actnorm_layers()],
        'optimizer': {'step': optimizer.step, 'skipped': optimizer.skipped} if optimizer is not None else None,
    }
    if extra:
        metadata.update(extra)
    save_container(path, tensors, metadata)


def load_checkpoint(path: str) -> Tuple[ModelVariant, RunConfig, Dict[str, Any], Optional[AdamState]]:
    """Rebuild the model variant and restore every parameter and statistic bit-exactly"""
    tensors, metadata = load_container(path)
    if metadata.get('kind') != 'model':
        raise CheckpointError(f"{path} is not a model checkpoint")
    try:
        run_config = RunConfig.from_dict(metadata['config'])
    except (KeyError, ConfigError) as e:
        raise CheckpointError(f"{path} carries an invalid config: {e}")

    model = build_model(run_config, int(metadata['dim']))
    params = model.parameters()
    for name, value in params.items():
        key = f"param.{name}"
        if key not in tensors or tensors[key].shape != value.shape:
            raise CheckpointError(f"{path} is missing parameter {name} or its shape differs")
        value[...] = tensors[key]
    for layer, flag in zip(model.flow.actnorm_layers(), metadata.get('actnorm_initialized', [])):
        layer.initialized = bool(flag)

    if metadata.get('has_stats'):
        if model.block is None:
            raise CheckpointError(f"{path} has statistics but variant {model.name} has no PCA block")
        rotations = tensors.get('stats.batch_rotations')
        model.block.stats = PcaStatistics(mu_bar=tensors['stats.mu_bar'], sigma_bar=tensors['stats.sigma_bar'],
                                          v_tilde=tensors.get('stats.v_tilde'),
                                          batch_count=int(metadata.get('stats_batches', 0)))
        model.block.batch_rotations = list(rotations) if rotations is not None else []
        model.block.mode = 'eval'

    optimizer = None
    if metadata.get('optimizer'):
        optimizer = AdamState(step=int(metadata['optimizer']['step']),
                              skipped=int(metadata['optimizer']['skipped']))
        for name in params:
            if f"adam_m.{name}" in tensors:
                optimizer.m[name] = tensors[f"adam_m.{name}"].copy()
                optimizer.v[name] = tensors[f"adam_v.{name}"].copy()
    return model, run_config, metadata, optimizer


def build_model(run_config: RunConfig, dim: int) -> ModelVariant:
    return build_variant(run_config.variant, dim, depth=run_config.depth, width=run_config.width,
                         seed=run_config.seed, sigma_max=run_config.sigma_max,
                         sigma_min=run_config.sigma_min, actnorm=run_config.actnorm,
                         bn_eps=run_config.bn_eps)


# ---- latent files ------------------------------------------------------

def save_latents(path: str, splits: Dict[str, Dict[str, np.ndarray]], metadata: Dict[str, Any]):
    """splits maps split name to {'z': ..., 'labels': ..., optionally 'x': ...}"""
    tensors = OrderedDict()
    for split, arrays in splits.items():
        for key, value in arrays.items():
            tensors[f"{key}.{split}"] = value
    meta = dict(metadata)
    meta['kind'] = 'latents'
    meta['splits'] = list(splits)
    save_container(path, tensors, meta)


def load_latents(path: str) -> Tuple[Dict[str, Dict[str, np.ndarray]], Dict[str, Any]]:
    tensors, metadata = load_container(path)
    if metadata.get('kind') != 'latents':
        raise CheckpointError(f"{path} is not a latents file")
    splits = OrderedDict((split, {}) for split in metadata.get('splits', []))
    for name, value in tensors.items():
        key, _, split = name.partition('.')
        if split not in splits:
            raise CheckpointError(f"{path} has tensor {name} for an undeclared split")
        splits[split][key] = value
    return splits, metadata


# ---- dataset cache -----------------------------------------------------

def dataset_cache_key(spec: Dict[str, Any], seed: int) -> str:
    doc = json.dumps({'dataset': spec, 'seed': seed}, sort_keys=True)
    return hashlib.sha256(doc.encode('utf-8')).hexdigest()[:16]


def save_dataset_cache(path: str, dataset: Dataset):
    tensors = OrderedDict([('x', dataset.x), ('labels', dataset.labels)])
    for name in SPLIT_NAMES:
        tensors[f"split.{name}"] = dataset.splits[name]
    meta = {}
    for key, value in dataset.meta.items():
        if isinstance(value, np.ndarray):
            tensors[f"meta.{key}"] = value
        else:
            meta[key] = value
    save_container(path, tensors, {'kind': 'dataset', 'meta': meta})


def load_dataset_cache(path: str) -> Dataset:
    tensors, metadata = load_container(path)
    if metadata.get('kind') != 'dataset':
        raise CheckpointError(f"{path} is not a dataset cache")
    meta = dict(metadata.get('meta', {}))
    for name, value in tensors.items():
        if name.startswith('meta.'):
            meta[name[len('meta.'):]] = value
    try:
        splits = {name: tensors[f"split.{name}"].astype(np.int64) for name in SPLIT_NAMES}
        return Dataset(x=tensors['x'], labels=tensors['labels'], splits=splits, meta=meta)
    except KeyError as e:
        raise CheckpointError(f"{path} lacks tensor {e}")


def load_or_build_dataset(spec: Dict[str, Any], seed: int, cache_dir: Optional[str] = None) -> Dataset:
    """dataset_from_spec, memoized as a container file under cache_dir when one is given"""
    if not cache_dir:
        return dataset_from_spec(spec, seed=seed)
    path = os.path.join(cache_dir, f"dataset_{spec['kind']}_{dataset_cache_key(spec, seed)}.npca")
    if os.path.exists(path):
        return load_dataset_cache(path)
    dataset = dataset_from_spec(spec, seed=seed)
    save_dataset_cache(path, dataset)
    return dataset
