#!/usr/bin/env python3
"""
Neural-PCA command line
train / extract / classify / mi / sample / interpolate / analyze-rotation / report
"""

import os
import sys
import glob
import time
import argparse
from typing import Dict, List, Optional

import numpy as np

from neuralpca.checkpoint import (build_model, load_checkpoint, load_container, load_latents, load_or_build_dataset,
                                  save_checkpoint, save_container, save_latents)
from neuralpca.config import RunConfig, env_cache_dir, env_output_root, env_seed, env_verbose
from neuralpca.data import SPLIT_NAMES, iterate_batches
from neuralpca.error_handling import CheckpointError, ModelNotFrozenError, UsageError, handle_command_errors
from neuralpca.evaluation import (EVAL_HEADER, SIDES, RepresentationSweep, default_kappa_grid, interpolate_latents,
                                  rotation_distance_histogram, sample_variance_across_outputs, bits_per_dim)
from neuralpca.flow import FlowModel, HouseholderRotation
from neuralpca.pca_block import PcaBlock
from neuralpca.performance import PerformanceMonitor
from neuralpca.trainer import METRICS_HEADER, Trainer, evaluate_nll
from neuralpca.utils import (create_unique_run_folder, ensure_folder, image_grid, parse_int_list, read_csv,
                             save_run_metadata, write_csv_atomic, write_pgm)

ROTATION_HEADER = ['variant', 'batch', 'reference', 'distance']
SUMMARY_HEADER = ['variant', 'metric', 'kappa', 'side', 'value']


def log(message: str):
    if env_verbose():
        print(f"[{time.strftime('%H:%M:%S')}] {message}")


def _resolve_seed(cli_seed: Optional[int], config_seed: int) -> int:
    if cli_seed is not None:
        return cli_seed
    env = env_seed()
    return env if env is not None else config_seed


def _frozen_model(path: str):
    model, run_config, metadata, _ = load_checkpoint(path)
    if not model.is_frozen:
        raise ModelNotFrozenError(f"{path} holds a model without frozen statistics")
    return model, run_config, metadata


def _sides(side: str) -> List[str]:
    if side == 'both':
        return list(SIDES)
    if side not in SIDES:
        raise UsageError(f"--side must be leading, trailing or both, got {side!r}")
    return [side]


# ---- train -------------------------------------------------------------

@handle_command_errors('train')
def cmd_train(args):
    monitor = PerformanceMonitor()
    monitor.start_monitoring()
    run_config = RunConfig.load(args.config)
    seed = _resolve_seed(args.seed, run_config.seed)
    out = args.out or create_unique_run_folder(run_config.variant, env_output_root())[0]
    args.out = ensure_folder(out)
    run_config = run_config.with_overrides(seed=seed, output_dir=out)

    with monitor.phase('data'):
        dataset = load_or_build_dataset(run_config.dataset, run_config.seed, env_cache_dir())
    log(f"📦 Dataset {dataset.meta['generator']}: {dataset.x.shape[0]} points, n={dataset.dim}")

    start_iteration = 0
    optimizer = None
    previous_rows = []
    if args.resume:
        model, saved_config, metadata, optimizer = load_checkpoint(args.resume)
        if saved_config.config_hash != run_config.config_hash and not args.force:
            raise CheckpointError(f"config hash of {args.resume} differs from {args.config}; use --force to resume")
        start_iteration = int(metadata.get('iteration', 0))
        model.train()
        metrics_path = os.path.join(out, 'metrics.csv')
        if os.path.exists(metrics_path):
            previous_rows = [r for r in read_csv(metrics_path, METRICS_HEADER) if int(r['iteration']) <= start_iteration]
        log(f"↩️  Resuming {model.name} from iteration {start_iteration}")
    else:
        model = build_model(run_config, dataset.dim)

    with monitor.phase('training'):
        state = Trainer(run_config, dataset, model, optimizer=optimizer, start_iteration=start_iteration).train()

    with monitor.phase('persist'):
        rows = [[r[h] for h in METRICS_HEADER] for r in previous_rows] + [row.as_csv_row() for row in state.metrics]
        write_csv_atomic(os.path.join(out, 'metrics.csv'), METRICS_HEADER, rows)
        save_checkpoint(os.path.join(out, 'model.npca'), model, run_config, state.optimizer,
                        extra={'iteration': state.iteration, 'best_iteration': state.best_iteration})
        with open(os.path.join(out, 'config.json'), 'w') as f:
            f.write(run_config.to_json())
        x_train, _ = dataset.split('train')
        train_nll = evaluate_nll(model, x_train, run_config.batch_size)
        kind = 'image' if dataset.is_image else 'tabular'
        save_run_metadata(out, {
            'command': 'train',
            'variant': model.name,
            'dim': dataset.dim,
            'seed': seed,
            'config_hash': run_config.config_hash,
            'iterations': state.iteration,
            'best_iteration': state.best_iteration,
            'best_val_nll': state.best_val_nll,
            'eval_train_nll': train_nll,
            'eval_train_units': bits_per_dim(train_nll, dataset.dim, kind),
            'extra_parameters': model.extra_parameter_count,
            'processing_log': state.processing_log,
        })
    monitor.save_summary(out)
    log(f"✅ Checkpoint written to {os.path.join(out, 'model.npca')}")


# ---- extract -----------------------------------------------------------

@handle_command_errors('extract')
def cmd_extract(args):
    model, run_config, metadata = _frozen_model(args.ckpt)
    dataset = load_or_build_dataset(run_config.dataset, run_config.seed, env_cache_dir())
    names = list(SPLIT_NAMES) if args.split == 'all' else [args.split]
    if any(name not in SPLIT_NAMES for name in names):
        raise UsageError(f"--split must be all, train, val or test, got {args.split!r}")
    splits = {}
    for name in names:
        x, labels = dataset.split(name)
        splits[name] = {'z': model.forward(x)[0], 'labels': labels, 'x': x}
        log(f"🧬 {name}: {x.shape[0]} latents")
    save_latents(args.out, splits, {'variant': model.name, 'seed': run_config.seed, 'dim': model.dim,
                                    'config_hash': run_config.config_hash, 'image': dataset.is_image,
                                    'image_shape': dataset.meta.get('image_shape')})
    log(f"✅ Latents written to {args.out}")


# ---- classify / mi -------------------------------------------------------

def _require_splits(splits: Dict, names) -> None:
    missing = [n for n in names if n not in splits]
    if missing:
        raise UsageError(f"latents file lacks splits {missing}; extract with --split all")


def _write_eval_rows(path: str, variant: str, seed: int, rows: List[Dict]):
    write_csv_atomic(path, EVAL_HEADER,
                     [[variant, r['kappa'], r['side'], r['metric'], repr(r['value']), seed] for r in rows])
    log(f"✅ {len(rows)} rows written to {path}")


@handle_command_errors('classify')
def cmd_classify(args):
    splits, metadata = load_latents(args.latents)
    _require_splits(splits, SPLIT_NAMES)
    n = splits['train']['z'].shape[1]
    grid = parse_int_list(args.kappa_grid) if args.kappa_grid else default_kappa_grid(n)
    seed = int(metadata.get('seed', 0))
    sweep = RepresentationSweep(splits, seed=seed, verbose=env_verbose())
    rows = sweep.run(grid, _sides(args.side), 'accuracy', classifier=args.classifier)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.latents)), f'classify_{args.classifier}.csv')
    args.out = out
    _write_eval_rows(out, metadata.get('variant', 'unknown'), seed, rows)


@handle_command_errors('mi')
def cmd_mi(args):
    model, run_config, _ = _frozen_model(args.ckpt)
    splits, metadata = load_latents(args.latents)
    if metadata.get('config_hash') != run_config.config_hash:
        raise CheckpointError(f"{args.latents} was not extracted from {args.ckpt}")
    split = 'test' if 'test' in splits else next(iter(splits))
    n = splits[split]['z'].shape[1]
    grid = parse_int_list(args.kappa_grid) if args.kappa_grid else default_kappa_grid(n)
    sweep = RepresentationSweep(splits, seed=run_config.seed, verbose=env_verbose())
    rows = sweep.run(grid, _sides(args.side), 'mi', mi_split=split)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.latents)), 'mi.csv')
    args.out = out
    _write_eval_rows(out, model.name, run_config.seed, rows)


# ---- sample / interpolate ------------------------------------------------

def _write_images(out: str, name: str, images: np.ndarray, metadata_shape, columns: int = 8):
    if metadata_shape:
        path = os.path.join(out, f'{name}.pgm')
        write_pgm(path, image_grid(np.clip(images, 0.0, 1.0), metadata_shape, columns=columns))
        log(f"🖼️  Image grid written to {path}")


@handle_command_errors('sample')
def cmd_sample(args):
    model, run_config, _ = _frozen_model(args.ckpt)
    out = ensure_folder(args.out)
    if args.count <= 0:
        raise UsageError(f"--count must be positive, got {args.count}")
    seed = _resolve_seed(args.seed, run_config.seed)
    samples = model.sample(args.count, np.random.default_rng(seed))
    save_container(os.path.join(out, 'samples.npca'), {'samples': samples},
                   {'kind': 'samples', 'variant': model.name, 'seed': seed})
    dataset_kind = run_config.dataset['kind']
    if dataset_kind in ('synthetic_images', 'idx'):
        _write_images(out, 'samples', samples, _image_shape(model.dim))
    log(f"✅ {args.count} samples written to {out}")


def _image_shape(n: int):
    side = int(round(np.sqrt(n)))
    return [side, side] if side * side == n else None


@handle_command_errors('interpolate')
def cmd_interpolate(args):
    model, run_config, _ = _frozen_model(args.ckpt)
    out = ensure_folder(args.out)
    result = interpolate_latents(model, block_size=args.block_size, side=args.block, grid=args.grid)
    spread = sample_variance_across_outputs(result['outputs'])
    save_container(os.path.join(out, f'interpolate_{args.block}.npca'),
                   {'lambdas': result['lambdas'], 'latents': result['latents'], 'outputs': result['outputs']},
                   {'kind': 'interpolation', 'variant': model.name, 'side': args.block, 'spread': spread})
    if run_config.dataset['kind'] in ('synthetic_images', 'idx'):
        _write_images(out, f'interpolate_{args.block}', result['outputs'], _image_shape(model.dim),
                      columns=args.grid)
    log(f"✅ {args.grid}-step {args.block} interpolation written to {out} (output variance {spread:.6f})")


# ---- analyze-rotation ----------------------------------------------------

@handle_command_errors('analyze-rotation')
def cmd_analyze_rotation(args):
    model, run_config, _, _ = load_checkpoint(args.ckpt)
    dataset_spec = RunConfig.load(args.dataset).dataset if args.dataset else run_config.dataset
    dataset = load_or_build_dataset(dataset_spec, run_config.seed, env_cache_dir())
    x_train, _ = dataset.split('train')

    layers = model.flow.layers
    learned = model.learned_rotation()
    if learned is not None and layers and isinstance(layers[-1], HouseholderRotation):
        features = FlowModel(model.dim, layers[:-1])
    else:
        features = model.flow
    rotation_block = PcaBlock(model.dim, eps=run_config.bn_eps, use_rotation=True, verbose=env_verbose())
    if model.block is not None:
        rotation_block.log_alpha[...] = model.block.log_alpha
    batches = list(iterate_batches(x_train, run_config.batch_size, np.random.default_rng([run_config.seed, 17])))
    stats = rotation_block.freeze_statistics(features, batches)

    references = {'mean_rotation': stats.v_tilde}
    if learned is not None:
        references['learned_rotation'] = learned
    rows = []
    summary = {}
    for name, reference in references.items():
        hist = rotation_distance_histogram(rotation_block.batch_rotations, reference)
        summary[name] = {k: hist[k] for k in ('mean', 'std', 'min', 'max', 'relative_spread')}
        rows.extend([model.name, m, name, repr(float(d))] for m, d in enumerate(hist['distances']))
    out = ensure_folder(args.out)
    write_csv_atomic(os.path.join(out, 'rotation.csv'), ROTATION_HEADER, rows)
    save_run_metadata(out, {'command': 'analyze-rotation', 'variant': model.name, 'batches': len(batches),
                            'summary': summary, 'projection': stats.projection_report})
    for name, stats_row in summary.items():
        log(f"🧭 {name}: mean distance {stats_row['mean']:.4f} (std {stats_row['std']:.4f})")


# ---- report --------------------------------------------------------------

@handle_command_errors('report')
def cmd_report(args):
    run = args.run
    if not os.path.isdir(run):
        raise UsageError(f"run directory {run} does not exist")
    args.out = run
    summary = []
    variant = 'unknown'
    metadata_path = os.path.join(run, 'run_metadata.json')
    metrics_path = os.path.join(run, 'metrics.csv')
    if os.path.exists(metrics_path):
        metrics = read_csv(metrics_path, METRICS_HEADER)
        checkpoint_meta = load_container(os.path.join(run, 'model.npca'))[1] if os.path.exists(
            os.path.join(run, 'model.npca')) else {}
        variant = checkpoint_meta.get('variant', variant)
        trained = [r for r in metrics if r['train_nll'] != '']
        if trained:
            summary.append([variant, 'final_train_nll', '', '', trained[-1]['train_nll']])
        validated = [float(r['val_nll']) for r in metrics if r['val_nll'] != '']
        if validated:
            summary.append([variant, 'best_val_nll', '', '', repr(min(validated))])
        bpds = [r['bpd'] for r in metrics if r['bpd'] != '']
        if bpds:
            summary.append([variant, 'final_train_bpd', '', '', bpds[-1]])

    for path in sorted(glob.glob(os.path.join(run, '*.csv'))):
        name = os.path.basename(path)
        if name in ('metrics.csv', 'summary.csv'):
            continue
        with open(path) as f:
            header = f.readline().strip().split(',')
        if header == EVAL_HEADER:
            for r in read_csv(path, EVAL_HEADER):
                summary.append([r['variant'], r['metric'], r['kappa'], r['side'], r['value']])
        elif header == ROTATION_HEADER:
            by_reference: Dict[str, List[float]] = {}
            rot_variant = variant
            for r in read_csv(path, ROTATION_HEADER):
                by_reference.setdefault(r['reference'], []).append(float(r['distance']))
                rot_variant = r['variant']
            for reference, values in sorted(by_reference.items()):
                summary.append([rot_variant, f'rotation_distance_mean[{reference}]', '', '', repr(float(np.mean(values)))])
    summary.sort(key=lambda r: (r[0], r[1], int(r[2]) if r[2] != '' else -1, r[3]))
    write_csv_atomic(os.path.join(run, 'summary.csv'), SUMMARY_HEADER, summary)

    print("\n" + "=" * 70)
    print("🎯 RUN SUMMARY")
    print("=" * 70)
    for row in summary:
        cell = f"{row[1]} k={row[2]} {row[3]}".strip() if row[2] != '' else row[1]
        print(f"{row[0]:<16} {cell:.<40} {float(row[4]):.4f}")
    print("-" * 70)


# ---- entry point ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='neuralpca', description='Neural-PCA flows: train, evaluate, analyze')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train a model variant')
    p.add_argument('--config', required=True)
    p.add_argument('--out')
    p.add_argument('--seed', type=int)
    p.add_argument('--resume', help='checkpoint to continue from')
    p.add_argument('--force', action='store_true', help='resume despite a config hash mismatch')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('extract', help='write latents of a trained model')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--split', default='all')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser('classify', help='rotation_block accuracy on corrupted latents')
    p.add_argument('--latents', required=True)
    p.add_argument('--kappa-grid', dest='kappa_grid')
    p.add_argument('--side', default='both')
    p.add_argument('--classifier', choices=['mlp', 'svm'], default='svm')
    p.add_argument('--out')
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser('mi', help='mutual information between inputs and corrupted latents')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--latents', required=True)
    p.add_argument('--kappa-grid', dest='kappa_grid')
    p.add_argument('--side', default='both')
    p.add_argument('--out')
    p.set_defaults(func=cmd_mi)

    p = sub.add_parser('sample', help='draw samples in data space')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--count', type=int, default=64)
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser('interpolate', help='sweep leading or trailing latent dims')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--block', choices=list(SIDES), default='leading')
    p.add_argument('--block-size', dest='block_size', type=int)
    p.add_argument('--grid', type=int, default=9)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser('analyze-rotation', help='distances between batch rotations and reference rotations')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--dataset', help='run config whose dataset section replaces the checkpoint one')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_analyze_rotation)

    p = sub.add_parser('report', help='consolidate a run folder into summary.csv')
    p.add_argument('--run', required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
