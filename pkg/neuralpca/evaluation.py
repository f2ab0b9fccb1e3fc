"""
Usefulness metrics for learned representations
Corrupted representations, MLP / linear SVM classifiers, density-ratio mutual information,
post-hoc PCA, rotation-distance analysis, latent interpolation and bits per dimension
"""

import math
import time
from dataclasses import dataclass
from typing import Dict, Any, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, AdamState, adam_step, no_grad_tape
from .error_handling import ModelNotFrozenError, NeuralPCAError, ShapeError
from .linalg import svd_full, frobenius
from .performance import ConcurrencyManager

SIDES = ('leading', 'trailing')
EVAL_HEADER = ['variant', 'kappa', 'side', 'metric', 'value', 'seed']
EMBED_INIT_SCALE = 0.1
RATIO_BIAS_INIT = -3.0


# ---- Corrupted representations -----------------------------------------

@dataclass
class CorruptedRep:
    source: np.ndarray
    kappa: int
    side: str
    data: np.ndarray


def corrupt(z, kappa: int, side: str) -> CorruptedRep:
    """Drop the leading or trailing kappa latent dimensions"""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"latents must be 2-D, got {z.shape}")
    n = z.shape[1]
    if side not in SIDES:
        raise NeuralPCAError('evaluation', f"side must be one of {SIDES}, got {side!r}")
    if not 0 <= kappa <= n - 1:
        raise NeuralPCAError('evaluation', f"kappa must lie in [0, {n - 1}], got {kappa}")
    data = z[:, kappa:] if side == 'leading' else z[:, :n - kappa]
    return CorruptedRep(source=z, kappa=kappa, side=side, data=data)


def default_kappa_grid(n: int, points: int = 8) -> List[int]:
    """Evenly spaced kappa values from 0 to n-1 inclusive"""
    return sorted({int(round(k)) for k in np.linspace(0, n - 1, points)})


def _standardizer(x_train: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def _encode_labels(y_train, *others):
    classes = np.unique(y_train)
    if classes.size < 2:
        raise NeuralPCAError('evaluation', "training labels contain a single class")
    lookup = {c: i for i, c in enumerate(classes)}
    encoded = [np.array([lookup.get(v, -1) for v in y], dtype=np.int64) for y in (y_train,) + others]
    return classes, encoded


# ---- MLP classifier --------------------------------------------------

class MlpClassifier:
    """(n-kappa) -> 200 -> ReLU -> Dropout(0.2) -> n_classes, cross-entropy with Adam"""

    def __init__(self, hidden: int = 200, dropout: float = 0.2, epochs: int = 100, lr: float = 1e-3,
                 batch_size: int = 128, seed: int = 0):
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.params: Dict[str, np.ndarray] = {}
        self.best_val_accuracy = None

    def _logits(self, tape: Tape, x, params, mask=None):
        h = tape.relu(x @ params['w1'] + params['b1'])
        if mask is not None:
            h = h * tape.constant(mask)
        return h @ params['w2'] + params['b2']

    def fit(self, x_train, y_train, x_val, y_val) -> 'MlpClassifier':
        self.classes, (t_train, t_val) = _encode_labels(y_train, y_val)
        self.mean, self.scale = _standardizer(x_train)
        xs = (x_train - self.mean) / self.scale
        xv = (x_val - self.mean) / self.scale
        d, k = xs.shape[1], self.classes.size
        rng = np.random.default_rng(self.seed)
        self.params = {
            'w1': rng.standard_normal((d, self.hidden)) * np.sqrt(2.0 / d),
            'b1': np.zeros((1, self.hidden)),
            'w2': rng.standard_normal((self.hidden, k)) / np.sqrt(self.hidden),
            'b2': np.zeros((1, k)),
        }
        onehot = np.eye(k)[t_train]
        state = AdamState()
        best = None
        for _ in range(self.epochs):
            perm = rng.permutation(xs.shape[0])
            for start in range(0, xs.shape[0], self.batch_size):
                idx = perm[start:start + self.batch_size]
                tape = Tape()
                pv = {name: tape.variable(v) for name, v in self.params.items()}
                keep = (rng.uniform(size=(idx.size, self.hidden)) >= self.dropout) / (1.0 - self.dropout)
                logits = self._logits(tape, tape.constant(xs[idx]), pv, keep)
                picked = tape.sum(logits * tape.constant(onehot[idx]), axis=1)
                loss = tape.mean(tape.logsumexp(logits) - picked)
                tape.backward(loss)
                adam_step(self.params, {n: tape.grad(v) for n, v in pv.items()}, state, self.lr)
            accuracy = float(np.mean(self._predict_index(xv) == t_val))
            if best is None or accuracy > best:
                best = accuracy
                best_params = {name: v.copy() for name, v in self.params.items()}
        if best is not None:
            self.params = best_params
        self.best_val_accuracy = best
        return self

    def _predict_index(self, xs) -> np.ndarray:
        h = np.maximum(xs @ self.params['w1'] + self.params['b1'], 0.0)
        return np.argmax(h @ self.params['w2'] + self.params['b2'], axis=1)

    def predict(self, x) -> np.ndarray:
        return self.classes[self._predict_index((np.asarray(x) - self.mean) / self.scale)]

    def score(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def mlp_classify(x_train, y_train, x_val, y_val, x_test, y_test, seed: int = 0, **kwargs) -> float:
    return MlpClassifier(seed=seed, **kwargs).fit(x_train, y_train, x_val, y_val).score(x_test, y_test)


# ---- Linear SVM ------------------------------------------------------

class LinearSvm:
    """Hinge-loss linear classifier trained with mini-batch Pegasos, one-vs-rest for multiclass"""

    def __init__(self, lam: float = 1e-4, epochs: int = 200, batch_size: int = 64, seed: int = 0):
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _pegasos(self, x: np.ndarray, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        w = np.zeros(x.shape[1])
        radius = 1.0 / math.sqrt(self.lam)
        k = 0
        for _ in range(self.epochs):
            perm = rng.permutation(x.shape[0])
            for start in range(0, x.shape[0], self.batch_size):
                idx = perm[start:start + self.batch_size]
                k += 1
                eta = 1.0 / (self.lam * k)
                xb, tb = x[idx], t[idx]
                violated = tb * (xb @ w) < 1.0
                subgrad = self.lam * w - (tb[violated] @ xb[violated]) / idx.size
                w = w - eta * subgrad
                norm = np.linalg.norm(w)
                if norm > radius:
                    w *= radius / norm
        return w

    def fit(self, x, y) -> 'LinearSvm':
        x = np.asarray(x, dtype=np.float64)
        self.classes, (targets,) = _encode_labels(y)
        self.mean, self.scale = _standardizer(x)
        xa = np.hstack([(x - self.mean) / self.scale, np.ones((x.shape[0], 1))])
        rng = np.random.default_rng(self.seed)
        if self.classes.size == 2:
            self.weights = self._pegasos(xa, np.where(targets == 1, 1.0, -1.0), rng)[:, None]
        else:
            self.weights = np.stack([self._pegasos(xa, np.where(targets == c, 1.0, -1.0), rng)
                                     for c in range(self.classes.size)], axis=1)
        return self

    def decision_function(self, x) -> np.ndarray:
        xs = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return xs @ self.weights[:-1] + self.weights[-1]

    def predict(self, x) -> np.ndarray:
        scores = self.decision_function(x)
        if self.classes.size == 2:
            return self.classes[(scores[:, 0] > 0).astype(np.int64)]
        return self.classes[np.argmax(scores, axis=1)]

    def score(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def boundary(self, column: int = 0) -> Tuple[np.ndarray, float]:
        """Normal w and offset b of w.x + b = 0 in the original input coordinates"""
        w_std = self.weights[:-1, column]
        w = w_std / self.scale
        b = float(self.weights[-1, column] - np.sum(w_std * self.mean / self.scale))
        return w, b

    def boundary_angle(self, column: int = 0) -> float:
        """Angle in radians between the boundary normal and the leading axis, in [0, pi/2]"""
        w, _ = self.boundary(column)
        norm = np.linalg.norm(w)
        if norm == 0:
            return float('nan')
        return float(np.arccos(min(1.0, abs(w[0]) / norm)))


def linear_svm_classify(x_train, y_train, x_val, y_val, x_test, y_test, seed: int = 0, **kwargs) -> float:
    return LinearSvm(seed=seed, **kwargs).fit(x_train, y_train).score(x_test, y_test)


# ---- Mutual information ------------------------------------------------

class DensityRatioMiEstimator:
    """Fits r(x, z) = 1 + softplus(<phi(f(x)), phi(z)> + b) to p(x, z) / p(x) p(z)

    Training maximizes E_joint[r] - 0.5 E_marginals[r^2], with marginal pairs
    formed by permuting z inside each batch. The estimate is the held-out mean of log r.
    """

    def __init__(self, width: int = 128, embed_dim: int = 64, steps: int = 3000, batch_size: int = 256,
                 lr: float = 1e-3, holdout: float = 0.2, seed: int = 0):
        self.width = width
        self.embed_dim = embed_dim
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.holdout = holdout
        self.seed = seed
        self.params: Dict[str, np.ndarray] = {}

    def _init(self, dx: int, dz: int, rng: np.random.Generator):
        def dense(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in), np.zeros((1, fan_out))
        self.params = {}
        for prefix, (d_in, d_out) in {'f': (dx, dz), 'phi': (dz, self.embed_dim)}.items():
            self.params[f'{prefix}.w1'], self.params[f'{prefix}.b1'] = dense(d_in, self.width)
            self.params[f'{prefix}.w2'], self.params[f'{prefix}.b2'] = dense(self.width, d_out)
        # r starts just above 1 with small embeddings
        self.params['phi.w2'] *= EMBED_INIT_SCALE
        self.params['bias'] = np.full((1, 1), RATIO_BIAS_INIT)

    def _net(self, tape, x, p, prefix):
        h = tape.relu(x @ p[f'{prefix}.w1'] + p[f'{prefix}.b1'])
        return h @ p[f'{prefix}.w2'] + p[f'{prefix}.b2']

    def _ratio(self, tape, x, z, p):
        ex = self._net(tape, self._net(tape, x, p, 'f'), p, 'phi')
        ez = self._net(tape, z, p, 'phi')
        return tape.shift(tape.softplus(tape.sum(ex * ez, axis=1) + p['bias']), 1.0)

    def ratio(self, x, z) -> np.ndarray:
        tape = no_grad_tape()
        pv = {name: tape.constant(v) for name, v in self.params.items()}
        xs = tape.constant((np.asarray(x) - self.x_mean) / self.x_scale)
        zs = tape.constant((np.asarray(z) - self.z_mean) / self.z_scale)
        return self._ratio(tape, xs, zs, pv).value.ravel()

    def fit(self, x, z) -> float:
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if z.ndim == 1:
            z = z[:, None]
        if x.shape[0] != z.shape[0]:
            raise ShapeError(f"x has {x.shape[0]} rows, z has {z.shape[0]}")
        if x.shape[0] < 2:
            raise NeuralPCAError('evaluation', "MI estimation needs at least 2 paired samples")

        rng = np.random.default_rng(self.seed)
        perm = rng.permutation(x.shape[0])
        n_hold = min(x.shape[0] - 2, max(1, int(round(self.holdout * x.shape[0]))))
        train_idx, hold_idx = perm[n_hold:], perm[:n_hold]
        self.x_mean, self.x_scale = _standardizer(x[train_idx])
        # one scale for all of z keeps the relative variances of the latents
        self.z_mean = z[train_idx].mean(axis=0)
        spread = float(np.sqrt(np.mean(z[train_idx].var(axis=0))))
        self.z_scale = np.full(z.shape[1], spread if spread > 1e-12 else 1.0)
        xs = (x - self.x_mean) / self.x_scale
        zs = (z - self.z_mean) / self.z_scale
        self._init(xs.shape[1], zs.shape[1], np.random.default_rng([self.seed, 1]))

        state = AdamState()
        batch = min(self.batch_size, train_idx.size)
        for _ in range(self.steps):
            idx = rng.choice(train_idx, size=batch, replace=False)
            shuffled = idx[rng.permutation(batch)]
            tape = Tape()
            pv = {name: tape.variable(v) for name, v in self.params.items()}
            xb = tape.constant(xs[idx])
            joint = self._ratio(tape, xb, tape.constant(zs[idx]), pv)
            marginal = self._ratio(tape, xb, tape.constant(zs[shuffled]), pv)
            loss = tape.mean(tape.scale(marginal * marginal, 0.5)) - tape.mean(joint)
            tape.backward(loss)
            adam_step(self.params, {n: tape.grad(v) for n, v in pv.items()}, state, self.lr)

        self.estimate = float(np.mean(np.log(self.ratio(x[hold_idx], z[hold_idx]))))
        return self.estimate


def estimate_mi(x, zk, seed: int = 0, **kwargs) -> float:
    """MI between x and a (possibly corrupted) representation, in nats"""
    data = zk.data if isinstance(zk, CorruptedRep) else zk
    return DensityRatioMiEstimator(seed=seed, **kwargs).fit(x, data)


# ---- Post-hoc PCA and rotation analysis --------------------------------

def post_pca(train, test=None, degenerate_gap: float = 0.1) -> Dict[str, Any]:
    """Rotate latents onto the principal axes of the training latents"""
    train = np.asarray(train, dtype=np.float64)
    mean = train.mean(axis=0)
    svd = svd_full(train - mean)
    v = svd.v
    sigma = svd.sigma
    rank_deficient = bool(sigma[-1] <= 1e-10 * max(sigma[0], 1e-300))
    gaps = (sigma[:-1] - sigma[1:]) / np.maximum(sigma[:-1], 1e-300)
    degenerate = bool(rank_deficient or (gaps.size > 0 and gaps.min() < degenerate_gap))
    result = {
        'v_post': v,
        'mean': mean,
        'singular_values': sigma,
        'diagnostic': frobenius(np.abs(v) - np.eye(v.shape[0])),
        'degenerate': degenerate,
        'rank_deficient': rank_deficient,
        'train': (train - mean) @ v,
    }
    if test is not None:
        result['test'] = (np.asarray(test, dtype=np.float64) - mean) @ v
    return result


def rotation_distance_histogram(rotations: Sequence[np.ndarray], reference: np.ndarray,
                                bins: int = 20) -> Dict[str, Any]:
    """Chordal distances |R - V_m|_F with summary statistics and a histogram"""
    if len(rotations) == 0:
        raise NeuralPCAError('evaluation', "no rotations to compare")
    distances = np.array([frobenius(reference - v) for v in rotations])
    counts, edges = np.histogram(distances, bins=bins)
    mean = float(distances.mean())
    return {
        'distances': distances,
        'mean': mean,
        'std': float(distances.std()),
        'min': float(distances.min()),
        'max': float(distances.max()),
        'relative_spread': float(distances.std() / mean) if mean > 0 else 0.0,
        'histogram': counts,
        'bin_edges': edges,
    }


def rotation_angle_2d(r: np.ndarray) -> float:
    """Angle of a 2-D rotation matrix in radians, in (-pi, pi]"""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (2, 2):
        raise ShapeError(f"expected a 2x2 rotation, got {r.shape}")
    return float(math.atan2(r[1, 0], r[0, 0]))


def explained_variance(z, k: int) -> float:
    """Share of total variance held by the first k latent columns"""
    var = np.var(np.asarray(z, dtype=np.float64), axis=0)
    total = var.sum()
    return float(var[:k].sum() / total) if total > 0 else 0.0


# ---- Interpolation and likelihood units --------------------------------

def interpolate_latents(model, block_size: Optional[int] = None, side: str = 'leading',
                        grid: int = 9) -> Dict[str, np.ndarray]:
    """Sweep a block of latent dims through 2 - 4*lambda (lambda from 1 to 0), rest at zero"""
    if not getattr(model, 'is_frozen', False):
        raise ModelNotFrozenError("interpolation needs a model with frozen statistics")
    if side not in SIDES:
        raise NeuralPCAError('evaluation', f"side must be one of {SIDES}, got {side!r}")
    n = model.dim
    block_size = block_size or max(1, n // 8)
    if not 1 <= block_size <= n:
        raise NeuralPCAError('evaluation', f"block size must lie in [1, {n}], got {block_size}")
    if grid < 2:
        raise NeuralPCAError('evaluation', f"interpolation grid needs at least 2 points, got {grid}")
    lambdas = np.linspace(1.0, 0.0, grid)
    latents = np.zeros((grid, n))
    cols = slice(0, block_size) if side == 'leading' else slice(n - block_size, n)
    latents[:, cols] = (2.0 - 4.0 * lambdas)[:, None]
    return {'lambdas': lambdas, 'latents': latents, 'outputs': model.inverse(latents)}


def sample_variance_across_outputs(outputs) -> float:
    """Mean per-feature variance across an interpolation sequence"""
    return float(np.mean(np.var(np.asarray(outputs, dtype=np.float64), axis=0)))


def bits_per_dim(nll_nats: float, n: int, data_kind: str = 'tabular') -> Dict[str, float]:
    """Per-sample NLL in nats -> nats per dim, plus bits per dim for [0, 1]-scaled byte images"""
    if n <= 0:
        raise NeuralPCAError('evaluation', f"dimension must be positive, got {n}")
    result = {'nats_per_dim': float(nll_nats) / n}
    if data_kind == 'image':
        result['bpd'] = float(nll_nats) / (n * math.log(2.0)) + math.log2(256.0)
    elif data_kind != 'tabular':
        raise NeuralPCAError('evaluation', f"unknown data kind {data_kind!r}")
    return result


# ---- Sweeps ------------------------------------------------------------

class RepresentationSweep:
    """Evaluates classification and MI over a kappa grid and both removal sides"""

    def __init__(self, splits: Dict[str, Dict[str, np.ndarray]], seed: int = 0, verbose: bool = False,
                 max_workers: Optional[int] = None):
        self.splits = splits
        self.seed = seed
        self.verbose = verbose
        self.concurrency = ConcurrencyManager(max_workers)
        self.processing_log = []

    def _classify_cell(self, classifier: str, kappa: int, side: str) -> float:
        reps = {name: corrupt(self.splits[name]['z'], kappa, side).data for name in ('train', 'val', 'test')}
        labels = {name: self.splits[name]['labels'] for name in ('train', 'val', 'test')}
        classify = mlp_classify if classifier == 'mlp' else linear_svm_classify
        return classify(reps['train'], labels['train'], reps['val'], labels['val'], reps['test'], labels['test'],
                     seed=self.seed)

    def _mi_cell(self, kappa: int, side: str, split: str, estimator_kwargs: Dict[str, Any]) -> float:
        data = self.splits[split]
        if 'x' not in data:
            raise NeuralPCAError('evaluation', f"latents split {split!r} carries no raw inputs for MI")
        return estimate_mi(data['x'], corrupt(data['z'], kappa, side), seed=self.seed, **estimator_kwargs)

    def run(self, kappa_grid: Sequence[int], sides: Sequence[str], metric: str,
            classifier: str = 'svm', mi_split: str = 'test', estimator_kwargs: Optional[Dict] = None) -> List[Dict]:
        """Rows of {'kappa', 'side', 'metric', 'value'} in grid order"""
        estimator_kwargs = estimator_kwargs or {}
        cells = [(k, s) for k in kappa_grid for s in sides]
        name = f'{classifier}_accuracy' if metric == 'accuracy' else 'mi'
        tasks = []
        for kappa, side in cells:
            if metric == 'accuracy':
                tasks.append({'function': self._classify_cell, 'args': [classifier, kappa, side],
                              'name': f'{name}[{kappa},{side}]'})
            else:
                tasks.append({'function': self._mi_cell, 'args': [kappa, side, mi_split, estimator_kwargs],
                              'name': f'{name}[{kappa},{side}]'})
        self._log(f"Evaluating {len(tasks)} cells ({name})")
        results = self.concurrency.execute_parallel_tasks(tasks)
        rows = []
        for (kappa, side), record in zip(cells, results):
            if record['status'] != 'completed':
                raise record['exception']
            rows.append({'kappa': kappa, 'side': side, 'metric': name, 'value': float(record['result'])})
        self._log(f"✅ {name} sweep complete")
        return rows

    def _log(self, message: str):
        timestamp = time.strftime("%H:%M:%S")
        self.processing_log.append(f"[{timestamp}] {message}")
        if self.verbose:
            print(f"📊 Evaluation: {message}")


def representation_sweep(splits, kappa_grid, sides=SIDES, metric: str = 'accuracy', classifier: str = 'svm',
                         seed: int = 0, **kwargs) -> List[Dict]:
    return RepresentationSweep(splits, seed=seed).run(kappa_grid, sides, metric, classifier, **kwargs)
