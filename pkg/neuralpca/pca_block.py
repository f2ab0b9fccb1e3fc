"""
PCA block: zero-offset batch normalization followed by the per-batch SVD rotation
In eval mode the block uses frozen training statistics (mean, variance, mean rotation)
"""

import time
from dataclasses import dataclass, field
from typing import Dict, Any, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, Var, no_grad_tape
from .linalg import svd_full, rotation_from_svd, project_to_son
from .error_handling import InsufficientBatchError, MissingStatisticsError, NeuralPCAError, ShapeError

DEFAULT_EPS = 1e-5


@dataclass
class PcaStatistics:
    """Frozen training statistics; sigma_bar holds per-dim variances"""
    mu_bar: np.ndarray
    sigma_bar: np.ndarray
    v_tilde: Optional[np.ndarray]
    batch_count: int = 0
    projection_report: Dict[str, Any] = field(default_factory=dict)


class PcaBlock:
    """BatchNorm (beta fixed to 0) and PCA rotation appended to a baseline flow"""

    def __init__(self, dim: int, eps: float = DEFAULT_EPS, use_rotation: bool = True, verbose: bool = False):
        self.dim = dim
        self.eps = eps
        self.use_rotation = use_rotation
        self.log_alpha = np.zeros((1, dim))
        self.mode = 'train'
        self.stats: Optional[PcaStatistics] = None
        self.last_batch_mean: Optional[np.ndarray] = None
        self.last_batch_var: Optional[np.ndarray] = None
        self.last_batch_v: Optional[np.ndarray] = None
        self.batch_rotations: List[np.ndarray] = []
        self.verbose = verbose
        self.processing_log = []

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha).ravel()

    def parameters(self) -> Dict[str, np.ndarray]:
        return {'log_alpha': self.log_alpha}

    def parameter_count(self) -> int:
        return self.dim

    def train(self):
        self.mode = 'train'

    def eval(self):
        if self.stats is None:
            raise MissingStatisticsError("eval mode needs frozen statistics; run freeze_statistics first")
        self.mode = 'eval'

    # ---- BatchNorm ----------------------------------------------------
    def bn_forward_tape(self, tape: Tape, x: Var, log_alpha: Var) -> Tuple[Var, Var]:
        if x.shape[1] != self.dim:
            raise ShapeError(f"PCA block expects {self.dim} dims, got {x.shape[1]}")
        if self.mode == 'train':
            if x.shape[0] < 2:
                raise InsufficientBatchError(f"BatchNorm needs at least 2 samples, got {x.shape[0]}")
            mu = tape.mean(x, axis=0)
            centered = x - mu
            var = tape.mean(centered * centered, axis=0)
            self.last_batch_mean = mu.value.ravel().copy()
            self.last_batch_var = var.value.ravel().copy()
        else:
            stats = self._require_stats()
            centered = x - tape.constant(stats.mu_bar)
            var = tape.constant(stats.sigma_bar)
        shifted_var = tape.shift(var, self.eps)
        z = centered * tape.power(shifted_var, -0.5) * tape.exp(log_alpha)
        logdet = tape.sum(log_alpha - tape.scale(tape.log(shifted_var), 0.5))
        return z, logdet

    def bn_forward(self, x) -> Tuple[np.ndarray, np.ndarray]:
        tape = no_grad_tape()
        xv = tape.constant(x)
        z, logdet = self.bn_forward_tape(tape, xv, tape.constant(self.log_alpha))
        return z.value, np.full(xv.shape[0], float(logdet.value[0, 0]))

    # ---- PCA layer ----------------------------------------------------
    def pca_forward_tape(self, tape: Tape, z: Var) -> Tuple[Var, Var]:
        if not self.use_rotation:
            return z, tape.constant(0.0)
        if self.mode == 'train':
            if z.shape[0] < self.dim:
                raise InsufficientBatchError(
                    f"PCA layer needs batch size >= {self.dim} for a full-rank SVD, got {z.shape[0]}")
            v = rotation_from_svd(svd_full(z.value))
            self.last_batch_v = v
        else:
            v = self._require_stats().v_tilde
        # V is a constant in the backward pass
        return z @ tape.constant(v), tape.constant(0.0)

    def pca_forward(self, z) -> Tuple[np.ndarray, np.ndarray]:
        tape = no_grad_tape()
        zv = tape.constant(z)
        out, _ = self.pca_forward_tape(tape, zv)
        return out.value, np.zeros(zv.shape[0])

    # ---- whole block --------------------------------------------------
    def forward_tape(self, tape: Tape, x: Var, log_alpha: Var) -> Tuple[Var, Var]:
        z, logdet = self.bn_forward_tape(tape, x, log_alpha)
        z, _ = self.pca_forward_tape(tape, z)
        return z, logdet

    def forward(self, x) -> Tuple[np.ndarray, np.ndarray]:
        z, logdet = self.bn_forward(x)
        z, _ = self.pca_forward(z)
        return z, logdet

    def inverse(self, z) -> np.ndarray:
        mean, var, v = self.current_statistics()
        z = np.asarray(z, dtype=np.float64)
        if v is not None:
            z = z @ v.T
        return z * np.sqrt(var + self.eps) / self.alpha + mean

    def apply_with_statistics(self, x, mean, var, v=None) -> np.ndarray:
        """Per-sample map of the block with every batch statistic held fixed"""
        z = np.asarray(x, dtype=np.float64)
        z = self.alpha * (z - mean) / np.sqrt(var + self.eps)
        return z @ v if v is not None else z

    def current_statistics(self):
        if self.mode == 'eval':
            stats = self._require_stats()
            return stats.mu_bar, stats.sigma_bar, stats.v_tilde if self.use_rotation else None
        if self.last_batch_mean is None:
            raise MissingStatisticsError("no batch has passed through the block in train mode yet")
        return self.last_batch_mean, self.last_batch_var, self.last_batch_v if self.use_rotation else None

    def _require_stats(self) -> PcaStatistics:
        if self.stats is None:
            raise MissingStatisticsError("frozen statistics are missing")
        return self.stats

    # ---- statistics pass ---------------------------------------------
    def freeze_statistics(self, model, batches: Sequence[np.ndarray]) -> PcaStatistics:
        """Average BN statistics and per-batch rotations over a pass with frozen parameters"""
        batches = list(batches)
        if not batches:
            raise NeuralPCAError('pca_block', "freeze_statistics needs at least one batch")
        self._log(f"Computing training statistics over {len(batches)} batches")

        mu_sum = np.zeros(self.dim)
        var_sum = np.zeros(self.dim)
        v_sum = np.zeros((self.dim, self.dim))
        self.batch_rotations = []
        for batch in batches:
            h = model.forward(batch)[0] if model is not None else np.asarray(batch, dtype=np.float64)
            if h.shape[0] < 2:
                raise InsufficientBatchError(f"statistics batch has {h.shape[0]} samples")
            mean = h.mean(axis=0)
            var = np.mean(np.square(h - mean), axis=0)
            mu_sum += mean
            var_sum += var
            if self.use_rotation:
                if h.shape[0] < self.dim:
                    raise InsufficientBatchError(
                        f"statistics batch of {h.shape[0]} samples is smaller than dim {self.dim}")
                z = self.apply_with_statistics(h, mean, var)
                v = rotation_from_svd(svd_full(z))
                self.batch_rotations.append(v)
                v_sum += v

        count = len(batches)
        report = {}
        v_tilde = None
        if self.use_rotation:
            v_tilde, report = project_to_son(v_sum / count, return_report=True)
            if report['degenerate']:
                self._log("⚠️  Mean rotation projection is degenerate; smallest-index tie-break applied")
        self.stats = PcaStatistics(mu_bar=mu_sum / count, sigma_bar=var_sum / count, v_tilde=v_tilde,
                                   batch_count=count, projection_report=report)
        self.mode = 'eval'
        self._log(f"Frozen statistics ready (det flip: {report.get('det_flipped', False)})")
        return self.stats

    def _log(self, message: str):
        timestamp = time.strftime("%H:%M:%S")
        self.processing_log.append(f"[{timestamp}] {message}")
        if self.verbose:
            print(f"🧭 PCA block: {message}")


def freeze_statistics(state: PcaBlock, model, batches: Sequence[np.ndarray]) -> PcaStatistics:
    return state.freeze_statistics(model, batches)
