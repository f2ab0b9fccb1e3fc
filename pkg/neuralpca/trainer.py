"""
Training loop for flow variants with an optional PCA block
Maximizes mean log-likelihood with the SVD rotation held constant, then freezes block statistics
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Any

import numpy as np

from .autodiff import Tape, Var, AdamState, adam_step, cosine_lr
from .config import RunConfig, env_verbose
from .data import Dataset, batch_partition, iterate_batches, iterate_partition
from .density import BaseDensity
from .error_handling import FlowOverflowError, NeuralPCAError, NumericalAbortError, InsufficientBatchError
from .evaluation import bits_per_dim
from .flow import ModelVariant

MAX_CONSECUTIVE_SKIPS = 50
METRICS_HEADER = ['iteration', 'epoch', 'lr', 'train_nll', 'val_nll', 'bpd', 'skipped']


@dataclass
class MetricsRow:
    iteration: int
    epoch: int
    lr: float
    train_nll: Optional[float]
    val_nll: Optional[float] = None
    bpd: Optional[float] = None
    skipped: bool = False

    def as_csv_row(self) -> List[str]:
        def fmt(v):
            return '' if v is None else repr(float(v))
        return [str(self.iteration), str(self.epoch), repr(float(self.lr)), fmt(self.train_nll),
                fmt(self.val_nll), fmt(self.bpd), '1' if self.skipped else '0']


@dataclass
class TrainState:
    model: ModelVariant
    config: RunConfig
    optimizer: AdamState
    iteration: int = 0
    epoch: int = 0
    metrics: List[MetricsRow] = field(default_factory=list)
    best_val_nll: Optional[float] = None
    best_iteration: Optional[int] = None
    processing_log: List[str] = field(default_factory=list)


def objective(tape: Tape, z: Var, logdet_h: Var, logdet_bn: Var, base: BaseDensity,
              stop_bn_gradient: bool = False) -> Var:
    """
    J = batch mean of log p(z) + logdet_h + logdet_bn; the PCA layer adds zero and V is a constant.
    With stop_bn_gradient the BatchNorm log-det contributes its value only.
    """
    if stop_bn_gradient:
        logdet_bn = tape.stop_gradient(logdet_bn)
    per_sample = base.log_prob_tape(tape, z) + logdet_h + logdet_bn
    return tape.mean(per_sample)


def objective_value(z, logdet_h, logdet_bn, base: BaseDensity) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(np.mean(base.log_prob(z) + np.ravel(logdet_h) + np.ravel(logdet_bn)))


def epoch_averages(metrics: List[MetricsRow], key: str = 'train_nll') -> List[float]:
    """Mean of a metric per epoch, skipping rows where it is missing"""
    sums: Dict[int, List[float]] = {}
    for row in metrics:
        value = getattr(row, key)
        if value is not None and not row.skipped:
            sums.setdefault(row.epoch, []).append(value)
    return [float(np.mean(sums[e])) for e in sorted(sums)]


def evaluate_nll(model: ModelVariant, x: np.ndarray, batch_size: int) -> float:
    """Mean per-sample NLL in nats, batched in the block's current mode"""
    if x.shape[0] == 0:
        raise NeuralPCAError('training', "cannot evaluate NLL on an empty set")
    if model.block is not None and model.block.mode == 'train':
        if x.shape[0] <= batch_size:
            chunks = [x]
        else:
            chunks = [x[i:i + batch_size] for i in range(0, x.shape[0] - batch_size + 1, batch_size)]
    else:
        chunks = [x[i:i + batch_size] for i in range(0, x.shape[0], batch_size)]
    total = 0.0
    count = 0
    for chunk in chunks:
        total += float(np.sum(-model.log_prob(chunk)))
        count += chunk.shape[0]
    return total / count


class Trainer:
    """Runs the optimisation loop of one model variant on one dataset"""

    def __init__(self, run_config: RunConfig, dataset: Dataset, model: ModelVariant,
                 optimizer: Optional[AdamState] = None, start_iteration: int = 0, verbose: Optional[bool] = None):
        self.config = run_config
        self.dataset = dataset
        self.model = model
        self.optimizer = optimizer or AdamState()
        self.start_iteration = start_iteration
        self.verbose = env_verbose() if verbose is None else verbose
        self.processing_log = []
        self.x_train, _ = dataset.split('train')
        self.x_val, _ = dataset.split('val')

    def train(self) -> TrainState:
        cfg = self.config
        model = self.model
        n = model.dim
        batch_size = cfg.batch_size
        if self.x_train.shape[0] < batch_size:
            raise InsufficientBatchError(
                f"training split has {self.x_train.shape[0]} points, fewer than batch size {batch_size}")
        if model.block is not None and model.block.use_rotation and batch_size < n:
            raise InsufficientBatchError(f"batch size {batch_size} is smaller than dim {n}")

        state = TrainState(model=model, config=cfg, optimizer=self.optimizer, iteration=self.start_iteration)
        state.processing_log = self.processing_log
        batches_per_epoch = self.x_train.shape[0] // batch_size
        self._log(f"Training {model.name} (n={n}) for {cfg.iterations} iterations, "
                  f"{batches_per_epoch} batches per epoch")

        if cfg.iterations > state.iteration and any(not l.initialized for l in model.flow.actnorm_layers()):
            init_rng = np.random.default_rng([cfg.seed, 7])
            init_batch = self.x_train[init_rng.permutation(self.x_train.shape[0])[:batch_size]]
            model.flow.initialize_actnorm(init_batch)
            self._log("ActNorm layers initialized from the first batch")

        # batch membership is fixed for the run; each epoch reorders the batches
        partition = batch_partition(self.x_train.shape[0], batch_size, np.random.default_rng([cfg.seed, 3]))
        best_params = None
        consecutive_skips = 0
        model.train()
        while state.iteration < cfg.iterations:
            epoch = state.iteration // batches_per_epoch
            position = state.iteration % batches_per_epoch
            epoch_rng = np.random.default_rng([cfg.seed, epoch])
            for b, batch in enumerate(iterate_partition(self.x_train, partition, epoch_rng)):
                if b < position:
                    continue
                if state.iteration >= cfg.iterations:
                    break
                lr = self._learning_rate(state.iteration)
                nll = self._step(batch, lr)
                skipped = nll is None or self.optimizer.last_skipped
                if skipped:
                    consecutive_skips += 1
                    self._log(f"⚠️  Iteration {state.iteration}: non-finite objective, step skipped")
                    if consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                        raise NumericalAbortError(f"{MAX_CONSECUTIVE_SKIPS} consecutive non-finite iterations",
                                                  {'iteration': state.iteration})
                else:
                    consecutive_skips = 0

                state.iteration += 1
                state.epoch = epoch
                row = MetricsRow(iteration=state.iteration, epoch=epoch, lr=lr,
                                 train_nll=None if nll is None else nll, skipped=skipped)
                if nll is not None and self.dataset.is_image:
                    row.bpd = bits_per_dim(nll, n, 'image')['bpd']

                if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.iterations:
                    val_nll = self._validation_nll()
                    row.val_nll = val_nll
                    if val_nll is not None and np.isfinite(val_nll) and (
                            state.best_val_nll is None or val_nll < state.best_val_nll):
                        state.best_val_nll = val_nll
                        state.best_iteration = state.iteration
                        best_params = {k: v.copy() for k, v in model.parameters().items()}
                    self._log(f"Iteration {state.iteration}: train NLL {row.train_nll}, val NLL {val_nll}")
                state.metrics.append(row)

        if best_params is not None and state.best_iteration != state.iteration:
            for name, value in model.parameters().items():
                value[...] = best_params[name]
            self._log(f"Restored best validation parameters from iteration {state.best_iteration}")

        if model.block is not None:
            stats_rng = np.random.default_rng([cfg.seed, 1_000_003])
            batches = list(iterate_batches(self.x_train, batch_size, stats_rng))
            model.block.verbose = self.verbose
            model.block.freeze_statistics(model.flow, batches)
            self._log(f"Statistics pass over {len(batches)} batches complete; block in eval mode")
        self._log("✅ Training complete")
        return state

    def _learning_rate(self, iteration: int) -> float:
        if self.config.lr_schedule == 'cosine':
            return float(cosine_lr(iteration, self.config.iterations, self.config.lr))
        return self.config.lr

    def _step(self, batch: np.ndarray, lr: float) -> Optional[float]:
        """One Adam step on -J; returns the batch NLL or None when the objective is not finite"""
        tape = Tape()
        params = self.model.parameters()
        param_vars = {name: tape.variable(value) for name, value in params.items()}
        try:
            z, logdet_h, logdet_bn = self.model.forward_tape(tape, tape.constant(batch), param_vars)
        except FlowOverflowError as e:
            self._log(f"⚠️  {e}")
            return None
        j = objective(tape, z, logdet_h, logdet_bn, self.model.base, self.config.stop_bn_gradient)
        if not np.isfinite(j.value[0, 0]):
            return None
        tape.backward(-j)
        grads = {name: tape.grad(var) for name, var in param_vars.items()}
        adam_step(params, grads, self.optimizer, lr, self.config.beta1, self.config.beta2, self.config.adam_eps)
        return float(-j.value[0, 0])

    def _validation_nll(self) -> Optional[float]:
        if self.x_val.shape[0] < max(2, self.model.dim):
            return None
        try:
            return evaluate_nll(self.model, self.x_val, self.config.batch_size)
        except FlowOverflowError:
            return float('inf')

    def _log(self, message: str):
        timestamp = time.strftime("%H:%M:%S")
        self.processing_log.append(f"[{timestamp}] {message}")
        if self.verbose:
            print(f"🏋️  Trainer: {message}")


def train(run_config: RunConfig, dataset: Dataset, model: ModelVariant, **kwargs: Any) -> TrainState:
    return Trainer(run_config, dataset, model, **kwargs).train()
