"""
Baseline normalizing flow h and the seven model variants
Layers are written once against the tape; the numpy path records on a no-grad tape
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tape, Var, no_grad_tape
from .density import BaseDensity, base_density_for
from .error_handling import (DegenerateReflectionError, FlowOverflowError, NeuralPCAError,
                             ShapeError, UsageError)
from .linalg import householder_product
from .pca_block import PcaBlock, DEFAULT_EPS

SCALE_BOUND = 5.0


class Layer:
    """Invertible map on R^n with a per-sample log-det"""
    kind = 'layer'

    def __init__(self, dim: int):
        self.dim = dim
        self.params: Dict[str, np.ndarray] = OrderedDict()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward_tape(self, tape: Tape, x: Var, params: Dict[str, Var]) -> Tuple[Var, Var]:
        raise NotImplementedError

    def inverse_tape(self, tape: Tape, z: Var, params: Dict[str, Var]) -> Var:
        raise NotImplementedError


class AffineCoupling(Layer):
    """z_b = x_b * exp(s(x_a)) + t(x_a) with x_a the first `split` columns"""
    kind = 'coupling'

    def __init__(self, dim: int, width: int = 64, rng: Optional[np.random.Generator] = None):
        if dim < 2:
            raise ShapeError(f"affine coupling needs dim >= 2, got {dim}")
        super().__init__(dim)
        rng = rng or np.random.default_rng(0)
        self.split = dim // 2
        out = dim - self.split
        self.params['w1'] = rng.standard_normal((self.split, width)) / np.sqrt(self.split)
        self.params['b1'] = np.zeros((1, width))
        self.params['w2'] = rng.standard_normal((width, width)) / np.sqrt(width)
        self.params['b2'] = np.zeros((1, width))
        # zero output layers make the coupling the identity at init
        self.params['ws'] = np.zeros((width, out))
        self.params['bs'] = np.zeros((1, out))
        self.params['wt'] = np.zeros((width, out))
        self.params['bt'] = np.zeros((1, out))

    def _conditioner(self, tape: Tape, xa: Var, p: Dict[str, Var]) -> Tuple[Var, Var]:
        h = tape.tanh(xa @ p['w1'] + p['b1'])
        h = tape.tanh(h @ p['w2'] + p['b2'])
        raw = h @ p['ws'] + p['bs']
        s = tape.scale(tape.tanh(tape.scale(raw, 1.0 / SCALE_BOUND)), SCALE_BOUND)
        t = h @ p['wt'] + p['bt']
        return s, t

    def forward_tape(self, tape, x, params):
        xa = tape.slice_cols(x, 0, self.split)
        xb = tape.slice_cols(x, self.split, self.dim)
        s, t = self._conditioner(tape, xa, params)
        zb = xb * tape.exp(s) + t
        return tape.concat_cols([xa, zb]), tape.sum(s, axis=1)

    def inverse_tape(self, tape, z, params):
        za = tape.slice_cols(z, 0, self.split)
        zb = tape.slice_cols(z, self.split, self.dim)
        s, t = self._conditioner(tape, za, params)
        xb = (zb - t) * tape.exp(-s)
        return tape.concat_cols([za, xb])


class ActNorm(Layer):
    """z = x * exp(log_scale) + bias"""
    kind = 'actnorm'

    def __init__(self, dim: int, scale=None, bias=None):
        super().__init__(dim)
        scale = np.ones(dim) if scale is None else np.broadcast_to(np.asarray(scale, dtype=np.float64), (dim,))
        if np.any(scale <= 0):
            raise NeuralPCAError('flow', "ActNorm scale must be positive")
        bias = np.zeros(dim) if bias is None else np.broadcast_to(np.asarray(bias, dtype=np.float64), (dim,))
        self.params['log_scale'] = np.log(scale).reshape(1, dim).copy()
        self.params['bias'] = bias.reshape(1, dim).copy()
        self.initialized = False

    def initialize_from(self, x: np.ndarray):
        """Data-dependent init: outputs of the first batch get zero mean and unit variance"""
        std = x.std(axis=0) + 1e-6
        self.params['log_scale'][...] = -np.log(std)
        self.params['bias'][...] = -x.mean(axis=0) / std
        self.initialized = True

    def forward_tape(self, tape, x, params):
        z = x * tape.exp(params['log_scale']) + params['bias']
        return z, tape.sum(params['log_scale'])

    def inverse_tape(self, tape, z, params):
        return (z - params['bias']) * tape.exp(-params['log_scale'])


class FixedPermutation(Layer):
    kind = 'permutation'

    def __init__(self, dim: int, perm=None):
        super().__init__(dim)
        self.perm = np.arange(dim)[::-1].copy() if perm is None else np.asarray(perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(dim)):
            raise NeuralPCAError('flow', f"not a permutation of 0..{dim - 1}: {self.perm.tolist()}")
        self.inverse_perm = np.argsort(self.perm)

    def forward_tape(self, tape, x, params):
        return tape.take_cols(x, self.perm), tape.constant(0.0)

    def inverse_tape(self, tape, z, params):
        return tape.take_cols(z, self.inverse_perm)


class HouseholderRotation(Layer):
    """Trainable rotation as a product of n reflections (n^2 parameters)"""
    kind = 'householder'

    def __init__(self, dim: int, vectors=None, rng: Optional[np.random.Generator] = None):
        super().__init__(dim)
        if vectors is None:
            rng = rng or np.random.default_rng(0)
            vectors = rng.standard_normal((dim, dim))
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != dim:
            raise ShapeError(f"reflection vectors must have {dim} entries, got {vectors.shape}")
        for i, v in enumerate(vectors):
            self.params[f'v{i}'] = v.reshape(1, dim).copy()

    @property
    def vectors(self) -> np.ndarray:
        return np.concatenate(list(self.params.values()), axis=0)

    def rotation_matrix(self) -> np.ndarray:
        """R with forward(x) = x @ R"""
        return householder_product(self.vectors)

    def _reflect(self, tape, x, v):
        norm_sq = v @ v.T
        if float(norm_sq.value[0, 0]) <= 1e-24:
            raise DegenerateReflectionError("Householder vector collapsed to zero")
        return x - tape.scale(((x @ v.T) * v) / norm_sq, 2.0)

    def forward_tape(self, tape, x, params):
        z = x
        for name in self.params:
            z = self._reflect(tape, z, params[name])
        return z, tape.constant(0.0)

    def inverse_tape(self, tape, z, params):
        x = z
        for name in reversed(list(self.params)):
            x = self._reflect(tape, x, params[name])
        return x


def _check_finite(value: np.ndarray, layer: str):
    if not np.all(np.isfinite(value)):
        raise FlowOverflowError(layer, "non-finite intermediate value")


class FlowModel:
    """Composition of invertible layers in the normalizing direction"""

    def __init__(self, dim: int, layers: Optional[List[Layer]] = None):
        self.dim = dim
        self.layers: List[Layer] = list(layers or [])
        for layer in self.layers:
            if layer.dim != dim:
                raise ShapeError(f"layer {layer.kind} has dim {layer.dim}, flow has {dim}")

    def layer_name(self, i: int) -> str:
        return f"layer{i}.{self.layers[i].kind}"

    def parameters(self) -> Dict[str, np.ndarray]:
        params = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                params[f"layer{i}.{name}"] = value
        return params

    def parameter_count(self) -> int:
        return int(sum(layer.parameter_count() for layer in self.layers))

    def _layer_vars(self, tape: Tape, i: int, param_vars: Optional[Dict[str, Var]]) -> Dict[str, Var]:
        layer = self.layers[i]
        if param_vars is None:
            return {name: tape.constant(value) for name, value in layer.params.items()}
        return {name: param_vars[f"layer{i}.{name}"] for name in layer.params}

    def forward_tape(self, tape: Tape, x: Var, param_vars: Optional[Dict[str, Var]] = None) -> Tuple[Var, Var]:
        if x.shape[1] != self.dim:
            raise ShapeError(f"flow expects {self.dim} columns, got {x.shape[1]}")
        z = x
        logdet = tape.constant(np.zeros((x.shape[0], 1)))
        for i, layer in enumerate(self.layers):
            z, layer_logdet = layer.forward_tape(tape, z, self._layer_vars(tape, i, param_vars))
            _check_finite(z.value, self.layer_name(i))
            _check_finite(layer_logdet.value, self.layer_name(i))
            logdet = logdet + layer_logdet
        return z, logdet

    def inverse_tape(self, tape: Tape, z: Var, param_vars: Optional[Dict[str, Var]] = None) -> Var:
        x = z
        for i in reversed(range(len(self.layers))):
            x = self.layers[i].inverse_tape(tape, x, self._layer_vars(tape, i, param_vars))
            _check_finite(x.value, self.layer_name(i))
        return x

    def forward(self, x) -> Tuple[np.ndarray, np.ndarray]:
        tape = no_grad_tape()
        z, logdet = self.forward_tape(tape, tape.constant(np.asarray(x, dtype=np.float64)))
        return z.value, logdet.value.ravel()

    def inverse(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        _check_finite(z, 'input')
        tape = no_grad_tape()
        return self.inverse_tape(tape, tape.constant(z)).value

    def actnorm_layers(self) -> List[ActNorm]:
        return [layer for layer in self.layers if isinstance(layer, ActNorm)]

    def householder_layers(self) -> List[HouseholderRotation]:
        return [layer for layer in self.layers if isinstance(layer, HouseholderRotation)]

    def initialize_actnorm(self, x: np.ndarray):
        """Run the data-dependent init of every ActNorm layer on one batch"""
        tape = no_grad_tape()
        z = tape.constant(np.asarray(x, dtype=np.float64))
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.initialize_from(z.value)
            z, _ = layer.forward_tape(tape, z, self._layer_vars(tape, i, None))


def forward(model: FlowModel, x):
    return model.forward(x)


def inverse(model: FlowModel, z):
    return model.inverse(z)


# ---- Model variants ----------------------------------------------------

VARIANT_SPECS = OrderedDict([
    ('Baseline',      {'batchnorm': False, 'pca': False, 'rotation': False, 'base': 'IG'}),
    ('Baseline-NIG',  {'batchnorm': False, 'pca': False, 'rotation': False, 'base': 'NIG'}),
    ('Baseline-BN',   {'batchnorm': True,  'pca': False, 'rotation': False, 'base': 'NIG'}),
    ('Baseline-R',    {'batchnorm': False, 'pca': False, 'rotation': True,  'base': 'NIG'}),
    ('Baseline-BN-R', {'batchnorm': True,  'pca': False, 'rotation': True,  'base': 'NIG'}),
    ('Neural-PCA-IG', {'batchnorm': True,  'pca': True,  'rotation': False, 'base': 'IG'}),
    ('Neural-PCA',    {'batchnorm': True,  'pca': True,  'rotation': False, 'base': 'NIG'}),
])
VARIANT_NAMES = list(VARIANT_SPECS)


@dataclass
class ModelVariant:
    """Baseline flow h, optional PCA block and base density wired as one model"""
    name: str
    flow: FlowModel
    block: Optional[PcaBlock]
    base: BaseDensity
    extra_parameter_count: int

    @property
    def dim(self) -> int:
        return self.flow.dim

    @property
    def is_frozen(self) -> bool:
        return self.block is None or (self.block.mode == 'eval' and self.block.stats is not None)

    def train(self):
        if self.block is not None:
            self.block.train()

    def eval(self):
        if self.block is not None:
            self.block.eval()

    def parameters(self) -> Dict[str, np.ndarray]:
        params = self.flow.parameters()
        if self.block is not None:
            params['block.log_alpha'] = self.block.log_alpha
        return params

    def forward_tape(self, tape: Tape, x: Var, param_vars: Optional[Dict[str, Var]] = None) -> Tuple[Var, Var, Var]:
        """(z, logdet_h, logdet_bn) with logdet_bn zero when there is no block"""
        z, logdet_h = self.flow.forward_tape(tape, x, param_vars)
        if self.block is None:
            return z, logdet_h, tape.constant(0.0)
        log_alpha = param_vars['block.log_alpha'] if param_vars is not None else tape.constant(self.block.log_alpha)
        z, logdet_bn = self.block.forward_tape(tape, z, log_alpha)
        _check_finite(z.value, 'pca_block')
        return z, logdet_h, logdet_bn

    def forward(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Latents and total per-sample log-det in the block's current mode"""
        tape = no_grad_tape()
        xv = tape.constant(np.asarray(x, dtype=np.float64))
        z, logdet_h, logdet_bn = self.forward_tape(tape, xv)
        total = (logdet_h + logdet_bn).value
        return z.value, np.broadcast_to(total, (xv.shape[0], 1)).ravel().copy()

    def inverse(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.block is not None:
            z = self.block.inverse(z)
        return self.flow.inverse(z)

    def log_prob(self, x) -> np.ndarray:
        z, logdet = self.forward(x)
        return self.base.log_prob(z) + logdet

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if not self.is_frozen:
            raise UsageError("sampling needs frozen statistics")
        return self.inverse(self.base.sample(count, rng))

    def learned_rotation(self) -> Optional[np.ndarray]:
        layers = self.flow.householder_layers()
        return layers[-1].rotation_matrix() if layers else None


def build_variant(name: str, n: int, depth: int = 6, width: int = 64, seed: int = 0,
                  sigma_max: float = 1.0, sigma_min: float = 0.1, actnorm: bool = False,
                  bn_eps: float = DEFAULT_EPS) -> ModelVariant:
    """Construct one of the seven comparison variants"""
    if name not in VARIANT_SPECS:
        raise NeuralPCAError('flow', f"unknown variant {name!r}; expected one of {VARIANT_NAMES}")
    if depth < 0 or width < 1:
        raise NeuralPCAError('flow', f"invalid depth {depth} / width {width}")
    spec = VARIANT_SPECS[name]
    rng = np.random.default_rng(seed)

    layers: List[Layer] = []
    if actnorm:
        layers.append(ActNorm(n))
    for _ in range(depth):
        layers.append(FixedPermutation(n))
        layers.append(AffineCoupling(n, width, rng))
    extra = 0
    if spec['rotation']:
        layers.append(HouseholderRotation(n, rng=rng))
        extra += n * n

    block = None
    if spec['batchnorm']:
        block = PcaBlock(n, eps=bn_eps, use_rotation=spec['pca'])
        extra += block.parameter_count()

    base = base_density_for(spec['base'], n, sigma_max, sigma_min)
    return ModelVariant(name=name, flow=FlowModel(n, layers), block=block, base=base,
                        extra_parameter_count=extra)
