"""
Tape-based reverse-mode differentiation over float64 matrices
Every value is a 2-D array; row vectors (1, n) and scalars (1, 1) broadcast over batches
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .error_handling import ShapeError, UsageError


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None


def _as_2d(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tape values must be 2-D, got shape {arr.shape}")
    return arr


def _broadcast_shape(a: Tuple[int, int], b: Tuple[int, int], op: str) -> Tuple[int, int]:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


class Var:
    """Handle to a node on a Tape"""

    __array_priority__ = 100

    def __init__(self, tape: 'Tape', node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.node_id].requires_grad

    def _lift(self, other) -> 'Var':
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise UsageError("operands live on different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.tape.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, self._lift(other))

    def __rtruediv__(self, other):
        return self.tape.div(self._lift(other), self)

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape.matmul(self._lift(other), self)

    @property
    def T(self):
        return self.tape.transpose(self)

    def __repr__(self):
        return f"Var(id={self.node_id}, shape={self.shape})"


class Tape:
    """Append-only record of matrix operations with a single reverse sweep"""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: List[Node] = []
        self.grads: Dict[int, np.ndarray] = {}
        self._backward_done = False

    def reset(self):
        self.nodes = []
        self.grads = {}
        self._backward_done = False

    # ---- leaves -------------------------------------------------------
    def variable(self, value, requires_grad: bool = True) -> Var:
        return self._record('leaf', (), _as_2d(value).copy(), requires_grad and self.enabled)

    def constant(self, value) -> Var:
        return self._record('const', (), _as_2d(value), False)

    def _record(self, op: str, inputs: Tuple[int, ...], value: np.ndarray, requires_grad: bool,
                backward=None) -> Var:
        if self._backward_done:
            raise UsageError("tape already differentiated; reset it before recording")
        node = Node(op, inputs, value, requires_grad, backward if requires_grad else None)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def _needs_grad(self, *vars_: Var) -> bool:
        return self.enabled and any(self.nodes[v.node_id].requires_grad for v in vars_)

    # ---- binary ops ---------------------------------------------------
    def add(self, a: Var, b: Var) -> Var:
        _broadcast_shape(a.shape, b.shape, 'add')
        sa, sb = a.shape, b.shape
        return self._record('add', (a.node_id, b.node_id), a.value + b.value, self._needs_grad(a, b),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Var, b: Var) -> Var:
        _broadcast_shape(a.shape, b.shape, 'sub')
        sa, sb = a.shape, b.shape
        return self._record('sub', (a.node_id, b.node_id), a.value - b.value, self._needs_grad(a, b),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a: Var, b: Var) -> Var:
        _broadcast_shape(a.shape, b.shape, 'mul')
        av, bv = a.value, b.value
        return self._record('mul', (a.node_id, b.node_id), av * bv, self._needs_grad(a, b),
                            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def div(self, a: Var, b: Var) -> Var:
        _broadcast_shape(a.shape, b.shape, 'div')
        av, bv = a.value, b.value
        out = av / bv
        return self._record('div', (a.node_id, b.node_id), out, self._needs_grad(a, b),
                            lambda g: (_unbroadcast(g / bv, av.shape),
                                       _unbroadcast(-g * out / bv, bv.shape)))

    def matmul(self, a: Var, b: Var) -> Var:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.value, b.value
        return self._record('matmul', (a.node_id, b.node_id), av @ bv, self._needs_grad(a, b),
                            lambda g: (g @ bv.T, av.T @ g))

    # ---- scalar ops ---------------------------------------------------
    def scale(self, a: Var, factor: float) -> Var:
        return self._record('scale', (a.node_id,), a.value * factor, self._needs_grad(a),
                            lambda g: (g * factor,))

    def shift(self, a: Var, offset: float) -> Var:
        return self._record('shift', (a.node_id,), a.value + offset, self._needs_grad(a),
                            lambda g: (g,))

    def power(self, a: Var, exponent: float) -> Var:
        av = a.value
        return self._record('power', (a.node_id,), av ** exponent, self._needs_grad(a),
                            lambda g: (g * exponent * av ** (exponent - 1.0),))

    # ---- elementwise --------------------------------------------------
    def tanh(self, a: Var) -> Var:
        out = np.tanh(a.value)
        return self._record('tanh', (a.node_id,), out, self._needs_grad(a),
                            lambda g: (g * (1.0 - out * out),))

    def relu(self, a: Var) -> Var:
        av = a.value
        return self._record('relu', (a.node_id,), np.maximum(av, 0.0), self._needs_grad(a),
                            lambda g: (g * (av > 0.0),))

    def softplus(self, a: Var) -> Var:
        av = a.value
        out = np.logaddexp(0.0, av)
        return self._record('softplus', (a.node_id,), out, self._needs_grad(a),
                            lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * av)),))

    def exp(self, a: Var) -> Var:
        out = np.exp(a.value)
        return self._record('exp', (a.node_id,), out, self._needs_grad(a),
                            lambda g: (g * out,))

    def log(self, a: Var) -> Var:
        av = a.value
        return self._record('log', (a.node_id,), np.log(av), self._needs_grad(a),
                            lambda g: (g / av,))

    # ---- reductions and reshaping -------------------------------------
    def sum(self, a: Var, axis: Optional[int] = None) -> Var:
        shape = a.shape
        out = a.value.sum(axis=axis, keepdims=True) if axis is not None else a.value.sum().reshape(1, 1)
        return self._record('sum', (a.node_id,), out, self._needs_grad(a),
                            lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, a: Var, axis: Optional[int] = None) -> Var:
        count = a.value.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis), 1.0 / count)

    def logsumexp(self, a: Var) -> Var:
        """Row-wise log-sum-exp, shape (rows, 1)"""
        av = a.value
        peak = av.max(axis=1, keepdims=True)
        out = peak + np.log(np.exp(av - peak).sum(axis=1, keepdims=True))
        return self._record('logsumexp', (a.node_id,), out, self._needs_grad(a),
                            lambda g: (g * np.exp(av - out),))

    def transpose(self, a: Var) -> Var:
        return self._record('transpose', (a.node_id,), a.value.T, self._needs_grad(a),
                            lambda g: (g.T,))

    def take_cols(self, a: Var, indices: Sequence[int]) -> Var:
        idx = np.asarray(indices, dtype=np.int64)
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, (slice(None), idx), g)
            return (full,)

        return self._record('take_cols', (a.node_id,), a.value[:, idx], self._needs_grad(a), backward)

    def slice_cols(self, a: Var, start: int, stop: int) -> Var:
        return self.take_cols(a, range(start, stop))

    def concat_cols(self, parts: Sequence[Var]) -> Var:
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
        widths = [p.shape[1] for p in parts]
        bounds = np.cumsum([0] + widths)
        out = np.concatenate([p.value for p in parts], axis=1)
        return self._record('concat_cols', tuple(p.node_id for p in parts), out, self._needs_grad(*parts),
                            lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))))

    def stop_gradient(self, a: Var) -> Var:
        return self._record('stop_gradient', (a.node_id,), a.value, False)

    # ---- reverse sweep ------------------------------------------------
    def backward(self, loss: Var) -> Dict[int, np.ndarray]:
        if self._backward_done:
            raise UsageError("backward already ran on this tape; call reset() first")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1, 1) loss, got {loss.shape}")
        self._backward_done = True
        self.grads = {loss.node_id: np.ones((1, 1))}
        for node_id in range(loss.node_id, -1, -1):
            node = self.nodes[node_id]
            grad = self.grads.get(node_id)
            if grad is None or node.backward is None:
                continue
            for input_id, input_grad in zip(node.inputs, node.backward(grad)):
                if input_grad is None or not self.nodes[input_id].requires_grad:
                    continue
                if input_id in self.grads:
                    self.grads[input_id] = self.grads[input_id] + input_grad
                else:
                    self.grads[input_id] = input_grad
        return self.grads

    def grad(self, var: Var) -> np.ndarray:
        if not self._backward_done:
            raise UsageError("gradient requested before backward()")
        return self.grads.get(var.node_id, np.zeros(var.shape))


def no_grad_tape() -> Tape:
    return Tape(enabled=False)


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn(x)
        x[idx] = old - h
        down = fn(x)
        x[idx] = old
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def numerical_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a map R^n -> R^m at a single point"""
    x = np.array(x, dtype=np.float64).ravel()
    cols = []
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        cols.append((np.ravel(fn(x + step)) - np.ravel(fn(x - step))) / (2.0 * h))
    return np.stack(cols, axis=1)


# ---- optimisation -----------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0
    last_skipped: bool = False


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction; non-finite gradients skip the step"""
    for name, g in grads.items():
        if name in state.m and state.m[name].shape != params[name].shape:
            raise ShapeError(f"optimizer state for {name} has shape {state.m[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        state.last_skipped = True
        return state

    state.last_skipped = False
    state.step += 1
    t = state.step
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name] = m
        state.v[name] = v
    return state


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr down to zero"""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step, 0), total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * progress))
