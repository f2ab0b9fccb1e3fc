"""
Dense matrix helpers for Neural-PCA
One-sided Jacobi SVD, SO(n) projection of averaged rotations and Householder products
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple, Dict, Any, Union

import numpy as np

from .error_handling import ShapeError, NumericalError, DecompositionError, DegenerateReflectionError

MAX_SWEEPS = 60
JACOBI_TOL = 1e-12


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD x = u @ diag(sigma) @ vt with sigma sorted non-increasing"""
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.vt.T

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def as_matrix(x, name: str = 'matrix') -> np.ndarray:
    """Validate a 2-D finite float64 array"""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    return m


def frobenius(x: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(x))))


def determinant(x: np.ndarray) -> float:
    m = as_matrix(x)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"determinant needs a square matrix, got {m.shape}")
    sign, logabs = np.linalg.slogdet(m)
    return float(sign * np.exp(logabs))


def canonicalize_signs(v: np.ndarray) -> np.ndarray:
    """Per-column signs making each column's largest-magnitude entry positive (first on ties)"""
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivots, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def _complete_basis(u: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace the columns flagged in `missing` with unit vectors orthogonal to the rest"""
    rows = u.shape[0]
    for j in np.flatnonzero(missing):
        keep = np.flatnonzero(~missing)
        for e in range(rows):
            candidate = np.zeros(rows)
            candidate[e] = 1.0
            if keep.size:
                basis = u[:, keep]
                candidate = candidate - basis @ (basis.T @ candidate)
            norm = np.linalg.norm(candidate)
            if norm > 1e-8:
                u[:, j] = candidate / norm
                missing[j] = False
                break
    return u


@lru_cache(maxsize=None)
def round_robin_pairs(cols: int) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
    """Fixed sweep order: cols-1 rounds (cols if odd) of disjoint (p, q) pairs with p < q"""
    players = list(range(cols)) + ([-1] if cols % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = sorted((min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0)
        rounds.append((np.array([p for p, _ in pairs], dtype=np.int64),
                       np.array([q for _, q in pairs], dtype=np.int64)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def svd_full(x) -> SvdResult:
    """One-sided Jacobi SVD; each round rotates a set of disjoint column pairs at once"""
    a = as_matrix(x, 'svd input').copy()
    rows, cols = a.shape
    if rows < cols:
        raise ShapeError(f"svd_full needs rows >= cols, got {a.shape}")

    v = np.eye(cols)
    scale = frobenius(a)
    threshold = JACOBI_TOL * scale * scale

    converged = cols < 2 or scale == 0.0
    schedule = round_robin_pairs(cols) if not converged else ()
    sweep = 0
    while not converged:
        if sweep >= MAX_SWEEPS:
            raise DecompositionError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps",
                                     {'shape': list(a.shape)})
        sweep += 1
        rotated = False
        for ps, qs in schedule:
            ap = a[:, ps]
            aq = a[:, qs]
            alpha = np.sum(ap * ap, axis=0)
            beta = np.sum(aq * aq, axis=0)
            gamma = np.sum(ap * aq, axis=0)
            active = (np.abs(gamma) > threshold) & (np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha * beta))
            if not np.any(active):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * np.where(active, gamma, 1.0))
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t[~active] = 0.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            a[:, ps] = c * ap - s * aq
            a[:, qs] = s * ap + c * aq
            vp = v[:, ps]
            vq = v[:, qs]
            v[:, ps] = c * vp - s * vq
            v[:, qs] = s * vp + c * vq
        converged = not rotated

    sigma = np.sqrt(np.sum(a * a, axis=0))
    order = np.argsort(-sigma, kind='stable')
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]

    u = np.zeros_like(a)
    tiny = sigma <= max(scale, 1.0) * 1e-14
    u[:, ~tiny] = a[:, ~tiny] / sigma[~tiny]
    sigma[tiny] = 0.0
    if np.any(tiny):
        u = _complete_basis(u, tiny.copy())

    signs = canonicalize_signs(v)
    v = v * signs
    u = u * signs
    return SvdResult(u=u, sigma=sigma, vt=v.T)


def rotation_from_svd(svd: SvdResult) -> np.ndarray:
    """Right singular vectors as an SO(n) member: flip the weakest direction when det is -1"""
    v = svd.v.copy()
    if np.linalg.det(v) < 0:
        v[:, -1] = -v[:, -1]
    return v


def project_to_son(vbar, return_report: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, Dict[str, Any]]]:
    """Closest SO(n) member to vbar in Frobenius norm, Q diag(1,..,1,det) P^T"""
    m = as_matrix(vbar, 'vbar')
    n, cols = m.shape
    if n != cols:
        raise ShapeError(f"project_to_son needs a square matrix, got {m.shape}")

    svd = svd_full(m)
    q = svd.u
    p = svd.v
    candidate = q @ p.T
    report = {'det_flipped': False, 'degenerate': False, 'flip_index': None,
              'singular_values': svd.sigma.tolist()}

    if np.linalg.det(candidate) < 0:
        sigma = svd.sigma
        smallest = sigma[-1]
        tol = 1e-12 * max(1.0, sigma[0])
        tied = np.flatnonzero(np.abs(sigma - smallest) <= tol)
        flip = int(tied[0])
        report['det_flipped'] = True
        report['flip_index'] = flip
        report['degenerate'] = bool(tied.size > 1)
        d = np.ones(n)
        d[flip] = -1.0
        candidate = (q * d) @ p.T

    if return_report:
        return candidate, report
    return candidate


def householder_product(vs: Sequence[Sequence[float]]) -> np.ndarray:
    """H_1 H_2 ... H_k with H_i = I - 2 v v^T / |v|^2"""
    vectors = np.atleast_2d(np.asarray(vs, dtype=np.float64))
    n = vectors.shape[1]
    r = np.eye(n)
    for i, v in enumerate(vectors):
        norm_sq = v @ v
        if not np.isfinite(norm_sq) or np.sqrt(norm_sq) <= 1e-12:
            raise DegenerateReflectionError(f"reflection vector {i} has near-zero norm")
        r = r - 2.0 * np.outer(r @ v, v) / norm_sq
    return r


def is_special_orthogonal(r: np.ndarray, tol: float = 1e-10) -> bool:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        return False
    return frobenius(r.T @ r - np.eye(r.shape[0])) <= tol and np.linalg.det(r) > 0
