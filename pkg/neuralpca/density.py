"""
Base densities for the latent space
Isotropic / non-isotropic Gaussians, the descending sigma schedule and the
numerical check that the fixed-variance objective lower-bounds the
uniform-variance hierarchical model
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate

from .autodiff import Tape, Var
from .error_handling import ShapeError, UnsolvableBoundError, NeuralPCAError

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class BaseDensity:
    kind: str
    sigmas: np.ndarray

    def __post_init__(self):
        sigmas = np.asarray(self.sigmas, dtype=np.float64).ravel()
        if self.kind not in ('IG', 'NIG'):
            raise NeuralPCAError('density', f"unknown base density kind {self.kind!r}")
        if sigmas.size == 0 or np.any(sigmas <= 0) or not np.all(np.isfinite(sigmas)):
            raise NeuralPCAError('density', "sigmas must be finite and strictly positive")
        if np.any(np.diff(sigmas) > 0):
            raise NeuralPCAError('density', "sigmas must be non-increasing")
        if self.kind == 'IG' and not np.all(sigmas == 1.0):
            raise NeuralPCAError('density', "IG base density has unit sigmas")
        object.__setattr__(self, 'sigmas', sigmas)

    @property
    def dim(self) -> int:
        return self.sigmas.size

    @classmethod
    def isotropic(cls, n: int) -> 'BaseDensity':
        return cls('IG', np.ones(n))

    @classmethod
    def non_isotropic(cls, sigmas) -> 'BaseDensity':
        return cls('NIG', np.asarray(sigmas, dtype=np.float64))

    def log_prob(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ShapeError(f"latent dimension {z.shape} does not match base density dim {self.dim}")
        return (-0.5 * np.sum(np.square(z / self.sigmas), axis=1)
                - np.sum(np.log(self.sigmas)) - 0.5 * self.dim * LOG_2PI)

    def log_prob_tape(self, tape: Tape, z: Var) -> Var:
        """Per-sample log density as a (B, 1) tape value"""
        if z.shape[1] != self.dim:
            raise ShapeError(f"latent dimension {z.shape} does not match base density dim {self.dim}")
        precision = tape.constant(1.0 / np.square(self.sigmas))
        quad = tape.sum(z * z * precision, axis=1)
        constant = -float(np.sum(np.log(self.sigmas))) - 0.5 * self.dim * LOG_2PI
        return tape.shift(tape.scale(quad, -0.5), constant)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if count <= 0:
            raise NeuralPCAError('density', f"sample count must be positive, got {count}")
        return rng.standard_normal((count, self.dim)) * self.sigmas


def log_prob(d: BaseDensity, z) -> np.ndarray:
    return d.log_prob(z)


def sample(d: BaseDensity, count: int, rng: np.random.Generator) -> np.ndarray:
    return d.sample(count, rng)


def sigma_schedule(n: int, sigma_max: float, sigma_min: float) -> np.ndarray:
    """Evenly spaced sigmas from sigma_max down to sigma_min"""
    if n <= 0 or not (sigma_max >= sigma_min > 0):
        raise NeuralPCAError('density', f"invalid sigma schedule n={n} max={sigma_max} min={sigma_min}")
    if n == 1:
        return np.array([float(sigma_max)])
    return np.linspace(sigma_max, sigma_min, n)


def base_density_for(kind: str, n: int, sigma_max: float = 1.0, sigma_min: float = 0.1) -> BaseDensity:
    if kind == 'IG':
        return BaseDensity.isotropic(n)
    return BaseDensity.non_isotropic(sigma_schedule(n, sigma_max, sigma_min))


def gaussian_entropy_per_dim() -> float:
    return 0.5 * math.log(2.0 * math.pi * math.e)


# ---- lower-bound verification -----------------------------------------

def solve_uniform_bounds(sigmas, tau: float = DEFAULT_TAU):
    """alpha, beta with alpha * beta = sigma^2 and beta - alpha = tau"""
    sigmas = np.asarray(sigmas, dtype=np.float64).ravel()
    if tau <= 0:
        raise UnsolvableBoundError(f"tau must be positive, got {tau}")
    alphas = 0.5 * (-tau + np.sqrt(tau * tau + 4.0 * sigmas * sigmas))
    betas = alphas + tau
    if np.any(alphas <= 0) or np.any(betas > 1.0):
        raise UnsolvableBoundError("no 0 < alpha < beta <= 1 for the given sigmas and tau",
                                   {'sigmas': sigmas.tolist(), 'tau': tau})
    return alphas, betas


def hierarchical_constant(alphas, betas) -> float:
    """C = sum (f(beta) - f(alpha)) / (beta - alpha) with f(x) = x (1 - log x)"""
    a = np.asarray(alphas, dtype=np.float64)
    b = np.asarray(betas, dtype=np.float64)
    f = lambda x: x * (1.0 - np.log(x))
    return float(np.sum((f(b) - f(a)) / (b - a)))


def _log_marginal_uniform_sigma(z_i: float, alpha: float, beta: float) -> float:
    """log of the integral over sigma ~ U[alpha, beta] of N(z_i; 0, sigma^2), in log space"""
    def log_integrand(s):
        return -0.5 * z_i * z_i / (s * s) - math.log(s) - 0.5 * LOG_2PI

    stationary = min(max(abs(z_i), alpha), beta)
    peak = max(log_integrand(alpha), log_integrand(beta), log_integrand(stationary))
    value, _ = integrate.quad(lambda s: math.exp(log_integrand(s) - peak), alpha, beta,
                              epsabs=0.0, epsrel=1e-12, limit=200,
                              points=[stationary] if alpha < stationary < beta else None)
    return peak + math.log(value) - math.log(beta - alpha)


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool
    constant: float
    alphas: np.ndarray
    betas: np.ndarray
    fixed_variance_objective: Optional[float] = None


def verify_hierarchical_bound(sigmas, z, tau: float = DEFAULT_TAU) -> BoundCheck:
    """Compare the fixed-variance objective with the uniform-variance marginal log-likelihood"""
    sigmas = np.asarray(sigmas, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size != sigmas.size:
        raise ShapeError(f"latent has {z.size} dims, sigmas have {sigmas.size}")
    alphas, betas = solve_uniform_bounds(sigmas, tau)
    constant = hierarchical_constant(alphas, betas)

    lhs = float(np.sum(-0.5 * z * z / (sigmas * sigmas) - 0.5 * LOG_2PI)) + constant
    rhs = float(sum(_log_marginal_uniform_sigma(zi, a, b) for zi, a, b in zip(z, alphas, betas)))
    fixed = float(np.sum(-0.5 * z * z / (sigmas * sigmas) - np.log(sigmas) - 0.5 * LOG_2PI))
    return BoundCheck(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + 1e-9 and constant > 0),
                      constant=constant, alphas=alphas, betas=betas,
                      fixed_variance_objective=fixed)
