"""Closed-form flow matching over an isotropic Gaussian mixture target.

The latent at time ``t`` is ``z_t = alpha_t * eps + beta_t * x1`` with
``eps ~ N(0, I)`` and ``x1`` drawn from the mixture, so every conditional
quantity (posterior mean, score, velocity) is available analytically.
Everything here is a pure function; NFE accounting lives in the search ledger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DomainError, StateError


class Interpolant(str, Enum):
    LINEAR = "linear"
    VP = "vp"


@dataclass(frozen=True)
class GmmTarget:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    stds: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.asarray(self.means, dtype=float)
        sd = np.asarray(self.stds, dtype=float).reshape(-1)
        if mu.ndim != 2:
            raise DomainError(f"means must be (K, d), got shape {mu.shape}")
        if not (len(w) == len(sd) == mu.shape[0]) or len(w) == 0:
            raise DomainError("weights, means and stds must describe the same K >= 1 components")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be strictly positive and sum to 1")
        if np.any(~(sd > 0)) or not np.all(np.isfinite(sd)):
            raise DomainError("stds must be finite and > 0")
        if not np.all(np.isfinite(mu)):
            raise DomainError("means must be finite")
        for name, arr in (("weights", w), ("means", mu), ("stds", sd)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        # hot-path constants, not dataclass fields
        object.__setattr__(self, "_log_w", np.log(w))
        object.__setattr__(self, "_var", sd ** 2)

    @classmethod
    def from_components(cls, components: Sequence[tuple[float, Sequence[float], float]]) -> "GmmTarget":
        """Build from ``(weight, mean, std)`` triples."""
        return cls(
            weights=np.array([c[0] for c in components], dtype=float),
            means=np.array([list(c[1]) for c in components], dtype=float),
            stds=np.array([c[2] for c in components], dtype=float),
        )

    @property
    def dims(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def permuted(self, order: Sequence[int]) -> "GmmTarget":
        order = list(order)
        return GmmTarget(self.weights[order], self.means[order], self.stds[order])


@dataclass(frozen=True)
class TimeGrid:
    times: tuple[float, ...]

    def __post_init__(self):
        ts = tuple(float(x) for x in self.times)
        if len(ts) < 2:
            raise DomainError("a time grid needs at least one step")
        if ts[0] != 0.0 or ts[-1] != 1.0:
            raise DomainError("time grid must start at 0 and end at 1")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DomainError("time grid must be strictly increasing")
        object.__setattr__(self, "times", ts)

    @classmethod
    def uniform(cls, steps: int = 10) -> "TimeGrid":
        if steps < 1:
            raise DomainError("steps must be positive")
        ts = [i / steps for i in range(steps + 1)]
        ts[-1] = 1.0
        return cls(tuple(ts))

    @property
    def steps(self) -> int:
        return len(self.times) - 1


@dataclass(frozen=True)
class FlowState:
    z: np.ndarray
    step: int
    time: float

    @classmethod
    def initial(cls, z: np.ndarray, grid: TimeGrid) -> "FlowState":
        return cls(np.asarray(z, dtype=float), 0, grid.times[0])


@dataclass(frozen=True)
class SdeChurn:
    """Diffusion coefficient ``sigma(t) = gamma * alpha_t``; gamma = 0 is the ODE."""

    gamma: float = 0.5

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise DomainError("churn gamma must be a finite value >= 0")


ODE = SdeChurn(0.0)


def _check_t(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"t={t} outside [0, 1]")
    return t


def schedule(interpolant: Interpolant, t: float) -> tuple[float, float, float, float]:
    """Return ``(alpha, beta, alpha_dot, beta_dot)`` at time ``t``."""
    t = _check_t(t)
    if interpolant == Interpolant.LINEAR:
        return 1.0 - t, t, -1.0, 1.0
    if interpolant == Interpolant.VP:
        half_pi = 0.5 * math.pi
        # cos/sin of pi/2 are not exact in floating point
        if t == 0.0:
            return 1.0, 0.0, 0.0, half_pi
        if t == 1.0:
            return 0.0, 1.0, -half_pi, 0.0
        c, s = math.cos(half_pi * t), math.sin(half_pi * t)
        return c, s, -half_pi * s, half_pi * c
    raise DomainError(f"unknown interpolant {interpolant!r}")


def component_marginal_std(interpolant: Interpolant, t: float, std_k: float) -> float:
    if not std_k > 0:
        raise DomainError("component std must be > 0")
    alpha, beta, _, _ = schedule(interpolant, t)
    return math.sqrt(alpha * alpha + beta * beta * std_k * std_k)


@dataclass
class _Posterior:
    alpha: float
    beta: float
    alpha_dot: float
    beta_dot: float
    gamma: np.ndarray  # (..., K)
    s2: np.ndarray  # (K,)
    resid: np.ndarray  # (..., K, d): z - beta * mu_k
    log_norm: np.ndarray = field(default=None)  # (...,) log p_t(z)


def _posterior(target: GmmTarget, interpolant: Interpolant, z: np.ndarray, t: float) -> _Posterior:
    alpha, beta, alpha_dot, beta_dot = schedule(interpolant, t)
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("z must be finite")
    d = target.dims
    s2 = alpha * alpha + beta * beta * target._var
    resid = z[..., None, :] - beta * target.means
    log_terms = (
        target._log_w
        - 0.5 * d * np.log(2.0 * math.pi * s2)
        - 0.5 * np.einsum("...kd,...kd->...k", resid, resid) / s2
    )
    top = log_terms.max(axis=-1, keepdims=True)
    unnorm = np.exp(log_terms - top)
    total = unnorm.sum(axis=-1, keepdims=True)
    gamma = unnorm / total
    log_norm = (top + np.log(total))[..., 0]
    return _Posterior(alpha, beta, alpha_dot, beta_dot, gamma, s2, resid, log_norm)


def log_marginal(target: GmmTarget, interpolant: Interpolant, z: np.ndarray, t: float) -> np.ndarray:
    """log p_t(z) of the latent marginal."""
    return _posterior(target, interpolant, z, t).log_norm


def responsibilities(target: GmmTarget, interpolant: Interpolant, z: np.ndarray, t: float) -> np.ndarray:
    return _posterior(target, interpolant, z, t).gamma


def _score(p: _Posterior) -> np.ndarray:
    return -np.einsum("...k,...kd->...d", p.gamma / p.s2, p.resid)


def _x1_hat(p: _Posterior, target: GmmTarget) -> np.ndarray:
    shrink = p.beta * target._var / p.s2  # (K,)
    cond = target.means + shrink[:, None] * p.resid  # (..., K, d)
    return np.einsum("...k,...kd->...d", p.gamma, cond)


def score(target: GmmTarget, interpolant: Interpolant, z: np.ndarray, t: float) -> np.ndarray:
    """Gradient of log p_t at z."""
    return _score(_posterior(target, interpolant, z, t))


def posterior_mean_x1(target: GmmTarget, interpolant: Interpolant, z: np.ndarray, t: float) -> np.ndarray:
    """Tweedie denoiser E[x1 | z_t = z]. Exactly z at t = 1."""
    if _check_t(t) == 1.0:
        return np.array(z, dtype=float)
    return _x1_hat(_posterior(target, interpolant, z, t), target)


def velocity(target: GmmTarget, interpolant: Interpolant, z: np.ndarray, t: float) -> np.ndarray:
    p = _posterior(target, interpolant, z, t)
    # E[eps | z] = -alpha * score
    return -p.alpha_dot * p.alpha * _score(p) + p.beta_dot * _x1_hat(p, target)


def sample_prior(dims: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(dims)


def drift_and_diffusion(
    target: GmmTarget, interpolant: Interpolant, z: np.ndarray, t: float, churn: SdeChurn
) -> tuple[np.ndarray, float]:
    """SDE drift ``v + sigma^2/2 * score`` and diffusion ``sigma`` at (z, t)."""
    p = _posterior(target, interpolant, z, t)
    s = _score(p)
    v = -p.alpha_dot * p.alpha * s + p.beta_dot * _x1_hat(p, target)
    sigma = churn.gamma * p.alpha
    if sigma == 0.0:
        return v, 0.0
    return v + 0.5 * sigma * sigma * s, sigma


def step(
    state: FlowState,
    target: GmmTarget,
    interpolant: Interpolant,
    grid: TimeGrid,
    churn: SdeChurn,
    rng: np.random.Generator | None,
) -> FlowState:
    """Advance one grid interval. Each call is one NFE.

    The rng is only consumed when the diffusion coefficient is nonzero, so
    ``gamma = 0`` reproduces the Euler ODE step bit for bit.
    """
    if state.step >= grid.steps:
        raise StateError(f"cannot step past the final grid point (step={state.step})")
    t0 = grid.times[state.step]
    t1 = grid.times[state.step + 1]
    dt = t1 - t0
    drift, sigma = drift_and_diffusion(target, interpolant, state.z, t0, churn)
    z = state.z + drift * dt
    if sigma > 0.0:
        z = z + sigma * math.sqrt(dt) * rng.standard_normal(np.shape(state.z))
    return FlowState(z, state.step + 1, t1)


def integrate(
    z0: np.ndarray,
    target: GmmTarget,
    interpolant: Interpolant,
    grid: TimeGrid,
    churn: SdeChurn = ODE,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run all grid steps from t = 0; z0 may be a batch of shape (n, d)."""
    state = FlowState.initial(z0, grid)
    while state.step < grid.steps:
        state = step(state, target, interpolant, grid, churn, rng)
    return state.z
