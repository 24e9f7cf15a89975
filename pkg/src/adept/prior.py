"""Gaussian population prior with an inverse-gamma hyper-prior on the scale.

The regularizer shared by every ADEPT loss is

    R = (1/m) sum_i (2 xi + ||mu - theta_i||^2) / (2 sigma^2) + d_theta log sigma

with a scalar ``sigma``, or the coordinate-wise analogue when ``sigma`` is a
vector (one scale per parameter).
"""

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class PriorState:
    """Population parameters ``(mu, sigma)`` plus the hyper-parameter ``xi``.

    ``mu`` is a flat vector for AE/DGM and a ``d x r`` matrix for PCA.
    ``sigma`` is a positive scalar, or a positive vector of length ``d_theta``
    in per-weight mode.
    """

    mu: np.ndarray
    sigma: object
    xi: float
    d_theta: int

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("sigma must be positive and finite")
        if sigma.ndim == 1 and sigma.shape[0] != self.d_theta:
            raise ValueError(f"per-weight sigma has length {sigma.shape[0]}, expected {self.d_theta}")
        object.__setattr__(self, "sigma", float(sigma) if sigma.ndim == 0 else sigma)

    @property
    def per_weight(self) -> bool:
        return np.ndim(self.sigma) == 1

    def with_(self, **changes) -> "PriorState":
        return replace(self, **changes)


@dataclass(frozen=True)
class SigmaSchedule:
    """When and how hard sigma is allowed to move.

    sigma is held fixed for rounds ``<= lazy_start_round``; ``freeze_rounds`` is
    the short warm-up freeze and ``lazy_start_round`` defaults to it.
    """

    init: float = 0.4
    freeze_rounds: int = 0
    lazy_start_round: Optional[int] = None
    omega: float = 0.5
    clip_inf: float = 10.0

    def __post_init__(self):
        if self.lazy_start_round is None:
            object.__setattr__(self, "lazy_start_round", self.freeze_rounds)
        if not self.init > 0:
            raise ValueError("initial sigma must be positive")
        if not self.lazy_start_round >= self.freeze_rounds >= 0:
            raise ValueError("need lazy_start_round >= freeze_rounds >= 0")
        if not 0 < self.omega < 1:
            raise ValueError(f"omega must lie in (0, 1), got {self.omega}")
        if not self.clip_inf > 0:
            raise ValueError("clip_inf must be positive")

    def updates_at(self, round_: int) -> bool:
        return round_ > self.lazy_start_round


def _euclidean_sq(mu, theta) -> float:
    diff = np.asarray(mu, dtype=np.float64) - np.asarray(theta, dtype=np.float64)
    return float(np.sum(diff * diff))


def _check_sigma(sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")


def regularizer_value(thetas: Sequence[np.ndarray], prior: PriorState,
                      dist: Optional[Callable] = None) -> float:
    """Value of the hierarchical-Bayes regularizer over all clients.

    ``dist(mu, theta)`` returns a (non-squared) distance; it defaults to the
    Euclidean norm. For PCA pass :func:`adept.manifold.stiefel_distance`.
    Per-weight mode always uses coordinate-wise squared differences.
    """
    _check_sigma(prior.sigma)
    m = len(thetas)
    if m == 0:
        raise ValueError("need at least one client parameter")
    if prior.per_weight:
        sig2 = prior.sigma ** 2
        total = 0.0
        for theta in thetas:
            diff = np.ravel(prior.mu) - np.ravel(theta)
            total += float(np.sum((2 * prior.xi + diff * diff) / (2 * sig2)))
        return total / m + float(np.sum(np.log(prior.sigma)))
    if dist is None:
        sq = [_euclidean_sq(prior.mu, th) for th in thetas]
    else:
        sq = [dist(prior.mu, th) ** 2 for th in thetas]
    sig2 = prior.sigma ** 2
    return float(np.mean([(2 * prior.xi + s) / (2 * sig2) for s in sq])) + prior.d_theta * np.log(prior.sigma)


def prior_term(dist_sq, prior: PriorState) -> float:
    """Per-client ``(2 xi + dist^2) / (2 sigma^2)``, summed over coordinates in per-weight mode."""
    _check_sigma(prior.sigma)
    return float(np.sum((2 * prior.xi + np.asarray(dist_sq)) / (2 * np.asarray(prior.sigma) ** 2)))


def log_sigma_term(prior: PriorState) -> float:
    """The ``d_theta log sigma`` term, charged once at the aggregate level."""
    if prior.per_weight:
        return float(np.sum(np.log(prior.sigma)))
    return prior.d_theta * float(np.log(prior.sigma))


def sigma_gradient(dist_sq, prior: PriorState):
    """Per-client derivative of the loss w.r.t. sigma.

    Scalar mode: ``d_theta / sigma - (2 xi + dist^2) / sigma^3``.
    Per-weight mode (``dist_sq`` a vector of squared coordinate differences):
    ``1 / sigma_j - (2 xi + dist_j^2) / sigma_j^3``.
    """
    _check_sigma(prior.sigma)
    sigma = prior.sigma
    if prior.per_weight:
        dist_sq = np.asarray(dist_sq, dtype=np.float64)
        return 1.0 / sigma - (2 * prior.xi + dist_sq) / sigma ** 3
    return prior.d_theta / sigma - (2 * prior.xi + float(dist_sq)) / sigma ** 3


def sigma_lower_bound(omega: float, xi: float, d_theta: int) -> float:
    """``omega * sqrt(2 xi / d_theta)``; pass ``d_theta=1`` for per-weight sigma."""
    if not 0 < omega < 1:
        raise ValueError(f"omega must lie in (0, 1), got {omega}")
    return omega * np.sqrt(2 * xi / d_theta)


def max_sigma_step(omega: float, xi: float, d_theta: int) -> float:
    """Largest eta3 for which the sigma lower bound is guaranteed."""
    if not 0 < omega < 1:
        raise ValueError(f"omega must lie in (0, 1), got {omega}")
    return (1 - omega) * 2 * xi / d_theta ** 2


def validate_schedule(eta3: float, sched: SigmaSchedule, xi: float, d_theta: int,
                      rtol: float = 1e-12) -> bool:
    """True iff the step size and initial sigma keep sigma above its lower bound."""
    step_ok = eta3 <= max_sigma_step(sched.omega, xi, d_theta) * (1 + rtol)
    init_ok = sched.init >= sigma_lower_bound(sched.omega, xi, d_theta) * (1 - rtol)
    return bool(step_ok and init_ok)


class SigmaBoundViolation(RuntimeError):
    """sigma fell below its proven lower bound during a monitored run."""


def check_sigma_bound(sigma, bound: float, round_: int, rtol: float = 1e-12):
    if np.any(np.asarray(sigma) < bound * (1 - rtol)):
        raise SigmaBoundViolation(f"sigma = {np.min(sigma)!r} < bound {bound!r} at round {round_}")


def clamp_sigma(sigma, bound: float):
    """Floor sigma at ``bound``; guards against floating-point drift below the proven bound."""
    if np.ndim(sigma) == 0:
        return max(float(sigma), bound)
    return np.maximum(sigma, bound)
