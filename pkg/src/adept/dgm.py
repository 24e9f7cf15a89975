"""Personalized denoising diffusion: the training loop and the analytic Gaussian case.

Training corrupts each sample as ``x (1 - alpha) + z alpha`` with a per-sample
level ``alpha = k / gamma``, ``k`` uniform on ``{1, ..., gamma}``, and asks a
denoiser ``phi(x_noisy, alpha)`` to recover ``x``. Clients are coupled through
the same population prior as the autoencoders.

The Gaussian part treats the case where each client's target is
``N(theta_i, sigma0^2 I)`` and the personal parameters are drawn from
``N(mu*, sigma*^2 I)``: closed-form shrinkage estimators, the reverse-process
KL and its Monte-Carlo check.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .ae import HBState, TrainOptions, _diff_sq, run_personalized
from .datagen import gen_gaussian_population
from .nnet import DenseNet, net_forward, net_reverse_grad
from .prior import PriorState, SigmaSchedule, log_sigma_term, prior_term


# --- corruption --------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionDraw:
    """Raw levels ``k`` in ``{1, ..., gamma}`` and the mixing weights ``alpha = k / gamma``."""

    k: np.ndarray
    gamma: int

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be a positive integer")
        k = np.asarray(self.k, dtype=np.int64)
        if k.size and (k.min() < 1 or k.max() > self.gamma):
            raise ValueError("raw corruption levels must lie in {1, ..., gamma}")
        object.__setattr__(self, "k", k)

    @property
    def alpha(self) -> np.ndarray:
        return self.k / float(self.gamma)

    @classmethod
    def sample(cls, n: int, gamma: int, rng: np.random.Generator) -> "CorruptionDraw":
        return cls(rng.integers(1, gamma + 1, size=n), gamma)


def make_denoiser(d_x: int, hidden: int, rng: np.random.Generator) -> DenseNet:
    """Three dense layers taking ``[x_noisy, alpha]`` and returning a clean-signal estimate."""
    return DenseNet.init([d_x + 1, hidden, hidden, d_x], ["relu", "relu", "identity"], rng)


def corrupt(X, alpha, Z) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)[:, None]
    return X * (1.0 - a) + Z * a


def denoising_loss(net: DenseNet, X, alpha, Z):
    """``sum_j ||phi(x_j (1-a_j) + z_j a_j, a_j) - x_j||^2`` and its flat gradient."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    inp = np.hstack([corrupt(X, alpha, Z), np.asarray(alpha, dtype=np.float64)[:, None]])
    out, cache = net_forward(net, inp)
    resid = out - X
    return float(np.sum(resid * resid)), net_reverse_grad(net, 2.0 * resid, cache)


def dgm_loss(theta, mu, prior: PriorState, X, draw: CorruptionDraw, Z, template: DenseNet) -> float:
    """Denoising error of client parameters ``theta`` plus the prior coupling to ``mu``.

    ``Z`` holds the standard Gaussian noise, one row per sample. The ``d log sigma``
    term is included so a single client's value matches the full objective with m=1.
    """
    if np.any(np.asarray(prior.sigma) <= 0):
        raise ValueError("sigma must be positive")
    data, _ = denoising_loss(template.with_flat(theta), X, draw.alpha, Z)
    return data + prior_term(_diff_sq(theta, mu, prior), prior) + log_sigma_term(prior)


def dgm_loss_fn(template: DenseNet, X, gamma: int) -> Callable:
    """``loss(theta, rng)`` drawing fresh levels and noise from ``rng`` at every call.

    Called with ``rng=None`` it uses a fixed draw, so objective tracking is deterministic.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    fixed = np.random.default_rng(0)
    fixed_draw = CorruptionDraw.sample(X.shape[0], gamma, fixed)
    fixed_z = fixed.standard_normal(X.shape)

    def loss(theta, rng=None):
        if rng is None:
            draw, Z = fixed_draw, fixed_z
        else:
            draw = CorruptionDraw.sample(X.shape[0], gamma, rng)
            Z = rng.standard_normal(X.shape)
        return denoising_loss(template.with_flat(theta), X, draw.alpha, Z)
    return loss


def validation_loss(net: DenseNet, X, gamma: int, seed: int = 0) -> float:
    """Mean per-sample denoising error over every level ``k = 1..gamma`` with fixed noise."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    rng = np.random.default_rng(seed)
    total = 0.0
    for k in range(1, gamma + 1):
        alpha = np.full(X.shape[0], k / gamma)
        total += denoising_loss(net, X, alpha, rng.standard_normal(X.shape))[0]
    return total / (gamma * X.shape[0])


def run_adept_dgm(state: HBState, datasets: Sequence[np.ndarray], etas, T: int, tau: int = 1,
                  gamma: int = 10, template: DenseNet = None,
                  options: TrainOptions = TrainOptions(), schedule: Optional[SigmaSchedule] = None,
                  seed: int = 0, workers: int = 1, monitor_theory: bool = False,
                  use_prior: bool = True, evaluate: Optional[Callable] = None):
    """Personalized denoiser training; levels and noise are redrawn at every local step.

    Learning-rate decay is configured through ``options.lr_decay_round``.
    Returns ``(HBState, RoundTrace)``.
    """
    if template is None:
        raise ValueError("an architecture template is required")
    fns = [dgm_loss_fn(template, X, gamma) for X in datasets]
    return run_personalized(state, fns, etas, T, tau, options, schedule, seed, workers,
                            monitor_theory, evaluate, use_prior)


# --- Gaussian theory ---------------------------------------------------------

@dataclass(frozen=True)
class GaussianPopulation:
    """``theta_i ~ N(mu*, sigma*^2 I)``; each client sees ``n`` draws of ``N(theta_i, sigma0^2 I)``."""

    mu_star: np.ndarray
    sigma_star_sq: float
    sigma0_sq: float
    n: int
    m: int
    T_horizon: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "mu_star", np.atleast_1d(np.asarray(self.mu_star, dtype=np.float64)))
        if self.sigma_star_sq < 0 or not self.sigma0_sq > 0:
            raise ValueError("need sigma_star_sq >= 0 and sigma0_sq > 0")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")
        if not self.T_horizon > 0:
            raise ValueError("T_horizon must be positive")

    @property
    def d(self) -> int:
        return self.mu_star.size

    @property
    def alpha_score(self) -> float:
        return score_alpha(self.sigma0_sq, self.T_horizon)


def score_alpha(sigma0_sq: float, T_horizon: float = math.inf) -> float:
    """``1/sigma0^2 - 1/(sigma0^2 + T)``."""
    tail = 0.0 if math.isinf(T_horizon) else 1.0 / (sigma0_sq + T_horizon)
    return 1.0 / sigma0_sq - tail


@dataclass(frozen=True)
class GaussianFit:
    mu_hat: np.ndarray
    theta_hats: np.ndarray
    sigma_hat_sq: float
    s_sq: float
    alpha_score: float
    floor: float
    n: int

    @property
    def weight(self) -> float:
        """Weight on the local mean in ``theta_hat_i``."""
        return _shrink_weight(self.sigma_hat_sq, self.n * self.alpha_score)

    @property
    def residual(self) -> float:
        return abs(self.sigma_hat_sq - self.floor - self.s_sq * self.weight ** 2)


def gaussian_reverse_kl(theta, theta_hat, sigma0_sq: float, T_horizon: float = math.inf) -> float:
    """``||theta - theta_hat + sigma0^2/(sigma0^2+T) theta_hat||^2``.

    The usual ``1 / (2 sigma0^2)`` Gaussian-KL factor is not applied.
    """
    if not sigma0_sq > 0:
        raise ValueError("sigma0_sq must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    c = 0.0 if math.isinf(T_horizon) else sigma0_sq / (sigma0_sq + T_horizon)
    diff = theta - theta_hat + c * theta_hat
    return float(np.sum(diff * diff))


def _shrink_weight(s, n_alpha):
    return n_alpha * s / (n_alpha * s + 1.0)


def _fixed_point_gap(s, floor, s_sq, n_alpha):
    return s - floor - s_sq * _shrink_weight(s, n_alpha) ** 2


def solve_sigma_hat_sq(floor: float, s_sq: float, n_alpha: float, grid: int = 512,
                       tol: float = 1e-12) -> float:
    """Largest root of ``s = floor + s_sq w(s)^2`` on ``[floor, floor + s_sq]``.

    The gap is ``<= 0`` at the left end and ``>= 0`` at the right. A coarse
    scan locates the last sign change, bisection then refines it.
    """
    if floor < 0 or s_sq < 0 or not n_alpha > 0:
        raise ValueError("need floor >= 0, s_sq >= 0 and n_alpha > 0")
    lo, hi = floor, floor + s_sq
    if s_sq == 0.0:
        return floor
    pts = np.linspace(lo, hi, grid + 1)
    neg = np.nonzero(_fixed_point_gap(pts, floor, s_sq, n_alpha) < 0)[0]
    if neg.size == 0:
        return lo
    i = neg[-1]
    if i == grid:
        return hi
    a, b = pts[i], pts[i + 1]
    while b - a > tol:
        mid = 0.5 * (a + b)
        if _fixed_point_gap(mid, floor, s_sq, n_alpha) < 0:
            a = mid
        else:
            b = mid
        if mid in (a, b) and b - a <= 2 * np.spacing(b):
            break
    ga = _fixed_point_gap(a, floor, s_sq, n_alpha)
    gb = _fixed_point_gap(b, floor, s_sq, n_alpha)
    return a if abs(ga) < abs(gb) else b


def gaussian_personalized_fit(means, xi: float, d: int, n: int, alpha_score: float) -> GaussianFit:
    """Empirical-Bayes estimators from the client sample means (one row per client)."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if means.shape[1] != d:
        raise ValueError(f"means have dimension {means.shape[1]}, expected {d}")
    if xi < 0 or n < 1 or not alpha_score > 0:
        raise ValueError("need xi >= 0, n >= 1 and alpha_score > 0")
    m = means.shape[0]
    mu_hat = means.mean(axis=0)
    s_sq = float(np.sum((means - mu_hat) ** 2) / (m * d))
    floor = 2.0 * xi / d
    sig = solve_sigma_hat_sq(floor, s_sq, n * alpha_score)
    w = _shrink_weight(sig, n * alpha_score)
    thetas = w * means + (1.0 - w) * mu_hat
    return GaussianFit(mu_hat, thetas, sig, s_sq, alpha_score, floor, n)


def collaboration_improvement(sigma_hat_sq: float, sigma_star_sq: float, sigma0_sq: float,
                              n: int):
    """Whether shrinkage beats local estimation, and the per-coordinate KL reduction.

    Returns ``(improves, factor)``; the collaborative KL is ``sigma0^2/n - factor``.
    """
    if sigma_hat_sq < 0 or sigma_star_sq < 0 or not sigma0_sq > 0 or n < 1:
        raise ValueError("invalid variances or sample count")
    v = sigma0_sq / n
    factor = ((2 * sigma_hat_sq + v - sigma_star_sq) / (sigma_hat_sq + v)) \
        * (v / (sigma_hat_sq + v)) * v
    return bool(sigma_hat_sq > sigma_star_sq / 2 - v / 2), float(factor)


def xi_guarantee(d: int, sigma0_sq: float, n: int) -> float:
    """Smallest hyper-prior ``xi`` for which collaboration never hurts: ``3 d sigma0^2 / (2n)``."""
    return 3.0 * d * sigma0_sq / (2.0 * n)


@dataclass(frozen=True)
class MonteCarloKL:
    """Per-coordinate average KL of the shrinkage and local estimators with standard errors."""

    avg_kl_collab: float
    avg_kl_local: float
    se_collab: float
    se_local: float
    se_diff: float
    fit: GaussianFit

    def __iter__(self):
        return iter((self.avg_kl_collab, self.avg_kl_local))


def monte_carlo_kl(pop: GaussianPopulation, xi: float, seed: int = 0) -> MonteCarloKL:
    """Simulate ``pop.m`` clients, fit both estimators, average the reverse-process KL."""
    thetas, data = gen_gaussian_population(pop, seed)
    means = np.stack([X.mean(axis=0) for X in data])
    fit = gaussian_personalized_fit(means, xi, pop.d, pop.n, pop.alpha_score)
    c = 0.0 if math.isinf(pop.T_horizon) else pop.sigma0_sq / (pop.sigma0_sq + pop.T_horizon)

    def per_client(est):
        diff = thetas - est + c * est
        return np.sum(diff * diff, axis=1) / pop.d

    kc, kl = per_client(fit.theta_hats), per_client(means)
    m = pop.m
    se = lambda a: float(a.std(ddof=1) / np.sqrt(m)) if m > 1 else math.inf
    return MonteCarloKL(float(kc.mean()), float(kl.mean()), se(kc), se(kl), se(kc - kl), fit)


KL_SWEEP_COLUMNS = ("sigma_star_sq", "xi", "avg_kl_collab", "avg_kl_local", "factor_analytic")


def kl_sweep(sigma_star_sq_grid: Sequence[float], sigma0_sq: float = 1.0, n: int = 10, d: int = 2,
             m_sim: int = 10_000, xi: Optional[float] = None, seed: int = 0) -> List[dict]:
    """One row per grid point; ``xi=None`` uses :func:`xi_guarantee`."""
    xi = xi_guarantee(d, sigma0_sq, n) if xi is None else xi
    rows = []
    for j, s2 in enumerate(sigma_star_sq_grid):
        pop = GaussianPopulation(np.zeros(d), float(s2), sigma0_sq, n, m_sim)
        mc = monte_carlo_kl(pop, xi, seed=seed + j)
        _, factor = collaboration_improvement(mc.fit.sigma_hat_sq, s2, sigma0_sq, n)
        rows.append({"sigma_star_sq": float(s2), "xi": xi, "avg_kl_collab": mc.avg_kl_collab,
                     "avg_kl_local": mc.avg_kl_local, "factor_analytic": factor})
    return rows
