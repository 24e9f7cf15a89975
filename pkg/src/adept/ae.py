"""Adaptive personalized autoencoders and the shared neural-network training loop.

Each client ``i`` owns a flat parameter vector ``theta_i`` (encoder followed by
decoder); the server holds ``mu`` and ``sigma``. The per-client objective is
a data loss plus ``(2 xi + ||mu - theta_i||^2) / (2 sigma^2)`` with
``d_theta log sigma`` charged once at the aggregate level.

:func:`run_personalized` implements the round structure for any data loss
given as ``loss_fn(theta, rng) -> (value, gradient)``; the autoencoder and the
denoiser plug into it.
"""

from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .nnet import DenseNet, OptimState, clip_inf, net_forward, net_reverse_grad
from .prior import (PriorState, SigmaSchedule, check_sigma_bound, clamp_sigma, log_sigma_term,
                    prior_term, sigma_gradient, sigma_lower_bound)
from .runtime import ClientUpdate, RoundMessage, check_finite, ordered_sum, run_rounds

TRACE_COLUMNS = ("iter", "round", "mean_loss", "mean_energy", "sigma_min", "sigma_mean",
                 "sigma_max", "grad_theta_msq", "grad_mu_sq", "grad_sigma_sq")


@dataclass(frozen=True)
class AeClientData:
    X: np.ndarray
    latent_dim: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("need at least one sample of positive dimension")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class TrainOptions:
    """Training variations on top of the plain alternating-gradient listing.

    The defaults are the stabilising changes used for the synthetic
    experiments; :meth:`literal` switches all of them off.

    Attributes
    ----------
    per_weight_sigma : bool
        One scale per parameter instead of a single shared ``sigma``.
    clip_model, clip_sigma : float or None
        Per-coordinate gradient caps for ``theta``/``mu`` and for ``sigma``.
    sigma_first : bool
        Update ``sigma`` at the first local iteration of a round (and use the
        new value during the round) rather than at the last.
    global_in_local : bool
        Update the client's copy of ``mu`` at every local iteration.
    theta_optimizer, mu_optimizer : str
        ``"sgd"``, ``"momentum"`` or ``"adam"``; ``sigma`` always uses SGD.
    lr_decay_round : int or None
        Multiply ``eta1`` and ``eta2`` by ``lr_decay`` from this communication round on.
    clamp : bool
        Floor aggregated ``sigma`` at ``omega sqrt(2 xi / d_theta)``.
    """

    per_weight_sigma: bool = True
    clip_model: Optional[float] = 1.0
    clip_sigma: Optional[float] = 10.0
    sigma_first: bool = True
    global_in_local: bool = True
    theta_optimizer: str = "momentum"
    momentum: float = 0.9
    mu_optimizer: str = "sgd"
    lr_decay_round: Optional[int] = None
    lr_decay: float = 0.1
    clamp: bool = True
    omega: float = 0.5

    @classmethod
    def literal(cls, **overrides) -> "TrainOptions":
        base = cls(per_weight_sigma=False, clip_model=None, clip_sigma=None, sigma_first=False,
                   global_in_local=False, theta_optimizer="sgd", mu_optimizer="sgd")
        return replace(base, **overrides)


@dataclass
class HBState:
    """Personal parameter vectors, the population prior and the round counter."""

    locals: List[np.ndarray]
    mu: np.ndarray
    prior: PriorState
    round: int = 0

    def copy(self) -> "HBState":
        return HBState([t.copy() for t in self.locals], self.mu.copy(), self.prior, self.round)


AeState = HBState


def initial_hb_state(net: DenseNet, m: int, sigma0: float, xi: float,
                     per_weight: bool = True) -> HBState:
    """All clients and the global model start from the same network."""
    theta = net.flat
    d = theta.size
    sigma = np.full(d, float(sigma0)) if per_weight else float(sigma0)
    return HBState([theta.copy() for _ in range(m)], theta.copy(), PriorState(theta.copy(), sigma, xi, d))


# --- autoencoder -------------------------------------------------------------

def make_autoencoder(d_x: int, latent_dim: int, rng: np.random.Generator,
                     out_activation: str = "sigmoid") -> DenseNet:
    """Two-layer fully connected autoencoder: ReLU code layer, then ``out_activation``."""
    return DenseNet.init([d_x, latent_dim, d_x], ["relu", out_activation], rng)


def reconstruction_loss(net: DenseNet, X: np.ndarray):
    """``||X - net(X)||_F^2`` (summed over samples) and its flat gradient."""
    out, cache = net_forward(net, X)
    resid = out - X
    return float(np.sum(resid * resid)), net_reverse_grad(net, 2.0 * resid, cache)


def ae_loss_fn(template: DenseNet, data: AeClientData) -> Callable:
    def loss(theta, rng=None):
        return reconstruction_loss(template.with_flat(theta), data.X)
    return loss


def _diff_sq(theta, mu, prior: PriorState):
    diff = np.asarray(mu) - np.asarray(theta)
    return diff * diff if prior.per_weight else float(np.sum(diff * diff))


def ae_local_loss(theta, mu, prior: PriorState, data: AeClientData, template: DenseNet) -> float:
    """Reconstruction error over the client's samples plus the prior term."""
    recon, _ = reconstruction_loss(template.with_flat(theta), data.X)
    return recon + prior_term(_diff_sq(theta, mu, prior), prior)


def ae_loss(thetas, mu, prior: PriorState, datasets, template: DenseNet) -> float:
    vals = [ae_local_loss(t, mu, prior, d, template) for t, d in zip(thetas, datasets)]
    return float(np.mean(vals)) + log_sigma_term(prior)


def hb_gradients(theta, mu, prior: PriorState, data_grad):
    """Gradients of ``data_loss + prior_term`` in ``theta``, ``mu`` and ``sigma``."""
    sig2 = np.asarray(prior.sigma) ** 2
    g_theta = data_grad + (theta - mu) / sig2
    g_mu = (mu - theta) / sig2
    g_sigma = sigma_gradient(_diff_sq(theta, mu, prior), prior)
    return g_theta, g_mu, g_sigma


def energy_captured(x, x_hat) -> np.ndarray:
    """Per-sample ``100 (1 - ||x - x_hat||^2 / ||x||^2)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    norms = np.sum(x * x, axis=1)
    if np.any(norms == 0):
        raise ValueError("energy is undefined for a zero-norm sample")
    return 100.0 * (1.0 - np.sum((x - x_hat) ** 2, axis=1) / norms)


def mean_energy(nets: Sequence[DenseNet], data: Sequence[np.ndarray]) -> float:
    """Energy captured, averaged over samples then over clients."""
    return float(np.mean([np.mean(energy_captured(X, net(X))) for net, X in zip(nets, data)]))


# --- generic hierarchical-prior trainer --------------------------------------

def _clip(g, c):
    return g if c is None else clip_inf(g, c)


class _HBClient:
    def __init__(self, client_id, theta0, loss_fn, etas, tau, options: TrainOptions,
                 schedule: SigmaSchedule, xi, d_theta, bound, use_prior=True,
                 monitor_theory=False):
        self.client_id = client_id
        self.theta = np.array(theta0, dtype=np.float64)
        self.loss_fn = loss_fn
        self.eta1, self.eta2, self.eta3 = etas
        self.tau = tau
        self.opt = options
        self.schedule = schedule
        self.xi = xi
        self.d_theta = d_theta
        self.bound = bound
        self.use_prior = use_prior
        self.monitor_theory = monitor_theory
        self.round_ = 0
        self.theta_opt = OptimState(options.theta_optimizer, beta=options.momentum)
        self.mu_opt = OptimState(options.mu_optimizer, beta=options.momentum)
        self.last_loss = np.nan
        self.grad_theta_sq = np.nan
        self.g_mu = None
        self.g_sigma = None

    def _prior(self, mu, sigma):
        return PriorState(mu, sigma, self.xi, self.d_theta)

    def _lr_scale(self, round_):
        if self.opt.lr_decay_round is not None and round_ >= self.opt.lr_decay_round:
            return self.opt.lr_decay
        return 1.0

    def _sigma_step(self, mu, sigma):
        g = sigma_gradient(_diff_sq(self.theta, mu, self._prior(mu, sigma)), self._prior(mu, sigma))
        self.g_sigma = g
        new = sigma - self.eta3 * _clip(g, self.opt.clip_sigma)
        if self.opt.clamp and not self.monitor_theory:
            return clamp_sigma(new, self.bound)
        check_sigma_bound(new, self.bound, self.round_)
        return new

    def receive(self, msg: RoundMessage):
        self.mu = np.array(msg.mu, dtype=np.float64)
        self.sigma = msg.sigma
        self.mu_i = self.mu.copy()
        self.sigma_i = msg.sigma
        self.fresh = True

    def local_step(self, t, rng):
        round_ = (t - 1) // self.tau + 1
        self.round_ = round_
        sigma_on = self.use_prior and self.schedule.updates_at(round_)
        if self.fresh and self.opt.sigma_first and sigma_on:
            self.sigma_i = self._sigma_step(self.mu, self.sigma)
        self.fresh = False
        scale = self._lr_scale(round_)
        loss, g_data = self.loss_fn(self.theta, rng)
        if self.use_prior:
            mu_ref = self.mu_i if self.opt.global_in_local else self.mu
            sig = self.sigma_i if self.opt.sigma_first else self.sigma
            g_theta, _, _ = hb_gradients(self.theta, mu_ref, self._prior(mu_ref, sig), g_data)
        else:
            g_theta = g_data
        self.last_loss = loss
        self.grad_theta_sq = float(np.sum(g_theta * g_theta))
        self.theta = self.theta_opt.step(self.theta, _clip(g_theta, self.opt.clip_model), self.eta1 * scale)
        check_finite(f"client {self.client_id} parameters", self.theta)
        if self.use_prior and self.opt.global_in_local:
            g_mu = (self.mu_i - self.theta) / np.asarray(sig) ** 2
            self.g_mu = g_mu
            self.mu_i = self.mu_opt.step(self.mu_i, _clip(g_mu, self.opt.clip_model), self.eta2 * scale)

    def send(self, t, rng):
        round_ = self.round_
        if not self.use_prior:
            return ClientUpdate(self.client_id, self.theta.copy(), self.sigma,
                                metrics={"grad_theta_sq": self.grad_theta_sq, "loss": self.last_loss})
        if not self.opt.global_in_local:
            g_mu = (self.mu - self.theta) / np.asarray(self.sigma) ** 2
            self.g_mu = g_mu
            self.mu_i = self.mu_opt.step(self.mu, _clip(g_mu, self.opt.clip_model),
                                         self.eta2 * self._lr_scale(round_))
        if not self.opt.sigma_first:
            if self.schedule.updates_at(round_):
                self.sigma_i = self._sigma_step(self.mu, self.sigma)
            else:
                self.g_sigma = sigma_gradient(_diff_sq(self.theta, self.mu, self._prior(self.mu, self.sigma)),
                                              self._prior(self.mu, self.sigma))
        if self.g_sigma is None:
            self.g_sigma = sigma_gradient(_diff_sq(self.theta, self.mu, self._prior(self.mu, self.sigma)),
                                          self._prior(self.mu, self.sigma))
        return ClientUpdate(self.client_id, self.mu_i, self.sigma_i,
                            metrics={"grad_theta_sq": self.grad_theta_sq, "loss": self.last_loss},
                            extras={"grad_mu": self.g_mu, "grad_sigma": self.g_sigma})


def run_personalized(state: HBState, loss_fns: Sequence[Callable], etas, T: int, tau: int = 1,
                     options: TrainOptions = TrainOptions(), schedule: Optional[SigmaSchedule] = None,
                     seed: int = 0, workers: int = 1, monitor_theory: bool = False,
                     evaluate: Optional[Callable] = None, use_prior: bool = True,
                     track_objective: bool = False):
    """Alternating gradient training of personal models under the population prior.

    Parameters
    ----------
    state : HBState
        Starting personal parameters, global model and prior.
    loss_fns : sequence of callables
        ``loss_fn(theta, rng) -> (data_loss, flat_gradient)`` per client.
    etas : tuple of float
        ``(eta1, eta2, eta3)`` for ``theta_i``, ``mu`` and ``sigma``.
    T, tau : int
        Iterations and local iterations per communication round.
    schedule : SigmaSchedule, optional
        Freeze/lazy rules for ``sigma``; defaults to updating from round 1.
    monitor_theory : bool
        Disable the clamp and raise if ``sigma`` crosses its lower bound.
    evaluate : callable, optional
        ``evaluate(thetas) -> float`` logged as ``mean_energy``.
    use_prior : bool
        ``False`` trains every client alone (no communication of parameters).
    track_objective : bool
        Log the full objective at every iteration (one extra pass per client;
        needs deterministic loss functions).

    Returns
    -------
    (HBState, RoundTrace)
    """
    if len(loss_fns) != len(state.locals):
        raise ValueError("one loss function per client is required")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    schedule = schedule or SigmaSchedule(init=float(np.max(state.prior.sigma)), omega=options.omega)
    prior0 = state.prior
    d_bound = 1 if prior0.per_weight else prior0.d_theta
    bound = sigma_lower_bound(options.omega, prior0.xi, d_bound)
    clients = [_HBClient(i, th, fn, etas, tau, options, schedule, prior0.xi, prior0.d_theta, bound,
                         use_prior, monitor_theory)
               for i, (th, fn) in enumerate(zip(state.locals, loss_fns))]
    round_offset = state.round

    def aggregate(updates, prev, t):
        m = len(updates)
        if not use_prior:
            return RoundMessage(prev.mu, prev.sigma, t)
        mu = ordered_sum([np.asarray(u.mu_i) for u in updates]) / m
        sigma = ordered_sum([np.asarray(u.sigma_i, dtype=np.float64) for u in updates]) / m
        if options.clamp and not monitor_theory:
            sigma = clamp_sigma(sigma, bound)
        elif monitor_theory:
            check_sigma_bound(sigma, bound, t)
        check_finite("server update", mu, sigma)
        if np.any(np.asarray(sigma) <= 0):
            raise FloatingPointError(f"sigma became non-positive at iteration {t}")
        sigma = float(sigma) if np.ndim(sigma) == 0 else sigma
        return RoundMessage(mu, sigma, t)

    def monitor(t, msg, updates):
        thetas = [c.theta for c in clients]
        prior = PriorState(msg.mu, msg.sigma, prior0.xi, prior0.d_theta)
        sig = np.asarray(msg.sigma)
        row = {"round": round_offset + (t // tau),
               "mean_loss": float(np.mean([c.last_loss for c in clients])),
               "grad_theta_msq": float(np.mean([c.grad_theta_sq for c in clients])),
               "sigma_min": float(sig.min()), "sigma_mean": float(sig.mean()),
               "sigma_max": float(sig.max())}
        if track_objective:
            vals = [c.loss_fn(th, None)[0] for c, th in zip(clients, thetas)]
            if use_prior:
                vals = [v + prior_term(_diff_sq(th, msg.mu, prior), prior) for v, th in zip(vals, thetas)]
            row["objective"] = float(np.mean(vals)) + (log_sigma_term(prior) if use_prior else 0.0)
        if updates is not None and use_prior:
            g_mu = ordered_sum([u.extras["grad_mu"] for u in updates]) / len(updates)
            g_s = ordered_sum([np.asarray(u.extras["grad_sigma"]) for u in updates]) / len(updates)
            row["grad_mu_sq"] = float(np.sum(g_mu * g_mu))
            row["grad_sigma_sq"] = float(np.sum(g_s * g_s))
        if evaluate is not None:
            row["mean_energy"] = float(evaluate(thetas))
        return row

    msg0 = RoundMessage(np.array(state.mu, dtype=np.float64), prior0.sigma, state.round)
    msg, trace = run_rounds(clients, msg0, T, tau=tau, seed=seed, server_aggregate=aggregate,
                            workers=workers, monitor=monitor,
                            trace_columns=TRACE_COLUMNS + (("objective",) if track_objective else ()))
    final = HBState([c.theta for c in clients], np.asarray(msg.mu),
                    PriorState(np.asarray(msg.mu), msg.sigma, prior0.xi, prior0.d_theta),
                    state.round + T // tau)
    return final, trace


def run_adept_ae(state: HBState, datasets: Sequence[AeClientData], etas, T: int, tau: int = 1,
                 template: DenseNet = None, options: TrainOptions = TrainOptions(),
                 schedule: Optional[SigmaSchedule] = None, seed: int = 0, workers: int = 1,
                 eval_data: Optional[Sequence[np.ndarray]] = None, monitor_theory: bool = False):
    """Personalized autoencoder training; ``template`` fixes the architecture."""
    if template is None:
        raise ValueError("an architecture template is required")
    fns = [ae_loss_fn(template, d) for d in datasets]
    evaluate = None
    if eval_data is not None:
        def evaluate(thetas):
            return mean_energy([template.with_flat(t) for t in thetas], eval_data)
    return run_personalized(state, fns, etas, T, tau, options, schedule, seed, workers,
                            monitor_theory, evaluate)


# --- theory constants --------------------------------------------------------

@dataclass(frozen=True)
class AeTheoryConstants:
    L_mu: float
    L_sigma: float
    L_sigma_mu: float
    L_theta: float

    def step_sizes(self):
        """``(eta_theta, eta_mu, eta_sigma)`` under which each step is a descent step."""
        return (1.0 / self.L_theta, min(1.0, 1.0 / self.L_mu),
                1.0 / (self.L_sigma + self.L_sigma_mu ** 2))


def ae_theory(d_theta: int, xi: float, omega: float, B: float, L_theta: float) -> AeTheoryConstants:
    """Smoothness constants of the prior part given ``||mu - theta_i|| <= B``."""
    if not 0 < omega < 1:
        raise ValueError("omega must lie in (0, 1)")
    d = d_theta
    L_mu = d / (2 * xi * omega ** 2)
    L_sigma = 3 * xi * d ** 2 / (2 * xi ** 2 * omega ** 4) + 3 * d ** 2 * B ** 2 / (xi ** 2 * omega ** 4) \
        + d ** 2 / (2 * xi * omega ** 2)
    L_sigma_mu = B * np.sqrt(d ** 3) / (omega ** 3 * np.sqrt(2 * xi ** 3))
    return AeTheoryConstants(L_mu, L_sigma, L_sigma_mu, L_theta)


def estimate_lipschitz(grad_fn: Callable, theta, rng: np.random.Generator, n_probe: int = 20,
                       radius: float = 1e-2) -> float:
    """Largest ``||g(a) - g(b)|| / ||a - b||`` over random pairs near ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    worst = 0.0
    for _ in range(n_probe):
        a = theta + radius * rng.standard_normal(theta.shape)
        b = theta + radius * rng.standard_normal(theta.shape)
        num = np.linalg.norm(grad_fn(a) - grad_fn(b))
        worst = max(worst, num / np.linalg.norm(a - b))
    return worst
