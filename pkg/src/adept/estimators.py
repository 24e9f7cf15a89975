"""scikit-learn style front ends for the personalized learners.

Federated data is passed to ``fit`` either as a list of per-client arrays
(samples in rows) or as one array plus a ``groups`` vector of client labels.
Fitted attributes end in an underscore; per-client methods take ``client``.
"""

import math
from dataclasses import replace
from typing import List

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .ae import (AeClientData, TrainOptions, ae_loss_fn, initial_hb_state, make_autoencoder,
                 mean_energy, run_adept_ae)
from .baselines import BaselineKind, run_baseline
from .dgm import (dgm_loss_fn, gaussian_personalized_fit, make_denoiser, run_adept_dgm, score_alpha,
                  validation_loss, xi_guarantee)
from .manifold import StiefelPoint
from .pca import PcaClientData, initial_state, reconstruction_error, run_adept_pca
from .prior import SigmaSchedule

STRATEGIES = ("adept", "local", "global", "fedavg_finetune")
_BASELINE = {"local": "local", "global": "global_fedavg", "fedavg_finetune": "fedavg_finetune"}


# --- validation helpers ------------------------------------------------------

def check_client_data(X, groups=None, min_samples: int = 1) -> List[np.ndarray]:
    """Split federated input into a list of finite 2-D float arrays of equal width."""
    if groups is not None:
        X = check_array(X, dtype=np.float64)
        groups = np.asarray(groups)
        if groups.shape != (X.shape[0],):
            raise ValueError("groups must have one label per row of X")
        clients = [X[groups == g] for g in np.unique(groups)]
    else:
        if isinstance(X, np.ndarray) and X.ndim == 2:
            raise ValueError("pass a list of per-client arrays, or X together with groups")
        clients = [check_array(x, dtype=np.float64) for x in X]
    if not clients:
        raise ValueError("at least one client is required")
    widths = {c.shape[1] for c in clients}
    if len(widths) != 1:
        raise ValueError(f"all clients need the same number of features, got {sorted(widths)}")
    for i, c in enumerate(clients):
        if c.shape[0] < min_samples:
            raise ValueError(f"client {i} has {c.shape[0]} samples, needs at least {min_samples}")
    return clients


def check_strategy(strategy: str):
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")


def check_etas(etas, n: int = 3):
    etas = tuple(float(e) for e in etas)
    if len(etas) != n or any(not e >= 0 for e in etas):
        raise ValueError(f"need {n} non-negative step sizes, got {etas}")
    return etas


def _check_client_index(est, client):
    if not 0 <= client < est.n_clients_:
        raise IndexError(f"client {client} out of range for {est.n_clients_} clients")


# --- PCA ---------------------------------------------------------------------

class AdeptPCA(TransformerMixin, BaseEstimator):
    """Personalized principal subspaces coupled through a global subspace.

    Parameters
    ----------
    n_components : int
        Subspace dimension ``r``.
    sigma_eps : float
        Observation noise standard deviation of the latent linear model.
    strategy : {"adept", "local", "global", "fedavg_finetune"}
        Adaptive personalization or one of the reference methods.
    etas : tuple of float
        Step sizes for the personal bases, the global basis and ``sigma``.
    n_iter : int
        Number of iterations (one communication per iteration).
    xi, sigma0, omega : float
        Hyper-prior parameter, initial heterogeneity scale, lower-bound factor.
    init : {"spectral", "common", "independent"}
    monitor_theory : bool
        Raise if ``sigma`` crosses its theoretical lower bound instead of clamping.
    random_state : int
    n_jobs : int
        Worker threads; results do not depend on it.

    Attributes
    ----------
    components_ : list of ndarray (d, r)
        Personal orthonormal bases.
    global_components_ : ndarray (d, r)
    sigma_ : float
    trace_ : RoundTrace
    """

    def __init__(self, n_components=2, sigma_eps=0.05, strategy="adept",
                 etas=(6e-6, 2e-5, 5e-9), n_iter=1000, xi=0.05, sigma0=0.05, omega=0.5,
                 init="spectral", finetune_rounds=20, monitor_theory=False, random_state=0,
                 n_jobs=1):
        self.n_components = n_components
        self.sigma_eps = sigma_eps
        self.strategy = strategy
        self.etas = etas
        self.n_iter = n_iter
        self.xi = xi
        self.sigma0 = sigma0
        self.omega = omega
        self.init = init
        self.finetune_rounds = finetune_rounds
        self.monitor_theory = monitor_theory
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None, groups=None):
        check_strategy(self.strategy)
        etas = check_etas(self.etas)
        clients = check_client_data(X, groups)
        d, r = clients[0].shape[1], int(self.n_components)
        if not 1 <= r <= d:
            raise ValueError(f"n_components must lie in [1, {d}]")
        data = [PcaClientData.from_samples(c, self.sigma_eps) for c in clients]
        rng = np.random.default_rng(self.random_state)
        state = initial_state(d, r, len(data), rng, self.sigma0, self.xi, self.init, data)
        if self.strategy == "adept":
            final, self.trace_ = run_adept_pca(state, data, etas, self.n_iter,
                                               seed=self.random_state, omega=self.omega,
                                               monitor_theory=self.monitor_theory,
                                               workers=self.n_jobs)
            models, self.global_components_ = final.locals, final.global_v.mat
            self.sigma_ = float(final.prior.sigma)
        else:
            kind = BaselineKind(_BASELINE[self.strategy], self.finetune_rounds)
            models, self.trace_ = run_baseline(kind, "pca", data, {"state": state, "eta": etas[0]},
                                               self.n_iter, self.random_state, self.n_jobs)
            self.global_components_ = state.global_v.mat if self.strategy == "local" \
                else models[0].mat
            self.sigma_ = math.nan
        self.components_ = [m.mat if isinstance(m, StiefelPoint) else np.asarray(m) for m in models]
        self.n_clients_ = len(clients)
        self.n_features_in_ = d
        return self

    def transform(self, X, client: int = 0):
        """Latent coordinates ``X U_i``."""
        check_is_fitted(self, "components_")
        _check_client_index(self, client)
        X = check_array(X, dtype=np.float64)
        return X @ self.components_[client]

    def inverse_transform(self, Z, client: int = 0):
        check_is_fitted(self, "components_")
        _check_client_index(self, client)
        return check_array(Z, dtype=np.float64) @ self.components_[client].T

    def reconstruction_error(self, X, client: int = 0) -> float:
        check_is_fitted(self, "components_")
        _check_client_index(self, client)
        return reconstruction_error(self.components_[client], check_array(X, dtype=np.float64))

    def score(self, X, y=None, client: int = 0) -> float:
        """Negative mean squared reconstruction error."""
        return -self.reconstruction_error(X, client)


# --- neural-network learners -------------------------------------------------

class _HBNetMixin:
    def _options(self):
        opts = TrainOptions() if self.options is None else self.options
        if not isinstance(opts, TrainOptions):
            opts = TrainOptions(**dict(opts))
        return opts

    def _schedule(self):
        return SigmaSchedule(self.sigma0, freeze_rounds=self.freeze_rounds,
                             lazy_start_round=self.lazy_start_round, omega=self._options().omega)

    def _fit_hb(self, clients, template, loss_fns, runner):
        check_strategy(self.strategy)
        etas = check_etas(self.etas)
        opts = self._options()
        m = len(clients)
        if self.strategy == "adept":
            state = initial_hb_state(template, m, self.sigma0, self.xi, opts.per_weight_sigma)
            final, self.trace_ = runner(state, etas, opts)
            self.params_ = [np.asarray(t) for t in final.locals]
            self.global_params_ = np.asarray(final.mu)
            self.sigma_ = final.prior.sigma
        else:
            kind = BaselineKind(_BASELINE[self.strategy], self.finetune_rounds)
            hyper = {"theta0": template.flat, "loss_fns": loss_fns, "lr": etas[0],
                     "tau": self.tau, "options": opts}
            models, self.trace_ = run_baseline(kind, "ae", clients, hyper, self.n_iter,
                                               self.random_state, self.n_jobs)
            self.params_ = [np.asarray(t) for t in models]
            self.global_params_ = self.params_[0] if self.strategy == "global" else template.flat
            self.sigma_ = math.nan
        self.template_ = template
        self.n_clients_ = m
        self.n_features_in_ = clients[0].shape[1]

    def network(self, client: int = 0):
        """The fitted network of ``client``."""
        check_is_fitted(self, "params_")
        _check_client_index(self, client)
        return self.template_.with_flat(self.params_[client])


class AdeptAutoencoder(TransformerMixin, _HBNetMixin, BaseEstimator):
    """Personalized two-layer autoencoders (ReLU code layer, sigmoid output).

    Parameters
    ----------
    latent_dim : int
    strategy : {"adept", "local", "global", "fedavg_finetune"}
    etas : tuple of float
        Learning rates for the personal models, the global model and ``sigma``.
    n_iter, tau : int
        Total iterations and local iterations per communication round.
    xi, sigma0 : float
    freeze_rounds, lazy_start_round : int
        ``sigma`` stays fixed up to the later of the two.
    options : TrainOptions or dict, optional
    """

    def __init__(self, latent_dim=5, strategy="adept", etas=(0.01, 0.01, 0.001), n_iter=150,
                 tau=1, xi=1e-2, sigma0=0.4, freeze_rounds=2, lazy_start_round=None, options=None,
                 finetune_rounds=20, random_state=0, n_jobs=1):
        self.latent_dim = latent_dim
        self.strategy = strategy
        self.etas = etas
        self.n_iter = n_iter
        self.tau = tau
        self.xi = xi
        self.sigma0 = sigma0
        self.freeze_rounds = freeze_rounds
        self.lazy_start_round = lazy_start_round
        self.options = options
        self.finetune_rounds = finetune_rounds
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None, groups=None):
        clients = check_client_data(X, groups)
        d = clients[0].shape[1]
        template = make_autoencoder(d, int(self.latent_dim),
                                    np.random.default_rng([self.random_state, 1]))
        data = [AeClientData(c, int(self.latent_dim)) for c in clients]
        fns = [ae_loss_fn(template, ds) for ds in data]

        def runner(state, etas, opts):
            return run_adept_ae(state, data, etas, self.n_iter, self.tau, template, opts,
                                self._schedule(), self.random_state, self.n_jobs)
        self._fit_hb(clients, template, fns, runner)
        return self

    def transform(self, X, client: int = 0):
        """Latent codes from the client's encoder."""
        return _encode(self.network(client), check_array(X, dtype=np.float64))

    def reconstruct(self, X, client: int = 0):
        return self.network(client)(check_array(X, dtype=np.float64))

    def score(self, X, y=None, client: int = 0) -> float:
        """Mean percentage of energy captured on ``X``."""
        return mean_energy([self.network(client)], [check_array(X, dtype=np.float64)])


def _encode(net, X):
    layer = net.layers[0]
    return np.maximum(X @ layer.W.T + layer.b, 0.0)


class AdeptDenoiser(_HBNetMixin, BaseEstimator):
    """Personalized corruption-level-conditioned denoisers.

    Parameters
    ----------
    hidden : int
        Width of the two hidden layers.
    gamma : int
        Number of corruption levels; level ``k`` mixes with weight ``k / gamma``.
    lr_decay_round : int or None
        Communication round after which the model learning rates drop tenfold.
    """

    def __init__(self, hidden=32, gamma=10, strategy="adept", etas=(0.01, 0.01, 0.01),
                 n_iter=600, tau=1, xi=1e-2, sigma0=0.3, freeze_rounds=2, lazy_start_round=None,
                 lr_decay_round=None, options=None, finetune_rounds=20, random_state=0, n_jobs=1):
        self.hidden = hidden
        self.gamma = gamma
        self.strategy = strategy
        self.etas = etas
        self.n_iter = n_iter
        self.tau = tau
        self.xi = xi
        self.sigma0 = sigma0
        self.freeze_rounds = freeze_rounds
        self.lazy_start_round = lazy_start_round
        self.lr_decay_round = lr_decay_round
        self.options = options
        self.finetune_rounds = finetune_rounds
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _options(self):
        opts = super()._options()
        if self.lr_decay_round is not None:
            opts = replace(opts, lr_decay_round=self.lr_decay_round)
        return opts

    def fit(self, X, y=None, groups=None):
        clients = check_client_data(X, groups)
        if int(self.gamma) < 1:
            raise ValueError("gamma must be a positive integer")
        d = clients[0].shape[1]
        template = make_denoiser(d, int(self.hidden), np.random.default_rng([self.random_state, 1]))
        fns = [dgm_loss_fn(template, c, int(self.gamma)) for c in clients]

        def runner(state, etas, opts):
            return run_adept_dgm(state, clients, etas, self.n_iter, self.tau, int(self.gamma),
                                 template, opts, self._schedule(), self.random_state, self.n_jobs)
        self._fit_hb(clients, template, fns, runner)
        return self

    def denoise(self, X_noisy, alpha, client: int = 0):
        X_noisy = check_array(X_noisy, dtype=np.float64)
        a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (X_noisy.shape[0],))
        return self.network(client)(np.hstack([X_noisy, a[:, None]]))

    def score(self, X, y=None, client: int = 0) -> float:
        """Negative mean denoising error over all corruption levels."""
        return -validation_loss(self.network(client), check_array(X, dtype=np.float64),
                                int(self.gamma), seed=self.random_state)


class PersonalizedGaussianDiffusion(BaseEstimator):
    """Closed-form personalized means for Gaussian client targets.

    Parameters
    ----------
    sigma0_sq : float
        Per-coordinate variance of every client's target.
    xi : float or "auto"
        ``"auto"`` picks the smallest value with guaranteed improvement.
    T_horizon : float
        Diffusion horizon (``inf`` for the stationary limit).
    """

    def __init__(self, sigma0_sq=1.0, xi="auto", T_horizon=math.inf):
        self.sigma0_sq = sigma0_sq
        self.xi = xi
        self.T_horizon = T_horizon

    def fit(self, X, y=None, groups=None):
        clients = check_client_data(X, groups)
        ns = {c.shape[0] for c in clients}
        if len(ns) != 1:
            raise ValueError("all clients need the same number of samples")
        n, d = clients[0].shape
        if not self.sigma0_sq > 0:
            raise ValueError("sigma0_sq must be positive")
        xi = xi_guarantee(d, self.sigma0_sq, n) if self.xi == "auto" else float(self.xi)
        means = np.stack([c.mean(axis=0) for c in clients])
        self.fit_ = gaussian_personalized_fit(means, xi, d, n,
                                              score_alpha(self.sigma0_sq, self.T_horizon))
        self.xi_ = xi
        self.means_ = self.fit_.theta_hats
        self.global_mean_ = self.fit_.mu_hat
        self.sigma_hat_sq_ = self.fit_.sigma_hat_sq
        self.n_clients_ = len(clients)
        self.n_features_in_ = d
        return self

    def sample(self, n_samples: int, client: int = 0, random_state=None):
        """Draw from the learned target ``N(theta_hat_i, sigma0^2 I)``."""
        check_is_fitted(self, "means_")
        _check_client_index(self, client)
        rng = np.random.default_rng(random_state)
        return self.means_[client] + math.sqrt(self.sigma0_sq) * rng.standard_normal(
            (n_samples, self.n_features_in_))


__all__ = ["AdeptPCA", "AdeptAutoencoder", "AdeptDenoiser", "PersonalizedGaussianDiffusion",
           "check_client_data", "check_strategy", "check_etas", "STRATEGIES"]
