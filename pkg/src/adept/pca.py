"""Adaptive personalized PCA on the Stiefel manifold.

Each client ``i`` holds a sample covariance ``S_i`` and a personal basis
``U_i``; the server holds the global basis ``V`` and the heterogeneity scale
``sigma``. The per-client loss is the probabilistic-PCA negative
log-likelihood with ``W = U U^T + sigma_eps^2 I`` plus the prior coupling
``(2 xi + d(V, U)^2) / (2 sigma^2)``.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .manifold import (StiefelPoint, TangentVector, project_tangent, retract,
                       sample_stiefel_uniform, stiefel_distance)
from .prior import (PriorState, SigmaSchedule, check_sigma_bound, clamp_sigma,
                    sigma_gradient, sigma_lower_bound, validate_schedule)
from .runtime import ClientUpdate, RoundMessage, check_finite, ordered_sum, run_rounds

TRACE_COLUMNS = ("iter", "loss", "grad_U_msq", "grad_V_sq", "grad_sigma_sq", "sigma")


@dataclass(frozen=True)
class PcaClientData:
    """Sufficient statistics of one client: ``S = X^T X / n`` for samples in rows."""

    S: np.ndarray
    n: int
    sigma_eps: float

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("S must be square")
        if np.max(np.abs(S - S.T)) > 1e-10:
            raise ValueError("S must be symmetric")
        if np.linalg.eigvalsh(S)[0] < -1e-10:
            raise ValueError("S must be positive semi-definite")
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")
        if self.n < 1:
            raise ValueError("need at least one sample")
        object.__setattr__(self, "S", S)

    @classmethod
    def from_samples(cls, X, sigma_eps: float) -> "PcaClientData":
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        S = X.T @ X / n
        return cls(0.5 * (S + S.T), n, sigma_eps)

    @property
    def d(self) -> int:
        return self.S.shape[0]


@dataclass
class PcaState:
    locals: List[StiefelPoint]
    global_v: StiefelPoint
    prior: PriorState

    def copy(self) -> "PcaState":
        return PcaState(list(self.locals), self.global_v, self.prior)


# --- closed-form likelihood pieces (valid because U^T U = I) -----------------

def w_inverse(u: np.ndarray, sigma_eps: float) -> np.ndarray:
    """``(U U^T + s^2 I)^(-1) = s^-2 (I - U U^T / (1 + s^2))``."""
    s2 = sigma_eps ** 2
    return (np.eye(u.shape[0]) - (u @ u.T) / (1 + s2)) / s2


def w_logdet(d: int, r: int, sigma_eps: float) -> float:
    """``log|U U^T + s^2 I| = r log(1 + s^2) + (d - r) log s^2``."""
    s2 = sigma_eps ** 2
    return r * np.log1p(s2) + (d - r) * np.log(s2)


def _w_inv_apply(u: np.ndarray, y: np.ndarray, s2: float) -> np.ndarray:
    return (y - u @ (u.T @ y) / (1 + s2)) / s2


def pca_data_loss(u, data: PcaClientData) -> float:
    """``(n/2)(log|W| + tr(W^-1 S))``."""
    u = u.mat if isinstance(u, StiefelPoint) else np.asarray(u)
    s2 = data.sigma_eps ** 2
    # tr(W^-1 S) = (tr S - tr(U^T S U) / (1 + s^2)) / s^2
    tr = (np.trace(data.S) - np.sum(u * (data.S @ u)) / (1 + s2)) / s2
    return 0.5 * data.n * (w_logdet(data.d, u.shape[1], data.sigma_eps) + tr)


def pca_local_loss(u, v, prior: PriorState, data: PcaClientData, use_prior: bool = True) -> float:
    """Per-client loss; the ``d_theta log sigma`` term is left to :func:`pca_loss`."""
    if not prior.sigma > 0:
        raise ValueError("sigma must be positive")
    loss = pca_data_loss(u, data)
    if use_prior:
        loss += (2 * prior.xi + stiefel_distance(v, u) ** 2) / (2 * prior.sigma ** 2)
    return loss


def pca_loss(us: Sequence, v, prior: PriorState, datasets: Sequence[PcaClientData]) -> float:
    """Aggregate objective ``(1/m) sum_i f_i + d_theta log sigma``."""
    per_client = [pca_local_loss(u, v, prior, data) for u, data in zip(us, datasets)]
    return float(np.mean(per_client)) + prior.d_theta * np.log(prior.sigma)


def data_gradient_u(u: np.ndarray, data: PcaClientData) -> np.ndarray:
    """Euclidean gradient of the likelihood term: ``-n (W^-1 S W^-1 U - W^-1 U)``."""
    s2 = data.sigma_eps ** 2
    w_inv_u = u / (1 + s2)
    return -data.n * (_w_inv_apply(u, data.S @ w_inv_u, s2) - w_inv_u)


def pca_gradients(u, v, prior: PriorState, data: PcaClientData,
                  use_prior: bool = True) -> Tuple[TangentVector, TangentVector, float]:
    """Riemannian gradients of the per-client loss.

    Returns ``P_{T_U}(grad_U f)``, ``P_{T_V}(grad_V f)`` and ``d f / d sigma``.
    """
    if not prior.sigma > 0:
        raise ValueError("sigma must be positive")
    u = u if isinstance(u, StiefelPoint) else StiefelPoint(u)
    v = v if isinstance(v, StiefelPoint) else StiefelPoint(v)
    gu = data_gradient_u(u.mat, data)
    if not use_prior:
        zero = np.zeros_like(v.mat)
        return TangentVector(u, project_tangent(u.mat, gu)), TangentVector(v, zero), 0.0
    p = project_tangent(v.mat, u.mat)
    sig2 = prior.sigma ** 2
    gu = gu + p / sig2
    vtu = v.mat.T @ u.mat
    gv = -p @ (vtu + vtu.T) / (2 * sig2)
    gs = sigma_gradient(float(np.sum(p * p)), prior)
    return (TangentVector(u, project_tangent(u.mat, gu)),
            TangentVector(v, project_tangent(v.mat, gv)), float(gs))


# --- Algorithm 1 -------------------------------------------------------------

class _PcaClient:
    def __init__(self, client_id, u0: StiefelPoint, data: PcaClientData, xi, d_theta,
                 etas, schedule: Optional[SigmaSchedule], use_prior: bool):
        self.client_id = client_id
        self.u = u0
        self.data = data
        self.xi = xi
        self.d_theta = d_theta
        self.eta1, self.eta2, self.eta3 = etas
        self.schedule = schedule
        self.use_prior = use_prior

    def receive(self, msg: RoundMessage):
        self.v = msg.mu
        self.sigma = msg.sigma

    def local_step(self, t, rng):
        prior = PriorState(self.v.mat, self.sigma, self.xi, self.d_theta)
        gu, _, gs = pca_gradients(self.u, self.v, prior, self.data, self.use_prior)
        self.sigma_grad = gs
        if self.schedule is None or self.schedule.updates_at(t):
            self.sigma_i = self.sigma - self.eta3 * gs
        else:
            self.sigma_i = self.sigma
        self.grad_u_sq = float(np.sum(gu.mat ** 2))
        new_u = retract(self.u.mat, -self.eta1 * gu.mat)
        check_finite("U update", new_u)
        self.u = StiefelPoint(new_u)
        _, gv, _ = pca_gradients(self.u, self.v, prior, self.data, self.use_prior)
        self.grad_v = gv.mat
        self.v_i = self.v.mat - self.eta2 * gv.mat

    def send(self, t, rng):
        return ClientUpdate(self.client_id, self.v_i, self.sigma_i,
                            metrics={"grad_U_sq": self.grad_u_sq, "grad_sigma": self.sigma_grad},
                            extras={"grad_V": self.grad_v})


def top_eigvecs(S: np.ndarray, r: int) -> StiefelPoint:
    """Leading ``r`` eigenvectors of a symmetric matrix, largest first."""
    w, q = np.linalg.eigh(S)
    return StiefelPoint(q[:, ::-1][:, :r].copy())


def procrustes_align(u: StiefelPoint, v: StiefelPoint) -> StiefelPoint:
    """Rotate ``U`` within its column span to be as close as possible to ``V``."""
    p, _, qt = np.linalg.svd(u.mat.T @ v.mat)
    return StiefelPoint(u.mat @ (p @ qt))


def initial_state(d: int, r: int, m: int, rng: Optional[np.random.Generator], sigma0: float,
                  xi: float, init: str = "common",
                  datasets: Sequence[PcaClientData] = None) -> PcaState:
    """Starting point for Algorithm 1.

    ``init="common"`` places every ``U_i`` and ``V`` at one Haar-random point;
    ``init="independent"`` draws each ``U_i`` separately; ``init="spectral"``
    uses the top eigenvectors of the pooled covariance for ``V`` and of each
    client's covariance for ``U_i``, rotated within their span towards ``V``.
    """
    if init == "spectral":
        if datasets is None or len(datasets) != m:
            raise ValueError("spectral init needs one dataset per client")
        pooled = ordered_sum([ds.n * ds.S for ds in datasets]) / sum(ds.n for ds in datasets)
        v0 = top_eigvecs(pooled, r)
        locals_ = [procrustes_align(top_eigvecs(ds.S, r), v0) for ds in datasets]
    elif init == "common":
        v0 = sample_stiefel_uniform(d, r, rng)
        locals_ = [v0] * m
    elif init == "independent":
        v0 = sample_stiefel_uniform(d, r, rng)
        locals_ = [sample_stiefel_uniform(d, r, rng) for _ in range(m)]
    else:
        raise ValueError(f"unknown init {init!r}")
    return PcaState(locals_, v0, PriorState(v0.mat, sigma0, xi, d * r))


def run_adept_pca(state: PcaState, datasets: Sequence[PcaClientData], etas, T: int,
                  seed: int = 0, schedule: Optional[SigmaSchedule] = None,
                  omega: float = 0.5, clamp: bool = True, monitor_theory: bool = False,
                  use_prior: bool = True, workers: int = 1):
    """Run ``T`` iterations of adaptive personalized PCA.

    Parameters
    ----------
    state : PcaState
        Initial personal bases, global basis and prior.
    datasets : sequence of PcaClientData
        One entry per client, aligned with ``state.locals``.
    etas : tuple of float
        Step sizes ``(eta1, eta2, eta3)`` for ``U_i``, ``V`` and ``sigma``.
    T : int
        Number of iterations (every iteration is a communication round).
    omega : float
        Fraction of ``sqrt(2 xi / d_theta)`` used as the sigma floor.
    clamp : bool
        Floor the aggregated sigma at the lower bound after every round.
    monitor_theory : bool
        Require a step-size schedule that provably keeps sigma above its
        bound, disable the clamp and raise
        :class:`~adept.prior.SigmaBoundViolation` if the bound is ever crossed.
    use_prior : bool
        ``False`` decouples the clients (pure local training).

    Returns
    -------
    (PcaState, RoundTrace)
    """
    if len(datasets) != len(state.locals):
        raise ValueError("one dataset per client is required")
    eta1, eta2, eta3 = etas
    prior0 = state.prior
    bound = sigma_lower_bound(omega, prior0.xi, prior0.d_theta)
    if monitor_theory:
        if not validate_schedule(eta3, SigmaSchedule(init=prior0.sigma, omega=omega),
                                 prior0.xi, prior0.d_theta):
            raise ValueError("eta3 / sigma0 violate the sigma lower-bound conditions")
        clamp = False
    clients = [_PcaClient(i, u, data, prior0.xi, prior0.d_theta, etas, schedule, use_prior)
               for i, (u, data) in enumerate(zip(state.locals, datasets))]

    def aggregate(updates, prev: RoundMessage, t):
        m = len(updates)
        v_mean = ordered_sum([u.mu_i for u in updates]) / m
        v_new = retract(prev.mu.mat, v_mean - prev.mu.mat)
        sigma = ordered_sum([u.sigma_i for u in updates]) / m
        if clamp:
            sigma = clamp_sigma(sigma, bound)
        elif monitor_theory and use_prior:
            check_sigma_bound(sigma, bound, t)
        check_finite("server update", v_new, sigma)
        if not sigma > 0:
            raise FloatingPointError(f"sigma became non-positive ({sigma}) at iteration {t}")
        return RoundMessage(StiefelPoint(v_new), float(sigma), t)

    def current_loss(msg):
        prior = PriorState(msg.mu.mat, msg.sigma, prior0.xi, prior0.d_theta)
        if use_prior:
            return pca_loss([c.u for c in clients], msg.mu, prior, datasets)
        return float(np.mean([pca_data_loss(c.u, d) for c, d in zip(clients, datasets)]))

    def monitor(t, msg, updates):
        m = len(updates)
        g_v = ordered_sum([u.extras["grad_V"] for u in updates]) / m
        g_s = ordered_sum([u.metrics["grad_sigma"] for u in updates]) / m
        return {
            "loss": current_loss(msg),
            "grad_U_msq": float(np.mean([u.metrics["grad_U_sq"] for u in updates])),
            "grad_V_sq": float(np.sum(g_v ** 2)),
            "grad_sigma_sq": float(g_s ** 2) if use_prior else 0.0,
            "sigma": msg.sigma,
        }

    msg0 = RoundMessage(state.global_v, float(prior0.sigma), 0)
    msg, trace = run_rounds(clients, msg0, T, tau=1, seed=seed, server_aggregate=aggregate,
                            workers=workers, monitor=monitor, trace_columns=TRACE_COLUMNS,
                            initial_row={"loss": current_loss(msg0), "sigma": msg0.sigma})
    final = PcaState([c.u for c in clients], msg.mu,
                     PriorState(msg.mu.mat, msg.sigma, prior0.xi, prior0.d_theta))
    return final, trace


# --- baselines ---------------------------------------------------------------

class _GlobalPcaClient:
    """Computes the projected likelihood gradient at the broadcast ``V``."""

    def __init__(self, client_id, data):
        self.client_id = client_id
        self.data = data

    def receive(self, msg):
        self.v = msg.mu

    def local_step(self, t, rng):
        g = data_gradient_u(self.v.mat, self.data)
        self.grad = project_tangent(self.v.mat, g)

    def send(self, t, rng):
        return ClientUpdate(self.client_id, self.grad, 0.0)


def run_global_pca(v0: StiefelPoint, datasets: Sequence[PcaClientData], eta: float, T: int,
                   seed: int = 0, workers: int = 1):
    """One shared basis; the server averages client gradients every iteration."""
    clients = [_GlobalPcaClient(i, d) for i, d in enumerate(datasets)]

    def aggregate(updates, prev, t):
        g = ordered_sum([u.mu_i for u in updates]) / len(updates)
        v_new = retract(prev.mu.mat, -eta * g)
        check_finite("global PCA update", v_new)
        return RoundMessage(StiefelPoint(v_new), 0.0, t)

    def loss(v):
        return float(np.mean([pca_data_loss(v, d) for d in datasets]))

    def monitor(t, msg, updates):
        g = ordered_sum([u.mu_i for u in updates]) / len(updates)
        return {"loss": loss(msg.mu), "grad_V_sq": float(np.sum(g ** 2))}

    msg, trace = run_rounds(clients, RoundMessage(v0, 0.0, 0), T, 1, seed, aggregate, workers,
                            monitor, TRACE_COLUMNS, initial_row={"loss": loss(v0)})
    return msg.mu, trace


# --- evaluation --------------------------------------------------------------

def reconstruction_error(u, X) -> float:
    """Mean of ``||x - U U^T x||^2`` over the rows of ``X``."""
    u = u.mat if isinstance(u, StiefelPoint) else np.asarray(u)
    X = np.asarray(X, dtype=np.float64)
    resid = X - (X @ u) @ u.T
    return float(np.mean(np.sum(resid ** 2, axis=1)))


def reconstruction_error_ratio(models: Sequence, true_models: Sequence, eval_data: Sequence) -> float:
    """Mean client reconstruction error of ``models`` divided by that of the true bases."""
    num = np.mean([reconstruction_error(u, X) for u, X in zip(models, eval_data)])
    den = np.mean([reconstruction_error(u, X) for u, X in zip(true_models, eval_data)])
    return float(num / den)


# --- theory monitors ---------------------------------------------------------

@dataclass(frozen=True)
class PcaTheoryConstants:
    L_sigma: float
    L_U: float
    G_U: float
    L_V: float
    G_V: float
    L_U_sigma: float
    L_V_sigma: float
    C_eta1: float
    C_eta2: float
    G1: float
    G2: float

    def step_sizes(self) -> Tuple[float, float, float]:
        """Step sizes under which the per-iteration sufficient decrease is guaranteed."""
        eta1 = min(1.0 / (3 * self.C_eta1), 1.0)
        eta2 = min(1.0 / (3 * self.C_eta2), 1.0)
        eta3 = min(eta1 / (3 * self.L_U_sigma ** 2), eta2 / (3 * self.L_V_sigma ** 2),
                   1.0 / (6 * self.L_sigma))
        return eta1, eta2, eta3


def assumption_bounds(datasets: Sequence[PcaClientData]) -> Tuple[float, float]:
    """``(G_max_F, G_max_op)``: the largest Frobenius and operator norms of the ``S_i``."""
    g_f = max(float(np.linalg.norm(d.S)) for d in datasets)
    g_op = max(float(np.linalg.eigvalsh(d.S)[-1]) for d in datasets)
    return g_f, g_op


def pca_theory(datasets: Sequence[PcaClientData], r: int, omega: float, xi: float,
               C1: float = 0.5, C2: float = 0.5) -> PcaTheoryConstants:
    """Smoothness and gradient-bound constants for the PCA objective.

    ``d`` in the bounds is ``d_theta = d * r``. The likelihood parts carry a
    factor ``n`` (the exact derivative of ``(n/2) log|W| + (n/2) tr(W^-1 S)``).
    ``C1``/``C2`` default to 1/2, a valid retraction constant for tangent
    inputs (see :func:`adept.manifold.estimate_retraction_constant`).
    """
    if not 0 < omega < 1:
        raise ValueError("omega must lie in (0, 1)")
    _, g_op = assumption_bounds(datasets)
    n = max(d.n for d in datasets)
    s2 = min(d.sigma_eps for d in datasets) ** 2
    dt = datasets[0].d * r
    L_sigma = dt ** 2 / (2 * xi * omega ** 2) + 3 * dt ** 2 / (2 * xi * omega ** 4) \
        + 3 * dt ** 2 / (xi ** 2 * omega ** 4)
    prior_u = dt / (xi * omega ** 2)
    L_U = n * (1 / s2 + g_op / s2 ** 2 + (1 + 2 * g_op / s2) * 2 / s2 ** 2) + prior_u
    G_U = n * (g_op / s2 ** 2 + 1 / s2) + prior_u
    L_V = 12 * dt / (xi * omega ** 2)
    G_V = 3 * dt / (xi * omega ** 2)
    L_U_sigma = np.sqrt(2 * dt ** 3) / (omega ** 3 * np.sqrt(xi ** 3))
    L_V_sigma = 2 * np.sqrt(dt ** 3) / (omega ** 3 * np.sqrt(2 * xi ** 3))
    G1 = 2 * G_U * np.sqrt(dt)
    G2 = 2 * G_V * np.sqrt(dt)
    C_eta1 = C1 * G1 + (L_U + G_U) * (C1 ** 2 * G1 ** 2 + 1) / 2
    C_eta2 = C2 * G2 + (L_V + G_V) * (C2 ** 2 * G2 ** 2 + 1) / 2
    return PcaTheoryConstants(L_sigma, L_U, G_U, L_V, G_V, L_U_sigma, L_V_sigma,
                              C_eta1, C_eta2, G1, G2)


def stationarity_measure(trace) -> np.ndarray:
    """``G_t`` for ``t = 1..T`` from a PCA trace (row 0 is the initial state)."""
    return (trace.column("grad_U_msq") + trace.column("grad_V_sq")
            + trace.column("grad_sigma_sq"))[1:]


def check_sufficient_decrease(trace, etas, tol: float = 1e-9) -> bool:
    """Every step decreases the loss by at least ``min(eta) / 3 * G_t`` (up to ``tol``)."""
    loss = trace.column("loss")
    g = stationarity_measure(trace)
    return bool(np.all(np.diff(loss) <= -min(etas) / 3 * g + tol))


def check_convergence_bound(trace, etas) -> bool:
    """``mean_t G_t <= 3 (f_0 - f_T) / (T min(eta))``."""
    loss = trace.column("loss")
    g = stationarity_measure(trace)
    T = len(g)
    if T == 0:
        return True
    return bool(np.mean(g) <= 3 * (loss[0] - loss[-1]) / (T * min(etas)))
