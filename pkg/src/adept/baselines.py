"""Non-adaptive reference methods: local training, FedAvg and FedAvg + fine-tuning.

All engines run on :func:`adept.runtime.run_rounds` and so share its
determinism guarantees.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .ae import HBState, TrainOptions, _clip, run_personalized
from .nnet import OptimState
from .pca import PcaState, reconstruction_error_ratio, run_adept_pca, run_global_pca
from .prior import PriorState
from .runtime import ClientUpdate, RoundMessage, check_finite, run_rounds

KINDS = ("local", "global_fedavg", "fedavg_finetune")


@dataclass(frozen=True)
class BaselineKind:
    kind: str
    finetune_rounds: int = 20

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}; expected one of {KINDS}")
        if self.kind == "fedavg_finetune" and self.finetune_rounds < 1:
            raise ValueError("finetune_rounds must be >= 1")


class _FedAvgClient:
    def __init__(self, client_id, loss_fn, lr, options: TrainOptions, tau):
        self.client_id = client_id
        self.loss_fn = loss_fn
        self.lr = lr
        self.options = options
        self.tau = tau
        self.opt = OptimState(options.theta_optimizer, beta=options.momentum)
        self.last_loss = np.nan

    def receive(self, msg):
        self.theta = np.array(msg.mu, dtype=np.float64)

    def local_step(self, t, rng):
        round_ = (t - 1) // self.tau + 1
        scale = 1.0
        if self.options.lr_decay_round is not None and round_ >= self.options.lr_decay_round:
            scale = self.options.lr_decay
        loss, g = self.loss_fn(self.theta, rng)
        self.last_loss = loss
        self.grad_sq = float(np.sum(g * g))
        self.theta = self.opt.step(self.theta, _clip(g, self.options.clip_model), self.lr * scale)
        check_finite(f"client {self.client_id} parameters", self.theta)

    def send(self, t, rng):
        return ClientUpdate(self.client_id, self.theta, 0.0,
                            metrics={"loss": self.last_loss, "grad_sq": self.grad_sq})


def run_fedavg(theta0, loss_fns: Sequence[Callable], lr: float, T: int, tau: int = 1,
               options: TrainOptions = TrainOptions(), seed: int = 0, workers: int = 1,
               evaluate: Optional[Callable] = None):
    """One shared model: ``tau`` local steps per client, then plain model averaging.

    Returns the final shared parameters and the trace.
    """
    clients = [_FedAvgClient(i, fn, lr, options, tau) for i, fn in enumerate(loss_fns)]

    def monitor(t, msg, updates):
        row = {"mean_loss": float(np.mean([c.last_loss for c in clients])),
               "grad_theta_msq": float(np.mean([c.grad_sq for c in clients])),
               "round": t // tau}
        if evaluate is not None and updates is not None:
            row["mean_energy"] = float(evaluate([np.asarray(msg.mu)] * len(clients)))
        return row

    msg, trace = run_rounds(clients, RoundMessage(np.array(theta0, dtype=np.float64), 0.0, 0), T,
                            tau, seed, None, workers, monitor,
                            ("round", "mean_loss", "mean_energy", "grad_theta_msq"))
    return np.asarray(msg.mu), trace


def run_local(theta0, loss_fns: Sequence[Callable], lr: float, T: int,
              options: TrainOptions = TrainOptions(), seed: int = 0, workers: int = 1,
              evaluate: Optional[Callable] = None) -> tuple:
    """Independent per-client training from a common start; returns the list of models."""
    state = initial_hb_state_from_flat(theta0, len(loss_fns))
    final, trace = run_personalized(state, loss_fns, (lr, lr, lr), T, 1, options, seed=seed,
                                    workers=workers, evaluate=evaluate, use_prior=False)
    return final.locals, trace


def initial_hb_state_from_flat(theta0, m: int) -> HBState:
    theta0 = np.array(theta0, dtype=np.float64)
    return HBState([theta0.copy() for _ in range(m)], theta0.copy(),
                   PriorState(theta0.copy(), 1.0, 1.0, theta0.size))


def run_fedavg_finetune(theta0, loss_fns, lr, T, tau=1, finetune_rounds: int = 20,
                        options: TrainOptions = TrainOptions(), seed: int = 0, workers: int = 1,
                        evaluate: Optional[Callable] = None):
    """FedAvg for ``T`` iterations, then ``finetune_rounds * tau`` local steps per client."""
    shared, trace = run_fedavg(theta0, loss_fns, lr, T, tau, options, seed, workers, evaluate)
    models, ft_trace = run_local(shared, loss_fns, lr, finetune_rounds * tau, options,
                                 seed + 1, workers, evaluate)
    return models, (trace, ft_trace)


def run_baseline(kind: BaselineKind, task: str, datasets, hyper: dict, T: int, seed: int = 0,
                 workers: int = 1):
    """Dispatch a baseline for ``task`` in ``{"pca", "ae", "dgm"}``.

    For PCA ``hyper`` holds ``state`` (a :class:`PcaState`) and ``eta``; for the
    network tasks it holds ``theta0``, ``loss_fns``, ``lr``, ``tau``,
    ``options`` and optionally ``evaluate``. Returns ``(models, trace)``
    where ``models`` has one entry per client.
    """
    if task == "pca":
        state: PcaState = hyper["state"]
        eta = hyper["eta"]
        if kind.kind == "local":
            final, trace = run_adept_pca(state, datasets, (eta, eta, 0.0), T, seed=seed,
                                         use_prior=False, workers=workers)
            return final.locals, trace
        v, trace = run_global_pca(state.global_v, datasets, eta, T, seed, workers)
        if kind.kind == "global_fedavg":
            return [v] * len(datasets), trace
        ft_state = PcaState([v] * len(datasets), v, state.prior)
        final, ft = run_adept_pca(ft_state, datasets, (eta, eta, 0.0), kind.finetune_rounds,
                                  seed=seed + 1, use_prior=False, workers=workers)
        return final.locals, (trace, ft)
    if task not in ("ae", "dgm"):
        raise ValueError(f"unknown task {task!r}")
    theta0, fns, lr = hyper["theta0"], hyper["loss_fns"], hyper["lr"]
    tau = hyper.get("tau", 1)
    options = hyper.get("options", TrainOptions())
    evaluate = hyper.get("evaluate")
    if kind.kind == "local":
        return run_local(theta0, fns, lr, T, options, seed, workers, evaluate)
    if kind.kind == "global_fedavg":
        shared, trace = run_fedavg(theta0, fns, lr, T, tau, options, seed, workers, evaluate)
        return [shared] * len(fns), trace
    return run_fedavg_finetune(theta0, fns, lr, T, tau, kind.finetune_rounds, options, seed,
                               workers, evaluate)


__all__ = ["BaselineKind", "run_baseline", "run_fedavg", "run_local", "run_fedavg_finetune",
           "reconstruction_error_ratio"]
