"""Synchronous in-process federated round engine.

Every iteration ``t = 1..T`` each client takes one local step; whenever
``tau`` divides ``t`` the clients send an update and the server aggregates in
ascending ``client_id`` order. Clients receive the latest broadcast when
``tau`` divides ``t - 1``. Each client draws randomness from a stream keyed on
``(seed, client_id, t)``, so results do not depend on how clients are scheduled.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .prior import SigmaBoundViolation
from .trace import RoundTrace


@dataclass(frozen=True)
class RoundMessage:
    """Server broadcast: global model, scale and the round it was produced in."""

    mu: object
    sigma: object
    round: int


@dataclass
class ClientUpdate:
    client_id: int
    mu_i: object
    sigma_i: object
    metrics: Dict[str, float] = field(default_factory=dict)
    extras: Dict[str, object] = field(default_factory=dict)


class ClientError(RuntimeError):
    """A client callback raised; carries the offending client id and round."""

    def __init__(self, client_id, round_, cause):
        super().__init__(f"client {client_id} failed at iteration {round_}: {cause!r}")
        self.client_id = client_id
        self.round = round_


class NumericalError(FloatingPointError):
    """NaN or Inf appeared in a model update."""


def client_rng(seed: int, client_id: int, t: int, stream: int = 0) -> np.random.Generator:
    """Counter-style generator for one (client, iteration, stream) cell."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(client_id, t, stream)))


def check_finite(name: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite value in {name}")


def ordered_sum(values: Sequence):
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total


def aggregate_mean(updates: Sequence[ClientUpdate]):
    """Exact mean of ``mu_i`` and ``sigma_i``, summed in ascending client order."""
    if len(updates) == 0:
        raise ValueError("cannot aggregate an empty set of updates")
    ups = sorted(updates, key=lambda u: u.client_id)
    shape = np.shape(ups[0].mu_i)
    if any(np.shape(u.mu_i) != shape for u in ups):
        raise ValueError("heterogeneous update shapes")
    m = len(ups)
    mu = ordered_sum([np.asarray(u.mu_i, dtype=np.float64) for u in ups]) / m
    sigma = ordered_sum([np.asarray(u.sigma_i, dtype=np.float64) for u in ups]) / m
    if np.ndim(sigma) == 0:
        sigma = float(sigma)
    return mu, sigma


def _mean_aggregate(updates, prev: RoundMessage, t: int) -> RoundMessage:
    mu, sigma = aggregate_mean(updates)
    return RoundMessage(mu, sigma, t)


def run_rounds(clients: Sequence, initial: RoundMessage, T: int, tau: int = 1,
               seed: int = 0, server_aggregate: Optional[Callable] = None,
               workers: int = 1, monitor: Optional[Callable] = None,
               trace_columns: Sequence[str] = (), initial_row: Optional[dict] = None):
    """Drive ``T`` iterations of the protocol.

    Each client object provides ``client_id``, ``receive(msg)``,
    ``local_step(t, rng)`` and ``send(t, rng) -> ClientUpdate``.
    ``server_aggregate(updates, prev_msg, t)`` defaults to the plain mean.
    ``monitor(t, msg, updates)`` may return a dict that is appended to the
    trace; it runs once per iteration after aggregation (``updates`` is None
    in non-communication iterations). ``initial_row`` is logged as iteration 0.

    Returns the final broadcast and the trace.
    """
    if len(clients) == 0:
        raise ValueError("need at least one client")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if T < 0:
        raise ValueError("T must be >= 0")
    server_aggregate = server_aggregate or _mean_aggregate
    ordered = sorted(clients, key=lambda c: c.client_id)
    trace = RoundTrace(["iter", "communicated"] + [c for c in trace_columns
                                                   if c not in ("iter", "communicated")])
    if initial_row is not None:
        trace.append(**{"iter": 0, "communicated": False, **initial_row})
    msg = initial
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def fan_out(fn):
        if pool is None:
            return [fn(c) for c in ordered]
        return list(pool.map(fn, ordered))

    def guarded(t, fn):
        def call(c):
            try:
                return fn(c)
            except (ClientError, NumericalError, SigmaBoundViolation):
                raise
            except Exception as exc:
                raise ClientError(c.client_id, t, exc) from exc
        return call

    try:
        for t in range(1, T + 1):
            if (t - 1) % tau == 0:
                for c in ordered:
                    c.receive(msg)
            fan_out(guarded(t, lambda c: c.local_step(t, client_rng(seed, c.client_id, t, 0))))
            updates = None
            if t % tau == 0:
                updates = fan_out(guarded(t, lambda c: c.send(t, client_rng(seed, c.client_id, t, 1))))
                updates.sort(key=lambda u: u.client_id)
                msg = server_aggregate(updates, msg, t)
            row = {"iter": t, "communicated": updates is not None}
            if monitor is not None:
                row.update(monitor(t, msg, updates) or {})
            trace.append(**{k: v for k, v in row.items() if k in trace.columns})
    finally:
        if pool is not None:
            pool.shutdown()
    return msg, trace


def communication_rounds(T: int, tau: int) -> List[int]:
    return [t for t in range(1, T + 1) if t % tau == 0]
