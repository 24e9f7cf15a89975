"""Seeded end-to-end experiments: generate data, train every method, score it.

Each ``run_*_point`` returns ``(rows, traces)`` where ``rows`` are result
dicts (one per method) and ``traces`` pairs constant label columns with a
:class:`RoundTrace`. The CLI and the acceptance suite both call these.
"""

from dataclasses import replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .ae import (AeClientData, TrainOptions, ae_loss_fn, initial_hb_state, make_autoencoder,
                 mean_energy, run_adept_ae)
from .baselines import BaselineKind, run_baseline
from .datagen import AeGenConfig, PcaGenConfig, gen_ae_data, gen_gaussian_population, gen_pca_data
from .dgm import (GaussianPopulation, dgm_loss_fn, kl_sweep, make_denoiser, run_adept_dgm,
                  validation_loss)
from .pca import (PcaClientData, check_sufficient_decrease, initial_state,
                  reconstruction_error_ratio, run_adept_pca)
from .prior import SigmaSchedule
from .runtime import NumericalError

METHODS = ("adept", "local", "global", "fedavg_finetune")
_BASELINE = {"local": "local", "global": "global_fedavg", "fedavg_finetune": "fedavg_finetune"}


def _check_methods(methods):
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; expected a subset of {METHODS}")


def run_pca_point(gen: PcaGenConfig, hyper: Dict, methods: Sequence[str] = ("adept", "global", "local"),
                  n_eval: int = 500, workers: int = 1) -> Tuple[List[dict], list]:
    """Reconstruction-error ratio of each method on held-out data from the same clients.

    ``hyper`` keys: ``eta1, eta2, eta3, T, xi, sigma0, omega, init, finetune_rounds,
    monitor_theory``.
    """
    _check_methods(methods)
    _, us, Xs, Xe = gen_pca_data(gen, n_eval=n_eval)
    data = [PcaClientData.from_samples(X, gen.sigma_eps) for X in Xs]
    rng = np.random.default_rng(gen.seed + 100)
    state = initial_state(gen.d, gen.r, gen.m, rng, hyper["sigma0"], hyper["xi"], hyper["init"], data)
    etas = (hyper["eta1"], hyper["eta2"], hyper["eta3"])
    rows, traces = [], []
    for method in methods:
        if method == "adept":
            final, trace = run_adept_pca(state, data, etas, hyper["T"], seed=gen.seed,
                                         omega=hyper["omega"],
                                         monitor_theory=hyper["monitor_theory"], workers=workers)
            models = final.locals
            if hyper["monitor_theory"] and not check_sufficient_decrease(trace, etas):
                raise NumericalError("sufficient decrease violated under --monitor-theory")
        else:
            kind = BaselineKind(_BASELINE[method], hyper["finetune_rounds"])
            models, trace = run_baseline(kind, "pca", data, {"state": state, "eta": etas[0]},
                                         hyper["T"], gen.seed, workers)
            trace = trace[0] if isinstance(trace, tuple) else trace
        labels = {"method": method, "sigma_star": gen.sigma_star, "seed": gen.seed}
        rows.append({**labels, "ratio": reconstruction_error_ratio(models, us, Xe)})
        traces.append((labels, trace))
    return rows, traces


def ae_options(hyper: Dict) -> TrainOptions:
    return TrainOptions(per_weight_sigma=hyper["per_weight_sigma"], clip_model=hyper["clip_model"],
                        clip_sigma=hyper["clip_sigma"], sigma_first=hyper["sigma_first"],
                        global_in_local=hyper["global_in_local"], momentum=hyper["momentum"],
                        lr_decay_round=hyper["lr_decay_round"], lr_decay=hyper["lr_decay"],
                        omega=hyper["omega"])


def _schedule(hyper):
    return SigmaSchedule(hyper["sigma0"], freeze_rounds=hyper["freeze_rounds"],
                         lazy_start_round=hyper["lazy_start_round"], omega=hyper["omega"])


def _hb_methods(methods, template, loss_fns, datasets, hyper, seed, workers, adept_runner):
    out = []
    opts = ae_options(hyper)
    for method in methods:
        if method == "adept":
            state = initial_hb_state(template, len(loss_fns), hyper["sigma0"], hyper["xi"],
                                     opts.per_weight_sigma)
            final, trace = adept_runner(state, opts)
            models = final.locals
        else:
            kind = BaselineKind(_BASELINE[method], hyper["finetune_rounds"])
            hb = {"theta0": template.flat, "loss_fns": loss_fns, "lr": hyper["eta1"],
                  "tau": hyper["tau"], "options": opts}
            models, trace = run_baseline(kind, "ae", datasets, hb, hyper["T"], seed, workers)
            trace = trace[0] if isinstance(trace, tuple) else trace
        out.append((method, models, trace))
    return out


def run_ae_point(gen: AeGenConfig, hyper: Dict, methods: Sequence[str] = ("adept", "global", "local"),
                 n_eval: int = 100, workers: int = 1) -> Tuple[List[dict], list]:
    """Energy captured (percent, held-out samples) for each method.

    ``hyper`` holds the step sizes ``eta1..eta3``, ``T``, ``tau``, prior and
    option fields (see :func:`adept.config.default_hyper`) and ``latent_dim``.
    """
    _check_methods(methods)
    _, Xs, Xe = gen_ae_data(gen, n_eval=n_eval)
    latent = hyper["latent_dim"]
    template = make_autoencoder(gen.out_dim, latent, np.random.default_rng(1000 + gen.seed))
    data = [AeClientData(X, latent) for X in Xs]
    fns = [ae_loss_fn(template, ds) for ds in data]
    etas = (hyper["eta1"], hyper["eta2"], hyper["eta3"])

    def adept(state, opts):
        return run_adept_ae(state, data, etas, hyper["T"], hyper["tau"], template, opts,
                            _schedule(hyper), gen.seed, workers,
                            monitor_theory=hyper["monitor_theory"])
    rows, traces = [], []
    for method, models, trace in _hb_methods(methods, template, fns, data, hyper, gen.seed,
                                             workers, adept):
        labels = {"method": method, "snr_db": round(gen.snr_db, 6), "sigma_star": gen.sigma_star,
                  "seed": gen.seed}
        energy = mean_energy([template.with_flat(t) for t in models], Xe)
        rows.append({**labels, "energy": energy})
        traces.append((labels, trace))
    return rows, traces


def run_dgm_point(pop: GaussianPopulation, hyper: Dict, seed: int,
                  methods: Sequence[str] = ("adept", "local"), n_eval: int = 200,
                  workers: int = 1) -> Tuple[List[dict], list]:
    """Mean held-out denoising loss of personalized denoisers on Gaussian clients."""
    _check_methods(methods)
    _, Xs, Xe = gen_gaussian_population(pop, seed, n_eval=n_eval)
    gamma = hyper["gamma"]
    template = make_denoiser(pop.d, hyper["hidden"], np.random.default_rng(1000 + seed))
    fns = [dgm_loss_fn(template, X, gamma) for X in Xs]
    etas = (hyper["eta1"], hyper["eta2"], hyper["eta3"])

    def adept(state, opts):
        return run_adept_dgm(state, Xs, etas, hyper["T"], hyper["tau"], gamma, template, opts,
                             _schedule(hyper), seed, workers,
                             monitor_theory=hyper["monitor_theory"])
    rows, traces = [], []
    for method, models, trace in _hb_methods(methods, template, fns, Xs, hyper, seed, workers,
                                             adept):
        labels = {"method": method, "sigma_star_sq": pop.sigma_star_sq, "seed": seed}
        losses = [validation_loss(template.with_flat(t), X, gamma, seed) for t, X in zip(models, Xe)]
        rows.append({**labels, "val_loss": float(np.mean(losses))})
        traces.append((labels, trace))
    return rows, traces


def run_gaussian_grid(rel_grid: Sequence[float], sigma0_sq: float, n: int, d: int, m_sim: int,
                      xi, seed: int) -> List[dict]:
    """KL sweep over ``sigma*^2 = g sigma0^2 / n`` for ``g`` in ``rel_grid``."""
    v = sigma0_sq / n
    rows = kl_sweep([g * v for g in rel_grid], sigma0_sq, n, d, m_sim, xi, seed)
    return [{"seed": seed, **r} for r in rows]


def with_sigma_star(gen, value: float):
    return replace(gen, sigma_star=float(value))
