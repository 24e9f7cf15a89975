"""Command-line experiment harness.

Subcommands ``pca``, ``ae``, ``dgm-train`` and ``dgm-gaussian`` run one task;
``sweep`` runs whatever task its config names over the ``[sweep]`` grid.
Every run writes ``results.csv``, ``trace.csv`` and ``run.json`` (resolved
config plus its hash) into the output directory.

Exit codes: 0 success, 1 numerical abort, 2 usage or configuration error.
"""

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import TASKS, ConfigError, ExperimentConfig, build_config, load_config
from .datagen import AeGenConfig, PcaGenConfig, sigma_star_from_snr
from .dgm import KL_SWEEP_COLUMNS, GaussianPopulation, xi_guarantee
from .experiments import run_ae_point, run_dgm_point, run_gaussian_grid, run_pca_point
from .prior import SigmaBoundViolation
from .runtime import ClientError, NumericalError
from .trace import format_value

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2

RESULT_COLUMNS = {
    "pca": ("method", "sigma_star", "seed", "ratio"),
    "ae": ("method", "snr_db", "sigma_star", "seed", "energy"),
    "dgm-train": ("method", "sigma_star_sq", "seed", "val_loss"),
    "dgm-gaussian": ("seed",) + KL_SWEEP_COLUMNS,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adept", description="Personalized federated unsupervised learning "
                                              "experiments under a hierarchical prior.")
    sub = parser.add_subparsers(dest="command", metavar="{pca,ae,dgm-train,dgm-gaussian,sweep}")
    for name, help_ in (("pca", "personalized PCA on synthetic subspaces"),
                        ("ae", "personalized autoencoders on synthetic decoders"),
                        ("dgm-train", "personalized denoisers on Gaussian clients"),
                        ("dgm-gaussian", "analytic Gaussian diffusion KL grid"),
                        ("sweep", "run the [sweep] grid of the config's task")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML or JSON experiment file", required=name == "sweep")
        p.add_argument("--seeds", help="count N (seeds 0..N-1) or comma-separated list")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="client worker threads")
        p.add_argument("--monitor-theory", action="store_true",
                       help="assert sigma lower bound and sufficient decrease where applicable")
        if name in ("dgm-gaussian", "sweep"):
            p.add_argument("--xi", help="hyper-prior xi, or 'auto' for the guaranteed-improvement value")
    return parser


def parse_seeds(text: str) -> List[int]:
    try:
        if "," in text:
            seeds = [int(s) for s in text.split(",") if s.strip()]
        else:
            seeds = list(range(int(text)))
    except ValueError:
        raise UsageError(f"--seeds: expected a count or a comma-separated list, got {text!r}")
    if not seeds or any(s < 0 for s in seeds):
        raise UsageError("--seeds: need at least one non-negative seed")
    return seeds


def resolve_config(args) -> ExperimentConfig:
    task = None if args.command == "sweep" else args.command
    if args.config:
        cfg = load_config(args.config, task)
    else:
        cfg = build_config({}, task)
    if args.seeds:
        cfg = replace(cfg, seeds=parse_seeds(args.seeds))
    if args.out:
        cfg = replace(cfg, out=args.out)
    hyper = dict(cfg.hyper)
    if args.monitor_theory:
        hyper["monitor_theory"] = True
    if getattr(args, "xi", None) is not None:
        if args.xi != "auto":
            try:
                hyper["xi"] = float(args.xi)
            except ValueError:
                raise UsageError(f"--xi: expected a number or 'auto', got {args.xi!r}")
            if not hyper["xi"] >= 0:
                raise UsageError("--xi must be >= 0")
        elif cfg.task != "dgm-gaussian":
            raise UsageError("--xi auto is only defined for the dgm-gaussian task")
        else:
            hyper["xi"] = "auto"
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return replace(cfg, hyper=hyper)


# --- task dispatch -----------------------------------------------------------

def _pca_gen(data, seed):
    return PcaGenConfig(d=int(data["d"]), r=int(data["r"]), m=int(data["m"]), n=int(data["n"]),
                        sigma_star=data["sigma_star"], sigma_eps=data["sigma_eps"], seed=seed)


def _ae_gen(data, seed):
    sigma_star = data["sigma_star"]
    if data.get("snr_db") is not None:
        sigma_star = sigma_star_from_snr(data["sigma_mu"], data["snr_db"])
    return AeGenConfig(latent_dim=int(data["latent_dim"]), out_dim=int(data["out_dim"]),
                       sigma_mu=data["sigma_mu"], sigma_star=sigma_star, m=int(data["m"]),
                       n=int(data["n"]), noise_std=data["noise_std"], seed=seed)


def run_point(cfg: ExperimentConfig, data: dict, seed: int, workers: int):
    """Rows and traces for one grid point and seed."""
    h = cfg.hyper
    if cfg.task == "pca":
        return run_pca_point(_pca_gen(data, seed), h, cfg.methods, int(data["n_eval"]), workers)
    if cfg.task == "ae":
        return run_ae_point(_ae_gen(data, seed), h, cfg.methods, int(data["n_eval"]), workers)
    if cfg.task == "dgm-train":
        pop = GaussianPopulation(np.asarray(data["mu_star"], dtype=np.float64),
                                 data["sigma_star_sq"], data["sigma0_sq"], int(data["n"]),
                                 int(data["m"]))
        return run_dgm_point(pop, h, seed, cfg.methods, int(data["n_eval"]), workers)
    xi = None if h["xi"] == "auto" else h["xi"]
    rows = run_gaussian_grid(data["grid"], data["sigma0_sq"], int(data["n"]), int(data["d"]),
                             int(data["m_sim"]), xi, seed)
    return rows, []


def execute(cfg: ExperimentConfig, workers: int = 1):
    """All grid points and seeds in a fixed order; returns ``(rows, traces)``."""
    rows, traces = [], []
    for _, data in cfg.points():
        for seed in cfg.seeds:
            r, t = run_point(cfg, data, seed, workers)
            rows.extend(r)
            traces.extend(t)
    return rows, traces


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def _traces_text(traces) -> str:
    if not traces:
        return ""
    label_cols = list(traces[0][0])
    cols = []
    for _, tr in traces:
        cols.extend(c for c in tr.columns if c not in cols)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(label_cols + cols)
    for labels, tr in traces:
        for row in tr.rows:
            w.writerow([format_value(labels[c]) for c in label_cols]
                       + [format_value(row.get(c, math.nan)) for c in cols])
    return buf.getvalue()


def write_outputs(cfg: ExperimentConfig, rows, traces) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(_csv_text(RESULT_COLUMNS[cfg.task], rows), encoding="utf-8")
    (out / "trace.csv").write_text(_traces_text(traces), encoding="utf-8")
    meta = {"config_hash": cfg.config_hash(), "config": cfg.resolved()}
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n",
                                  encoding="utf-8")
    return out


def summary_table(cfg: ExperimentConfig, rows) -> str:
    """Seed-averaged metric per method and grid point."""
    cols = RESULT_COLUMNS[cfg.task]
    if cfg.task == "dgm-gaussian":
        lines = ["sigma_star_sq  xi        kl_collab  kl_local  analytic  improves"]
        d = cfg.data
        for r in rows:
            v = d["sigma0_sq"] / d["n"]
            improves = r["avg_kl_collab"] < r["avg_kl_local"]
            lines.append(f"{r['sigma_star_sq']:<14.4g} {r['xi']:<9.4g} {r['avg_kl_collab']:<10.5f} "
                         f"{r['avg_kl_local']:<9.5f} {v - r['factor_analytic']:<9.5f} {improves}")
        return "\n".join(lines)
    metric, key = cols[-1], cols[1]
    groups = {}
    for r in rows:
        groups.setdefault((r[key], r["method"]), []).append(r[metric])
    lines = [f"{key:<12} {'method':<16} {metric} (mean over {len(cfg.seeds)} seed(s))"]
    for (k, method), vals in groups.items():
        lines.append(f"{k:<12.6g} {method:<16} {np.mean(vals):.6g}")
    return "\n".join(lines)


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        cfg = resolve_config(args)
        if args.command == "sweep" and not cfg.sweep:
            raise ConfigError("the sweep command needs a [sweep] table", "sweep", None, cfg.source)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    if cfg.task == "dgm-gaussian" and cfg.hyper["xi"] == "auto":
        d = cfg.data
        print(f"xi = 3 d sigma0^2 / (2 n) = {xi_guarantee(int(d['d']), d['sigma0_sq'], int(d['n'])):.6g}")
    try:
        rows, traces = execute(cfg, args.threads)
    except (ClientError, NumericalError, SigmaBoundViolation, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid settings: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = write_outputs(cfg, rows, traces)
    print(summary_table(cfg, rows))
    print(f"wrote {out / 'results.csv'} (config {cfg.config_hash()[:12]})")
    return EXIT_OK


__all__ = ["main", "main_entry", "build_parser", "execute", "write_outputs", "run_point", "TASKS"]


def main_entry():
    sys.exit(main())
