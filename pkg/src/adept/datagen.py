"""Synthetic heterogeneous client data for the PCA, autoencoder and Gaussian tasks.

Every generator is a pure function of its config: sub-streams for the shared
model, each client's perturbation and each client's samples are spawned from
one ``SeedSequence`` so adding clients never changes earlier ones.
Samples are stored one per row.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .manifold import StiefelPoint, project_tangent, retract, sample_stiefel_uniform


def _streams(seed: int, tag: int, count: int) -> List[np.random.Generator]:
    seqs = np.random.SeedSequence(seed, spawn_key=(tag,)).spawn(count)
    return [np.random.default_rng(s) for s in seqs]


@dataclass(frozen=True)
class PcaGenConfig:
    """Personalized PCA data: ``U_i* = R_{V*}(P_{V*}(V* + sigma_star G_i))``.

    ``sigma_star`` is the entrywise standard deviation of the perturbation.
    """

    d: int = 100
    r: int = 20
    m: int = 10
    n: int = 20
    sigma_star: float = 0.1
    sigma_eps: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.d >= self.r >= 1:
            raise ValueError("need d >= r >= 1")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if self.sigma_star < 0 or self.sigma_eps < 0:
            raise ValueError("standard deviations must be >= 0")


def perturb_stiefel(v: StiefelPoint, sigma_star: float, rng: np.random.Generator) -> StiefelPoint:
    """Project ``V + sigma_star G`` onto the tangent space at ``V`` and retract."""
    u_hat = v.mat + sigma_star * rng.standard_normal(v.mat.shape)
    return StiefelPoint(retract(v.mat, project_tangent(v.mat, u_hat)))


def sample_latent_linear(u: StiefelPoint, n: int, sigma_eps: float,
                         rng: np.random.Generator) -> np.ndarray:
    """``n`` rows of ``x = U z + eps`` with ``z ~ N(0, I_r)`` and ``eps ~ N(0, sigma_eps^2 I_d)``."""
    z = rng.standard_normal((n, u.r))
    return z @ u.mat.T + sigma_eps * rng.standard_normal((n, u.d))


def gen_pca_data(cfg: PcaGenConfig, n_eval: int = 0):
    """Draw ``V*``, the client bases ``U_i*`` and their samples.

    Returns ``(V*, [U_i*], [X_i])``, or with ``n_eval > 0`` also a list of
    held-out sample matrices as a fourth element.
    """
    (g_global,) = _streams(cfg.seed, 0, 1)
    v_star = sample_stiefel_uniform(cfg.d, cfg.r, g_global)
    models = [perturb_stiefel(v_star, cfg.sigma_star, g) for g in _streams(cfg.seed, 1, cfg.m)]
    data = [sample_latent_linear(u, cfg.n, cfg.sigma_eps, g)
            for u, g in zip(models, _streams(cfg.seed, 2, cfg.m))]
    if n_eval <= 0:
        return v_star, models, data
    held_out = [sample_latent_linear(u, n_eval, cfg.sigma_eps, g)
                for u, g in zip(models, _streams(cfg.seed, 3, cfg.m))]
    return v_star, models, data, held_out


def snr_db(sigma_mu: float, sigma_star: float) -> float:
    """Heterogeneity as ``20 log10(sigma_mu / sigma_star)``."""
    if sigma_star <= 0 or sigma_mu <= 0:
        raise ValueError("SNR needs positive standard deviations")
    return float(20 * np.log10(sigma_mu / sigma_star))


def sigma_star_from_snr(sigma_mu: float, snr: float) -> float:
    return float(sigma_mu / 10 ** (snr / 20))


@dataclass(frozen=True)
class AeGenConfig:
    """One-layer sigmoid decoders ``x = sigmoid(W z + b) + eps`` with perturbed weights."""

    latent_dim: int = 5
    out_dim: int = 64
    sigma_mu: float = 0.1
    sigma_star: float = 0.01
    m: int = 50
    n: int = 10
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.out_dim < 1 or self.m < 1 or self.n < 1:
            raise ValueError("dimensions and counts must be >= 1")
        if self.sigma_mu < 0 or self.sigma_star < 0 or self.noise_std < 0:
            raise ValueError("standard deviations must be >= 0")

    @property
    def snr_db(self) -> float:
        return snr_db(self.sigma_mu, self.sigma_star)


@dataclass(frozen=True)
class Decoder:
    W: np.ndarray
    b: np.ndarray

    def __call__(self, z: np.ndarray) -> np.ndarray:
        a = z @ self.W.T + self.b
        return np.exp(-np.logaddexp(0.0, -a))


def sample_decoder_data(dec: Decoder, n: int, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((n, dec.W.shape[1]))
    return dec(z) + noise_std * rng.standard_normal((n, dec.W.shape[0]))


def gen_ae_data(cfg: AeGenConfig, n_eval: int = 0):
    """Shared decoder ``~ N(0, sigma_mu^2)``, client decoders add ``N(0, sigma_star^2)``.

    Returns ``([Decoder_i], [X_i])`` and, with ``n_eval > 0``, held-out samples.
    """
    (g_global,) = _streams(cfg.seed, 0, 1)
    W0 = cfg.sigma_mu * g_global.standard_normal((cfg.out_dim, cfg.latent_dim))
    b0 = cfg.sigma_mu * g_global.standard_normal(cfg.out_dim)
    decoders = []
    for g in _streams(cfg.seed, 1, cfg.m):
        decoders.append(Decoder(W0 + cfg.sigma_star * g.standard_normal(W0.shape),
                                b0 + cfg.sigma_star * g.standard_normal(b0.shape)))
    data = [sample_decoder_data(dec, cfg.n, cfg.noise_std, g)
            for dec, g in zip(decoders, _streams(cfg.seed, 2, cfg.m))]
    if n_eval <= 0:
        return decoders, data
    held_out = [sample_decoder_data(dec, n_eval, cfg.noise_std, g)
                for dec, g in zip(decoders, _streams(cfg.seed, 3, cfg.m))]
    return decoders, data, held_out


def gen_gaussian_population(pop, seed: int, n_eval: int = 0):
    """``theta_i ~ N(mu*, sigma*^2 I)`` and ``n`` samples ``x_ij ~ N(theta_i, sigma0^2 I)`` per client.

    ``pop`` is a :class:`adept.dgm.GaussianPopulation`. Returns ``(thetas, [X_i])``
    with ``thetas`` of shape ``(m, d)``; with ``n_eval > 0`` held-out samples follow.
    """
    mu = np.asarray(pop.mu_star, dtype=np.float64)
    (g_theta,) = _streams(seed, 0, 1)
    thetas = mu + np.sqrt(pop.sigma_star_sq) * g_theta.standard_normal((pop.m, mu.size))
    data = [th + np.sqrt(pop.sigma0_sq) * g.standard_normal((pop.n, mu.size))
            for th, g in zip(thetas, _streams(seed, 1, pop.m))]
    if n_eval <= 0:
        return thetas, data
    held_out = [th + np.sqrt(pop.sigma0_sq) * g.standard_normal((n_eval, mu.size))
                for th, g in zip(thetas, _streams(seed, 3, pop.m))]
    return thetas, data, held_out


# --- persistence -------------------------------------------------------------

def save_arrays(path, arrays: Dict[str, np.ndarray], meta: dict = None):
    """Write arrays as one little-endian float64 blob plus a ``.json`` sidecar."""
    path = Path(path)
    layout, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        layout.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.ravel())
    blob = np.concatenate(blobs) if blobs else np.zeros(0, dtype="<f8")
    path.write_bytes(blob.astype("<f8").tobytes())
    sidecar = {"dtype": "float64", "byteorder": "little", "arrays": layout, "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    out = {}
    for entry in sidecar["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        out[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    return out, sidecar["meta"]


def save_client_datasets(path, datasets: List[np.ndarray], cfg=None):
    meta = {"m": len(datasets)}
    if cfg is not None:
        meta["config"] = asdict(cfg)
    save_arrays(path, {f"client_{i}": X for i, X in enumerate(datasets)}, meta)


def load_client_datasets(path) -> Tuple[List[np.ndarray], dict]:
    arrays, meta = load_arrays(path)
    return [arrays[f"client_{i}"] for i in range(meta["m"])], meta
