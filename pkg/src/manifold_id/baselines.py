"""Reference reducers: PCA, Isomap (classical MDS on geodesics) and a stacked denoising autoencoder."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .deepmds import (
    Adam,
    MdsNetwork,
    StageSpec,
    TrainConfig,
    cosine_lr,
    init_stage,
    stage_backward,
    stage_forward,
    transform,
)
from .errors import DataError, DisconnectedGraphError, NumericalError
from .features import FeatureMatrix
from .graph import NeighborGraph, geodesic_distances, is_connected
from .modelio import as_stored, load_model, save_model

ISOMAP_MAX_N = 10_000


def _as_array(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values()
    return np.asarray(x, dtype=np.float64)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


# -- PCA ------------------------------------------------------------------------------


@dataclass
class LinearProjector:
    mean: np.ndarray
    components: np.ndarray
    """``d x m`` with orthonormal columns."""
    variance_fraction: np.ndarray

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def transform(self, x) -> np.ndarray:
        x = _as_array(x)
        if x.shape[-1] != self.mean.shape[0]:
            raise DataError(f"input has dimension {x.shape[-1]}, projector expects {self.mean.shape[0]}")
        return (x - self.mean) @ self.components

    def inverse_transform(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) @ self.components.T + self.mean

    def save(self, path):
        header = {"method": "pca", "dims": [int(self.mean.shape[0]), self.dim]}
        save_model(path, header, [self.mean, self.components, self.variance_fraction])

    @classmethod
    def load(cls, path) -> "LinearProjector":
        header, arrays = load_model(path)
        if header.get("method") != "pca":
            raise DataError(f"model file holds {header.get('method')!r}, expected 'pca'")
        return cls(*arrays)


def pca_fit(m, target_dim: int) -> LinearProjector:
    """Mean-centered SVD keeping the ``target_dim`` leading directions.

    ``variance_fraction`` is each retained direction's share of the total
    variance. Component signs are fixed so the largest-magnitude entry is
    positive.
    """
    x = _as_array(m)
    n, d = x.shape
    if not 1 <= target_dim <= min(n - 1, d) and not (n == 1 and target_dim <= d):
        raise DataError(f"target dim {target_dim} must be <= min(n-1, d) = {min(n - 1, d)}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    total = float(np.sum(s**2))
    tol = s[0] * max(n, d) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if rank < target_dim:
        warnings.warn(
            f"data has rank {rank} < target dim {target_dim}; padding with zero-variance directions",
            RuntimeWarning,
            stacklevel=2,
        )
    comps = _fix_signs(vt[:target_dim].T)
    frac = (s[:target_dim] ** 2) / total if total > 0 else np.zeros(target_dim)
    return LinearProjector(as_stored(mean), as_stored(comps), frac)


# -- Isomap / classical MDS ---------------------------------------------------------------


@dataclass
class MdsSpectrum:
    embedding: np.ndarray
    eigenvalues: np.ndarray
    n_negative: int
    negative_mass: float
    """Sum of |negative eigenvalues| over the sum of |all eigenvalues|."""
    residual: float
    """``||B - Y Y^T||_F / ||B||_F`` for the double-centered Gram matrix ``B``."""


def double_center(d2: np.ndarray) -> np.ndarray:
    """``-1/2 J D^2 J`` with ``J = I - 11^T / n``."""
    row = d2.mean(axis=1, keepdims=True)
    col = d2.mean(axis=0, keepdims=True)
    return -0.5 * (d2 - row - col + d2.mean())


def classical_mds(dist: np.ndarray, target_dim: int) -> MdsSpectrum:
    """Classical (Torgerson) MDS of a symmetric distance matrix."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise DataError("distance matrix must be square")
    b = double_center(dist**2)
    b = 0.5 * (b + b.T)
    w, v = np.linalg.eigh(b)
    w, v = w[::-1], v[:, ::-1]
    positive = int(np.sum(w > 1e-10 * max(abs(w[0]), 1e-300)))
    if target_dim > positive:
        raise DataError(f"target dim {target_dim} exceeds the {positive} positive eigenvalues")
    neg = w < 0
    mass = float(np.sum(np.abs(w[neg])) / np.sum(np.abs(w))) if np.any(w) else 0.0
    vecs = _fix_signs(v[:, :target_dim])
    lam = w[:target_dim]
    y = vecs * np.sqrt(lam)[None, :]
    resid = float(np.linalg.norm(b - y @ y.T) / np.linalg.norm(b)) if np.any(b) else 0.0
    return MdsSpectrum(y, lam, int(neg.sum()), mass, resid)


@dataclass
class IsomapEmbedding:
    embedding: np.ndarray
    eigenvalues: np.ndarray
    graph_fingerprint: str
    n_negative: int
    negative_mass: float
    residual: float

    def transform(self, x):
        raise DataError(
            "Isomap provides no explicit mapping for unseen samples; "
            "refit on the enlarged set or use pca/dae/deepmds"
        )

    def save(self, path):
        header = {
            "method": "isomap",
            "dims": [None, int(self.embedding.shape[1])],
            "graph_fingerprint": self.graph_fingerprint,
            "n_negative": self.n_negative,
            "negative_mass": self.negative_mass,
            "residual": self.residual,
        }
        save_model(path, header, [self.embedding, self.eigenvalues])


def isomap_fit(g: NeighborGraph, target_dim: int, threads=None) -> IsomapEmbedding:
    """Classical MDS on all-pairs graph geodesics."""
    if g.n > ISOMAP_MAX_N:
        raise DataError(f"isomap uses a dense O(n^3) eigendecomposition; n={g.n} > {ISOMAP_MAX_N}")
    conn = is_connected(g)
    if not conn.connected:
        raise DisconnectedGraphError(conn.component_sizes)
    sample = geodesic_distances(g, n_sources="all", threads=threads)
    dist = sample.matrix
    dist = 0.5 * (dist + dist.T)
    spec = classical_mds(dist, target_dim)
    return IsomapEmbedding(spec.embedding, spec.eigenvalues, g.fingerprint(), spec.n_negative, spec.negative_mass, spec.residual)


# -- denoising autoencoder --------------------------------------------------------------------


@dataclass
class DenoisingAutoencoder:
    encoder: MdsNetwork
    decoder: MdsNetwork
    noise: float
    history: List[dict] = field(default_factory=list)

    def transform(self, x) -> np.ndarray:
        return transform(self.encoder, x)

    def reconstruct(self, x) -> np.ndarray:
        return transform(self.decoder, self.transform(x))

    def save(self, path):
        self.encoder.meta = dict(self.encoder.meta, noise=self.noise)
        self.encoder.save(path, method="dae")


def _decoder_specs(enc_stages: Sequence[StageSpec]) -> List[StageSpec]:
    return [StageSpec(s.out_dim, s.in_dim, s.units) for s in reversed(enc_stages)]


def _ae_loss_and_grad(enc_specs, enc_params, dec_specs, dec_params, x_noisy, x_clean, lam):
    h = x_noisy
    enc_caches = []
    for s, p in zip(enc_specs, enc_params):
        h, c = stage_forward(s, p, h, keep_cache=True)
        enc_caches.append(c)
    dec_caches = []
    for s, p in zip(dec_specs, dec_params):
        h, c = stage_forward(s, p, h, keep_cache=True)
        dec_caches.append(c)
    diff = h - x_clean
    loss = float(np.mean(diff * diff))
    reg = sum(float(np.sum(q * q)) for p in list(enc_params) + list(dec_params) for q in p)
    loss += lam * reg
    dy = 2.0 * diff / diff.size
    dec_grads = [None] * len(dec_specs)
    for i in reversed(range(len(dec_specs))):
        dy, g = stage_backward(dec_specs[i], dec_params[i], dec_caches[i], dy)
        dec_grads[i] = [gi + 2.0 * lam * q for gi, q in zip(g, dec_params[i])]
    enc_grads = [None] * len(enc_specs)
    for i in reversed(range(len(enc_specs))):
        dy, g = stage_backward(enc_specs[i], enc_params[i], enc_caches[i], dy, need_dx=i > 0)
        enc_grads[i] = [gi + 2.0 * lam * q for gi, q in zip(g, enc_params[i])]
    return loss, enc_grads, dec_grads


def _fit_ae(enc_specs, enc_params, dec_specs, dec_params, x, noise, cfg, lr, epochs, rng, name, history):
    n = x.shape[0]
    std = x.std(axis=0)
    params = [q for p in enc_params for q in p] + [q for p in dec_params for q in p]
    opt = Adam(params)
    bsz = min(cfg.batch_size, n)
    steps = max(1, math.ceil(n / bsz))
    total = epochs * steps
    step = 0
    losses = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        running = 0.0
        for b in range(steps):
            idx = perm[b * bsz : (b + 1) * bsz]
            clean = x[idx]
            noisy = clean + noise * std * rng.standard_normal(clean.shape) if noise > 0 else clean
            cur = cosine_lr(step, total, lr, cfg.eta_min)
            loss, eg, dg = _ae_loss_and_grad(enc_specs, enc_params, dec_specs, dec_params, noisy, clean, cfg.weight_decay)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite reconstruction loss in {name}, epoch {epoch}")
            opt.step(params, [q for g in eg for q in g] + [q for g in dg for q in g], cur)
            running += loss
            step += 1
        losses.append(running / steps)
        history.append({"phase": name, "epoch": epoch, "loss": losses[-1], "lr": cur})
        if cfg.patience and epoch >= cfg.patience:
            ref = losses[epoch - cfg.patience]
            if ref - losses[-1] < cfg.min_improvement * abs(ref):
                break
    return losses


def dae_fit(
    features,
    dims: Sequence[int],
    noise: float = 0.1,
    cfg: Optional[TrainConfig] = None,
    units: int = 2,
    hidden: Optional[int] = None,
) -> DenoisingAutoencoder:
    """Stacked denoising autoencoder with the DeepMDS stage architecture.

    Each stage is trained to reconstruct its clean input from a copy
    corrupted by Gaussian noise of ``noise`` times the per-dimension standard
    deviation; the next stage trains on the clean encodings. Inputs are
    divided by their overall standard deviation first so that the
    reconstruction error and the weight decay live on comparable scales. With
    ``cfg.mode == "stagewise_finetune"`` the whole encoder/decoder stack is
    then tuned end to end at ``cfg.finetune_lr_scale`` times the rate.
    """
    cfg = cfg or TrainConfig()
    x = _as_array(features)
    dims = [int(d) for d in dims]
    if x.shape[1] != dims[0]:
        raise DataError(f"features have dimension {x.shape[1]}, path starts at {dims[0]}")
    if not np.all(np.isfinite(x)):
        raise DataError("features must be finite")
    scale = float(x.std()) or 1.0
    x = x / scale
    rng = np.random.default_rng(cfg.seed)
    enc_specs = [StageSpec(a, b, units, hidden) for a, b in zip(dims, dims[1:])]
    dec_specs = _decoder_specs(enc_specs)
    enc_params = [init_stage(s, rng) for s in enc_specs]
    dec_params = [init_stage(s, rng) for s in dec_specs]
    history: List[dict] = []
    n_st = len(enc_specs)
    h = x
    for i in range(n_st):
        d_i = n_st - 1 - i
        _fit_ae([enc_specs[i]], [enc_params[i]], [dec_specs[d_i]], [dec_params[d_i]], h, noise, cfg, cfg.lr, cfg.epochs, rng, f"stage{i + 1}", history)
        h, _ = stage_forward(enc_specs[i], enc_params[i], h)
    if cfg.mode == "stagewise_finetune" and n_st > 1:
        _fit_ae(enc_specs, enc_params, dec_specs, dec_params, x, noise, cfg, cfg.lr * cfg.finetune_lr_scale,
                cfg.finetune_epochs or cfg.epochs, rng, "finetune", history)
    enc_params = [[as_stored(p) for p in stage] for stage in enc_params]
    dec_params = [[as_stored(p) for p in stage] for stage in dec_params]
    encoder = MdsNetwork(enc_specs, enc_params, cfg.seed, history, {"method": "dae", "noise": noise})
    decoder = MdsNetwork(dec_specs, dec_params, cfg.seed, [], {"method": "dae-decoder"})
    encoder.scale = decoder.scale = scale
    return DenoisingAutoencoder(encoder, decoder, noise, history)
