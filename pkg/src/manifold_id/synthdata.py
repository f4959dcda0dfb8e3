"""Ground-truth manifolds: hyperspheres, Gaussians, the Swiss Roll and labeled clusters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special, stats

from .errors import DataError
from .features import FeatureMatrix

KINDS = ("hypersphere", "gaussian", "swiss_roll", "clustered")


@dataclass(frozen=True)
class ManifoldSpec:
    """What to sample.

    ``m`` is the intrinsic dimension (fixed to 2 for ``swiss_roll``). Points
    are generated in a base space of dimension ``m+1`` (hypersphere,
    clustered), ``m`` (gaussian) or 3 (swiss_roll) and then embedded in
    ``R^d`` by zero padding (``embedding="pad"``) or by a random orthonormal
    frame (``embedding="rotation"``).
    """

    kind: str
    n: int
    d: int
    m: Optional[int] = None
    seed: int = 0
    sigma: float = 1.0
    classes: int = 10
    within_sigma: float = 0.1
    radius: float = 1.0
    embedding: str = "rotation"

    def __post_init__(self):
        kind = self.kind.replace("-", "_")
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise DataError(f"unknown manifold kind {self.kind!r}")
        if kind == "swiss_roll":
            if self.m not in (None, 2):
                raise DataError("swiss_roll has intrinsic dimension 2")
            object.__setattr__(self, "m", 2)
        elif self.m is None or self.m < 1:
            raise DataError(f"{kind} needs an intrinsic dimension m >= 1")
        if self.n < 1:
            raise DataError("n must be >= 1")
        if self.d < self.base_dim:
            raise DataError(f"{kind} with m={self.m} needs d >= {self.base_dim}, got d={self.d}")
        if self.embedding not in ("pad", "rotation"):
            raise DataError(f"unknown embedding {self.embedding!r}")
        if kind == "clustered" and not 1 <= self.classes <= self.n:
            raise DataError("clustered needs 1 <= classes <= n")
        if self.sigma <= 0 or self.within_sigma < 0 or self.radius <= 0:
            raise DataError("sigma and radius must be positive, within_sigma non-negative")

    @property
    def base_dim(self) -> int:
        if self.kind == "swiss_roll":
            return 3
        if self.kind == "gaussian":
            return self.m
        return self.m + 1


@dataclass(frozen=True)
class Manifold:
    features: FeatureMatrix
    base: np.ndarray
    """Points before embedding, float64."""
    coords: Optional[np.ndarray] = None
    """Intrinsic coordinates where known: ``(t, h)`` for the Swiss Roll."""
    frame: Optional[np.ndarray] = None
    """``d x base_dim`` orthonormal embedding frame."""


def random_frame(d: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed ``d x q`` orthonormal frame (QR of a Gaussian matrix)."""
    a = rng.standard_normal((d, q))
    qmat, r = np.linalg.qr(a)
    return qmat * np.sign(np.diag(r))[None, :]


def _embed(base: np.ndarray, spec: ManifoldSpec, rng) -> tuple:
    n, q = base.shape
    if spec.embedding == "pad":
        frame = np.eye(spec.d, q)
    else:
        frame = random_frame(spec.d, q, rng)
    return base @ frame.T, frame


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def class_labels(n: int, classes: int) -> np.ndarray:
    """Contiguous, balanced class blocks."""
    return (np.arange(n) * classes) // n


def generate(spec: ManifoldSpec) -> Manifold:
    rng = np.random.default_rng(spec.seed)
    labels = None
    coords = None
    if spec.kind == "hypersphere":
        base = _unit_rows(rng.standard_normal((spec.n, spec.m + 1))) * spec.radius
    elif spec.kind == "gaussian":
        base = spec.sigma * rng.standard_normal((spec.n, spec.m))
    elif spec.kind == "swiss_roll":
        t = 1.5 * np.pi * (1.0 + 2.0 * rng.random(spec.n))
        h = 21.0 * rng.random(spec.n)
        base = np.column_stack([t * np.cos(t), h, t * np.sin(t)])
        coords = np.column_stack([t, h])
    else:
        centers = _unit_rows(rng.standard_normal((spec.classes, spec.m + 1)))
        labels = class_labels(spec.n, spec.classes)
        noise = spec.within_sigma * rng.standard_normal((spec.n, spec.m + 1))
        base = _unit_rows(centers[labels] + noise) * spec.radius
    data, frame = _embed(base, spec, rng)
    return Manifold(FeatureMatrix(data, labels), base, coords, frame)


def sample_hypersphere_distances(m: int, size: int, seed: int = 0) -> np.ndarray:
    """Draws from the geodesic distance law of the unit ``m``-sphere.

    The angle between two independent uniform points on ``S^m`` has density
    proportional to ``sin^(m-1)(r)``; by symmetry one point can be fixed at the
    pole, so the angle is ``arccos`` of one coordinate of a uniform point.
    """
    rng = np.random.default_rng(seed)
    u = _unit_rows(rng.standard_normal((size, m + 1)))
    return np.arccos(np.clip(u[:, 0], -1.0, 1.0))


def analytic_geodesic_pdf(kind: str, r, m: int, sigma: float = 1.0) -> np.ndarray:
    """Normalized density of pairwise geodesic distances for a reference manifold.

    ``hypersphere``: ``c sin^(m-1)(r)`` on ``[0, pi]`` for the unit ``m``-sphere.
    ``gaussian``: distance between two draws of ``N(0, sigma^2 I_m)``, i.e. a
    chi law with ``m`` degrees of freedom scaled by ``sqrt(2) sigma``.
    """
    r = np.asarray(r, dtype=np.float64)
    if m < 1:
        raise DataError("m must be >= 1")
    if kind == "hypersphere":
        if np.any(r < 0) or np.any(r > np.pi):
            raise DataError("hypersphere geodesics live in [0, pi]")
        logc = special.gammaln((m + 1) / 2) - special.gammaln(m / 2) - 0.5 * np.log(np.pi)
        if m == 1:
            return np.full_like(r, 1.0 / np.pi)
        return np.exp(logc) * np.sin(r) ** (m - 1)
    if kind == "gaussian":
        if np.any(r < 0):
            raise DataError("distances are non-negative")
        return stats.chi.pdf(r, m, scale=np.sqrt(2.0) * sigma)
    raise DataError(f"no analytic law for {kind!r}")


def total_variation(p, q, widths) -> float:
    """Half the L1 distance between two binned densities."""
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q)) * np.asarray(widths)))
