"""Intrinsic dimensionality from geodesic distance distributions.

The geodesic distance density ``p(r)`` is compared, on the window
``[r_max - w*sigma, r_max]`` left of its mode, against a reference law whose
shape depends only on the dimension:

* hypersphere: ``log(p(r)/p(r_max)) = (m-1) * log(sin(pi*r / (2*r_max)))``
* Gaussian: ``log(p(r)/p(r_max)) = (m-1) * (log(r/r_max) - (r^2 - r_max^2) / (2*r_max^2))``

Both are one-parameter least-squares problems through the origin, solved in
closed form. The correlation dimension (slope of ``ln C(r)`` against
``ln r``) is provided as a baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DisconnectedGraphError, NumericalError
from .features import FeatureMatrix, as_metric, distance_matrix
from .graph import GeodesicSample, geodesic_distances, graph_from_order, is_connected, neighbor_order

DEFAULT_WINDOW_SIGMAS = 2.0


def _as_distances(source) -> np.ndarray:
    if isinstance(source, GeodesicSample):
        r = source.distances
    else:
        r = np.asarray(source, dtype=np.float64).ravel()
    return r


@dataclass
class DistanceDistribution:
    """Histogram density of pairwise distances with its mode and spread."""

    edges: np.ndarray
    density: np.ndarray
    r_max: float
    sigma: float
    count: int
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def mode_index(self) -> int:
        return int(np.argmax(self.density))

    @property
    def p_max(self) -> float:
        return float(self.density[self.mode_index])

    def cumulative_at_edges(self) -> np.ndarray:
        """``C`` at every bin edge, integrated from the histogram."""
        return np.concatenate([[0.0], np.cumsum(self.density * self.widths)])

    def cdf(self, r) -> np.ndarray:
        """Fraction of sampled distances strictly below ``r``.

        Falls back to the piecewise-linear histogram CDF when the raw samples
        were not kept.
        """
        r = np.asarray(r, dtype=np.float64)
        if self.samples is not None:
            return np.searchsorted(self.samples, r, side="left") / self.count
        return np.interp(r, self.edges, self.cumulative_at_edges(), left=0.0, right=1.0)

    def window(self, window_sigmas: float = DEFAULT_WINDOW_SIGMAS) -> Tuple[float, float]:
        return (self.r_max - window_sigmas * self.sigma, self.r_max)

    def window_bins(self, window_sigmas: float = DEFAULT_WINDOW_SIGMAS) -> np.ndarray:
        """Indices of populated bins whose centers lie in the fit window."""
        lo, hi = self.window(window_sigmas)
        c = self.centers
        # centers and r_max come from the same arithmetic, so the mode bin is included exactly
        sel = (c >= lo) & (c <= hi) & (self.density > 0)
        sel[self.mode_index] = True
        return np.flatnonzero(sel)

    @classmethod
    def from_density(cls, edges, density, sigma: Optional[float] = None) -> "DistanceDistribution":
        """Wrap a tabulated density (e.g. an analytic law) as a distribution.

        The density is renormalized to integrate to one; ``sigma`` defaults to
        the root-mean-square spread around the mode under that density.
        """
        edges = np.asarray(edges, dtype=np.float64)
        density = np.asarray(density, dtype=np.float64)
        if density.shape[0] != edges.shape[0] - 1:
            raise DataError("need len(edges) == len(density) + 1")
        if np.any(density < 0) or not np.all(np.isfinite(density)):
            raise DataError("densities must be finite and non-negative")
        mass = np.sum(density * np.diff(edges))
        if mass <= 0:
            raise DataError("density has zero mass")
        density = density / mass
        centers = 0.5 * (edges[1:] + edges[:-1])
        j = int(np.argmax(density))
        r_max = float(centers[j])
        if sigma is None:
            sigma = math.sqrt(float(np.sum((centers - r_max) ** 2 * density * np.diff(edges))))
        return cls(edges, density, r_max, float(sigma), 0, None)


def build_distribution(source, bins="fd", keep_samples: bool = True) -> DistanceDistribution:
    """Histogram the distances of a :class:`GeodesicSample` (or a plain array).

    Parameters
    ----------
    source : GeodesicSample or array_like
    bins : int, str or array_like
        Anything :func:`numpy.histogram_bin_edges` accepts; the histogram range
        is ``[0, max r]``. Defaults to the Freedman-Diaconis rule.

    Notes
    -----
    ``sigma`` is the root-mean-square deviation of the raw samples from the
    mode radius, not the standard deviation about the mean.
    """
    r = _as_distances(source)
    if r.size == 0:
        raise DataError("empty distance sample")
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise DataError("distances must be finite and non-negative")
    hi = float(r.max())
    if hi == float(r.min()):
        raise DataError("all distances are equal: zero-width support")
    if isinstance(bins, str) and bins == "fd":
        q75, q25 = np.percentile(r, [75, 25])
        if q75 == q25:
            bins = "sqrt"
    edges = np.histogram_bin_edges(r, bins=bins, range=(0.0, hi))
    counts, edges = np.histogram(r, bins=edges)
    density = counts / (r.size * np.diff(edges))
    centers = 0.5 * (edges[1:] + edges[:-1])
    r_max = float(centers[int(np.argmax(density))])
    sigma = math.sqrt(float(np.mean((r - r_max) ** 2)))
    samples = np.sort(r) if keep_samples else None
    return DistanceDistribution(edges, density, r_max, sigma, int(r.size), samples)


@dataclass
class IdEstimate:
    """Result of fitting a reference law (or the correlation-dimension line)."""

    m_real: float
    rmse: float
    reference: str
    window: Tuple[float, float]
    fit_x: np.ndarray = field(repr=False)
    fit_y: np.ndarray = field(repr=False)
    r_max: Optional[float] = None
    sigma: Optional[float] = None
    k: Optional[int] = None
    distribution: Optional[DistanceDistribution] = field(default=None, repr=False)
    local_dimension: Optional[np.ndarray] = field(default=None, repr=False)
    sweep: Optional["SweepResult"] = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return max(1, int(math.floor(self.m_real + 0.5)))

    def objective(self, m_real: float) -> float:
        """RMSE of the fit residual at an arbitrary dimension."""
        if self.reference == "correlation":
            slope = m_real
            intercept = float(np.mean(self.fit_y - slope * self.fit_x))
            resid = self.fit_y - slope * self.fit_x - intercept
        else:
            resid = self.fit_y - (m_real - 1.0) * self.fit_x
        return float(np.sqrt(np.mean(resid**2)))

    def to_dict(self, include_bins: bool = True) -> dict:
        out = {
            "k": self.k,
            "m_real": float(self.m_real),
            "m": self.m,
            "rmse": float(self.rmse),
            "r_max": None if self.r_max is None else float(self.r_max),
            "sigma": None if self.sigma is None else float(self.sigma),
            "window": [float(self.window[0]), float(self.window[1])],
            "reference": self.reference,
        }
        if include_bins and self.distribution is not None:
            d = self.distribution
            c = d.centers
            C = np.interp(c, d.edges, d.cumulative_at_edges())
            out["bins"] = [
                {"r": float(a), "p": float(b), "C": float(cc)} for a, b, cc in zip(c, d.density, C)
            ]
        return out

    def to_json(self, path=None, include_bins: bool = True) -> str:
        text = json.dumps(self.to_dict(include_bins), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def fit_points_csv(self, path):
        with open(path, "w") as fh:
            fh.write("x,y\n")
            for x, y in zip(self.fit_x.tolist(), self.fit_y.tolist()):
                fh.write(f"{x!r},{y!r}\n")


def _through_origin(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    sxx = float(x @ x)
    if sxx == 0.0:
        raise NumericalError("all regressors are zero; the fit is undetermined")
    slope = float(x @ y) / sxx
    rmse = float(np.sqrt(np.mean((y - slope * x) ** 2)))
    return slope, rmse


def _window_points(d: DistanceDistribution, window_sigmas: float):
    if not d.sigma > 0:
        raise DataError("sigma must be positive")
    idx = d.window_bins(window_sigmas)
    if idx.size < 3:
        raise DataError(
            f"fit window [{d.r_max - window_sigmas * d.sigma:.4g}, {d.r_max:.4g}] "
            f"contains {idx.size} populated bins; need at least 3"
        )
    r = d.centers[idx]
    y = np.log(d.density[idx] / d.p_max)
    return r, y


def fit_hypersphere_id(d: DistanceDistribution, window_sigmas: float = DEFAULT_WINDOW_SIGMAS) -> IdEstimate:
    """Least-squares dimension against the ``sin^(m-1)`` hypersphere law."""
    r, y = _window_points(d, window_sigmas)
    x = np.log(np.sin(np.pi * r / (2.0 * d.r_max)))
    slope, rmse = _through_origin(x, y)
    return IdEstimate(1.0 + slope, rmse, "hypersphere", d.window(window_sigmas), x, y, d.r_max, d.sigma, distribution=d)


def gaussian_regressor(r, r_max) -> np.ndarray:
    """Log-density shape (per unit of ``m-1``) of distances within a Gaussian.

    Distances between two draws of an isotropic m-dimensional Gaussian have
    density proportional to ``r^(m-1) exp(-r^2 / (4 s^2))`` with mode
    ``r_max^2 = 2 (m-1) s^2``; eliminating ``s`` leaves ``m-1`` times this.
    """
    u = np.asarray(r, dtype=np.float64) / r_max
    return np.log(u) - 0.5 * (u * u - 1.0)


def fit_gaussian_id(d: DistanceDistribution, window_sigmas: float = DEFAULT_WINDOW_SIGMAS) -> IdEstimate:
    """Least-squares dimension against the Gaussian reference law."""
    r, y = _window_points(d, window_sigmas)
    x = gaussian_regressor(r, d.r_max)
    slope, rmse = _through_origin(x, y)
    return IdEstimate(1.0 + slope, rmse, "gaussian", d.window(window_sigmas), x, y, d.r_max, d.sigma, distribution=d)


FITS = {"hypersphere": fit_hypersphere_id, "gaussian": fit_gaussian_id}


def loglog_slope(r, C) -> Tuple[float, float, float]:
    """Ordinary least-squares line through ``(ln r, ln C)``.

    Returns ``(slope, intercept, rmse)``.
    """
    lr = np.log(np.asarray(r, dtype=np.float64))
    lc = np.log(np.asarray(C, dtype=np.float64))
    A = np.column_stack([lr, np.ones_like(lr)])
    (slope, intercept), *_ = np.linalg.lstsq(A, lc, rcond=None)
    rmse = float(np.sqrt(np.mean((lc - slope * lr - intercept) ** 2)))
    return float(slope), float(intercept), rmse


def correlation_dimension(source, r_lo: float, r_hi: float, n_points: int = 20) -> IdEstimate:
    """Correlation dimension from the small-radius scaling of ``C(r)``.

    ``C`` is evaluated on ``n_points`` log-spaced radii in ``[r_lo, r_hi]``.
    The local slope ``r p(r) / C(r)`` on the same grid is returned as
    ``local_dimension``.
    """
    if not (r_lo > 0 and r_hi > r_lo):
        raise DataError("need 0 < r_lo < r_hi")
    r = np.sort(_as_distances(source))
    if r.size == 0:
        raise DataError("empty distance sample")
    inside = r[(r >= r_lo) & (r <= r_hi)]
    if np.unique(inside).size < 3:
        raise DataError(f"fewer than 3 distinct distances in [{r_lo}, {r_hi}]")
    grid = np.geomspace(r_lo, r_hi, n_points)
    C = np.searchsorted(r, grid, side="left") / r.size
    if C[0] == 0:
        raise DataError(f"C(r_lo) = 0 at r_lo={r_lo}")
    slope, _, rmse = loglog_slope(grid, C)
    p = np.gradient(C, grid)
    local = grid * p / C
    est = IdEstimate(slope, rmse, "correlation", (r_lo, r_hi), np.log(grid), np.log(C))
    est.local_dimension = local
    return est


def metric_distances(m: FeatureMatrix, metric="euclidean", n_sources=None, seed: int = 0) -> np.ndarray:
    """Direct metric distances from sampled sources (``i != j``), as a flat array."""
    metric = as_metric(metric)
    n = m.n
    x = m.values()
    if n_sources is None or n_sources == "all" or int(n_sources) >= n:
        out = []
        for start in range(0, n, 1024):
            block = distance_matrix(x[start : start + 1024], x, metric)
            rows = np.arange(block.shape[0])[:, None]
            out.append(block[np.arange(n)[None, :] > rows + start])
        return np.concatenate(out)
    rng = np.random.default_rng(seed)
    src = np.sort(rng.choice(n, size=int(n_sources), replace=False))
    block = distance_matrix(x[src], x, metric)
    mask = np.arange(n)[None, :] != src[:, None]
    return block[mask]


@dataclass
class SweepRow:
    k: int
    connected: bool
    component_sizes: List[int]
    estimate: Optional[IdEstimate] = None
    error: Optional[str] = None

    @property
    def m(self) -> Optional[int]:
        return None if self.estimate is None else self.estimate.m

    @property
    def rmse(self) -> Optional[float]:
        return None if self.estimate is None else self.estimate.rmse


@dataclass
class SweepResult:
    rows: List[SweepRow]
    selected: int
    reference: str
    metric: str

    @property
    def selected_row(self) -> SweepRow:
        return self.rows[self.selected]

    @property
    def estimate(self) -> IdEstimate:
        return self.selected_row.estimate

    @property
    def k(self) -> int:
        return self.selected_row.k

    def constraint_flags(self, row: SweepRow) -> dict:
        """Which of the three k-selection constraints a row satisfies.

        ``no_shortcuts``: k is no larger than the selected k (smaller k means
        fewer shortcut edges across folds); ``connected``: no isolated
        samples; ``min_rmse``: the row has the best fit among connected ks.
        """
        return {
            "no_shortcuts": row.k <= self.k,
            "connected": row.connected,
            "min_rmse": row is self.selected_row,
        }

    def to_dict(self) -> dict:
        rows = []
        for row in self.rows:
            entry = {
                "k": row.k,
                "connected": row.connected,
                "component_sizes": row.component_sizes[:20],
                "m": row.m,
                "m_real": None if row.estimate is None else float(row.estimate.m_real),
                "rmse": row.rmse,
                "selected": row is self.selected_row,
                "constraints": self.constraint_flags(row),
            }
            if row.error:
                entry["error"] = row.error
            rows.append(entry)
        return {
            "metric": self.metric,
            "reference": self.reference,
            "selected_k": self.k,
            "estimate": self.estimate.to_dict(include_bins=True),
            "sweep": rows,
        }

    def table(self) -> str:
        lines = [f"{'k':>5} {'connected':>9} {'m_real':>9} {'m':>4} {'rmse':>10}"]
        for row in self.rows:
            star = " *" if row is self.selected_row else ""
            if row.estimate is None:
                reason = "disconnected" if not row.connected else (row.error or "")
                lines.append(f"{row.k:>5} {str(row.connected):>9} {'-':>9} {'-':>4} {'-':>10}  {reason}")
            else:
                e = row.estimate
                lines.append(f"{row.k:>5} {str(row.connected):>9} {e.m_real:9.3f} {e.m:>4} {e.rmse:10.5f}{star}")
        lines.append("* selected: connected k with minimal fit RMSE")
        return "\n".join(lines)


def estimate_id(
    m: FeatureMatrix,
    k: int,
    metric="euclidean",
    reference: str = "hypersphere",
    window_sigmas: float = DEFAULT_WINDOW_SIGMAS,
    bins="fd",
    n_sources=None,
    seed: int = 0,
    threads=None,
    symmetrize: str = "union",
) -> IdEstimate:
    """Single-k convenience wrapper around :func:`sweep_k`."""
    return sweep_k(m, metric, [k], reference, window_sigmas, bins, n_sources, seed, threads, symmetrize).estimate


def sweep_k(
    m: FeatureMatrix,
    metric="euclidean",
    k_list: Sequence[int] = (4, 7, 9, 15),
    reference: str = "hypersphere",
    window_sigmas: float = DEFAULT_WINDOW_SIGMAS,
    bins="fd",
    n_sources=None,
    seed: int = 0,
    threads=None,
    symmetrize: str = "union",
) -> SweepResult:
    """Estimate the ID for each k and select the connected k with minimal RMSE.

    Raises
    ------
    DisconnectedGraphError
        If no k yields a connected graph; carries the component sizes of the
        largest k tried.
    """
    if reference not in FITS:
        raise DataError(f"unknown reference law {reference!r}")
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list:
        raise DataError("k_list is empty")
    if k_list[-1] >= m.n or k_list[0] < 1:
        raise DataError(f"every k must satisfy 1 <= k < n={m.n}")
    metric = as_metric(metric)
    order = neighbor_order(m, k_list[-1], metric)
    fit = FITS[reference]
    rows = []
    last_sizes = None
    for k in k_list:
        g = graph_from_order(m, order, k, symmetrize)
        conn = is_connected(g)
        last_sizes = conn.component_sizes
        row = SweepRow(k, conn.connected, conn.component_sizes)
        if conn.connected:
            sample = geodesic_distances(g, n_sources=n_sources, seed=seed, threads=threads)
            dist = build_distribution(sample, bins=bins, keep_samples=False)
            try:
                est = fit(dist, window_sigmas)
            except (DataError, NumericalError) as exc:
                row.error = str(exc)
            else:
                est.k = k
                row.estimate = est
            del sample
        rows.append(row)
    candidates = [i for i, r in enumerate(rows) if r.estimate is not None]
    if not any(r.connected for r in rows):
        raise DisconnectedGraphError(
            last_sizes, f"no k in {k_list} yields a connected graph; components at k={k_list[-1]}: {last_sizes[:10]}"
        )
    if not candidates:
        raise NumericalError("every connected k failed to fit: " + "; ".join(r.error or "" for r in rows))
    best = min(candidates, key=lambda i: (rows[i].estimate.rmse, rows[i].k))
    result = SweepResult(rows, best, reference, metric.value)
    rows[best].estimate.sweep = result
    return result
