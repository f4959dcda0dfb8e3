"""Intrinsic dimension of hyperspheres, from exact laws to sampled graphs.

The estimator looks only at the histogram of graph geodesic distances
around its mode. On an exact ``sin^(m-1)`` law it is exact; on a sampled
k-NN graph it inherits the graph's distortion, which grows with m at a
fixed sample size. Run::

    python demos/sphere_id.py --n 3000 --dims 2 5
"""

import argparse

import numpy as np

from manifold_id import ManifoldSpec, generate, sweep_k
from manifold_id.idest import DistanceDistribution, fit_hypersphere_id
from manifold_id.synthdata import analytic_geodesic_pdf


def exact_laws(ms):
    edges = np.linspace(0.0, np.pi, 402)
    centers = 0.5 * (edges[1:] + edges[:-1])
    print("exact densities")
    for m in ms:
        est = fit_hypersphere_id(DistanceDistribution.from_density(edges, analytic_geodesic_pdf("hypersphere", centers, m)))
        print(f"  m={m:2d}  m_real={est.m_real:.6f}  window=[{est.window[0]:.3f}, {est.window[1]:.3f}]")


def sampled(ms, n, d, ks, seed):
    for m in ms:
        x = generate(ManifoldSpec("hypersphere", n, max(d, m + 1), m, seed=seed)).features
        result = sweep_k(x, "euclidean", ks, seed=seed)
        print(f"\nS^{m} in R^{x.d}, n={n}")
        print(result.table())


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=3000)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--dims", type=int, nargs="+", default=[2, 5])
    ap.add_argument("--k", type=int, nargs="+", default=[4, 7, 9, 15])
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    exact_laws([2, 5, 10, 16, 20])
    sampled(a.dims, a.n, a.d, a.k, a.seed)
