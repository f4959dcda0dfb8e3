"""Swiss Roll: estimate its dimension, then flatten it two ways.

Isomap solves for the flat coordinates in closed form from graph geodesics
but cannot embed new points. DeepMDS learns an explicit map ``R^3 -> R^2``
from the same geodesics and can. Both are scored by stress against the
geodesics and by how many of each point's 10 nearest neighbours survive
compared with the roll's isometric (arc-length) coordinates.
"""

import argparse

import numpy as np

from manifold_id import ManifoldSpec, generate, sweep_k
from manifold_id.baselines import isomap_fit
from manifold_id.deepmds import DistanceTarget, TrainConfig, init_network, train, transform
from manifold_id.evaluation import neighbor_agreement, stress
from manifold_id.graph import build_knn_graph, geodesic_distances


def unrolled(coords):
    t, h = coords.T
    return np.column_stack([0.5 * (t * np.sqrt(1 + t * t) + np.arcsinh(t)), h])


def main(n, seed, holdout):
    roll = generate(ManifoldSpec("swiss_roll", n + holdout, 3, seed=seed))
    x = roll.features.subset(np.arange(n))
    truth = unrolled(roll.coords)

    result = sweep_k(x, "euclidean", (4, 7, 9, 15), seed=seed)
    print(result.table())
    k = result.k

    g = build_knn_graph(x, k)
    sample = geodesic_distances(g, n_sources="all")
    geo = sample.dense()

    iso = isomap_fit(g, 2).embedding
    cfg = TrainConfig(mode="stagewise", lr=1e-3, epochs=1000, seed=seed)
    net = train(init_network([3, 2], seed=seed), x, DistanceTarget.geodesic(x, sample), cfg)
    deep = transform(net, x)

    print(f"\n{'method':<8} {'stress':>8} {'10-NN agreement':>16}")
    for name, y in (("isomap", iso), ("deepmds", deep)):
        print(f"{name:<8} {stress(geo, y):8.4f} {neighbor_agreement(y, truth[:n]):16.3f}")

    if holdout:
        # unseen rows go through the learned map; isomap has no such map
        y_all = transform(net, roll.features)
        print(f"\nheld-out rows: 10-NN agreement over all {n + holdout} rows "
              f"{neighbor_agreement(y_all, truth):.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--holdout", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    a = ap.parse_args()
    main(a.n, a.seed, a.holdout)
