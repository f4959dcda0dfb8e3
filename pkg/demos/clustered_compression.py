"""Compress a labelled manifold to its estimated dimension and check what survives.

A 16-dim cluster manifold lives in R^128. After estimating its dimension
we reduce to it with PCA, a denoising autoencoder and DeepMDS, and compare
verification TAR at 1% FAR with the ambient features. The last part trains
the four DeepMDS schedules from one initialization.
"""

import argparse

from manifold_id import ManifoldSpec, generate, sweep_k
from manifold_id.baselines import dae_fit, pca_fit
from manifold_id.cli import format_ablation, run_ablation
from manifold_id.deepmds import DistanceTarget, TrainConfig, halving_path, init_network, train, transform
from manifold_id.evaluation import verify
from manifold_id.graph import build_knn_graph, geodesic_distances


def tar(y, labels):
    return verify(y, labels=labels, far_targets=(0.01,)).tar_at[0.01]


def main(classes, per_class, epochs, seed, ablation):
    x = generate(ManifoldSpec("clustered", classes * per_class, 128, 16, seed=seed, classes=classes,
                              within_sigma=0.15)).features
    result = sweep_k(x, "euclidean", (4, 7, 9, 15, 30, 60), seed=seed)
    print(result.table())
    m = result.estimate.m
    dims = halving_path(x.d, m)
    sample = geodesic_distances(build_knn_graph(x, result.k), n_sources="all")
    target = DistanceTarget.geodesic(x, sample)
    cfg = TrainConfig(epochs=epochs, seed=seed)

    rows = {"ambient (128)": tar(x, x.labels)}
    rows[f"pca ({m})"] = tar(pca_fit(x, m).transform(x), x.labels)
    rows[f"dae ({m})"] = tar(dae_fit(x, dims, cfg=cfg).transform(x), x.labels)
    rows[f"deepmds ({m})"] = tar(transform(train(init_network(dims, seed=seed), x, target, cfg), x), x.labels)
    print(f"\npath {dims}")
    for name, v in rows.items():
        print(f"{name:<16} TAR@1%FAR {v:.4f}")

    if ablation:
        table = run_ablation(x, [128, 64, 32, 16], target, sample.dense(), cfg)
        print()
        print(format_ablation(table))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--classes", type=int, default=20)
    ap.add_argument("--per-class", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--ablation", action="store_true")
    a = ap.parse_args()
    main(a.classes, a.per_class, a.epochs, a.seed, a.ablation)
