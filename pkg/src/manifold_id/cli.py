"""Command-line pipelines: generate, estimate-id, sweep-k, reduce, transform, eval, ablation.

Every command is a pure function of its inputs, flags and seed. Reports are
JSON (keys sorted), curves are CSV. ``--no-timestamp`` also drops wall-clock
runtimes so reruns can be compared byte for byte.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import LinearProjector, dae_fit, isomap_fit, pca_fit
from .deepmds import MODES, DistanceTarget, MdsNetwork, TrainConfig, history_csv, init_network, train, transform
from .errors import DataError, DisconnectedGraphError, NumericalError
from .evaluation import knn_classify, retrieve, similarity_heatmap, stress, verify
from .features import FeatureMatrix, as_metric, distance_matrix, load_features, save_features
from .graph import build_knn_graph, geodesic_distances, is_connected
from .idest import sweep_k
from .modelio import load_model
from .synthdata import ManifoldSpec, generate

log = logging.getLogger("manifold_id")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "MANIFOLD_ID_THREADS"


class UsageError(Exception):
    pass


# -- small helpers ------------------------------------------------------------------


def int_list(text) -> List[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def float_list(text) -> List[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def sources_arg(text):
    if text in (None, "all"):
        return text
    return int(text)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def read_config(path) -> Dict[str, str]:
    """Flat ``key = value`` document; ``#`` starts a comment, keys may use dashes."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _write_json(path, payload: dict):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)
    return text


def _stem(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


class Context:
    """Per-invocation settings shared by the commands."""

    def __init__(self, args):
        self.args = args
        self.threads = args.threads
        self.timestamp = not args.no_timestamp
        self.strict = args.strict

    def seed(self, value: Optional[int] = None) -> int:
        value = self.args.seed if value is None else value
        if value is None:
            if self.strict:
                raise UsageError(f"{self.args.command}: --seed is required in --strict mode")
            return 0
        return int(value)

    def stamp(self, report: dict, runtime: Optional[dict] = None) -> dict:
        report = dict(report)
        report["command"] = self.args.command
        if self.timestamp:
            report["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
            if runtime:
                report["runtime"] = runtime
        return report

    def load(self, path) -> FeatureMatrix:
        return load_features(path, labels_col=getattr(self.args, "labels_col", None))


def _embedded(m: FeatureMatrix, y: np.ndarray) -> FeatureMatrix:
    return FeatureMatrix(np.asarray(y, dtype=np.float32), m.labels)


def _graph_targets(ctx: Context, x: FeatureMatrix, k: int, metric, n_sources, seed):
    g = build_knn_graph(x, k, metric)
    conn = is_connected(g)
    if not conn.connected:
        raise DisconnectedGraphError(conn.component_sizes)
    return g, geodesic_distances(g, n_sources=n_sources, seed=seed, threads=ctx.threads)


def _train_config(args, seed: int, mode: Optional[str] = None) -> TrainConfig:
    return TrainConfig(
        mode=mode or args.mode,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=seed,
        finetune_epochs=args.finetune_epochs,
        normalize_targets=args.normalize_targets,
    )


# -- commands ---------------------------------------------------------------------


def cmd_generate(ctx: Context) -> int:
    a = ctx.args
    kind = a.kind.replace("-", "_")
    if kind != "swiss_roll" and a.m is None:
        raise UsageError(f"generate --kind {a.kind} needs --m")
    seed = ctx.seed()
    d = a.d if a.d is not None else {"swiss_roll": 3, "gaussian": a.m}.get(kind, (a.m or 0) + 1)
    spec = ManifoldSpec(
        kind, a.n, d, a.m, seed, sigma=a.sigma, classes=a.classes, within_sigma=a.within_sigma,
        radius=a.radius, embedding=a.embedding,
    )
    out = Path(a.output or f"{kind}.fmat")
    manifold = generate(spec)
    save_features(manifold.features, out)
    print(out)
    if manifold.coords is not None:
        coords = _stem(out, ".coords.csv")
        with open(coords, "w") as fh:
            fh.write("t,h\n")
            for t, h in manifold.coords.tolist():
                fh.write(f"{t!r},{h!r}\n")
        print(coords)
    return EXIT_OK


def _sweep(ctx: Context):
    a = ctx.args
    x = ctx.load(a.input)
    seed = ctx.seed()
    t0 = time.perf_counter()
    result = sweep_k(
        x, a.metric, a.k, a.reference, a.window_sigmas, a.bins, a.n_sources, seed, ctx.threads, a.symmetrize
    )
    print(result.table())
    return result, seed, time.perf_counter() - t0


def cmd_estimate_id(ctx: Context) -> int:
    a = ctx.args
    result, seed, secs = _sweep(ctx)
    report = result.estimate.to_dict(include_bins=True)
    report.update(seed=seed, metric=result.metric, k_list=a.k, input=str(a.input),
                  window_sigmas=a.window_sigmas, sweep=result.to_dict()["sweep"])
    out = Path(a.output or _stem(a.input, ".id.json"))
    _write_json(out, ctx.stamp(report, {"estimate_s": secs}))
    if a.fit_csv:
        result.estimate.fit_points_csv(a.fit_csv)
    print(out)
    return EXIT_OK


def cmd_sweep_k(ctx: Context) -> int:
    a = ctx.args
    result, seed, secs = _sweep(ctx)
    report = result.to_dict()
    report.update(seed=seed, k_list=a.k, input=str(a.input), window_sigmas=a.window_sigmas)
    out = Path(a.output or _stem(a.input, ".sweep.json"))
    _write_json(out, ctx.stamp(report, {"sweep_s": secs}))
    print(out)
    return EXIT_OK


def _path_for(a, x: FeatureMatrix) -> List[int]:
    if a.dims:
        dims = list(a.dims)
        if dims[0] != x.d:
            dims = [x.d] + dims
        return dims
    if a.target_dim is None:
        raise UsageError("reduce needs --dims or --target-dim")
    return [x.d, a.target_dim]


def cmd_reduce(ctx: Context) -> int:
    a = ctx.args
    x = ctx.load(a.input)
    seed = ctx.seed()
    dims = _path_for(a, x)
    model_path = Path(a.output or _stem(a.input, f".{a.method}.midm"))
    emb_path = Path(a.embedded or _stem(model_path, ".fmat"))
    report = {"method": a.method, "dims": dims, "seed": seed, "input": str(a.input)}
    t0 = time.perf_counter()
    if a.method == "pca":
        proj = pca_fit(x, dims[-1])
        y = proj.transform(x)
        proj.save(model_path)
        report["variance_fraction"] = np.asarray(proj.variance_fraction, dtype=float).tolist()
    elif a.method == "isomap":
        g = build_knn_graph(x, a.k, a.metric)
        iso = isomap_fit(g, dims[-1], threads=ctx.threads)
        y = iso.embedding
        iso.save(model_path)
        report.update(k=a.k, n_negative=iso.n_negative, negative_mass=iso.negative_mass)
    elif a.method == "dae":
        ae = dae_fit(x, dims, a.noise, _train_config(a, seed), a.units, a.hidden)
        y = ae.transform(x)
        ae.save(model_path)
        history_csv(ae.encoder, _stem(model_path, ".history.csv"))
        report["noise"] = a.noise
    else:
        net = init_network(dims, a.units, a.hidden, seed)
        if a.targets == "geodesic":
            _, sample = _graph_targets(ctx, x, a.k, a.metric, a.n_sources, seed)
            target = DistanceTarget.geodesic(x, sample)
            report.update(k=a.k, n_sources=len(sample.sources))
        else:
            target = DistanceTarget.direct(x, a.metric)
        net = train(net, x, target, _train_config(a, seed))
        y = transform(net, x)
        net.save(model_path)
        history_csv(net, _stem(model_path, ".history.csv"))
        report.update(mode=a.mode, targets=a.targets, final_loss=net.meta["final_loss"],
                      fallback_pairs=target.fallback_pairs)
        if a.targets == "geodesic" and sample.complete:
            report["stress"] = stress(sample.dense(), y)
    save_features(_embedded(x, y), emb_path)
    _write_json(_stem(model_path, ".json"), ctx.stamp(report, {"reduce_s": time.perf_counter() - t0}))
    print(model_path)
    print(emb_path)
    return EXIT_OK


def cmd_transform(ctx: Context) -> int:
    a = ctx.args
    header, _ = load_model(a.model)
    method = header.get("method")
    x = ctx.load(a.input)
    if method == "isomap":
        raise DataError(
            "isomap models carry no mapping for unseen samples; refit isomap on the enlarged set "
            "or reduce with pca, dae or deepmds"
        )
    if method == "pca":
        y = LinearProjector.load(a.model).transform(x)
    elif method in ("deepmds", "dae"):
        y = transform(MdsNetwork.load(a.model, expect_method=method), x)
    else:
        raise DataError(f"unknown model method {method!r}")
    out = Path(a.output or _stem(a.input, ".embedded.fmat"))
    save_features(_embedded(x, y), out)
    print(out)
    return EXIT_OK


def _split(n: int, fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * fraction))
    if not 0 < cut < n:
        raise DataError(f"train fraction {fraction} leaves an empty split for n={n}")
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def cmd_eval(ctx: Context) -> int:
    a = ctx.args
    x = ctx.load(a.features)
    if x.labels is None:
        raise DataError("eval needs labelled features")
    seed = ctx.seed()
    prefix = str(a.output or str(Path(a.features).with_suffix("")) + ".eval")
    report = verify(x, far_targets=a.far, score=a.score)
    written = []
    tasks = set(a.tasks)
    unknown = tasks - {"verify", "retrieve", "knn", "heatmap", "stress"}
    if unknown:
        raise UsageError(f"unknown eval tasks {sorted(unknown)}")
    if "verify" in tasks:
        report.roc_csv(Path(prefix + ".roc.csv"))
        written.append(Path(prefix + ".roc.csv"))
    if "retrieve" in tasks:
        report.merge(retrieve(x, x, x.labels, x.labels, exclude_self=True))
        report.pr_csv(Path(prefix + ".pr.csv"))
        written.append(Path(prefix + ".pr.csv"))
    if "knn" in tasks:
        tr, te = _split(x.n, a.train_fraction, seed)
        report.merge(knn_classify(x.values()[tr], x.labels[tr], x.values()[te], x.labels[te], a.knn))
    extra = {"seed": seed, "features": str(a.features)}
    if "stress" in tasks:
        if a.reference is None:
            raise UsageError("eval stress needs --reference (the ambient features)")
        ref = ctx.load(a.reference)
        if ref.n != x.n:
            raise DataError("reference and features disagree on n")
        report.stress = stress(distance_matrix(ref.values(), metric=as_metric(a.metric).edge_metric), x)
    if "heatmap" in tasks:
        hm = similarity_heatmap(x, x.labels, a.heatmap_classes, a.heatmap_per_class)
        hm.to_csv(Path(prefix + ".heatmap.csv"))
        written.append(Path(prefix + ".heatmap.csv"))
        extra["separability"] = hm.separability
    if "verify" not in tasks:
        report.far = report.tar = None
        report.tar_at = {}
    payload = report.to_dict(include_runtime=False)
    payload.update(extra)
    out = Path(prefix + ".json")
    _write_json(out, ctx.stamp(payload, report.runtime))
    for p in [out] + written:
        print(p)
    return EXIT_OK


def run_ablation(
    x: FeatureMatrix,
    dims: Sequence[int],
    target: DistanceTarget,
    reference: np.ndarray,
    base: TrainConfig,
    far_targets: Sequence[float] = (0.01,),
    units: int = 2,
    hidden: Optional[int] = None,
    modes: Sequence[str] = MODES,
) -> dict:
    """Train every mode from the same initialization and tabulate stress and TAR.

    ``reference`` is the dense matrix stress is measured against (``nan``
    entries skipped). TAR needs labels on ``x``; without them only stress is
    reported.
    """
    init = init_network(dims, units, hidden, base.seed)
    rows = []
    embeddings = {}
    for mode in modes:
        cfg = TrainConfig(**{**base.__dict__, "mode": mode})
        t0 = time.perf_counter()
        net = train(init, x, target, cfg)
        y = transform(net, x)
        embeddings[mode] = y
        row = {"mode": mode, "stress": stress(reference, y), "final_loss": net.meta["final_loss"],
               "epochs": len(net.history), "seconds": time.perf_counter() - t0}
        if x.labels is not None:
            rep = verify(y, labels=x.labels, far_targets=far_targets)
            row["tar_at_far"] = {f"{k:g}": v for k, v in rep.tar_at.items()}
        rows.append(row)
    table = {"dims": list(dims), "rows": rows}
    if len(dims) == 2:
        spread = max(float(np.max(np.abs(embeddings[m] - embeddings[modes[0]]))) for m in modes)
        table["note"] = (
            "single-stage path: no curriculum is possible, all modes train the same objective "
            f"(max embedding difference {spread:.3g})"
        )
        table["max_mode_difference"] = spread
    return table


def format_ablation(table: dict) -> str:
    fars = sorted({f for r in table["rows"] for f in r.get("tar_at_far", {})}, key=float)
    head = f"{'mode':<20} {'stress':>9}" + "".join(f" {'TAR@' + f:>11}" for f in fars)
    lines = [head]
    for r in table["rows"]:
        lines.append(f"{r['mode']:<20} {r['stress']:9.5f}" + "".join(f" {r['tar_at_far'][f]:11.4f}" for f in fars))
    if "note" in table:
        lines.append(table["note"])
    return "\n".join(lines)


def cmd_ablation(ctx: Context) -> int:
    a = ctx.args
    x = ctx.load(a.input)
    seed = ctx.seed()
    dims = _path_for(a, x)
    if a.targets == "geodesic":
        _, sample = _graph_targets(ctx, x, a.k, a.metric, "all", seed)
        target = DistanceTarget.geodesic(x, sample)
        reference = sample.dense()
    else:
        target = DistanceTarget.direct(x, a.metric)
        reference = distance_matrix(x.values(), metric=as_metric(a.metric).edge_metric)
    table = run_ablation(x, dims, target, reference, _train_config(a, seed), a.far, a.units, a.hidden)
    print(format_ablation(table))
    runtime = {r["mode"]: r.pop("seconds") for r in table["rows"]}
    table.update(seed=seed, targets=a.targets, k=a.k if a.targets == "geodesic" else None, input=str(a.input))
    out = Path(a.output or _stem(a.input, ".ablation.json"))
    _write_json(out, ctx.stamp(table, runtime))
    print(out)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("common")
    g.add_argument("--config", help="flat key = value file; flags given on the command line win")
    g.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for geodesics (default: ${THREADS_ENV} or all cores)")
    g.add_argument("--no-timestamp", action="store_true", help="omit creation time and runtimes from reports")
    g.add_argument("--strict", action="store_true", help="refuse to run randomized steps without --seed")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("-o", "--output", default=None)
    g.add_argument("-v", "--verbose", action="store_true")


def _estimation_flags(p):
    p.add_argument("input")
    p.add_argument("--labels-col", type=int, default=None)
    p.add_argument("--metric", default="euclidean", choices=["euclidean", "cosine", "arc-length"])
    p.add_argument("--k", type=int_list, default=[4, 7, 9, 15], help="comma-separated neighborhood sizes")
    p.add_argument("--reference", default="hypersphere", choices=["hypersphere", "gaussian"])
    p.add_argument("--window-sigmas", type=float, default=2.0)
    p.add_argument("--bins", default="fd")
    p.add_argument("--n-sources", type=sources_arg, default=None, help="Dijkstra sources (int or 'all')")
    p.add_argument("--symmetrize", default="union", choices=["union", "mutual"])


def _train_flags(p, k_default=9):
    p.add_argument("--labels-col", type=int, default=None)
    p.add_argument("--dims", type=int_list, default=None, help="dimension path, e.g. 128,64,32,16")
    p.add_argument("--target-dim", type=int, default=None)
    p.add_argument("--metric", default="euclidean", choices=["euclidean", "cosine", "arc-length"])
    p.add_argument("--k", type=int, default=k_default, help="graph neighborhood size for geodesic targets")
    p.add_argument("--targets", default="geodesic", choices=["geodesic", "metric"])
    p.add_argument("--n-sources", type=sources_arg, default="all")
    p.add_argument("--mode", default="stagewise_finetune", choices=list(MODES))
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--normalize-targets", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--units", type=int, default=2)
    p.add_argument("--hidden", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manifold-id", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a synthetic manifold")
    _common(p)
    p.add_argument("--kind", required=True, choices=["hypersphere", "gaussian", "swiss-roll", "swiss_roll", "clustered"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, default=None, help="ambient dimension (default: the base dimension)")
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--within-sigma", type=float, default=0.1)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--embedding", default="rotation", choices=["rotation", "pad"])
    p.set_defaults(func=cmd_generate)

    for name, func, text in (
        ("estimate-id", cmd_estimate_id, "estimate the intrinsic dimension (selected k)"),
        ("sweep-k", cmd_sweep_k, "per-k estimates with the selection constraints"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        _estimation_flags(p)
        p.add_argument("--fit-csv", default=None, help="write the fitted window points (x,y)")
        p.set_defaults(func=func)

    p = sub.add_parser("reduce", help="fit pca, isomap, dae or deepmds and embed the input")
    _common(p)
    p.add_argument("input")
    p.add_argument("--method", required=True, choices=["pca", "isomap", "dae", "deepmds"])
    p.add_argument("--embedded", default=None, help="path of the embedded features")
    p.add_argument("--noise", type=float, default=0.1, help="dae corruption level")
    _train_flags(p)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("transform", help="apply a trained mapping to new rows")
    _common(p)
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("--labels-col", type=int, default=None)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("eval", help="verification, retrieval, k-NN, stress and heatmap reports")
    _common(p)
    p.add_argument("features")
    p.add_argument("--labels-col", type=int, default=None)
    p.add_argument("--tasks", type=lambda s: [t for t in s.split(",") if t], default=["verify"])
    p.add_argument("--far", type=float_list, default=[1e-3, 1e-2, 1e-1])
    p.add_argument("--score", default="euclidean", choices=["euclidean", "cosine"])
    p.add_argument("--knn", type=int, default=5)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--reference", default=None, help="ambient features for the stress task")
    p.add_argument("--metric", default="euclidean", choices=["euclidean", "cosine", "arc-length"])
    p.add_argument("--heatmap-classes", type=int, default=10)
    p.add_argument("--heatmap-per-class", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="compare the four DeepMDS training modes")
    _common(p)
    p.add_argument("input")
    p.add_argument("--far", type=float_list, default=[1e-2])
    _train_flags(p)
    p.set_defaults(func=cmd_ablation)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]):
    """Parse ``argv`` with defaults taken from ``--config`` when given."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        action = known.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        if action.nargs == 0:
            defaults[key] = _bool(value)
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}")
        else:
            defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.threads is None and os.environ.get(THREADS_ENV):
        args.threads = int(os.environ[THREADS_ENV])
    if args.threads is not None and args.threads < 1:
        print("usage error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(Context(args))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DisconnectedGraphError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        print(f"component sizes: {list(exc.component_sizes)[:20]}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
