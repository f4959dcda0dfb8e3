"""DeepMDS: a staged residual network trained to preserve pairwise distances.

Each stage is a stack of residual units at the stage's input width followed by
one affine layer that drops the dimension. Stage ``l`` output ``y^l`` is
compared against the target distances ``d_H`` through

    loss = sum_l alpha_l * mean_pairs (d_H - ||y^l_i - y^l_j||)^2 + lam * ||theta||^2

Everything is plain numpy with hand-written backpropagation, Adam and cosine
annealing, evaluated in float64 so results are reproducible from the seed.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError, NumericalError
from .features import FeatureMatrix, as_metric, distance_matrix
from .graph import GeodesicSample
from .modelio import as_stored, load_model, save_model

log = logging.getLogger(__name__)

MODES = ("direct", "direct_is", "stagewise", "stagewise_finetune")
LEAK = 0.01


@dataclass(frozen=True)
class StageSpec:
    in_dim: int
    out_dim: int
    units: int = 2
    hidden: Optional[int] = None
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.units < 1:
            raise DataError("a stage needs at least one residual unit")
        if self.in_dim < 1 or self.out_dim < 1:
            raise DataError("stage dimensions must be positive")
        if self.hidden is None:
            object.__setattr__(self, "hidden", max(self.in_dim, 64))
        if self.activation != "leaky_relu":
            raise DataError(f"unsupported activation {self.activation!r}")


# -- residual stage primitives ------------------------------------------------


def init_stage(spec: StageSpec, rng: np.random.Generator) -> List[np.ndarray]:
    """Fan-in scaled uniform init; order is ``[W1, b1, W2, b2] * units + [Wp, bp]``."""

    def affine(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return [rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)]

    params = []
    for _ in range(spec.units):
        params += affine(spec.in_dim, spec.hidden)
        params += affine(spec.hidden, spec.in_dim)
    params += affine(spec.in_dim, spec.out_dim)
    return params


def stage_forward(spec: StageSpec, params, x, keep_cache: bool = False):
    cache = []
    h = x
    for u in range(spec.units):
        W1, b1, W2, b2 = params[4 * u : 4 * u + 4]
        z = h @ W1 + b1
        a = np.where(z > 0, z, LEAK * z)
        out = h + a @ W2 + b2
        if keep_cache:
            cache.append((h, z, a))
        h = out
    Wp, bp = params[-2:]
    y = h @ Wp + bp
    if keep_cache:
        cache.append(h)
    return y, cache


def stage_backward(spec: StageSpec, params, cache, dy, need_dx: bool = True):
    grads = [None] * len(params)
    Wp = params[-2]
    h = cache[-1]
    grads[-2] = h.T @ dy
    grads[-1] = dy.sum(axis=0)
    dh = dy @ Wp.T
    for u in reversed(range(spec.units)):
        W1, b1, W2, b2 = params[4 * u : 4 * u + 4]
        hin, z, a = cache[u]
        grads[4 * u + 2] = a.T @ dh
        grads[4 * u + 3] = dh.sum(axis=0)
        dz = (dh @ W2.T) * np.where(z > 0, 1.0, LEAK)
        grads[4 * u] = hin.T @ dz
        grads[4 * u + 1] = dz.sum(axis=0)
        if u > 0 or need_dx:
            dh = dh + dz @ W1.T
    return (dh if need_dx else None), grads


# -- network --------------------------------------------------------------------


@dataclass
class MdsNetwork:
    stages: List[StageSpec]
    params: List[List[np.ndarray]]
    seed: int = 0
    history: List[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    # inputs are divided by and outputs multiplied by this (target normalization)
    scale: float = 1.0

    @property
    def dims(self) -> List[int]:
        return [self.stages[0].in_dim] + [s.out_dim for s in self.stages]

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def flat_params(self) -> List[np.ndarray]:
        return [p for stage in self.params for p in stage]

    def param_norm_sq(self) -> float:
        return float(sum(np.sum(p * p) for p in self.flat_params()))

    def copy(self) -> "MdsNetwork":
        return copy.deepcopy(self)

    def check_input(self, x) -> np.ndarray:
        x = np.asarray(x.values() if isinstance(x, FeatureMatrix) else x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[0] and x.shape[1] != self.dims[0]:
            raise DataError(f"input has dimension {x.shape[1]}, network expects {self.dims[0]}")
        return x.reshape(-1, self.dims[0])

    def save(self, path, method: str = "deepmds"):
        header = {
            "method": method,
            "dims": self.dims,
            "stages": [asdict(s) for s in self.stages],
            "seed": self.seed,
            "scale": self.scale,
            "meta": self.meta,
        }
        save_model(path, header, self.flat_params())

    @classmethod
    def load(cls, path, expect_method: Optional[str] = None) -> "MdsNetwork":
        header, arrays = load_model(path)
        if expect_method is not None and header.get("method") != expect_method:
            raise DataError(f"model file holds {header.get('method')!r}, expected {expect_method!r}")
        return cls.from_header(header, arrays)

    @classmethod
    def from_header(cls, header, arrays) -> "MdsNetwork":
        stages = [StageSpec(**s) for s in header["stages"]]
        params, pos = [], 0
        for s in stages:
            count = 4 * s.units + 2
            params.append(list(arrays[pos : pos + count]))
            pos += count
        return cls(stages, params, header.get("seed", 0), [], header.get("meta", {}), header.get("scale", 1.0))


def init_network(
    dims: Sequence[int], units: int = 2, hidden: Optional[int] = None, seed: int = 0
) -> MdsNetwork:
    """Build a network for a dimension path such as ``[512, 256, 128, 64, 32, 16]``.

    One stage per consecutive pair of dimensions. Paths that expand emit a
    warning but are allowed.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise DataError(f"dimension path needs at least two positive entries, got {dims}")
    if any(b > a for a, b in zip(dims, dims[1:])):
        warnings.warn(f"dimension path {dims} expands somewhere", RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    stages = [StageSpec(a, b, units, hidden) for a, b in zip(dims, dims[1:])]
    params = [init_stage(s, rng) for s in stages]
    net = MdsNetwork(stages, params, seed)
    probe = forward(net, rng.standard_normal((4, dims[0])))
    if not np.all(np.isfinite(probe)):
        raise NumericalError("non-finite output from freshly initialized network")
    return net


def halving_path(d: int, m: int) -> List[int]:
    """Dimension path that halves ``d`` while staying above ``m``, then ends at ``m``.

    >>> halving_path(128, 6)
    [128, 64, 32, 16, 8, 6]
    """
    if not 1 <= m <= d:
        raise DataError(f"need 1 <= m <= d, got m={m}, d={d}")
    dims = [int(d)]
    while dims[-1] // 2 > m:
        dims.append(dims[-1] // 2)
    if dims[-1] != m:
        dims.append(int(m))
    return dims


def forward(net: MdsNetwork, x, upto: Optional[int] = None) -> np.ndarray:
    """Output of stage ``upto`` (1-based; 0 is the input, default the last)."""
    x = net.check_input(x)
    upto = net.n_stages if upto is None else int(upto)
    if not 0 <= upto <= net.n_stages:
        raise DataError(f"stage index {upto} outside 0..{net.n_stages}")
    for spec, params in zip(net.stages[:upto], net.params[:upto]):
        x, _ = stage_forward(spec, params, x)
    return x


def transform(net: MdsNetwork, x) -> np.ndarray:
    """Embed new rows with the trained mapping (no re-optimization)."""
    x = net.check_input(x)
    if x.shape[0] == 0:
        return np.zeros((0, net.dims[-1]))
    return forward(net, x / net.scale) * net.scale


# -- loss -------------------------------------------------------------------------


def _pair_terms(y, pi, pj, target):
    diff = y[pi] - y[pj]
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    return diff, dist, target - dist


def mds_loss(net: MdsNetwork, x, pairs, alpha, lam: float = 0.0, start_stage: int = 0):
    """Staged MDS objective on a batch.

    Parameters
    ----------
    x : (B, d) array
        Batch rows (stage ``start_stage`` inputs).
    pairs : tuple of arrays ``(i, j, d_H)``
        Row indices into ``x`` and target distances.
    alpha : sequence of float
        One weight per stage.

    Returns
    -------
    loss : float
    per_stage : list of float
        Unweighted mean squared residual per stage (``nan`` for stages with
        ``alpha == 0``, which are not evaluated).
    """
    loss, per_stage, _ = _loss_and_grad(net, x, pairs, alpha, lam, trainable=(), start_stage=start_stage)
    return loss, per_stage


def mds_loss_and_grad(net, x, pairs, alpha, lam=0.0, trainable=None, start_stage: int = 0):
    """Like :func:`mds_loss` but also returns gradients per stage (``None`` if frozen)."""
    if trainable is None:
        trainable = range(net.n_stages)
    return _loss_and_grad(net, x, pairs, alpha, lam, trainable, start_stage)


def _loss_and_grad(net, x, pairs, alpha, lam, trainable, start_stage=0):
    pi, pj, target = (np.asarray(a) for a in pairs)
    if pi.size == 0:
        raise DataError("empty pair batch")
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[0] != net.n_stages or np.any(alpha < 0):
        raise DataError(f"need {net.n_stages} non-negative stage weights, got {alpha}")
    trainable = set(trainable)
    last = int(np.max(np.flatnonzero(alpha > 0))) if np.any(alpha > 0) else -1
    want_grad = bool(trainable)
    npairs = pi.size

    h = np.asarray(x, dtype=np.float64)
    caches, outputs = {}, {}
    for s in range(start_stage, last + 1):
        h, cache = stage_forward(net.stages[s], net.params[s], h, keep_cache=want_grad)
        caches[s] = cache
        outputs[s] = h

    loss = 0.0
    per_stage = [float("nan")] * net.n_stages
    dout = {}
    for s in range(start_stage, last + 1):
        if alpha[s] == 0:
            continue
        diff, dist, resid = _pair_terms(outputs[s], pi, pj, target)
        term = float(np.mean(resid * resid))
        per_stage[s] = term
        loss += alpha[s] * term
        if want_grad:
            # d/dy_i of (t - |y_i - y_j|)^2 = -2 (t - D) (y_i - y_j) / D
            coef = -2.0 * alpha[s] * resid / (npairs * np.maximum(dist, 1e-12))
            g = coef[:, None] * diff
            dy = np.zeros_like(outputs[s])
            np.add.at(dy, pi, g)
            np.add.at(dy, pj, -g)
            dout[s] = dy
    loss += lam * net.param_norm_sq()

    grads = [None] * net.n_stages
    if want_grad:
        lowest = min(trainable) if trainable else last + 1
        carry = None
        for s in range(last, start_stage - 1, -1):
            if s < lowest:
                break
            dy = dout.get(s)
            if carry is not None:
                dy = carry if dy is None else dy + carry
            if dy is None:
                continue
            need_dx = s > max(lowest, start_stage)
            dx, g = stage_backward(net.stages[s], net.params[s], caches[s], dy, need_dx=need_dx)
            carry = dx
            if s in trainable:
                grads[s] = [gi + 2.0 * lam * p for gi, p in zip(g, net.params[s])]
        # stages past the last weighted one only feel the regularizer
        for s in trainable:
            if grads[s] is None:
                grads[s] = [2.0 * lam * p for p in net.params[s]]
    return loss, per_stage, grads


# -- targets ----------------------------------------------------------------------


class DistanceTarget:
    """Target distances ``d_H`` for training pairs.

    ``matrix`` holds known targets (``nan`` where unknown). Unknown pairs fall
    back to the direct metric between the feature rows and are counted in
    ``fallback_pairs``.
    """

    def __init__(self, features: FeatureMatrix, matrix: Optional[np.ndarray], metric="euclidean", source="metric"):
        self.features = features
        self.metric = as_metric(metric)
        self.source = source
        self.matrix = matrix
        self.fallback_pairs = 0
        self._x = features.values()

    @classmethod
    def geodesic(cls, features: FeatureMatrix, sample: GeodesicSample, metric="euclidean"):
        if sample.n != features.n:
            raise DataError("geodesic sample and features disagree on n")
        matrix = sample.dense()
        np.fill_diagonal(matrix, 0.0)
        return cls(features, matrix, metric, "geodesic")

    @classmethod
    def direct(cls, features: FeatureMatrix, metric="euclidean"):
        return cls(features, None, metric, "metric")

    def block(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if self.matrix is None:
            return distance_matrix(self._x[idx], None, self.metric)
        t = self.matrix[np.ix_(idx, idx)]
        missing = np.isnan(t)
        if missing.any():
            direct = distance_matrix(self._x[idx], None, self.metric)
            t = np.where(missing, direct, t)
            self.fallback_pairs += int(np.triu(missing, 1).sum())
        if not np.all(np.isfinite(t)):
            raise DataError("non-finite target distance")
        return t

    def mean(self) -> float:
        if self.matrix is not None:
            vals = self.matrix[np.triu_indices(self.features.n, 1)]
            vals = vals[np.isfinite(vals)]
            if vals.size:
                return float(vals.mean())
        n = min(self.features.n, 500)
        t = distance_matrix(self._x[:n], None, self.metric)
        return float(t[np.triu_indices(n, 1)].mean())


def all_pairs(b: int):
    i, j = np.triu_indices(b, 1)
    return i, j


# -- optimization -------------------------------------------------------------------


class Adam:
    def __init__(self, params: List[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step: int, total: int, base: float, eta_min: float) -> float:
    if total <= 1:
        return base
    return eta_min + 0.5 * (base - eta_min) * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class TrainConfig:
    mode: str = "stagewise_finetune"
    lr: float = 3e-4
    weight_decay: float = 3e-4
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    eta_min: float = 1e-6
    finetune_lr_scale: float = 0.1
    finetune_epochs: Optional[int] = None
    patience: int = 10
    min_improvement: float = 1e-3
    normalize_targets: bool = False
    alpha: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0 or self.weight_decay < 0 or self.eta_min < 0:
            raise DataError("need lr > 0, weight_decay >= 0, eta_min >= 0")
        if self.batch_size < 2 or self.epochs < 1:
            raise DataError("need batch_size >= 2 and epochs >= 1")
        if self.alpha is not None and any(a < 0 for a in self.alpha):
            raise DataError("stage weights must be non-negative")


@dataclass
class Phase:
    name: str
    trainable: List[int]
    alpha: np.ndarray
    lr: float
    epochs: int


def plan_phases(n_stages: int, cfg: TrainConfig) -> List[Phase]:
    """Expand a training mode into phases (the alpha schedule)."""
    ones = np.ones(n_stages)
    last = np.zeros(n_stages)
    last[-1] = 1.0
    everything = list(range(n_stages))
    if cfg.alpha is not None:
        if len(cfg.alpha) != n_stages:
            raise DataError(f"alpha has {len(cfg.alpha)} entries for {n_stages} stages")
        return [Phase("custom", everything, np.asarray(cfg.alpha, float), cfg.lr, cfg.epochs)]
    if cfg.mode == "direct":
        return [Phase("direct", everything, last, cfg.lr, cfg.epochs)]
    if cfg.mode == "direct_is":
        return [Phase("direct_is", everything, ones, cfg.lr, cfg.epochs)]
    phases = []
    for s in range(n_stages):
        one_hot = np.zeros(n_stages)
        one_hot[s] = 1.0
        phases.append(Phase(f"stage{s + 1}", [s], one_hot, cfg.lr, cfg.epochs))
    # a single stage has nothing to fine-tune jointly
    if cfg.mode == "stagewise_finetune" and n_stages > 1:
        phases.append(
            Phase("finetune", everything, ones, cfg.lr * cfg.finetune_lr_scale, cfg.finetune_epochs or cfg.epochs)
        )
    return phases


def _run_phase(net, phase, phase_index, x, targets, cfg, scale, history):
    n = x.shape[0]
    start = min(phase.trainable)
    # inputs to the first trainable stage are fixed for the whole phase
    base = forward(net, x, upto=start) if start > 0 else x
    params = [p for s in phase.trainable for p in net.params[s]]
    opt = Adam(params)
    bsz = min(cfg.batch_size, n)
    steps_per_epoch = max(1, math.ceil(n / bsz))
    total = phase.epochs * steps_per_epoch
    rng = np.random.default_rng([cfg.seed, phase_index])
    step = 0
    epoch_losses = []
    checkpoint = copy.deepcopy(net.params)
    for epoch in range(phase.epochs):
        perm = rng.permutation(n)
        running = 0.0
        batches = 0
        for b in range(steps_per_epoch):
            idx = perm[b * bsz : (b + 1) * bsz]
            if idx.size < 2:
                continue
            t = targets.block(idx) / scale
            pi, pj = all_pairs(idx.size)
            lr = cosine_lr(step, total, phase.lr, cfg.eta_min)
            # divergence is detected below, so overflow warnings are noise
            with np.errstate(over="ignore", invalid="ignore"):
                loss, _, grads = _loss_and_grad(
                    net, base[idx], (pi, pj, t[pi, pj]), phase.alpha, cfg.weight_decay, phase.trainable, start
                )
            if not math.isfinite(loss):
                net.params = checkpoint
                err = NumericalError(f"non-finite loss in phase {phase.name}, epoch {epoch}")
                err.network = net
                raise err
            flat_grads = [g for s in phase.trainable for g in grads[s]]
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step(params, flat_grads, lr)
            running += loss
            batches += 1
            step += 1
        epoch_loss = running / max(batches, 1)
        epoch_losses.append(epoch_loss)
        history.append({"phase": phase.name, "epoch": epoch, "loss": epoch_loss, "lr": lr})
        if not all(np.all(np.isfinite(p)) for p in params):
            net.params = checkpoint
            err = NumericalError(f"non-finite parameters in phase {phase.name}, epoch {epoch}")
            err.network = net
            raise err
        checkpoint = copy.deepcopy(net.params)
        if cfg.patience and epoch >= cfg.patience:
            ref = epoch_losses[epoch - cfg.patience]
            if ref - epoch_loss < cfg.min_improvement * abs(ref):
                log.debug("phase %s stopped early at epoch %d", phase.name, epoch)
                break
    return epoch_losses


def train(net: MdsNetwork, features, targets: DistanceTarget, cfg: TrainConfig) -> MdsNetwork:
    """Train a copy of ``net``; the returned network carries its loss history."""
    net = net.copy()
    x = net.check_input(features)
    if not np.all(np.isfinite(x)):
        raise DataError("features must be finite")
    if targets.features.n != x.shape[0]:
        raise DataError("targets and features disagree on n")
    scale = targets.mean() if cfg.normalize_targets else 1.0
    if not (scale > 0 and math.isfinite(scale)):
        raise DataError("target distances have no usable scale")
    x = x / scale
    phases = plan_phases(net.n_stages, cfg)
    history: List[dict] = []
    converged = {}
    for k, phase in enumerate(phases):
        losses = _run_phase(net, phase, k, x, targets, cfg, scale, history)
        converged[phase.name] = losses[-1]
    net.params = [[as_stored(p) for p in stage] for stage in net.params]
    net.history = history
    net.scale = scale
    net.meta = {
        "mode": cfg.mode,
        "config": {k: v for k, v in asdict(cfg).items() if k != "alpha"} | {"alpha": None if cfg.alpha is None else list(cfg.alpha)},
        "phases": [p.name for p in phases],
        "final_loss": converged,
        "target_source": targets.source,
        "fallback_pairs": targets.fallback_pairs,
    }
    return net


def history_csv(net: MdsNetwork, path):
    with open(path, "w") as fh:
        fh.write("phase,epoch,loss,lr\n")
        for h in net.history:
            fh.write(f"{h['phase']},{h['epoch']},{float(h['loss'])!r},{float(h['lr'])!r}\n")
