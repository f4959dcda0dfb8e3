"""Verification, retrieval, k-NN classification, MDS stress and similarity heatmaps."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .features import FeatureMatrix, distance_matrix

DEFAULT_FARS = (1e-3, 1e-2, 1e-1)


def _rows(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values()
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


# -- verification -------------------------------------------------------------------


@dataclass
class VerificationProtocol:
    i: np.ndarray
    j: np.ndarray
    same: np.ndarray

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.same = np.asarray(self.same, dtype=bool)
        if not (self.i.shape == self.j.shape == self.same.shape):
            raise DataError("pair arrays must have equal length")
        if not self.same.any() or self.same.all():
            raise DataError("protocol needs at least one genuine and one impostor pair")

    @classmethod
    def all_pairs(cls, labels) -> "VerificationProtocol":
        labels = np.asarray(labels)
        if np.unique(labels).size < 2:
            raise DataError("need at least two classes to derive impostor pairs")
        i, j = np.triu_indices(labels.size, 1)
        return cls(i, j, labels[i] == labels[j])


def pair_scores(x, i, j, score: str = "euclidean") -> np.ndarray:
    """Similarity score per pair: negative euclidean distance or cosine similarity."""
    if score not in ("euclidean", "cosine"):
        raise DataError(f"unknown score {score!r}")
    if score == "cosine":
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms[np.unique(np.concatenate([i, j]))] == 0):
            raise DataError("zero-norm vector under cosine scoring")
        x = x / np.where(norms == 0, 1.0, norms)[:, None]
    out = np.empty(len(i), dtype=np.float64)
    step = max(1, 2_000_000 // max(x.shape[1], 1))
    for s in range(0, len(i), step):
        a, b = x[i[s : s + step]], x[j[s : s + step]]
        if score == "euclidean":
            out[s : s + step] = -np.sqrt(np.sum((a - b) ** 2, axis=1))
        else:
            out[s : s + step] = np.sum(a * b, axis=1)
    return out


def roc_curve(genuine, impostor) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC operating points for accept-if ``score >= threshold``.

    Returns ``(far, tar, thresholds)`` starting at ``(0, 0)`` (threshold
    ``+inf``) and ending at ``(1, 1)`` (the minimal score).
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise DataError("need both genuine and impostor scores")
    thresholds = np.unique(np.concatenate([genuine, impostor]))[::-1]
    g = np.sort(genuine)
    im = np.sort(impostor)
    tar = (g.size - np.searchsorted(g, thresholds, side="left")) / g.size
    far = (im.size - np.searchsorted(im, thresholds, side="left")) / im.size
    return (
        np.concatenate([[0.0], far]),
        np.concatenate([[0.0], tar]),
        np.concatenate([[np.inf], thresholds]),
    )


def tar_at_far(far, tar, targets) -> np.ndarray:
    """TAR at each requested FAR, linear between adjacent operating points.

    Where several points share a FAR the highest TAR is used.
    """
    far = np.asarray(far, dtype=np.float64)
    tar = np.asarray(tar, dtype=np.float64)
    ufar, inv = np.unique(far, return_inverse=True)
    best = np.full(ufar.shape, -np.inf)
    np.maximum.at(best, inv, tar)
    return np.interp(np.asarray(targets, dtype=np.float64), ufar, best)


@dataclass
class EvalReport:
    far: Optional[np.ndarray] = None
    tar: Optional[np.ndarray] = None
    tar_at: Dict[float, float] = field(default_factory=dict)
    recall: Optional[np.ndarray] = None
    precision: Optional[np.ndarray] = None
    mean_average_precision: Optional[float] = None
    top1: Optional[float] = None
    top5: Optional[float] = None
    stress: Optional[float] = None
    runtime: Dict[str, float] = field(default_factory=dict)

    def merge(self, other: "EvalReport") -> "EvalReport":
        for name in self.__dataclass_fields__:
            val = getattr(other, name)
            if isinstance(val, dict):
                getattr(self, name).update(val)
            elif val is not None:
                setattr(self, name, val)
        return self

    def to_dict(self, include_runtime: bool = True) -> dict:
        out = {
            "tar_at_far": {f"{k:g}": float(v) for k, v in sorted(self.tar_at.items())},
            "mean_average_precision": self.mean_average_precision,
            "top1": self.top1,
            "top5": self.top5,
            "stress": self.stress,
        }
        if self.far is not None:
            out["roc_points"] = int(self.far.size)
        if include_runtime:
            out["runtime"] = self.runtime
        return out

    def to_json(self, path=None, include_runtime: bool = True) -> str:
        text = json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def roc_csv(self, path):
        with open(path, "w") as fh:
            fh.write("far,tar\n")
            for a, b in zip(self.far.tolist(), self.tar.tolist()):
                fh.write(f"{a!r},{b!r}\n")

    def pr_csv(self, path):
        with open(path, "w") as fh:
            fh.write("recall,precision\n")
            for a, b in zip(self.recall.tolist(), self.precision.tolist()):
                fh.write(f"{a!r},{b!r}\n")


def verify(features, protocol=None, far_targets: Sequence[float] = DEFAULT_FARS, score: str = "euclidean", labels=None) -> EvalReport:
    """ROC and TAR@FAR for a verification protocol.

    ``protocol`` defaults to all pairs derived from ``labels`` (or the
    feature matrix's own labels).
    """
    t0 = time.perf_counter()
    x = _rows(features)
    if protocol is None:
        if labels is None and isinstance(features, FeatureMatrix):
            labels = features.labels
        if labels is None:
            raise DataError("verification needs a protocol or labels")
        protocol = VerificationProtocol.all_pairs(labels)
    s = pair_scores(x, protocol.i, protocol.j, score)
    far, tar, _ = roc_curve(s[protocol.same], s[~protocol.same])
    at = tar_at_far(far, tar, far_targets)
    return EvalReport(far=far, tar=tar, tar_at={float(f): float(v) for f, v in zip(far_targets, at)},
                      runtime={"verify_s": time.perf_counter() - t0})


# -- retrieval ----------------------------------------------------------------------


RECALL_LEVELS = np.linspace(0.0, 1.0, 11)


def retrieve(query, gallery, query_labels, gallery_labels, exclude_self: bool = False,
             recall_levels=RECALL_LEVELS) -> EvalReport:
    """Interpolated precision-recall averaged over queries, plus mAP.

    Each query ranks the gallery by euclidean distance (ties by index). With
    ``exclude_self`` query ``q`` never retrieves gallery row ``q``. Queries
    with no relevant gallery item contribute zero precision.
    """
    t0 = time.perf_counter()
    q = _rows(query)
    g = _rows(gallery)
    if g.shape[0] == 0:
        raise DataError("empty gallery")
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    if ql.shape[0] != q.shape[0] or gl.shape[0] != g.shape[0]:
        raise DataError("labels must match the number of rows")
    levels = np.asarray(recall_levels, dtype=np.float64)
    prec_sum = np.zeros_like(levels)
    ap_sum = 0.0
    for start in range(0, q.shape[0], 512):
        block = distance_matrix(q[start : start + 512], g)
        for r in range(block.shape[0]):
            qi = start + r
            row = block[r]
            order = np.argsort(row, kind="stable")
            if exclude_self:
                order = order[order != qi]
            rel = gl[order] == ql[qi]
            n_rel = int(rel.sum())
            if n_rel == 0:
                continue
            hits = np.cumsum(rel)
            precision = hits / np.arange(1, rel.size + 1)
            recall = hits / n_rel
            ap_sum += float(precision[rel].mean())
            # interpolated precision: best precision at any recall >= level
            best_after = np.maximum.accumulate(precision[::-1])[::-1]
            pos = np.searchsorted(recall, levels, side="left")
            valid = pos < recall.size
            prec_sum[valid] += best_after[pos[valid]]
    nq = q.shape[0]
    return EvalReport(recall=levels, precision=prec_sum / nq, mean_average_precision=ap_sum / nq,
                      runtime={"retrieve_s": time.perf_counter() - t0})


# -- k-NN classification ----------------------------------------------------------------


def knn_classify(train_x, train_y, test_x, test_y, k: int = 5) -> EvalReport:
    """Top-1 and top-5 accuracy of a k-NN vote.

    Votes are counted over the ``k`` nearest training rows; ties go to the
    class with the larger summed inverse distance, then the smaller class id.
    Top-5 ranks the voted classes first, then further distinct classes in
    order of their nearest training row.
    """
    t0 = time.perf_counter()
    tx, ex = _rows(train_x), _rows(test_x)
    ty, ey = np.asarray(train_y), np.asarray(test_y)
    if not 1 <= k <= tx.shape[0]:
        raise DataError(f"k={k} must be in 1..{tx.shape[0]}")
    missing = np.setdiff1d(np.unique(ey), np.unique(ty))
    if missing.size:
        raise DataError(f"test labels {missing[:5].tolist()} not present in training labels")
    top1 = top5 = 0
    for start in range(0, ex.shape[0], 512):
        block = distance_matrix(ex[start : start + 512], tx)
        for r in range(block.shape[0]):
            order = np.argsort(block[r], kind="stable")
            near = order[:k]
            classes, counts = np.unique(ty[near], return_counts=True)
            weights = np.array([np.sum(1.0 / np.maximum(block[r, near[ty[near] == c]], 1e-12)) for c in classes])
            rank = sorted(range(classes.size), key=lambda i: (-counts[i], -weights[i], classes[i]))
            ranked = [classes[i] for i in rank]
            if len(ranked) < 5:
                _, first = np.unique(ty[order], return_index=True)
                extra = ty[order][np.sort(first)]
                ranked += [c for c in extra if c not in ranked][: 5 - len(ranked)]
            truth = ey[start + r]
            top1 += ranked[0] == truth
            top5 += truth in ranked[:5]
    n = ex.shape[0]
    return EvalReport(top1=top1 / n, top5=top5 / n, runtime={"knn_s": time.perf_counter() - t0})


# -- stress and heatmaps --------------------------------------------------------------------


def stress(target, embedded, pairs=None) -> float:
    """Kruskal stress-1: ``sqrt(sum (d_H - d_L)^2 / sum d_H^2)``.

    ``target`` is either a full ``n x n`` distance matrix (upper triangle
    used, ``nan`` entries skipped) or, with ``pairs=(i, j)``, a vector of
    target distances for those pairs.
    """
    y = _rows(embedded)
    if pairs is None:
        t = np.asarray(target, dtype=np.float64)
        if t.shape != (y.shape[0], y.shape[0]):
            raise DataError(f"target matrix {t.shape} does not match {y.shape[0]} embedded rows")
        i, j = np.triu_indices(y.shape[0], 1)
        dh = t[i, j]
        keep = np.isfinite(dh)
        i, j, dh = i[keep], j[keep], dh[keep]
    else:
        i, j = (np.asarray(a, dtype=np.int64) for a in pairs)
        dh = np.asarray(target, dtype=np.float64)
        if i.max(initial=-1) >= y.shape[0] or j.max(initial=-1) >= y.shape[0]:
            raise DataError("pair index out of range")
    denom = float(np.sum(dh**2))
    if denom == 0:
        raise DataError("all target distances are zero")
    dl = np.sqrt(np.sum((y[i] - y[j]) ** 2, axis=1))
    return float(np.sqrt(np.sum((dh - dl) ** 2) / denom))


def _knn_sets(x: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    n = x.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        block = distance_matrix(x[start : start + chunk], x)
        rows = np.arange(block.shape[0])
        block[rows, rows + start] = np.inf
        out[start : start + block.shape[0]] = np.argsort(block, axis=1, kind="stable")[:, :k]
    return out


def neighbor_agreement(a, b, k: int = 10) -> float:
    """Mean fraction of each row's ``k`` nearest neighbors shared by ``a`` and ``b``.

    Both are euclidean; a row never counts itself. 1.0 means every
    neighborhood is preserved.
    """
    xa, xb = _rows(a), _rows(b)
    if xa.shape[0] != xb.shape[0]:
        raise DataError("neighbor agreement needs the same rows in both spaces")
    if not 1 <= k < xa.shape[0]:
        raise DataError(f"k={k} must be in 1..{xa.shape[0] - 1}")
    na, nb = _knn_sets(xa, k), _knn_sets(xb, k)
    shared = [np.intersect1d(p, q, assume_unique=True).size for p, q in zip(na, nb)]
    return float(np.mean(shared) / k)


@dataclass
class Heatmap:
    matrix: np.ndarray
    rows: np.ndarray
    labels: np.ndarray
    separability: float

    def to_csv(self, path):
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.9g")


def similarity_heatmap(features, labels, classes: int = 10, per_class: int = 10) -> Heatmap:
    """Cosine similarities of ``classes * per_class`` rows grouped by class.

    The first ``classes`` class ids (ascending) with at least ``per_class``
    rows are used, taking their first ``per_class`` rows. ``separability`` is
    the mean within-class similarity (self pairs excluded) minus the mean
    between-class similarity.
    """
    x = _rows(features)
    labels = np.asarray(labels)
    chosen = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size >= per_class:
            chosen.append(idx[:per_class])
        if len(chosen) == classes:
            break
    if len(chosen) < classes:
        raise DataError(f"only {len(chosen)} classes have >= {per_class} rows; need {classes}")
    rows = np.concatenate(chosen)
    sub = x[rows]
    norms = np.linalg.norm(sub, axis=1)
    if np.any(norms == 0):
        raise DataError("zero-norm row in heatmap selection")
    unit = sub / norms[:, None]
    sim = unit @ unit.T
    lab = labels[rows]
    same = lab[:, None] == lab[None, :]
    off_self = ~np.eye(rows.size, dtype=bool)
    within = sim[same & off_self].mean() if per_class > 1 else 1.0
    between = sim[~same].mean() if classes > 1 else 0.0
    return Heatmap(sim, rows, lab, float(within - between))
