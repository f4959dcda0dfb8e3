"""Feature matrices, distance metrics and the on-disk feature formats.

Two formats are supported:

* binary (``.fmat``): ``b"FMAT"``, ``u32`` version (1), ``u64`` n, ``u64`` d,
  ``u32`` flags (bit 0: labels present), then ``n*d`` little-endian float32
  values row-major, then ``n`` little-endian int64 labels if flagged.
* CSV: one row per sample, no header. An optional label column is selected
  with ``labels_col``.
"""

from __future__ import annotations

import enum
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, FeatureFormatError

MAGIC = b"FMAT"
VERSION = 1
_HEADER = struct.Struct("<4sIQQI")
FLAG_LABELS = 1


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"
    ARC_LENGTH = "arc-length"

    @property
    def is_angular(self) -> bool:
        return self is not Metric.EUCLIDEAN

    @property
    def is_metric(self) -> bool:
        """False for cosine distance, which violates the triangle inequality."""
        return self is not Metric.COSINE

    @property
    def edge_metric(self) -> "Metric":
        """Metric used for graph edge weights.

        Cosine distance only ranks neighbors; edges then carry the arc length,
        which orders pairs identically but is a true metric on the sphere.
        """
        return Metric.ARC_LENGTH if self is Metric.COSINE else self


_METRIC_ALIASES = {"cosine-distance": "cosine", "arc": "arc-length", "angular": "arc-length"}


def as_metric(metric) -> Metric:
    if isinstance(metric, Metric):
        return metric
    name = str(metric).lower().replace("_", "-")
    name = _METRIC_ALIASES.get(name, name)
    try:
        return Metric(name)
    except ValueError:
        raise DataError(f"unknown metric {metric!r}") from None


@dataclass(frozen=True)
class FeatureMatrix:
    """An immutable ``n x d`` float32 matrix with optional labels and row ids."""

    data: np.ndarray
    labels: Optional[np.ndarray] = None
    ids: Optional[tuple] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DataError(f"feature matrix must be 2-D with n, d >= 1, got shape {data.shape}")
        finite = np.isfinite(data).all(axis=1)
        if not finite.all():
            row = int(np.argmin(finite))
            raise FeatureFormatError("non-finite value", row=row + 1)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != data.shape[0]:
                raise DataError(f"{labels.shape[0]} labels for {data.shape[0]} rows")
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)
        if self.ids is not None:
            ids = tuple(str(i) for i in self.ids)
            if len(ids) != data.shape[0]:
                raise DataError(f"{len(ids)} row ids for {data.shape[0]} rows")
            object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def values(self) -> np.ndarray:
        """Data promoted to float64 for distance accumulation."""
        return self.data.astype(np.float64)

    def subset(self, index) -> "FeatureMatrix":
        index = np.asarray(index)
        return FeatureMatrix(
            self.data[index],
            None if self.labels is None else self.labels[index],
            None if self.ids is None else tuple(np.asarray(self.ids, dtype=object)[index]),
        )

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None
            and other.labels is not None
            and np.array_equal(self.labels, other.labels)
        )
        return np.array_equal(self.data, other.data) and same_labels and self.ids == other.ids

    __hash__ = None


def _angular_ratio(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DataError("zero-norm vector under an angular metric")
    return np.clip(np.sum(a * b, axis=-1) / (na * nb), -1.0, 1.0)


def pairwise_distance(a, b, metric="euclidean") -> float:
    """Distance between two vectors.

    >>> pairwise_distance([3, 4], [0, 0])
    5.0
    """
    metric = as_metric(metric)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric is Metric.EUCLIDEAN:
        return float(np.sqrt(np.sum((a - b) ** 2)))
    ratio = _angular_ratio(a, b)
    if metric is Metric.ARC_LENGTH:
        return float(np.arccos(ratio))
    return float(max(0.0, 1.0 - ratio))


def distance_matrix(x, y=None, metric="euclidean") -> np.ndarray:
    """Dense distance matrix between the rows of ``x`` and ``y`` (float64)."""
    metric = as_metric(metric)
    x = np.asarray(x, dtype=np.float64)
    y = x if y is None else np.asarray(y, dtype=np.float64)
    if x.shape[1] != y.shape[1]:
        raise DataError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if metric is Metric.EUCLIDEAN:
        sq = (
            np.sum(x * x, axis=1)[:, None]
            + np.sum(y * y, axis=1)[None, :]
            - 2.0 * (x @ y.T)
        )
        np.maximum(sq, 0.0, out=sq)
        if y is x:
            np.fill_diagonal(sq, 0.0)
        return np.sqrt(sq)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise DataError("zero-norm vector under an angular metric")
    ratio = np.clip((x / nx[:, None]) @ (y / ny[:, None]).T, -1.0, 1.0)
    if y is x:
        np.fill_diagonal(ratio, 1.0)
    if metric is Metric.ARC_LENGTH:
        return np.arccos(ratio)
    return np.maximum(1.0 - ratio, 0.0)


def _atomic_write(path: Path, payload: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_binary(m: FeatureMatrix) -> bytes:
    flags = FLAG_LABELS if m.labels is not None else 0
    parts = [_HEADER.pack(MAGIC, VERSION, m.n, m.d, flags), m.data.astype("<f4").tobytes()]
    if m.labels is not None:
        parts.append(m.labels.astype("<i8").tobytes())
    return b"".join(parts)


def decode_binary(raw: bytes) -> FeatureMatrix:
    if len(raw) < _HEADER.size:
        raise FeatureFormatError("truncated header")
    magic, version, n, d, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFormatError(f"unsupported version {version}")
    if n < 1 or d < 1:
        raise FeatureFormatError(f"invalid shape n={n}, d={d}")
    expected = _HEADER.size + 4 * n * d + (8 * n if flags & FLAG_LABELS else 0)
    if len(raw) != expected:
        raise FeatureFormatError(f"payload is {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(raw, dtype="<i8", count=n, offset=_HEADER.size + 4 * n * d)
    return FeatureMatrix(data, labels)


def _parse_csv(text: str, labels_col: Optional[int]) -> FeatureMatrix:
    rows, labels = [], []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise FeatureFormatError(f"expected {width} columns, found {len(cells)}", row=lineno)
        if labels_col is not None:
            try:
                label_cell = cells.pop(labels_col)
                labels.append(int(float(label_cell)))
            except (IndexError, ValueError):
                raise FeatureFormatError("unreadable label", row=lineno) from None
        try:
            values = [float(c) for c in cells]
        except ValueError:
            raise FeatureFormatError("unparseable number", row=lineno) from None
        if not all(np.isfinite(values)):
            raise FeatureFormatError("non-finite value", row=lineno)
        rows.append(values)
    if not rows:
        raise FeatureFormatError("empty file")
    return FeatureMatrix(np.array(rows), labels if labels_col is not None else None)


def _format_csv(m: FeatureMatrix, labels_col: Optional[int]) -> bytes:
    lines = []
    for i, row in enumerate(m.data):
        cells = ["%.9g" % v for v in row]
        if m.labels is not None and labels_col is not None:
            pos = labels_col if labels_col >= 0 else len(cells) + 1 + labels_col
            cells.insert(pos, str(int(m.labels[i])))
        lines.append(",".join(cells))
    return ("\n".join(lines) + "\n").encode()


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "binary"):
            raise DataError(f"unknown feature format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith((".csv", ".txt")) else "binary"


def load_features(path, format: Optional[str] = None, labels_col: Optional[int] = None) -> FeatureMatrix:
    """Read a feature file; ``format`` defaults from the extension."""
    fmt = _infer_format(path, format)
    raw = Path(path).read_bytes()
    if fmt == "binary":
        return decode_binary(raw)
    return _parse_csv(raw.decode(), labels_col)


def save_features(m: FeatureMatrix, path, format: Optional[str] = None, labels_col: Optional[int] = -1):
    """Write ``m`` atomically (temp file + rename).

    For CSV, labels (if any) go in ``labels_col`` (last column by default);
    pass the same ``labels_col`` to :func:`load_features` to read them back.
    """
    fmt = _infer_format(path, format)
    payload = encode_binary(m) if fmt == "binary" else _format_csv(m, labels_col)
    _atomic_write(Path(path), payload)
