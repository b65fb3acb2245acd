"""Datapoint bundles: ids, embeddings, confidence rows, optional labels.

A bundle directory holds meta.json, ids.txt, the Z/conf matrices (row-major
little-endian float32 or CSV), labels.csv when labeled, and an optional
features.jsonl sidecar. Matrices live in memory as float32, exactly what the
binary format stores; numeric code promotes to float64 at the point of use.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    InsufficientDataError,
    InvalidLabelError,
    RangeError,
    ShapeError,
    ValidationError,
)

log = logging.getLogger(__name__)

# Row sums within ACCEPT_TOL of 1 are taken bit-as-is; sums within SIMPLEX_TOL
# are renormalized; anything worse is a hard error. The two-level rule keeps
# save -> load -> save byte-stable.
SIMPLEX_TOL = 1e-6
ACCEPT_TOL = 5e-7


def _check_ids(ids: Sequence[str]) -> tuple[str, ...]:
    out = tuple(str(i) for i in ids)
    if len(set(out)) != len(out):
        seen: set[str] = set()
        for i in out:
            if i in seen:
                raise ValidationError(f"duplicate id {i!r}")
            seen.add(i)
    for i in out:
        if not i or "\n" in i or "\r" in i:
            raise ValidationError(f"invalid id {i!r}")
    return out


def _check_conf(conf: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    if conf.ndim != 2:
        raise ShapeError(f"conf must be 2-D, got shape {conf.shape}")
    if conf.shape[0] == 0:
        return conf
    if np.any(~np.isfinite(conf)):
        raise ValidationError("conf contains non-finite entries")
    if np.any(conf < 0.0) or np.any(conf > 1.0 + SIMPLEX_TOL):
        bad = int(np.argwhere((conf < 0.0) | (conf > 1.0 + SIMPLEX_TOL))[0, 0])
        raise ValidationError(f"conf entries outside [0, 1] at row id {ids[bad]!r}")
    sums = conf.astype(np.float64).sum(axis=1)
    off = np.abs(sums - 1.0)
    worst = int(np.argmax(off))
    if off[worst] > SIMPLEX_TOL:
        raise ValidationError(
            f"conf row for id {ids[worst]!r} sums to {sums[worst]:.8f}, "
            f"outside the {SIMPLEX_TOL:g} simplex tolerance"
        )
    fix = off > ACCEPT_TOL
    if np.any(fix):
        conf = conf.copy()
        conf[fix] = (conf[fix].astype(np.float64) / sums[fix, None]).astype(np.float32)
    return conf


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class UnlabeledBundle:
    """Datapoints without gold labels: ids, embeddings Z, confidence rows."""

    ids: tuple[str, ...]
    z: np.ndarray
    conf: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        ids = _check_ids(self.ids)
        z = np.asarray(self.z, dtype=np.float32)
        conf = np.asarray(self.conf, dtype=np.float32)
        if z.ndim != 2:
            raise ShapeError(f"Z must be 2-D, got shape {z.shape}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if conf.shape != (z.shape[0], self.num_classes):
            raise ShapeError(
                f"conf shape {conf.shape} does not match "
                f"({z.shape[0]}, {self.num_classes})"
            )
        if len(ids) != z.shape[0]:
            raise ShapeError(f"{len(ids)} ids for {z.shape[0]} rows")
        if np.any(~np.isfinite(z)):
            raise ValidationError("Z contains non-finite entries")
        conf = _check_conf(conf, ids)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "z", _freeze(z))
        object.__setattr__(self, "conf", _freeze(conf))

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def row_of(self, point_id: str) -> int:
        try:
            return self._index[point_id]
        except AttributeError:
            object.__setattr__(
                self, "_index", {i: r for r, i in enumerate(self.ids)}
            )
            return self._index[point_id]

    def take(self, rows: Sequence[int]) -> "UnlabeledBundle":
        rows = np.asarray(rows, dtype=np.int64)
        return UnlabeledBundle(
            ids=tuple(self.ids[r] for r in rows),
            z=self.z[rows],
            conf=self.conf[rows],
            num_classes=self.num_classes,
        )


@dataclass(frozen=True, eq=False)
class LabeledBundle:
    """Datapoints with gold labels; the validation-side input of every fit."""

    ids: tuple[str, ...]
    z: np.ndarray
    conf: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        base = UnlabeledBundle(self.ids, self.z, self.conf, self.num_classes)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (base.n,):
            raise ShapeError(f"labels shape {labels.shape} does not match ({base.n},)")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            bad = int(
                np.argwhere((labels < 0) | (labels >= self.num_classes))[0, 0]
            )
            raise InvalidLabelError(
                f"label {labels[bad]} for id {base.ids[bad]!r} outside "
                f"[0, {self.num_classes})"
            )
        object.__setattr__(self, "ids", base.ids)
        object.__setattr__(self, "z", base.z)
        object.__setattr__(self, "conf", base.conf)
        object.__setattr__(self, "labels", _freeze(labels))

    n = UnlabeledBundle.n
    dim = UnlabeledBundle.dim
    row_of = UnlabeledBundle.row_of

    def take(self, rows: Sequence[int]) -> "LabeledBundle":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledBundle(
            ids=tuple(self.ids[r] for r in rows),
            z=self.z[rows],
            conf=self.conf[rows],
            labels=self.labels[rows],
            num_classes=self.num_classes,
        )

    def without_labels(self) -> UnlabeledBundle:
        return UnlabeledBundle(self.ids, self.z, self.conf, self.num_classes)


def error_distance(label: int, conf_row: np.ndarray) -> np.ndarray:
    """one_hot(label) - conf_row, the per-point error-distance vector."""
    conf_row = np.asarray(conf_row, dtype=np.float64)
    if conf_row.ndim != 1:
        raise ShapeError(f"conf_row must be 1-D, got shape {conf_row.shape}")
    c = conf_row.shape[0]
    if not 0 <= int(label) < c:
        raise InvalidLabelError(f"label {label} outside [0, {c})")
    out = -conf_row
    out[int(label)] += 1.0
    return out


def error_distances(labels: np.ndarray, conf: np.ndarray) -> np.ndarray:
    """Row-wise error distances for a whole matrix, in float64."""
    conf = np.asarray(conf, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    out = -conf.copy()
    out[np.arange(conf.shape[0]), labels] += 1.0
    return out


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True, eq=False)
class PcaTransform:
    """Centering mean plus orthonormal basis columns."""

    mean: np.ndarray
    basis: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        basis = np.asarray(self.basis, dtype=np.float64)
        if mean.ndim != 1 or basis.ndim != 2 or basis.shape[0] != mean.shape[0]:
            raise ShapeError(
                f"mean shape {mean.shape} incompatible with basis shape {basis.shape}"
            )
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(basis.shape[1]), atol=1e-8):
            raise ValidationError("basis columns are not orthonormal within 1e-8")
        object.__setattr__(self, "mean", _freeze(mean))
        object.__setattr__(self, "basis", _freeze(basis))

    @property
    def d(self) -> int:
        return self.basis.shape[1]


def fit_pca(x: np.ndarray, d: int) -> PcaTransform:
    """Top-d principal directions of x via SVD of the centered matrix.

    Columns are ordered by descending singular value, each flipped so its
    largest-magnitude entry is positive. If rank < d only rank columns are
    returned and the truncation is logged.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"x must be 2-D, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InsufficientDataError(f"PCA needs at least 2 rows, got {x.shape[0]}")
    if d < 0:
        raise RangeError(f"PCA dimension must be >= 0, got {d}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size:
        tol = max(x.shape) * np.finfo(np.float64).eps * s[0]
        rank = int(np.sum(s > tol))
    else:
        rank = 0
    r = min(d, rank)
    if r < d:
        log.warning("PCA rank %d below requested %d; basis truncated", rank, d)
    basis = vt[:r].T.copy()
    for j in range(r):
        col = basis[:, j]
        if col[int(np.argmax(np.abs(col)))] < 0:
            basis[:, j] = -col
    return PcaTransform(mean=mean, basis=basis)


def apply_pca(transform: PcaTransform, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != transform.mean.shape[0]:
        raise ShapeError(
            f"x shape {x.shape} incompatible with PCA input dim "
            f"{transform.mean.shape[0]}"
        )
    return (x - transform.mean) @ transform.basis


# ---------------------------------------------------------------------------
# Feature tables


@dataclass(frozen=True)
class FeatureTable:
    """Per-datapoint feature values; ids absent from the table read as 0."""

    rows: Mapping[str, Mapping[str, float]]
    names: tuple[str, ...] = field(init=False)

    def __post_init__(self) -> None:
        names: set[str] = set()
        for feats in self.rows.values():
            names.update(feats)
        object.__setattr__(self, "names", tuple(sorted(names)))

    def value(self, point_id: str, name: str) -> float:
        return float(self.rows.get(point_id, {}).get(name, 0.0))

    def vector(self, name: str, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.value(i, name) for i in ids], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rows)


def load_feature_table(path: str | Path) -> FeatureTable:
    """Read an NDJSON feature sidecar: one {"id", "features"} object per line."""
    path = Path(path)
    rows: dict[str, dict[str, float]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict) or "id" not in obj or "features" not in obj:
                raise ValidationError(f"{path}:{lineno}: expected id and features keys")
            pid = str(obj["id"])
            if pid in rows:
                raise ValidationError(f"{path}:{lineno}: duplicate id {pid!r}")
            feats = obj["features"]
            if not isinstance(feats, dict):
                raise ValidationError(f"{path}:{lineno}: features must be an object")
            parsed: dict[str, float] = {}
            for name, value in feats.items():
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ValidationError(
                        f"{path}:{lineno}: non-numeric value for feature {name!r}"
                    )
                parsed[str(name)] = float(value)
            rows[pid] = parsed
    return FeatureTable(rows=rows)


def save_feature_table(table: FeatureTable, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for pid in sorted(table.rows):
            feats = {k: table.rows[pid][k] for k in sorted(table.rows[pid])}
            fh.write(json.dumps({"id": pid, "features": feats}, sort_keys=True))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Bundle directories


def _format_f32(value: np.float32) -> str:
    # repr of the exact float64 promotion; parses back to the same f32 bits
    return repr(float(value))


def _write_matrix(path: Path, matrix: np.ndarray, fmt: str) -> None:
    if fmt == "f32le":
        path.with_suffix(".bin").write_bytes(
            np.ascontiguousarray(matrix, dtype="<f4").tobytes()
        )
    else:
        with path.with_suffix(".csv").open("w", encoding="utf-8", newline="") as fh:
            for row in matrix:
                fh.write(",".join(_format_f32(v) for v in row))
                fh.write("\n")


def _read_matrix(path: Path, fmt: str, n: int, cols: int) -> np.ndarray:
    if fmt == "f32le":
        fp = path.with_suffix(".bin")
        if not fp.exists():
            raise FileNotFoundError(fp)
        raw = np.frombuffer(fp.read_bytes(), dtype="<f4")
        if raw.size != n * cols:
            raise ValidationError(
                f"{fp}: expected {n * cols} float32 values, found {raw.size}"
            )
        return raw.reshape(n, cols).copy()
    fp = path.with_suffix(".csv")
    if not fp.exists():
        raise FileNotFoundError(fp)
    rows = []
    with fp.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise ValidationError(f"{fp}:{lineno}: bad number: {exc}") from exc
    arr = (
        np.asarray(rows, dtype=np.float64)
        if rows
        else np.zeros((0, cols), dtype=np.float64)
    )
    if arr.shape != (n, cols):
        raise ValidationError(f"{fp}: expected shape {(n, cols)}, found {arr.shape}")
    return arr.astype(np.float32)


def save_bundle(
    bundle: LabeledBundle | UnlabeledBundle,
    path: str | Path,
    fmt: str = "f32le",
) -> None:
    """Write a bundle directory; fmt is "f32le" or "csv"."""
    if fmt not in ("f32le", "csv"):
        raise ConfigError(f"unknown bundle format {fmt!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "dim": bundle.dim,
        "format": fmt,
        "n": bundle.n,
        "num_classes": bundle.num_classes,
    }
    (path / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (path / "ids.txt").write_text("".join(i + "\n" for i in bundle.ids), encoding="utf-8")
    _write_matrix(path / "Z", bundle.z, fmt)
    _write_matrix(path / "conf", bundle.conf, fmt)
    if isinstance(bundle, LabeledBundle):
        with (path / "labels.csv").open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "label"])
            for pid, lab in zip(bundle.ids, bundle.labels):
                writer.writerow([pid, int(lab)])


def load_bundle(path: str | Path) -> LabeledBundle | UnlabeledBundle:
    """Read a bundle directory; returns LabeledBundle when labels.csv exists."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(meta_path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{meta_path}: malformed JSON: {exc}") from exc
    for key in ("n", "dim", "num_classes", "format"):
        if key not in meta:
            raise ValidationError(f"{meta_path}: missing key {key!r}")
    fmt = meta["format"]
    if fmt not in ("f32le", "csv"):
        raise ValidationError(f"{meta_path}: unknown format {fmt!r}")
    n, dim, num_classes = int(meta["n"]), int(meta["dim"]), int(meta["num_classes"])
    ids_path = path / "ids.txt"
    if not ids_path.exists():
        raise FileNotFoundError(ids_path)
    ids = [line for line in ids_path.read_text(encoding="utf-8").splitlines() if line]
    if len(ids) != n:
        raise ValidationError(f"{ids_path}: expected {n} ids, found {len(ids)}")
    z = _read_matrix(path / "Z", fmt, n, dim)
    conf = _read_matrix(path / "conf", fmt, n, num_classes)
    labels_path = path / "labels.csv"
    if not labels_path.exists():
        return UnlabeledBundle(ids=tuple(ids), z=z, conf=conf, num_classes=num_classes)
    by_id: dict[str, int] = {}
    with labels_path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label"]:
            raise ValidationError(f"{labels_path}: expected header id,label")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError(f"{labels_path}:{lineno}: expected id,label")
            pid, lab = row
            if pid in by_id:
                raise ValidationError(f"{labels_path}:{lineno}: duplicate id {pid!r}")
            try:
                by_id[pid] = int(lab)
            except ValueError as exc:
                raise ValidationError(
                    f"{labels_path}:{lineno}: bad label {lab!r}"
                ) from exc
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValidationError(f"{labels_path}: missing labels for ids {missing[:5]}")
    labels = np.array([by_id[i] for i in ids], dtype=np.int64)
    return LabeledBundle(
        ids=tuple(ids), z=z, conf=conf, labels=labels, num_classes=num_classes
    )
