"""Tabular datasets with labels, predictions, and the per-row correctness flag.

A Dataset is immutable after construction.  Feature columns are either
numeric (float64, NaN marks a missing cell) or categorical (string tokens,
the empty string marks a missing cell).  Labels and predictions are kept as
raw strings; equality checks trim surrounding whitespace.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .util import derive_seed

NUMERIC = "numeric"
CATEGORICAL = "categorical"
KINDS = (NUMERIC, CATEGORICAL)

DEFAULT_LABEL = "label"
DEFAULT_PREDICTION = "prediction"
DEFAULT_CONFIDENCE = "confidence"


class DatasetError(ValueError):
    """Base class for data loading and validation failures."""


class SchemaError(DatasetError):
    """Header or schema mismatch."""


class ParseError(DatasetError):
    """Malformed cell or row; carries the 1-based file line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Column:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r} for {self.name!r}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _as_tokens(values, n_rows: int | None = None) -> np.ndarray:
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        out[i] = "" if v is None else str(v)
    if n_rows is not None and len(out) != n_rows:
        raise DatasetError("column length mismatch")
    return out


class Dataset:
    """Immutable feature table plus optional y, y_hat, confidence, and z columns.

    z is the correctness flag: z_i = 1 exactly when y_i equals y_hat_i after
    trimming surrounding whitespace.
    """

    def __init__(
        self,
        columns,
        features: dict,
        y=None,
        y_hat=None,
        confidence=None,
        z=None,
        header=None,
        label_name: str = DEFAULT_LABEL,
        pred_name: str = DEFAULT_PREDICTION,
        conf_name: str = DEFAULT_CONFIDENCE,
    ):
        self.columns = tuple(columns)
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names")
        if set(features) != set(names):
            raise SchemaError("features dict does not match declared columns")

        sizes = {len(v) for v in features.values()}
        for extra in (y, y_hat, confidence, z):
            if extra is not None:
                sizes.add(len(extra))
        if len(sizes) > 1:
            raise DatasetError("all columns must have the same number of rows")
        if not sizes:
            if y is None:
                raise DatasetError("a dataset needs at least one column")
            sizes = {len(y)}
        n = sizes.pop()
        if n < 1:
            raise DatasetError("a dataset must contain at least one row")
        self._n = n

        feats = {}
        for col in self.columns:
            raw = features[col.name]
            if col.kind == NUMERIC:
                arr = np.asarray(raw, dtype=np.float64)
                if np.isinf(arr).any():
                    raise DatasetError(f"non-finite value in numeric column {col.name!r}")
            else:
                arr = _as_tokens(raw, n)
            feats[col.name] = _freeze(arr.copy() if arr is raw else arr)
        self._features = feats

        self.y = None if y is None else _freeze(_as_tokens(y, n))
        self.y_hat = None if y_hat is None else _freeze(_as_tokens(y_hat, n))

        if confidence is None:
            self.confidence = None
        else:
            conf = np.asarray(confidence, dtype=np.float64)
            valid = np.isnan(conf) | ((conf >= 0.0) & (conf <= 1.0))
            if not valid.all():
                raise DatasetError("confidence values must lie in [0, 1]")
            self.confidence = _freeze(conf)

        if z is None:
            self.z = None
        else:
            zarr = np.asarray(z, dtype=np.int8)
            if not np.isin(zarr, (0, 1)).all():
                raise DatasetError("z must be 0/1")
            if self.y is not None and self.y_hat is not None:
                expect = _match_mask(self.y, self.y_hat)
                if not np.array_equal(zarr, expect):
                    raise DatasetError("z inconsistent with y and y_hat")
            self.z = _freeze(zarr)

        self.label_name = label_name
        self.pred_name = pred_name
        self.conf_name = conf_name
        if header is None:
            header = list(names)
            if self.y is not None:
                header.append(label_name)
            if self.y_hat is not None:
                header.append(pred_name)
            if self.confidence is not None:
                header.append(conf_name)
        self.header = tuple(header)
        self._digest = None

    # -- basic accessors -------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self._n

    @property
    def feature_names(self) -> tuple:
        return tuple(c.name for c in self.columns)

    def kind(self, name: str) -> str:
        for c in self.columns:
            if c.name == name:
                return c.kind
        raise SchemaError(f"no such feature {name!r}")

    def feature(self, name: str) -> np.ndarray:
        try:
            return self._features[name]
        except KeyError:
            raise SchemaError(f"no such feature {name!r}") from None

    def missing_mask(self, name: str) -> np.ndarray:
        arr = self.feature(name)
        if self.kind(name) == NUMERIC:
            return np.isnan(arr)
        return np.array([t == "" for t in arr], dtype=bool)

    # -- error accounting ------------------------------------------------

    def _require_z(self) -> np.ndarray:
        if self.z is None:
            raise DatasetError("operation requires the correctness flag z; call derive_z first")
        return self.z

    @property
    def error_count(self) -> int:
        z = self._require_z()
        return int(self._n - z.sum())

    @property
    def correct_count(self) -> int:
        return self._n - self.error_count

    @property
    def mcr(self) -> float:
        """Misclassification rate: errors / rows."""
        return self.error_count / self._n

    # -- derived datasets ------------------------------------------------

    def with_predictions(self, y_hat, confidence=None) -> "Dataset":
        return Dataset(
            self.columns,
            dict(self._features),
            y=self.y,
            y_hat=y_hat,
            confidence=self.confidence if confidence is None else confidence,
            header=None,
            label_name=self.label_name,
            pred_name=self.pred_name,
            conf_name=self.conf_name,
        )

    def digest(self) -> str:
        """Content digest used to tag fitted rules with their build identity."""
        if self._digest is None:
            h = hashlib.sha256()
            h.update(repr([(c.name, c.kind) for c in self.columns]).encode())
            h.update(str(self._n).encode())
            for col in self.columns:
                arr = self._features[col.name]
                if col.kind == NUMERIC:
                    h.update(arr.tobytes())
                else:
                    h.update("\x1f".join(arr).encode("utf-8", "surrogatepass"))
                h.update(b"\x00")
            for extra in (self.y, self.y_hat):
                if extra is not None:
                    h.update("\x1f".join(extra).encode("utf-8", "surrogatepass"))
                h.update(b"\x00")
            if self.confidence is not None:
                h.update(self.confidence.tobytes())
            if self.z is not None:
                h.update(self.z.tobytes())
            self._digest = h.hexdigest()
        return self._digest


def _match_mask(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    out = np.empty(len(y), dtype=np.int8)
    for i in range(len(y)):
        out[i] = 1 if y[i].strip() == y_hat[i].strip() else 0
    return out


def derive_z(d: Dataset) -> Dataset:
    """Return a copy of d with z_i = 1 iff y_i equals y_hat_i (whitespace-trimmed)."""
    if d.y is None or d.y_hat is None:
        raise DatasetError("derive_z requires both y and y_hat")
    z = _match_mask(d.y, d.y_hat)
    return Dataset(
        d.columns,
        {c.name: d.feature(c.name) for c in d.columns},
        y=d.y,
        y_hat=d.y_hat,
        confidence=d.confidence,
        z=z,
        header=d.header,
        label_name=d.label_name,
        pred_name=d.pred_name,
        conf_name=d.conf_name,
    )


def subset(d: Dataset, indices) -> Dataset:
    """Project d onto a row-index set, preserving original row order."""
    idx = np.unique(np.asarray(list(indices) if isinstance(indices, (set, frozenset)) else indices, dtype=np.int64))
    if idx.size == 0:
        raise DatasetError("subset requires at least one row index")
    if idx[0] < 0 or idx[-1] >= d.n_rows:
        raise DatasetError("subset index out of range")
    pick = lambda arr: None if arr is None else arr[idx]
    return Dataset(
        d.columns,
        {c.name: d.feature(c.name)[idx] for c in d.columns},
        y=pick(d.y),
        y_hat=pick(d.y_hat),
        confidence=pick(d.confidence),
        z=pick(d.z),
        header=d.header,
        label_name=d.label_name,
        pred_name=d.pred_name,
        conf_name=d.conf_name,
    )


# -- CSV ingestion -------------------------------------------------------


def load_csv(path, schema: dict, label_col=None, pred_col=None, conf_col=None) -> Dataset:
    """Load an RFC-4180-style UTF-8 CSV with a header row.

    schema maps feature column names to kinds.  Role columns default to the
    reserved names "label", "prediction", and "confidence"; prediction and
    confidence are picked up only when present in the header unless named
    explicitly.  Header columns not covered by the schema or a role are
    rejected rather than silently dropped.
    """
    for name, kind in schema.items():
        if kind not in KINDS:
            raise SchemaError(f"unknown kind {kind!r} for column {name!r}")

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate header names")
        positions = {name: i for i, name in enumerate(header)}

        def role(explicit, default):
            if explicit is not None:
                if explicit not in positions:
                    raise SchemaError(f"{path}: column {explicit!r} not in header")
                return explicit
            return default if default in positions else None

        label_col = role(label_col, DEFAULT_LABEL)
        if label_col is None:
            raise SchemaError(f"{path}: label column not found")
        pred_col = role(pred_col, DEFAULT_PREDICTION)
        conf_col = role(conf_col, DEFAULT_CONFIDENCE)

        missing = [n for n in schema if n not in positions]
        if missing:
            raise SchemaError(f"{path}: schema columns missing from header: {missing}")
        covered = set(schema) | {label_col, pred_col, conf_col}
        extras = [n for n in header if n not in covered]
        if extras:
            raise SchemaError(f"{path}: header columns not in schema: {extras}")

        columns = tuple(Column(n, schema[n]) for n in header if n in schema)

        raw_rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", line_no)
            raw_rows.append((line_no, row))

    if not raw_rows:
        raise DatasetError(f"{path}: no data rows")

    n = len(raw_rows)
    features = {}
    for col in columns:
        pos = positions[col.name]
        if col.kind == NUMERIC:
            arr = np.empty(n, dtype=np.float64)
            for i, (line_no, row) in enumerate(raw_rows):
                arr[i] = _parse_numeric(row[pos], col.name, line_no)
        else:
            arr = np.empty(n, dtype=object)
            for i, (_, row) in enumerate(raw_rows):
                arr[i] = row[pos]
        features[col.name] = arr

    def column_at(name):
        if name is None:
            return None
        pos = positions[name]
        return [row[pos] for _, row in raw_rows]

    confidence = None
    if conf_col is not None:
        pos = positions[conf_col]
        confidence = np.empty(n, dtype=np.float64)
        for i, (line_no, row) in enumerate(raw_rows):
            v = _parse_numeric(row[pos], conf_col, line_no)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ParseError(f"confidence {v!r} outside [0, 1]", line_no)
            confidence[i] = v

    return Dataset(
        columns,
        features,
        y=column_at(label_col),
        y_hat=column_at(pred_col),
        confidence=confidence,
        header=header,
        label_name=label_col,
        pred_name=pred_col or DEFAULT_PREDICTION,
        conf_name=conf_col or DEFAULT_CONFIDENCE,
    )


def _parse_numeric(cell: str, name: str, line_no: int) -> float:
    text = cell.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"bad numeric value {cell!r} in column {name!r}", line_no) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {cell!r} in column {name!r}", line_no)
    return value


def _format_numeric(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def write_csv(d: Dataset, path) -> None:
    """Write d back to CSV in its original header order.

    Numeric cells are emitted with repr, so files whose numerals are already
    in canonical float form round-trip byte for byte.
    """
    feature_set = set(d.feature_names)
    cells_by_col = {}
    for name in d.header:
        if name in feature_set:
            arr = d.feature(name)
            if d.kind(name) == NUMERIC:
                cells_by_col[name] = [_format_numeric(v) for v in arr]
            else:
                cells_by_col[name] = list(arr)
        elif name == d.label_name and d.y is not None:
            cells_by_col[name] = list(d.y)
        elif name == d.pred_name and d.y_hat is not None:
            cells_by_col[name] = list(d.y_hat)
        elif name == d.conf_name and d.confidence is not None:
            cells_by_col[name] = [_format_numeric(v) for v in d.confidence]
        else:
            raise SchemaError(f"cannot serialize header column {name!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(d.header))
        for i in range(d.n_rows):
            writer.writerow([cells_by_col[name][i] for name in d.header])


# -- train/build/eval splits ---------------------------------------------


@dataclass(frozen=True)
class SplitSet:
    """Row indices of one train/build/eval partition of a source dataset."""

    q: int
    train: np.ndarray
    build: np.ndarray
    eval: np.ndarray


def _apportion(n: int, fractions) -> list:
    """Largest-remainder apportionment of n rows over the given fractions.

    Ties in the fractional remainders go to the earlier partition.
    """
    quotas = [f * n for f in fractions]
    base = [int(math.floor(q)) for q in quotas]
    leftover = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def make_splits(d: Dataset, fractions=(0.70, 0.15, 0.15), q_count: int = 10, seed: int = 0) -> list:
    """Partition d into q_count seeded train/build/eval splits.

    Each split permutes the row indices with its own derived seed and cuts
    the permutation by largest-remainder apportionment of the fractions.
    """
    if len(fractions) != 3:
        raise DatasetError("fractions must be (train, build, eval)")
    if any(f <= 0 for f in fractions):
        raise DatasetError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError("fractions must sum to 1")
    if q_count < 1:
        raise DatasetError("q_count must be at least 1")
    n = d.n_rows
    sizes = _apportion(n, fractions)
    if min(sizes) < 1:
        raise DatasetError("every partition needs at least one row")
    splits = []
    for q in range(1, q_count + 1):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "split", q)))
        perm = rng.permutation(n)
        a, b = sizes[0], sizes[0] + sizes[1]
        splits.append(
            SplitSet(
                q=q,
                train=_freeze(np.sort(perm[:a]).astype(np.int64)),
                build=_freeze(np.sort(perm[a:b]).astype(np.int64)),
                eval=_freeze(np.sort(perm[b:]).astype(np.int64)),
            )
        )
    return splits


def splits_to_manifest(splits, fractions, seed) -> dict:
    return {
        "fractions": list(fractions),
        "seed": int(seed),
        "splits": [
            {
                "q": s.q,
                "train": [int(i) for i in s.train],
                "build": [int(i) for i in s.build],
                "eval": [int(i) for i in s.eval],
            }
            for s in splits
        ],
    }


def splits_from_manifest(manifest: dict) -> list:
    out = []
    for item in manifest["splits"]:
        out.append(
            SplitSet(
                q=int(item["q"]),
                train=_freeze(np.asarray(item["train"], dtype=np.int64)),
                build=_freeze(np.asarray(item["build"], dtype=np.int64)),
                eval=_freeze(np.asarray(item["eval"], dtype=np.int64)),
            )
        )
    return out
