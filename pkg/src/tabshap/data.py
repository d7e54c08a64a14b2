"""Tabular ingestion: CSV parsing, standardize/one-hot encoding, splits, noise columns.

Raw string cells are kept on the dataset so that any row subset can be
re-encoded with statistics fitted on the training rows only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

MISSING = "__missing__"
NUMERIC = "numeric"
CATEGORICAL = "categorical"


@dataclass
class ColumnSpec:
    name: str
    kind: str = NUMERIC
    categories: list[str] | None = None
    missing_policy: str = "impute_mean"  # numeric; categoricals use "missing_category"
    synthetic: bool = False

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            self.missing_policy = "missing_category"
            if self.categories is not None and not self.categories:
                raise DataError(f"column {self.name!r}: empty category vocabulary")


@dataclass
class ColumnSchema:
    columns: list[ColumnSpec]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate column names in schema: {names}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __len__(self) -> int:
        return len(self.columns)

    @classmethod
    def infer(cls, header: list[str], rows: list[list[str]]) -> "ColumnSchema":
        """Numeric when every non-empty cell parses as a float, else categorical."""
        cols = []
        for j, name in enumerate(header):
            kind = NUMERIC
            for row in rows:
                cell = row[j]
                if cell == "":
                    continue
                try:
                    float(cell)
                except ValueError:
                    kind = CATEGORICAL
                    break
            cols.append(ColumnSpec(name, kind))
        return cls(cols)

    def to_dict(self) -> list[dict]:
        return [c.__dict__.copy() for c in self.columns]

    @classmethod
    def from_dict(cls, data: list[dict]) -> "ColumnSchema":
        return cls([ColumnSpec(**d) for d in data])


@dataclass
class EncodedDataset:
    X: np.ndarray
    y: np.ndarray
    schema: ColumnSchema  # fitted: categorical vocabularies filled in
    class_names: list[str]
    means: np.ndarray  # per schema column; nan for categoricals
    stds: np.ndarray
    raw: list[list[str]] | None = None
    unseen_categories: int = 0
    groups: list[np.ndarray] = field(default_factory=list)
    column_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not np.all(np.isfinite(self.X)):
            raise DataError("encoded features contain non-finite values")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise DataError("labels outside {0..K-1}")
        if not self.groups:
            self.groups, self.column_names = _layout(self.schema)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_players(self) -> int:
        return len(self.schema)

    @property
    def player_names(self) -> list[str]:
        return self.schema.names

    @property
    def synthetic_players(self) -> np.ndarray:
        return np.array([c.synthetic for c in self.schema.columns], dtype=bool)

    def background(self) -> np.ndarray:
        """Masking defaults: training mean for numerics, the "missing" indicator for categoricals."""
        bg = np.zeros(self.X.shape[1])
        for spec, idx in zip(self.schema.columns, self.groups):
            if spec.kind == CATEGORICAL:
                bg[idx[-1]] = 1.0
        return bg

    def subset(self, idx) -> "EncodedDataset":
        idx = np.asarray(idx, dtype=int)
        raw = None if self.raw is None else [self.raw[i] for i in idx]
        return replace(self, X=self.X[idx], y=self.y[idx], raw=raw, unseen_categories=0)

    def one_hot(self) -> np.ndarray:
        return np.eye(self.n_classes)[self.y]


def _layout(schema: ColumnSchema) -> tuple[list[np.ndarray], list[str]]:
    groups, names, pos = [], [], 0
    for spec in schema.columns:
        if spec.kind == NUMERIC:
            width = 1
            names.append(spec.name)
        else:
            cats = spec.categories or []
            width = len(cats) + 1
            names.extend([f"{spec.name}={c}" for c in cats] + [f"{spec.name}={MISSING}"])
        groups.append(np.arange(pos, pos + width))
        pos += width
    return groups, names


def _parse_float(cell: str, name: str, row: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {name!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {name!r}: non-finite value {cell!r}")
    return value


def fit_schema(schema: ColumnSchema, raw: list[list[str]]) -> tuple[ColumnSchema, np.ndarray, np.ndarray]:
    """Learn vocabularies and standardization stats from ``raw`` rows."""
    cols, means, stds = [], [], []
    for j, spec in enumerate(schema.columns):
        if spec.kind == NUMERIC:
            vals = np.array(
                [_parse_float(r[j], spec.name, i) for i, r in enumerate(raw) if r[j] != ""]
            )
            mean = float(vals.mean()) if vals.size else 0.0
            std = float(vals.std()) if vals.size else 1.0
            if not std > 1e-12:
                std = 1.0
            cols.append(replace(spec))
            means.append(mean)
            stds.append(std)
        else:
            cats = spec.categories
            if cats is None:
                cats = sorted({r[j] for r in raw if r[j] != ""})
                if not cats:
                    raise DataError(f"column {spec.name!r} has no observed categories")
            cols.append(replace(spec, categories=list(cats)))
            means.append(np.nan)
            stds.append(np.nan)
    return ColumnSchema(cols), np.array(means), np.array(stds)


def encode_rows(
    raw: list[list[str]], schema: ColumnSchema, means: np.ndarray, stds: np.ndarray
) -> tuple[np.ndarray, int]:
    """Encode raw rows with fitted stats. Returns (X, unseen category count)."""
    groups, _ = _layout(schema)
    width = int(groups[-1][-1]) + 1 if groups else 0
    X = np.zeros((len(raw), width))
    unseen = 0
    for j, (spec, idx) in enumerate(zip(schema.columns, groups)):
        if spec.kind == NUMERIC:
            col = np.array(
                [means[j] if r[j] == "" else _parse_float(r[j], spec.name, i) for i, r in enumerate(raw)]
            )
            X[:, idx[0]] = (col - means[j]) / stds[j]
        else:
            lookup = {c: k for k, c in enumerate(spec.categories)}
            miss = len(spec.categories)
            for i, r in enumerate(raw):
                k = lookup.get(r[j])
                if k is None:
                    if r[j] != "":
                        unseen += 1
                    k = miss
                X[i, idx[k]] = 1.0
    if unseen:
        log.warning("%d unseen category values mapped to %s", unseen, MISSING)
    return X, unseen


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            rows.append([c.strip() for c in row])
    return header, rows


def load_csv(
    path: str | Path,
    label_column: str,
    schema: ColumnSchema | None = None,
    class_names: list[str] | None = None,
    reference: EncodedDataset | None = None,
) -> EncodedDataset:
    """Read and encode a CSV file.

    With ``reference`` the fitted schema, statistics and class names of an
    existing (training) dataset are reused, so test files are encoded
    consistently.
    """
    header, rows = read_csv(path)
    if label_column not in header:
        raise DataError(f"label column {label_column!r} not in header")
    li = header.index(label_column)
    feat_names = [h for h in header if h != label_column]
    raw = [[c for k, c in enumerate(r) if k != li] for r in rows]
    labels = [r[li] for r in rows]
    if any(lab == "" for lab in labels):
        raise DataError("missing label values")

    if reference is not None:
        schema, means, stds = reference.schema, reference.means, reference.stds
        class_names = reference.class_names
    elif schema is None:
        schema = ColumnSchema.infer(feat_names, raw)
    if schema.names != feat_names:
        unknown = sorted(set(feat_names) ^ set(schema.names))
        raise DataError(f"CSV header does not match schema; differing columns: {unknown}")
    if reference is None:
        schema, means, stds = fit_schema(schema, raw)
        if class_names is None:
            class_names = sorted(set(labels))
    lookup = {c: k for k, c in enumerate(class_names)}
    try:
        y = np.array([lookup[lab] for lab in labels], dtype=int)
    except KeyError as exc:
        raise DataError(f"unknown class label {exc.args[0]!r}") from None
    X, unseen = encode_rows(raw, schema, means, stds)
    return EncodedDataset(X, y, schema, list(class_names), means, stds, raw, unseen)


def refit(train: EncodedDataset, *others: EncodedDataset) -> list[EncodedDataset]:
    """Re-encode ``train`` and ``others`` with statistics fitted on ``train`` raw rows."""
    if train.raw is None:
        return [train, *others]
    unfitted = ColumnSchema(
        [replace(c, categories=None) if c.kind == CATEGORICAL else replace(c) for c in train.schema.columns]
    )
    schema, means, stds = fit_schema(unfitted, train.raw)
    out = []
    for ds in (train, *others):
        X, unseen = encode_rows(ds.raw, schema, means, stds)
        out.append(
            EncodedDataset(X, ds.y, schema, ds.class_names, means, stds, ds.raw, unseen)
        )
    return out


def _stratified_indices(y: np.ndarray, fractions, rng) -> list[np.ndarray]:
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions < 0) or not math.isclose(fractions.sum(), 1.0, abs_tol=1e-9):
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    parts: list[list[int]] = [[] for _ in fractions]
    n_nonzero = int(np.sum(fractions > 0))
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if idx.size < n_nonzero:
            raise DataError(f"class {c} has {idx.size} samples, fewer than {n_nonzero} splits")
        idx = rng.permutation(idx)
        counts = np.floor(fractions * idx.size + 0.5).astype(int)
        counts[-1] = idx.size - counts[:-1].sum()
        if counts[-1] < 0:
            counts[np.argmax(counts)] += counts[-1]
            counts[-1] = 0
        start = 0
        for k, cnt in enumerate(counts):
            parts[k].extend(idx[start : start + cnt].tolist())
            start += cnt
    return [np.sort(np.array(p, dtype=int)) for p in parts]


def split(ds: EncodedDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[EncodedDataset, ...]:
    """Stratified, disjoint, seed-deterministic split; re-encoded on train statistics."""
    rng = np.random.default_rng(seed)
    parts = _stratified_indices(ds.y, fractions, rng)
    subsets = [ds.subset(p) for p in parts]
    if ds.raw is None or subsets[0].n_samples == 0:
        return tuple(subsets)
    return tuple(refit(*subsets))


def split_indices(ds: EncodedDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> list[np.ndarray]:
    return _stratified_indices(ds.y, fractions, np.random.default_rng(seed))


def stratified_subsample(ds: EncodedDataset, n: int, seed: int = 0) -> EncodedDataset:
    if n >= ds.n_samples:
        return ds
    frac = n / ds.n_samples
    idx = _stratified_indices(ds.y, (frac, 1 - frac), np.random.default_rng(seed))[0]
    return refit(ds.subset(idx))[0]


def inject_noise_features(ds: EncodedDataset, fraction: float, seed: int = 0) -> EncodedDataset:
    """Append ``round(fraction * N)`` columns of Uniform(0, 1) noise, flagged synthetic."""
    if fraction < 0:
        raise DataError("noise fraction must be >= 0")
    n_real = ds.n_players
    m = int(math.floor(fraction * n_real + 0.5))
    if m == 0:
        return ds
    rng = np.random.default_rng(seed)
    draws = rng.uniform(0.0, 1.0, size=(ds.n_samples, m))
    existing = set(ds.player_names)
    names, k = [], 0
    while len(names) < m:
        name = f"noise_{k}"
        if name not in existing:
            names.append(name)
        k += 1
    specs = [ColumnSpec(nm, NUMERIC, synthetic=True) for nm in names]
    schema = ColumnSchema(ds.schema.columns + specs)
    mu = draws.mean(axis=0)
    sd = draws.std(axis=0)
    sd[sd <= 1e-12] = 1.0
    X = np.hstack([ds.X, (draws - mu) / sd])
    raw = None
    if ds.raw is not None:
        raw = [r + [repr(float(v)) for v in d] for r, d in zip(ds.raw, draws)]
    return EncodedDataset(
        X,
        ds.y,
        schema,
        ds.class_names,
        np.concatenate([ds.means, mu]),
        np.concatenate([ds.stds, sd]),
        raw,
    )


def raw_numeric(ds: EncodedDataset, column: str) -> np.ndarray:
    """Undo encoding for one numeric column (exact from raw cells when available)."""
    j = ds.player_names.index(column)
    if ds.raw is not None:
        return np.array([float(r[j]) if r[j] != "" else np.nan for r in ds.raw])
    return ds.X[:, ds.groups[j][0]] * ds.stds[j] + ds.means[j]


def encoding_to_dict(ds: EncodedDataset) -> dict:
    """Fitted schema, statistics and class names: enough to encode new rows identically."""
    def clean(a):
        return [None if not np.isfinite(v) else float(v) for v in a]

    return {
        "schema": ds.schema.to_dict(),
        "class_names": list(ds.class_names),
        "means": clean(ds.means),
        "stds": clean(ds.stds),
    }


def encoding_from_dict(d: dict) -> EncodedDataset:
    """An empty dataset carrying a stored encoding, usable as ``load_csv(reference=...)``."""
    schema = ColumnSchema.from_dict(d["schema"])
    means = np.array([np.nan if v is None else v for v in d["means"]], dtype=float)
    stds = np.array([np.nan if v is None else v for v in d["stds"]], dtype=float)
    groups, names = _layout(schema)
    X = np.zeros((0, len(names)))
    return EncodedDataset(X, np.zeros(0, dtype=int), schema, list(d["class_names"]), means, stds, [], 0, groups, names)
