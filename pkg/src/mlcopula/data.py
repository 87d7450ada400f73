"""Mixed-type clustered datasets, schemas and empirical marginals."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

KINDS = ("continuous", "ordinal", "binary", "nominal")
ORDERED_KINDS = ("continuous", "ordinal", "binary")


class SchemaError(ValueError):
    """Invalid schema; ``errors`` lists every violation found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class DataError(ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    levels: int | None = None
    labels: tuple[str, ...] | None = None

    @property
    def ordered(self) -> bool:
        return self.kind in ORDERED_KINDS

    def to_json(self) -> dict:
        out: dict = {"name": self.name, "kind": self.kind}
        if self.labels is not None:
            out["levels"] = list(self.labels)
        elif self.levels is not None and self.kind == "nominal":
            out["levels"] = self.levels
        return out


@dataclass(frozen=True)
class Schema:
    cluster: str
    columns: tuple[ColumnSpec, ...]

    def to_json(self) -> dict:
        return {"cluster": self.cluster, "columns": [c.to_json() for c in self.columns]}


def parse_schema(schema) -> Schema:
    """Validate a schema given as JSON text, a path, or an already-parsed dict.

    All violations are collected and raised together as a :class:`SchemaError`.
    """
    if isinstance(schema, Path):
        schema = schema.read_text(encoding="utf-8")
    if isinstance(schema, str):
        try:
            schema = json.loads(schema)
        except json.JSONDecodeError as exc:
            raise SchemaError([f"schema is not valid JSON: {exc}"]) from None
    if not isinstance(schema, dict):
        raise SchemaError(["schema must be a JSON object"])

    errors: list[str] = []
    cluster = schema.get("cluster")
    if not isinstance(cluster, str) or not cluster:
        errors.append("missing cluster column")
    cols = schema.get("columns", schema.get("cols"))
    if not isinstance(cols, list) or not cols:
        errors.append("schema needs a nonempty 'columns' list")
        cols = []

    specs: list[ColumnSpec] = []
    seen: set[str] = set()
    for i, col in enumerate(cols):
        if not isinstance(col, dict):
            errors.append(f"column entry {i} is not an object")
            continue
        name = col.get("name")
        kind = col.get("kind")
        if not isinstance(name, str) or not name:
            errors.append(f"column entry {i} has no name")
            continue
        if name in seen:
            errors.append(f"duplicate column {name}")
        seen.add(name)
        if name == cluster:
            errors.append(f"column {name} is also the cluster column")
        if kind not in KINDS:
            errors.append(f"unknown kind {kind!r} for column {name}")
            continue
        raw = col.get("levels")
        levels: int | None = None
        labels: tuple[str, ...] | None = None
        if isinstance(raw, list):
            labels = tuple(str(v) for v in raw)
            levels = len(labels)
            if len(set(labels)) != len(labels):
                errors.append(f"column {name} has repeated level labels")
        elif isinstance(raw, int) and not isinstance(raw, bool):
            levels = raw
        elif raw is not None:
            errors.append(f"column {name}: levels must be an integer or a list of labels")
        if kind == "nominal":
            if levels is None:
                errors.append(f"column {name}: nominal requires levels")
            elif levels < 3:
                errors.append(
                    f"column {name}: nominal requires at least 3 levels (use kind 'binary' for 2)"
                )
        elif kind == "binary":
            if levels is not None and levels != 2:
                errors.append(f"column {name}: binary columns have exactly 2 levels")
            levels = 2
        elif kind == "continuous" and labels is not None:
            errors.append(f"column {name}: continuous columns cannot enumerate levels")
        specs.append(ColumnSpec(name, kind, levels, labels))

    if errors:
        raise SchemaError(errors)
    return Schema(cluster, tuple(specs))


@dataclass(frozen=True)
class Ecdf:
    """Sorted observed values of one column (duplicates kept)."""

    sorted_values: np.ndarray

    @classmethod
    def from_values(cls, values) -> "Ecdf":
        v = np.sort(np.asarray(values, dtype=float))
        if v.size == 0:
            raise ValueError("empirical distribution needs at least one value")
        v.setflags(write=False)
        return cls(v)

    @property
    def n_obs(self) -> int:
        return int(self.sorted_values.size)

    def quantile(self, u):
        return empirical_quantile(self, u)


def empirical_quantile(ecdf: Ecdf, u):
    """Type-1 empirical quantile: ``sorted_values[ceil(u * n)]`` (1-based, clamped).

    Accepts a scalar or an array of probabilities, all strictly inside (0, 1).
    """
    arr = np.asarray(u, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise ValueError("quantile probability must lie strictly inside (0, 1)")
    n = ecdf.n_obs
    idx = np.clip(np.ceil(arr * n).astype(np.int64), 1, n) - 1
    out = ecdf.sorted_values[idx]
    return float(out) if out.ndim == 0 else out


def latent_init_rank(values, observed) -> np.ndarray:
    """Normal scores ``Phi^-1(rank / (n_obs + 1))`` for observed cells, 0 elsewhere.

    Ties get their average rank.
    """
    values = np.asarray(values, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    out = np.zeros(values.shape)
    n_obs = int(observed.sum())
    if n_obs:
        ranks = rankdata(values[observed], method="average")
        out[observed] = ndtri(ranks / (n_obs + 1))
    return out


@dataclass
class MixedDataset:
    """A clustered table of ordered and nominal columns with a missingness mask.

    ``values`` holds ordered columns as reals and nominal columns as category
    codes ``1..K`` (both stored as float); unobserved cells are NaN and
    ``mask`` is True where a cell is observed.
    """

    schema: Schema
    values: np.ndarray
    mask: np.ndarray
    cluster: np.ndarray
    cluster_labels: tuple[str, ...]
    header: tuple[str, ...] | None = None
    # per column: observed text token for each row ("" when missing)
    tokens: list[list[str]] | None = field(default=None, repr=False)
    # per nominal column: label of category code k at index k - 1
    category_labels: dict[str, tuple[str, ...]] = field(default_factory=dict)
    raw_clusters: tuple[str, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.cluster = np.asarray(self.cluster, dtype=np.int64)
        n, c = self.values.shape
        if self.mask.shape != (n, c) or c != len(self.schema.columns):
            raise ValueError("values, mask and schema disagree in shape")
        if self.cluster.shape != (n,):
            raise ValueError("every row needs a cluster label")
        m = len(self.cluster_labels)
        if m < 1 or self.cluster.min() < 0 or self.cluster.max() >= m:
            raise ValueError("cluster index out of range")
        if np.any(np.bincount(self.cluster, minlength=m) == 0):
            raise ValueError("every cluster must contain at least one row")
        for j, col in enumerate(self.schema.columns):
            if not self.mask[:, j].any():
                raise DataError("column has no observed values", column=col.name)
            if col.kind == "nominal":
                obs = self.values[self.mask[:, j], j]
                if np.any((obs < 1) | (obs > col.levels) | (obs != np.round(obs))):
                    raise DataError(f"nominal codes must lie in 1..{col.levels}", column=col.name)
        self.values = np.where(self.mask, self.values, np.nan)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def columns(self) -> tuple[ColumnSpec, ...]:
        return self.schema.columns

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema.columns]

    @property
    def ordered_idx(self) -> np.ndarray:
        return np.array([j for j, c in enumerate(self.columns) if c.ordered], dtype=int)

    @property
    def nominal_idx(self) -> np.ndarray:
        return np.array([j for j, c in enumerate(self.columns) if not c.ordered], dtype=int)

    def column(self, name: str) -> int:
        return self.names.index(name)

    def ecdfs(self) -> dict[int, Ecdf]:
        """Frozen empirical distributions of the observed ordered columns."""
        return {
            int(j): Ecdf.from_values(self.values[self.mask[:, j], j]) for j in self.ordered_idx
        }

    def with_values(self, values, mask=None) -> "MixedDataset":
        """Copy sharing schema and cluster structure but with new cell values."""
        return MixedDataset(
            schema=self.schema,
            values=values,
            mask=self.mask.copy() if mask is None else mask,
            cluster=self.cluster,
            cluster_labels=self.cluster_labels,
            header=self.header,
            tokens=self.tokens,
            category_labels=self.category_labels,
            raw_clusters=self.raw_clusters,
        )


def _parse_float(token: str, row: int, col: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"cannot parse {token!r} as a number", row=row, column=col) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value {token!r}", row=row, column=col)
    return value


def load_dataset(csv_path, schema, missing_tokens=("",)) -> MixedDataset:
    """Read a CSV file against a schema.

    Cells equal to one of ``missing_tokens`` (after stripping whitespace) are
    unobserved.  Rows are numbered from 1 for the first data row in error
    messages; the header is row 0.
    """
    if not isinstance(schema, Schema):
        schema = parse_schema(schema)
    missing = {t.strip() for t in missing_tokens}
    text = Path(csv_path).read_text(encoding="utf-8-sig")
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("CSV file is empty") from None
    header = [h.strip() for h in header]
    expected = {c.name for c in schema.columns} | {schema.cluster}
    problems = []
    if len(set(header)) != len(header):
        problems.append("CSV header has repeated column names")
    if schema.cluster not in header:
        problems.append(f"cluster column {schema.cluster!r} not in CSV header")
    for name in sorted(expected - set(header) - {schema.cluster}):
        problems.append(f"schema column {name!r} not in CSV header")
    for name in [h for h in header if h not in expected]:
        problems.append(f"CSV column {name!r} not in schema")
    if problems:
        raise DataError("; ".join(problems))

    pos = {h: i for i, h in enumerate(header)}
    rows = [r for r in reader if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError("CSV file has no data rows")
    n, c = len(rows), len(schema.columns)
    values = np.full((n, c), np.nan)
    mask = np.zeros((n, c), dtype=bool)
    tokens = [[""] * n for _ in range(c)]
    category_labels: dict[str, tuple[str, ...]] = {}

    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(r)}", row=i + 1)

    cluster_raw = []
    for i, r in enumerate(rows):
        tok = r[pos[schema.cluster]].strip()
        if tok in missing:
            raise DataError("cluster label is missing", row=i + 1, column=schema.cluster)
        cluster_raw.append(tok)
    cluster_labels = tuple(dict.fromkeys(cluster_raw))
    index = {lab: k for k, lab in enumerate(cluster_labels)}
    cluster = np.array([index[t] for t in cluster_raw], dtype=np.int64)

    for j, spec in enumerate(schema.columns):
        col_pos = pos[spec.name]
        codes: dict[str, int] = {}
        if spec.labels is not None:
            codes = {lab: k + 1 for k, lab in enumerate(spec.labels)}
        for i, r in enumerate(rows):
            tok = r[col_pos].strip()
            if tok in missing:
                continue
            tokens[j][i] = tok
            mask[i, j] = True
            if spec.kind == "nominal":
                if tok not in codes:
                    if spec.labels is not None or len(codes) >= spec.levels:
                        raise DataError(
                            f"nominal value {tok!r} outside declared levels", row=i + 1, column=spec.name
                        )
                    codes[tok] = len(codes) + 1
                values[i, j] = codes[tok]
            elif spec.labels is not None:
                if tok not in codes:
                    raise DataError(
                        f"value {tok!r} outside declared levels", row=i + 1, column=spec.name
                    )
                values[i, j] = codes[tok]
            else:
                values[i, j] = _parse_float(tok, i + 1, spec.name)
        if not mask[:, j].any():
            raise DataError("column has no observed values", column=spec.name)
        if spec.kind == "binary":
            distinct = np.unique(values[mask[:, j], j])
            if distinct.size > 2:
                raise DataError("binary column has more than two distinct values", column=spec.name)
        if spec.kind == "nominal":
            labels = [""] * spec.levels
            for lab, k in codes.items():
                labels[k - 1] = lab
            category_labels[spec.name] = tuple(
                lab if lab else str(k + 1) for k, lab in enumerate(labels)
            )

    return MixedDataset(
        schema=schema,
        values=values,
        mask=mask,
        cluster=cluster,
        cluster_labels=cluster_labels,
        header=tuple(header),
        tokens=tokens,
        category_labels=category_labels,
        raw_clusters=tuple(cluster_raw),
    )


def format_value(x: float) -> str:
    """Shortest text that round-trips the float; integers print without '.0'."""
    if float(x).is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(float(x))


def _value_tokens(ds: MixedDataset, j: int) -> dict[float, str]:
    """Original text for each observed value of an ordered column."""
    out: dict[float, str] = {}
    if ds.tokens is None:
        return out
    for i in np.flatnonzero(ds.mask[:, j]):
        out.setdefault(float(ds.values[i, j]), ds.tokens[j][i])
    return out


def cell_text(ds: MixedDataset, source: MixedDataset, i: int, j: int, lookup) -> str:
    spec = ds.columns[j]
    if source.mask[i, j] and source.tokens is not None:
        return source.tokens[j][i]
    if not ds.mask[i, j] or np.isnan(ds.values[i, j]):
        return ""
    v = float(ds.values[i, j])
    if spec.kind == "nominal":
        labels = source.category_labels.get(spec.name)
        return labels[int(v) - 1] if labels else str(int(v))
    if spec.labels is not None:
        return spec.labels[int(v) - 1]
    return lookup[j].get(v, format_value(v))


def dataset_rows(ds: MixedDataset, source: MixedDataset | None = None) -> tuple[list[str], list[list[str]]]:
    """Render ``ds`` as CSV text cells.

    Cells observed in ``source`` (default ``ds``) reuse their original tokens,
    so observed data round-trips byte for byte.
    """
    source = ds if source is None else source
    header = list(source.header) if source.header else [source.schema.cluster] + source.names
    lookup = {int(j): _value_tokens(source, int(j)) for j in source.ordered_idx}
    col_of = {name: j for j, name in enumerate(ds.names)}
    clusters = source.raw_clusters or tuple(ds.cluster_labels[k] for k in ds.cluster)
    rows = []
    for i in range(ds.n_rows):
        row = []
        for h in header:
            if h == source.schema.cluster:
                row.append(clusters[i])
            else:
                row.append(cell_text(ds, source, i, col_of[h], lookup))
        rows.append(row)
    return header, rows


def write_dataset(ds: MixedDataset, path, source: MixedDataset | None = None) -> None:
    header, rows = dataset_rows(ds, source)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_mask(ds: MixedDataset, path) -> None:
    header = list(ds.header) if ds.header else [ds.schema.cluster] + ds.names
    col_of = {name: j for j, name in enumerate(ds.names)}
    clusters = ds.raw_clusters or tuple(ds.cluster_labels[k] for k in ds.cluster)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(ds.n_rows):
            writer.writerow(
                [clusters[i] if h == ds.schema.cluster else str(int(ds.mask[i, col_of[h]])) for h in header]
            )


def read_mask(path, schema: Schema) -> np.ndarray:
    """Read a 0/1 mask CSV (1 = observed) into an ``(n, columns)`` boolean array."""
    with open(path, encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    out = np.zeros((len(rows), len(schema.columns)), dtype=bool)
    for j, spec in enumerate(schema.columns):
        if spec.name not in header:
            raise DataError(f"mask file lacks column {spec.name!r}")
        k = header.index(spec.name)
        for i, r in enumerate(rows):
            tok = r[k].strip()
            if tok not in ("0", "1"):
                raise DataError(f"mask cells must be 0 or 1, got {tok!r}", row=i + 1, column=spec.name)
            out[i, j] = tok == "1"
    return out


def missing_summary(ds: MixedDataset) -> dict[str, float]:
    """Percentage of unobserved cells per column, rounded to two decimals."""
    miss = (~ds.mask).sum(axis=0)
    return {
        name: round(100.0 * int(k) / ds.n_rows, 2) for name, k in zip(ds.names, miss)
    }


def format_missing_summary(summary: dict[str, float]) -> str:
    width = max(len(k) for k in summary) if summary else 6
    lines = [f"{'column':<{width}}  missing %"]
    lines += [f"{k:<{width}}  {v:9.2f}" for k, v in summary.items()]
    return "\n".join(lines)
