"""Convergence and imputation-quality tables, written as plot-ready CSV."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MixedDataset
from .gibbs import Trace

N_BINS = 30


def export_traces(trace: Trace, path=None) -> str:
    """Long-format CSV ``iteration,parameter,value``; returns the text.

    Raises ``ValueError`` naming the first iteration that holds a NaN or
    infinite value.
    """
    bad = ~np.isfinite(trace.values)
    if bad.any():
        it = int(trace.iterations[np.flatnonzero(bad.any(axis=1))[0]])
        raise ValueError(f"non-finite trace value at iteration {it}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "parameter", "value"])
    for it, row in zip(trace.iterations, trace.values):
        for name, v in zip(trace.names, row):
            w.writerow([int(it), name, repr(float(v))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_traces(source) -> Trace:
    """Parse the output of :func:`export_traces` (a path or the CSV text)."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        source = Path(source).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(source))
    header = next(reader)
    if header != ["iteration", "parameter", "value"]:
        raise ValueError("trace CSV must have columns iteration, parameter, value")
    names: list[str] = []
    index: dict[str, int] = {}
    data: dict[int, dict[str, float]] = {}
    for rec in reader:
        if not rec:
            continue
        it, name, val = int(rec[0]), rec[1], float(rec[2])
        if name not in index:
            index[name] = len(names)
            names.append(name)
        data.setdefault(it, {})[name] = val
    iterations = np.array(sorted(data), dtype=np.int64)
    values = np.full((iterations.size, len(names)), np.nan)
    for r, it in enumerate(iterations):
        for name, v in data[it].items():
            values[r, index[name]] = v
    return Trace(names, iterations, values)


def split_rhat(segments) -> float | None:
    """Split-chain potential scale reduction factor.

    ``segments`` is a sequence of equal-length draws (chains, or pieces of
    one chain); each is halved before the between/within comparison.
    Returns ``None`` when the within-segment variance is zero.
    """
    arr = np.asarray(segments, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least two segments of equal length")
    if arr.shape[1] < 10:
        raise ValueError("segments must hold at least 10 draws")
    half = arr.shape[1] // 2
    pieces = np.concatenate([arr[:, :half], arr[:, arr.shape[1] - half :]], axis=0)
    n = pieces.shape[1]
    W = float(np.mean(np.var(pieces, axis=1, ddof=1)))
    if W <= 0:
        return None
    B = n * float(np.var(pieces.mean(axis=1), ddof=1))
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def rhat_table(traces: list[Trace], discard: float = 0.5, segments: int = 2) -> dict[str, float | None]:
    """Split R-hat per parameter across one or more chains.

    The first ``discard`` fraction of each trace is dropped; with a single
    chain the remainder is cut into ``segments`` equal pieces.
    """
    if not traces:
        raise ValueError("need at least one trace")
    names = traces[0].names
    out: dict[str, float | None] = {}
    for name in names:
        pieces = []
        for tr in traces:
            x = tr.series(name)
            x = x[int(len(x) * discard) :]
            k = segments if len(traces) == 1 else 1
            n = len(x) // k
            pieces += [x[i * n : (i + 1) * n] for i in range(k)]
        size = min(len(p) for p in pieces)
        pieces = [p[len(p) - size :] for p in pieces]
        try:
            out[name] = split_rhat(pieces)
        except ValueError:
            out[name] = None
    return out


def write_rhat_csv(table: dict[str, float | None], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "split_rhat"])
        for name, v in table.items():
            w.writerow([name, "" if v is None else repr(v)])


@dataclass
class OverlayTable:
    """Observed vs imputed distribution of one column.

    Continuous columns carry ``edges`` and densities; categorical columns
    carry ``levels`` and relative frequencies.
    """

    column: str
    kind: str
    observed: np.ndarray
    imputed: dict[str, np.ndarray]
    edges: np.ndarray | None = None
    levels: np.ndarray | None = None
    n_imputed_cells: int = 0
    extra: dict = field(default_factory=dict)


def _hist_density(x, edges):
    counts, _ = np.histogram(x, bins=edges)
    width = np.diff(edges)
    return counts / (counts.sum() * width)


def _frequencies(x, levels):
    counts = np.array([np.sum(x == lv) for lv in levels], dtype=float)
    return counts / counts.sum()


def overlay_tables(dataset: MixedDataset, imputations) -> list[OverlayTable]:
    """Build one table per column with missing cells.

    ``imputations`` maps a method label to an ImputedSet or a list of
    completed value arrays (a bare list is labelled ``"imputed"``).
    Imputed densities use only the imputed cells and are averaged over the
    M imputations.
    """
    if not isinstance(imputations, dict):
        imputations = {"imputed": imputations}
    series = {
        label: [np.asarray(getattr(d, "values", d), dtype=float) for d in getattr(imp, "datasets", imp)]
        for label, imp in imputations.items()
    }
    for label, arrays in series.items():
        if any(np.isnan(a[~dataset.mask]).any() for a in arrays):
            raise ValueError(f"imputations {label!r} leave cells missing")
    tables = []
    for j, spec in enumerate(dataset.columns):
        miss = ~dataset.mask[:, j]
        if not miss.any():
            continue
        obs = dataset.values[dataset.mask[:, j], j]
        if spec.kind == "continuous":
            lo, hi = float(obs.min()), float(obs.max())
            if hi <= lo:
                lo, hi = lo - 0.5, hi + 0.5
            edges = np.linspace(lo, hi, N_BINS + 1)
            observed = _hist_density(obs, edges)
            imputed = {
                label: np.mean([_hist_density(a[miss, j], edges) for a in arrays], axis=0)
                for label, arrays in series.items()
            }
            tables.append(OverlayTable(spec.name, spec.kind, observed, imputed, edges=edges, n_imputed_cells=int(miss.sum())))
        else:
            # imputed values outside the observed support get their own level
            levels = np.unique(np.concatenate([obs] + [a[miss, j] for arrays in series.values() for a in arrays]))
            if spec.kind == "nominal":
                levels = np.arange(1, spec.levels + 1, dtype=float)
            observed = _frequencies(obs, levels)
            imputed = {
                label: np.mean([_frequencies(a[miss, j], levels) for a in arrays], axis=0)
                for label, arrays in series.items()
            }
            tables.append(OverlayTable(spec.name, spec.kind, observed, imputed, levels=levels, n_imputed_cells=int(miss.sum())))
    return tables


def write_overlay_csv(tables: list[OverlayTable], path) -> None:
    """Long format: column, kind, bin_left, bin_right, level, series, value."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "kind", "bin_left", "bin_right", "level", "series", "value"])
        for t in tables:
            named = [("observed", t.observed)] + list(t.imputed.items())
            for label, vals in named:
                for k, v in enumerate(vals):
                    if t.edges is not None:
                        w.writerow([t.column, t.kind, repr(float(t.edges[k])), repr(float(t.edges[k + 1])), "", label, repr(float(v))])
                    else:
                        lv = t.levels[k]
                        lv_text = str(int(lv)) if float(lv).is_integer() else repr(float(lv))
                        w.writerow([t.column, t.kind, "", "", lv_text, label, repr(float(v))])


def chi_square_distance(observed_freq, imputed_freq, n_observed: int, n_imputed: int) -> float:
    """Chi-square homogeneity statistic between two frequency vectors."""
    a = np.asarray(observed_freq) * n_observed
    b = np.asarray(imputed_freq) * n_imputed
    keep = (a + b) > 0
    a, b = a[keep], b[keep]
    tot = a + b
    ea = tot * n_observed / (n_observed + n_imputed)
    eb = tot * n_imputed / (n_observed + n_imputed)
    return float(np.sum((a - ea) ** 2 / ea + (b - eb) ** 2 / eb))
