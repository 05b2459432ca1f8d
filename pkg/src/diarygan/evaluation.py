"""Distributional utility metrics for synthetic diaries.

Histograms are built from decoded records through the schema's categorical
views, so aliases ("Gender"), binned numerics ("AgeGroup") and derived
variables ("Employed") are all addressable by name.

SRMSE follows the standardized form

    SRMSE = sqrt(sum_b (p_hat_b - p_b)^2 / N_b) / (sum_b p_b / N_b)

computed on probability vectors, with ``N_b`` the number of bins unless a
different constant is passed. Pearson correlation and R^2 are computed on
count vectors.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, RawRecord, SurveySchema
from .errors import CombinatorialBlowupError, ParameterError, StructuralError

DEFAULT_JOINT_CAP = 1_000_000
CONDITIONAL_PAIRS = (("Permit", "Gender"), ("AgeGroup", "Gender"), ("AgeGroup", "Employed"),
                     ("Employed", "Gender"))
JOINT_VARIABLES = ("AgeGroup", "Employed", "Gender")
TOUR_EDGES_KM = tuple(float(k) for k in range(31))


@dataclass
class Histogram:
    variables: tuple
    labels: list          # one label (str) per bin; joint bins use "a|b|..."
    counts: np.ndarray    # float array so reference probabilities can be stored directly

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.shape != (len(self.labels),):
            raise StructuralError(f"{len(self.labels)} labels but counts of shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ParameterError("histogram counts must be nonnegative")

    @property
    def n_bins(self) -> int:
        return len(self.labels)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def defined(self) -> bool:
        """False for an empty histogram, whose probabilities are undefined."""
        return self.total > 0

    @property
    def probs(self) -> np.ndarray:
        if not self.defined:
            return np.full(self.n_bins, np.nan)
        return self.counts / self.total

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.probs.tolist()))

    @classmethod
    def from_probabilities(cls, variables, labels, probs):
        return cls(tuple(variables), list(labels), np.asarray(probs, dtype=float))


@dataclass
class ConditionalTable:
    """Counts and ``p(a | b)`` for a pair of variables; columns are values of ``b``."""

    var_a: str
    var_b: str
    labels_a: list
    labels_b: list
    counts: np.ndarray  # |a| x |b|

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=0) > 0

    @property
    def probs(self) -> np.ndarray:
        col = self.counts.sum(axis=0)
        out = np.full(self.counts.shape, np.nan)
        out[:, col > 0] = self.counts[:, col > 0] / col[col > 0]
        return out


@dataclass
class SrmseReport:
    srmse: float
    pearson: float
    r_squared: float
    n_bins: int

    def to_dict(self):
        return {"srmse": _num(self.srmse), "pearson": _num(self.pearson),
                "r_squared": _num(self.r_squared), "n_bins": self.n_bins}


@dataclass
class PcaResult:
    components: np.ndarray          # k x p, unit rows, descending eigenvalue order
    eigenvalues: np.ndarray         # all p eigenvalues, descending
    explained_variance_ratio: np.ndarray  # all p ratios, sum to 1
    loadings: np.ndarray            # k x p: eigenvector entry * sqrt(eigenvalue)
    scores: np.ndarray              # n x k
    columns: list                   # names of the retained columns
    dropped: list = field(default_factory=list)  # zero-variance columns


@dataclass
class TourLengthReport:
    distances_km: np.ndarray
    histogram: Histogram
    comparison: SrmseReport | None = None


def _num(x):
    return None if x is None or not math.isfinite(x) else float(x)


def _records(data) -> list[RawRecord]:
    if isinstance(data, Dataset):
        return data.records()
    return list(data)


# ---------------------------------------------------------------------------
# histograms


def marginal(data, variable: str, schema: SurveySchema | None = None) -> Histogram:
    schema = schema or data.schema
    labels, fn = schema.categorical_view(variable)
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros(len(labels))
    for r in _records(data):
        counts[index[fn(r)]] += 1
    return Histogram((variable,), labels, counts)


def joint(data, variables, schema: SurveySchema | None = None, cap: int = DEFAULT_JOINT_CAP) -> Histogram:
    """Full cross-product table, zero cells included, in row-major label order."""
    schema = schema or data.schema
    if not variables:
        raise ParameterError("joint needs at least one variable")
    views = [schema.categorical_view(v) for v in variables]
    sizes = [len(lab) for lab, _ in views]
    n_cells = math.prod(sizes)
    if n_cells > cap:
        raise CombinatorialBlowupError(
            f"joint over {list(variables)} has {n_cells} cells, above the cap of {cap}")
    index = [{lab: i for i, lab in enumerate(labs)} for labs, _ in views]
    counts = np.zeros(sizes)
    for r in _records(data):
        counts[tuple(ix[fn(r)] for ix, (_, fn) in zip(index, views))] += 1
    labels = ["|".join(t) for t in itertools.product(*(labs for labs, _ in views))]
    return Histogram(tuple(variables), labels, counts.reshape(-1))


def conditional(data, var_a: str, var_b: str, schema: SurveySchema | None = None) -> ConditionalTable:
    """``p(var_a | var_b)``; columns without support are flagged by ``support``."""
    schema = schema or data.schema
    la, fa = schema.categorical_view(var_a)
    lb, fb = schema.categorical_view(var_b)
    ia = {lab: i for i, lab in enumerate(la)}
    ib = {lab: i for i, lab in enumerate(lb)}
    counts = np.zeros((len(la), len(lb)))
    for r in _records(data):
        counts[ia[fa(r)], ib[fb(r)]] += 1
    return ConditionalTable(var_a, var_b, la, lb, counts)


# ---------------------------------------------------------------------------
# fit statistics


def srmse_vectors(p_hat, p, n_b: float | None = None) -> float:
    p_hat, p = np.asarray(p_hat, dtype=float), np.asarray(p, dtype=float)
    if p_hat.shape != p.shape:
        raise StructuralError(f"bin structures differ: {p_hat.shape} vs {p.shape}")
    n_b = p.size if n_b is None else n_b
    if not n_b > 0:
        raise ParameterError("N_b must be > 0")
    denom = p.sum() / n_b
    if denom == 0:
        raise ParameterError("reference distribution has no mass")
    return float(np.sqrt(((p_hat - p) ** 2).sum() / n_b) / denom)


def _pearson(x, y) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float((dx * dx).sum() * (dy * dy).sum()))
    return float((dx * dy).sum() / den) if den > 0 else float("nan")


def _r_squared(pred, ref) -> float:
    ss_tot = float(((ref - ref.mean()) ** 2).sum())
    if ss_tot == 0:
        return float("nan")
    return 1.0 - float(((ref - pred) ** 2).sum()) / ss_tot


def fit_report(est_counts, ref_counts, n_b: float | None = None) -> SrmseReport:
    est, ref = np.asarray(est_counts, dtype=float), np.asarray(ref_counts, dtype=float)
    if est.shape != ref.shape:
        raise StructuralError(f"bin structures differ: {est.shape} vs {ref.shape}")
    if not (est.sum() > 0 and ref.sum() > 0):
        raise ParameterError("both histograms need positive mass")
    p_hat, p = est / est.sum(), ref / ref.sum()
    # synthetic counts rescaled to the reference total before R^2
    return SrmseReport(srmse_vectors(p_hat, p, n_b), _pearson(est, ref),
                       _r_squared(p_hat * ref.sum(), ref), int(p.size))


def srmse(estimated: Histogram, reference: Histogram, n_b: float | None = None) -> SrmseReport:
    if list(estimated.labels) != list(reference.labels):
        raise StructuralError(
            f"histograms over {estimated.variables} and {reference.variables} have different bins")
    return fit_report(estimated.counts, reference.counts, n_b)


def conditional_srmse(estimated: ConditionalTable, reference: ConditionalTable,
                      n_b: float | None = None) -> SrmseReport:
    """Compare ``p(a|b)`` over conditioning values supported in both tables."""
    if (estimated.labels_a, estimated.labels_b) != (reference.labels_a, reference.labels_b):
        raise StructuralError("conditional tables have different bins")
    cols = estimated.support & reference.support
    if not cols.any():
        raise ParameterError("no conditioning value has support in both tables")
    p_hat = estimated.probs[:, cols].reshape(-1)
    p = reference.probs[:, cols].reshape(-1)
    est_c = estimated.counts[:, cols].reshape(-1)
    ref_c = reference.counts[:, cols].reshape(-1)
    return SrmseReport(srmse_vectors(p_hat, p, n_b), _pearson(est_c, ref_c),
                       _r_squared(est_c / est_c.sum() * ref_c.sum(), ref_c), int(p.size))


# ---------------------------------------------------------------------------
# PCA


def encoded_columns(schema: SurveySchema) -> list[str]:
    out = []
    for v in schema.variables:
        out += [f"{v.name}={lab}" for lab in v.labels] if v.is_categorical else [v.name]
    return out


def pca(data, k: int, columns: list | None = None) -> PcaResult:
    """PCA of the correlation matrix of ``data`` (encoded matrix or a Dataset)."""
    if isinstance(data, Dataset):
        columns = encoded_columns(data.schema)
        x = data.tabular
    else:
        x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ParameterError("PCA needs a 2-D matrix with at least 2 rows")
    columns = list(columns) if columns is not None else [f"x{j}" for j in range(x.shape[1])]
    sd = x.std(axis=0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(x).max(axis=0))
    dropped = [c for c, kept in zip(columns, keep) if not kept]
    x, sd = x[:, keep], sd[keep]
    p = x.shape[1]
    if not 1 <= k <= p:
        raise ParameterError(f"k must lie in [1, {p}] (non-constant columns), got {k}")
    z = (x - x.mean(axis=0)) / sd
    corr = z.T @ z / z.shape[0]
    vals, vecs = np.linalg.eigh(corr)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order].T
    for row in vecs:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    comps = vecs[:k]
    return PcaResult(comps, vals, vals / vals.sum(), comps * np.sqrt(vals[:k])[:, None], z @ comps.T,
                     [c for c, kept in zip(columns, keep) if kept], dropped)


# ---------------------------------------------------------------------------
# tours


def tour_edges_labels(edges=TOUR_EDGES_KM) -> list[str]:
    labels = [f"{int(edges[i])}-{int(edges[i + 1])}" for i in range(len(edges) - 1)]
    return labels + [f">{int(edges[-1])}"]


def segment_distances_km(data) -> np.ndarray:
    out = [math.hypot(t.dx - t.ox, t.dy - t.oy) / 1000.0 for r in _records(data) for t in r.trips]
    return np.asarray(out, dtype=float)


def length_histogram(distances_km, edges=TOUR_EDGES_KM) -> Histogram:
    """1-km bins ``[k, k+1)`` over [0, 30] (last bin closed) plus an overflow bin."""
    d = np.asarray(distances_km, dtype=float)
    if (d < 0).any():
        raise ParameterError("distances must be nonnegative")
    e = np.asarray(edges)
    idx = np.minimum(np.searchsorted(e, d, side="right") - 1, len(e) - 2)
    idx[d > e[-1]] = len(e) - 1
    counts = np.bincount(idx, minlength=len(e)).astype(float)
    return Histogram(("segment_km",), tour_edges_labels(edges), counts)


def tour_lengths(data, reference=None) -> TourLengthReport:
    """Segment lengths (km) of every trip, histogrammed, optionally compared to a reference.

    ``reference`` may be another dataset/record list, a Histogram or a
    probability vector over the same bins.
    """
    d = segment_distances_km(data)
    hist = length_histogram(d)
    comparison = None
    if reference is not None:
        if isinstance(reference, Histogram):
            ref = reference
        elif isinstance(reference, Dataset) or (len(reference) and isinstance(reference[0], RawRecord)):
            ref = length_histogram(segment_distances_km(reference))
        else:
            ref = Histogram.from_probabilities(("segment_km",), hist.labels, reference)
        comparison = srmse(hist, ref)
    return TourLengthReport(d, hist, comparison)


# ---------------------------------------------------------------------------
# emitters


def write_comparison_csv(path, synthetic: Histogram, reference: Histogram) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "reference_count", "synthetic_count", "reference_p", "synthetic_p"])
        for lab, rc, sc, rp, sp in zip(reference.labels, reference.counts, synthetic.counts,
                                        reference.probs, synthetic.probs):
            w.writerow([lab, repr(float(rc)), repr(float(sc)), repr(float(rp)), repr(float(sp))])


def write_conditional_csv(path, synthetic: ConditionalTable, reference: ConditionalTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([reference.var_a, reference.var_b, "supported", "reference_count", "synthetic_count",
                    "reference_p", "synthetic_p"])
        sup = reference.support & synthetic.support
        rp, sp = reference.probs, synthetic.probs
        for j, lb in enumerate(reference.labels_b):
            for i, la in enumerate(reference.labels_a):
                w.writerow([la, lb, int(sup[j]), repr(float(reference.counts[i, j])),
                            repr(float(synthetic.counts[i, j])),
                            "" if np.isnan(rp[i, j]) else repr(float(rp[i, j])),
                            "" if np.isnan(sp[i, j]) else repr(float(sp[i, j]))])


def write_matrix_csv(path, matrix, header, row_names=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(([""] if row_names is not None else []) + list(header))
        for i, row in enumerate(np.atleast_2d(matrix)):
            cells = [repr(float(v)) for v in row]
            w.writerow(([row_names[i]] if row_names is not None else []) + cells)


def write_pca_csvs(out_dir, result: PcaResult) -> list[Path]:
    out_dir = Path(out_dir)
    names = [f"PC{i + 1}" for i in range(result.components.shape[0])]
    paths = [out_dir / "pca_components.csv", out_dir / "pca_loadings.csv", out_dir / "pca_scores.csv",
             out_dir / "pca_explained.csv"]
    write_matrix_csv(paths[0], result.components, result.columns, names)
    write_matrix_csv(paths[1], result.loadings, result.columns, names)
    write_matrix_csv(paths[2], result.scores, names)
    write_matrix_csv(paths[3], np.column_stack([result.eigenvalues, result.explained_variance_ratio]),
                     ["eigenvalue", "explained_variance_ratio"],
                     [f"PC{i + 1}" for i in range(result.eigenvalues.size)])
    return paths


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
