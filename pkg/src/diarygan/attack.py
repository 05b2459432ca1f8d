"""White-box membership inference against a trained discriminator.

The adversary scores every candidate record with the discriminator and reads
higher scores as evidence of training-set membership. Score distributions
for known members and non-members are histogrammed on a shared layout and
summarized by the rank AUC.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .errors import ParameterError
from .nets import DiscriminatorParams, discriminator_forward

N_BINS = 50


@dataclass
class AttackReport:
    train_scores: np.ndarray
    validation_scores: np.ndarray
    bin_edges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    train_hist: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    validation_hist: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    auc: float = float("nan")
    peaks: dict = field(default_factory=dict)
    loss: str = "standard"
    training_fraction: float | None = None

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "training_fraction": self.training_fraction,
            "auc": self.auc,
            "peaks": self.peaks,
            "train_scores": [float(s) for s in self.train_scores],
            "validation_scores": [float(s) for s in self.validation_scores],
            "bin_edges": [float(e) for e in self.bin_edges],
            "train_hist": [int(c) for c in self.train_hist],
            "validation_hist": [int(c) for c in self.validation_hist],
        }


def _inputs(data):
    if isinstance(data, Dataset):
        return data.tabular, data.sequences
    tab, seq = data
    return np.asarray(tab, dtype=float), np.asarray(seq, dtype=float)


def discriminator_scores(d: DiscriminatorParams, data, loss: str = "standard") -> np.ndarray:
    tab, seq = _inputs(data)
    return np.asarray(discriminator_forward(d, tab, seq, loss)).reshape(-1)


def separability(train_scores, validation_scores) -> float:
    """P(random train score > random validation score), ties counted one half."""
    a = np.asarray(train_scores, dtype=float).reshape(-1)
    b = np.asarray(validation_scores, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ParameterError("both score lists must be nonempty")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[:a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def shared_histograms(train_scores, validation_scores, n_bins: int = N_BINS):
    """Histograms of both lists on equal bins spanning the pooled range.

    A constant pooled score collapses the layout to a single bin.
    """
    a, b = np.asarray(train_scores, dtype=float), np.asarray(validation_scores, dtype=float)
    pooled = np.concatenate([a, b])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        edges = np.array([lo, hi])
    else:
        edges = np.linspace(lo, hi, n_bins + 1)
    return edges, np.histogram(a, edges)[0], np.histogram(b, edges)[0]


def count_peaks(hist) -> int:
    """Number of local maxima (plateaus count once) in a histogram."""
    h = np.asarray(hist)
    if h.size == 0 or h.max() == 0:
        return 0
    padded = np.concatenate([[-1], h, [-1]])
    peaks, i = 0, 1
    while i <= h.size:
        j = i
        while j + 1 <= h.size and padded[j + 1] == padded[i]:
            j += 1
        if padded[i] > padded[i - 1] and padded[i] > padded[j + 1] and padded[i] > 0:
            peaks += 1
        i = j + 1
    return peaks


def rescale(scores) -> np.ndarray:
    """Min-max map to [0, 1]; a constant vector maps to 0.5."""
    s = np.asarray(scores, dtype=float)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def build_report(train_scores, validation_scores, loss="standard", training_fraction=None) -> AttackReport:
    a, b = np.asarray(train_scores, dtype=float), np.asarray(validation_scores, dtype=float)
    edges, ha, hb = shared_histograms(a, b)
    return AttackReport(a, b, edges, ha, hb, separability(a, b),
                        {"train": count_peaks(ha), "validation": count_peaks(hb), "pooled": count_peaks(ha + hb)},
                        loss, training_fraction)


def mia_scores(d: DiscriminatorParams, train_set, validation_set, loss: str = "standard",
               training_fraction: float | None = None) -> AttackReport:
    """Score both sets with the discriminator and summarize their separability.

    Critic values (wasserstein loss) are min-max rescaled over the pooled
    scores, which leaves the AUC unchanged. ``training_fraction`` is recorded
    only.
    """
    a = discriminator_scores(d, train_set, loss)
    b = discriminator_scores(d, validation_set, loss)
    if a.size == 0 or b.size == 0:
        raise ParameterError("both candidate sets must be nonempty")
    if loss == "wasserstein":
        pooled = rescale(np.concatenate([a, b]))
        a, b = pooled[:a.size], pooled[a.size:]
    return build_report(a, b, loss, training_fraction)


def write_histogram_csv(path, report: AttackReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "train_count", "validation_count"])
        for i in range(len(report.train_hist)):
            w.writerow([repr(float(report.bin_edges[i])), repr(float(report.bin_edges[i + 1])),
                        int(report.train_hist[i]), int(report.validation_hist[i])])
