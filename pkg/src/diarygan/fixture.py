"""Deterministic synthetic activity-diary populations with known truth.

Stands in for a confidential survey. Two generators are provided:

* :func:`synth_fixture` - the full survey schema (age, sex, mobility, status,
  permit, home coordinates, 2-6 trip home-based tours);
* :func:`synth_toy_fixture` - three categorical attributes and fixed
  three-trip tours, small enough for quick training runs.

Categorical attributes are drawn by quota sampling: each joint cell receives
``round(n * p)`` persons (largest-remainder rounding) and the result is
shuffled, so empirical cell frequencies sit within ``1/n`` of the exported
truth. Ages are then drawn inside their decade bin from a discretized
truncated normal whose mean and standard deviation are 43 and 20 years.

Tours: every activity location of a person lies on a circle of radius ``R``
around home at an independent uniform angle. Home legs therefore have
length ``R`` and activity-to-activity legs have length ``2 R |sin(D/2)|``
with ``D`` uniform, whose conditional CDF is ``(2/pi) asin(l / 2R)``. The
segment-length distribution follows by one-dimensional quadrature over
``R``.
"""
from __future__ import annotations

import itertools
import json
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, special, stats

from .data import (AGE_EDGES, CENTER, HALF_EXTENT, HOME_X, HOME_Y, RawRecord, SurveySchema, Trip, Variable,
                   survey_schema)
from .errors import ParameterError

AGE_MIN, AGE_MAX = 5, 95
AGE_MEAN, AGE_SD = 43.0, 20.0

HOME_SD = 8_000.0
HOME_CLIP = 20_000.0
RADIUS_SHAPE, RADIUS_SCALE = 2.0, 2_500.0
RADIUS_MIN, RADIUS_MAX = 200.0, 15_000.0

SEGMENT_EDGES_KM = tuple(float(k) for k in range(31))  # 1-km bins over [0, 30], plus overflow

TRIPS_PER_TOUR = {2: 0.40, 3: 0.25, 4: 0.17, 5: 0.11, 6: 0.07}

SEX_P = {"M": 0.49, "F": 0.51}

STATUSES = ("full_time", "part_time", "student", "retired", "at_home", "other")
# rows: decade age groups 5-15 ... 85-95
STATUS_BY_AGE = np.array([
    [0.00, 0.00, 1.00, 0.00, 0.00, 0.00],
    [0.25, 0.15, 0.55, 0.00, 0.02, 0.03],
    [0.65, 0.12, 0.08, 0.00, 0.08, 0.07],
    [0.70, 0.10, 0.02, 0.00, 0.10, 0.08],
    [0.68, 0.10, 0.01, 0.01, 0.10, 0.10],
    [0.45, 0.10, 0.00, 0.30, 0.08, 0.07],
    [0.08, 0.06, 0.00, 0.80, 0.03, 0.03],
    [0.02, 0.01, 0.00, 0.93, 0.02, 0.02],
    [0.00, 0.00, 0.00, 0.97, 0.02, 0.01],
])
MOBILE_BY_STATUS = dict(zip(STATUSES, (0.95, 0.92, 0.93, 0.75, 0.70, 0.80)))
# P(permit = yes | age group, sex)
PERMIT_BY_AGE_SEX = {
    "M": (0.00, 0.55, 0.85, 0.88, 0.88, 0.86, 0.80, 0.60, 0.40),
    "F": (0.00, 0.50, 0.80, 0.82, 0.80, 0.76, 0.65, 0.45, 0.25),
}
ACTIVITY_PURPOSES = ("work", "school", "shopping", "leisure", "escort", "other")
PURPOSE_BY_STATUS = {
    "full_time": (0.55, 0.01, 0.15, 0.12, 0.07, 0.10),
    "part_time": (0.40, 0.03, 0.20, 0.17, 0.08, 0.12),
    "student": (0.05, 0.60, 0.10, 0.15, 0.03, 0.07),
    "retired": (0.01, 0.01, 0.40, 0.35, 0.08, 0.15),
    "at_home": (0.02, 0.02, 0.35, 0.25, 0.21, 0.15),
    "other": (0.10, 0.05, 0.30, 0.25, 0.10, 0.20),
}

TOY_STATUSES = ("worker", "student", "other")
TOY_STATUS_BY_SEX = {"M": (0.60, 0.25, 0.15), "F": (0.50, 0.30, 0.20)}
TOY_PERMIT_BY_STATUS = {"worker": 0.85, "student": 0.40, "other": 0.60}
TOY_PURPOSES = ("work", "school", "shopping", "home")
TOY_PURPOSE_BY_STATUS = {"worker": (0.70, 0.0, 0.30), "student": (0.05, 0.75, 0.20),
                         "other": (0.10, 0.10, 0.80)}
TOY_TRIPS = 3


# ---------------------------------------------------------------------------
# age distribution


def _age_pmf_for(mu, sigma):
    ages = np.arange(AGE_MIN, AGE_MAX + 1)
    cdf = stats.norm.cdf(np.append(ages - 0.5, AGE_MAX + 0.5), mu, sigma)
    p = np.diff(cdf)
    return ages, p / p.sum()


@lru_cache(maxsize=None)
def age_distribution():
    """Integer ages 5..95 with mean 43 and sd 20 (discretized truncated normal).

    Returns ``(ages, pmf, mu, sigma)`` where ``mu``/``sigma`` parameterize the
    underlying untruncated normal.
    """
    def moments_gap(theta):
        ages, p = _age_pmf_for(theta[0], abs(theta[1]))
        m = (ages * p).sum()
        sd = np.sqrt(((ages - m) ** 2 * p).sum())
        return [m - AGE_MEAN, sd - AGE_SD]

    mu, sigma = optimize.fsolve(moments_gap, [AGE_MEAN, AGE_SD], xtol=1e-13)
    ages, p = _age_pmf_for(mu, abs(sigma))
    return ages, p, float(mu), float(abs(sigma))


def age_group_probs() -> np.ndarray:
    ages, p, _, _ = age_distribution()
    groups = np.minimum(np.searchsorted(AGE_EDGES, ages, side="right") - 1, len(AGE_EDGES) - 2)
    return np.bincount(groups, weights=p, minlength=len(AGE_EDGES) - 1)


def age_group_labels() -> list[str]:
    return survey_schema().variable("P_AGE").bin_labels()


# ---------------------------------------------------------------------------
# tour geometry


def _radius_norm():
    lo = special.gammainc(RADIUS_SHAPE, RADIUS_MIN / RADIUS_SCALE)
    hi = special.gammainc(RADIUS_SHAPE, RADIUS_MAX / RADIUS_SCALE)
    return lo, hi


def _radius_cdf(r):
    lo, hi = _radius_norm()
    r = np.clip(r, RADIUS_MIN, RADIUS_MAX)
    return np.clip((special.gammainc(RADIUS_SHAPE, r / RADIUS_SCALE) - lo) / (hi - lo), 0.0, 1.0)


def _radius_pdf(r):
    lo, hi = _radius_norm()
    x = r / RADIUS_SCALE
    return x ** (RADIUS_SHAPE - 1) * np.exp(-x) / (special.gamma(RADIUS_SHAPE) * RADIUS_SCALE * (hi - lo))


def _sample_radius(rng, size):
    lo, hi = _radius_norm()
    return RADIUS_SCALE * special.gammaincinv(RADIUS_SHAPE, lo + (hi - lo) * rng.uniform(size=size))


def _chord_cdf(length_m, r):
    return (2.0 / np.pi) * np.arcsin(np.clip(length_m / (2.0 * r), 0.0, 1.0))


def _chord_mixture_cdf(length_m):
    """P(chord <= length) with the radius integrated out."""
    if length_m <= 0:
        return 0.0
    kink = length_m / 2.0
    below = 0.0
    if kink > RADIUS_MIN:
        # every chord of a circle with radius <= length/2 is shorter than length
        below = float(_radius_cdf(min(kink, RADIUS_MAX)))
    if kink >= RADIUS_MAX:
        return below
    lo = max(kink, RADIUS_MIN)
    val, _ = integrate.quad(lambda r: _chord_cdf(length_m, r) * _radius_pdf(r), lo, RADIUS_MAX,
                            limit=200, epsabs=1e-14, epsrel=1e-12)
    return below + val


def segment_length_probs(trips_dist: dict, edges_km=SEGMENT_EDGES_KM) -> np.ndarray:
    """Probability of a random tour segment falling in each km bin (+ overflow)."""
    edges_m = np.asarray(edges_km) * 1000.0
    home = np.diff(_radius_cdf(edges_m))
    chord = np.diff([_chord_mixture_cdf(e) for e in edges_m])
    mean_trips = sum(m * p for m, p in trips_dist.items())
    mean_chords = sum((m - 2) * p for m, p in trips_dist.items())
    probs = (2.0 * home + mean_chords * chord) / mean_trips
    return np.append(probs, max(0.0, 1.0 - probs.sum()))


def _tours(rng, homes, n_trips, purposes):
    """Tours for all persons; ``purposes[i]`` lists the purposes of person i's trips."""
    n = len(homes)
    radius = _sample_radius(rng, n)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(n, max(n_trips) - 1))
    out = []
    for i in range(n):
        h = (float(homes[i, 0]), float(homes[i, 1]))
        pts = [h] + [(h[0] + radius[i] * np.cos(a), h[1] + radius[i] * np.sin(a))
                     for a in angles[i, :n_trips[i] - 1]] + [h]
        out.append([Trip(float(pts[k][0]), float(pts[k][1]), float(pts[k + 1][0]), float(pts[k + 1][1]),
                         purposes[i][k]) for k in range(n_trips[i])])
    return out


def _homes(rng, n):
    off = np.clip(rng.normal(0.0, HOME_SD, size=(n, 2)), -HOME_CLIP, HOME_CLIP)
    return np.asarray(CENTER) + off


def _categorical(rng, probs_rows, size_cols):
    """One categorical draw per row/column from per-row probability vectors."""
    u = rng.uniform(size=(len(probs_rows), size_cols))
    cum = np.cumsum(np.asarray(probs_rows), axis=1)
    cum[:, -1] = 1.0
    return (u[:, :, None] > cum[:, None, :]).sum(axis=2)


# ---------------------------------------------------------------------------
# quota sampling


def quota_counts(probs, n: int) -> np.ndarray:
    """Largest-remainder allocation of ``n`` units to cells with probabilities ``probs``."""
    probs = np.asarray(probs, dtype=float)
    raw = probs * n
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))  # ties by cell index
        counts[order[:short]] += 1
    return counts


def _quota_cells(probs, n, rng):
    cells = np.repeat(np.arange(len(probs)), quota_counts(probs, n))
    return cells[rng.permutation(n)]


# ---------------------------------------------------------------------------
# full survey-like fixture


def _joint_cells():
    """Enumerate (labels tuple, probability) for (age group, sex, mobile, status, permit)."""
    groups = age_group_labels()
    pg = age_group_probs()
    out = []
    for (gi, g), sex, mob, (si, st), permit in itertools.product(
            enumerate(groups), ("M", "F"), ("yes", "no"), enumerate(STATUSES), ("yes", "no")):
        pm = MOBILE_BY_STATUS[st]
        pp = PERMIT_BY_AGE_SEX[sex][gi]
        p = (pg[gi] * SEX_P[sex] * STATUS_BY_AGE[gi, si]
             * (pm if mob == "yes" else 1 - pm) * (pp if permit == "yes" else 1 - pp))
        out.append(((g, sex, mob, st, permit), p))
    return out


FIXTURE_JOINT_VARIABLES = ("P_AGE", "P_SEXE", "P_MOBIL", "P_STATUT", "PERMIT")


def synth_fixture(seed: int, n: int) -> list[RawRecord]:
    """``n`` survey-like persons with home-based tours, deterministic in ``seed``."""
    if n < 1:
        raise ParameterError(f"fixture size must be >= 1, got {n}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    cells = _joint_cells()
    picks = _quota_cells([p for _, p in cells], n, rng)
    labels = [cells[c][0] for c in picks]
    ages, pmf, _, _ = age_distribution()
    group_of_age = np.minimum(np.searchsorted(AGE_EDGES, ages, side="right") - 1, len(AGE_EDGES) - 2)
    groups = age_group_labels()
    age_rows = np.array([np.where(group_of_age == groups.index(lab[0]), pmf, 0.0) for lab in labels])
    age_rows /= age_rows.sum(axis=1, keepdims=True)
    person_ages = ages[_categorical(rng, age_rows, 1)[:, 0]]
    homes = _homes(rng, n)
    trip_ms = np.array(list(TRIPS_PER_TOUR))
    m = trip_ms[_categorical(rng, np.tile(list(TRIPS_PER_TOUR.values()), (n, 1)), 1)[:, 0]]
    act = _categorical(rng, [PURPOSE_BY_STATUS[lab[3]] for lab in labels], int(trip_ms.max()) - 1)
    purposes = [[ACTIVITY_PURPOSES[k] for k in act[i, :m[i] - 1]] + ["home"] for i in range(n)]
    tours = _tours(rng, homes, m, purposes)
    records = []
    for pid, (g, sex, mob, status, permit) in enumerate(labels):
        attrs = {"P_AGE": int(person_ages[pid]), "P_SEXE": sex, "P_MOBIL": mob, "P_STATUT": status,
                 "PERMIT": permit, HOME_X: float(homes[pid, 0]), HOME_Y: float(homes[pid, 1])}
        records.append(RawRecord(pid, attrs, tours[pid]))
    return records


def fixture_truth() -> dict:
    """Analytic distributions the fixture is drawn from (JSON-serializable)."""
    ages, pmf, mu, sigma = age_distribution()
    joint = {"|".join(labels): float(p) for labels, p in _joint_cells()}
    return {
        "variables": list(FIXTURE_JOINT_VARIABLES),
        "joint": joint,
        "age": {"pmf": {str(int(a)): float(p) for a, p in zip(ages, pmf)}, "mean": AGE_MEAN, "sd": AGE_SD,
                "min": AGE_MIN, "max": AGE_MAX, "normal_mu": mu, "normal_sigma": sigma},
        "trips_per_tour": {str(k): v for k, v in TRIPS_PER_TOUR.items()},
        "segment_km": {"edges": list(SEGMENT_EDGES_KM),
                       "probs": [float(x) for x in segment_length_probs(TRIPS_PER_TOUR)]},
    }


# ---------------------------------------------------------------------------
# toy fixture


def toy_schema() -> SurveySchema:
    xr = (CENTER[0] - HALF_EXTENT, CENTER[0] + HALF_EXTENT)
    yr = (CENTER[1] - HALF_EXTENT, CENTER[1] + HALF_EXTENT)
    return SurveySchema(
        variables=(Variable("P_SEXE", "binary", labels=("M", "F"), alias="Gender"),
                   Variable("P_STATUT", "categorical", labels=TOY_STATUSES, alias="Status"),
                   Variable("PERMIT", "categorical", labels=("yes", "no"), alias="Permit")),
        purposes=TOY_PURPOSES, x_range=xr, y_range=yr)


TOY_JOINT_VARIABLES = ("P_SEXE", "P_STATUT", "PERMIT")


def _toy_cells():
    out = []
    for sex, (si, st), permit in itertools.product(("M", "F"), enumerate(TOY_STATUSES), ("yes", "no")):
        pp = TOY_PERMIT_BY_STATUS[st]
        out.append(((sex, st, permit), 0.5 * TOY_STATUS_BY_SEX[sex][si] * (pp if permit == "yes" else 1 - pp)))
    return out


def synth_toy_fixture(seed: int, n: int) -> list[RawRecord]:
    """Three categorical attributes plus fixed three-trip home-based tours."""
    if n < 1:
        raise ParameterError(f"fixture size must be >= 1, got {n}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    cells = _toy_cells()
    picks = _quota_cells([p for _, p in cells], n, rng)
    labels = [cells[c][0] for c in picks]
    homes = _homes(rng, n)
    acts = TOY_PURPOSES[:-1]
    k = _categorical(rng, [TOY_PURPOSE_BY_STATUS[lab[1]] for lab in labels], TOY_TRIPS - 1)
    purposes = [[acts[j] for j in k[i]] + ["home"] for i in range(n)]
    tours = _tours(rng, homes, np.full(n, TOY_TRIPS), purposes)
    return [RawRecord(pid, {"P_SEXE": sex, "P_STATUT": st, "PERMIT": permit}, tours[pid])
            for pid, (sex, st, permit) in enumerate(labels)]


def toy_fixture_truth() -> dict:
    return {
        "variables": list(TOY_JOINT_VARIABLES),
        "joint": {"|".join(labels): float(p) for labels, p in _toy_cells()},
        "trips_per_tour": {str(TOY_TRIPS): 1.0},
        "segment_km": {"edges": list(SEGMENT_EDGES_KM),
                       "probs": [float(x) for x in segment_length_probs({TOY_TRIPS: 1.0})]},
    }


def truth_marginal(truth: dict, variable: str) -> dict[str, float]:
    """Marginalize the exported joint onto one variable."""
    names = truth["variables"]
    k = names.index(variable)
    out: dict[str, float] = {}
    for key, p in truth["joint"].items():
        label = key.split("|")[k]
        out[label] = out.get(label, 0.0) + p
    return out


def truth_json(truth: dict) -> str:
    return json.dumps(truth, sort_keys=True, indent=1) + "\n"
