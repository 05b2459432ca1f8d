"""Activity-diary schema, reversible encoding, tour filtering and dataset files.

A person is a :class:`RawRecord`: tabular attributes keyed by schema variable
name plus an ordered chain of :class:`Trip` objects. The :class:`Codec` maps a
record to an :class:`EncodedAgent`:

* tabular vector - one-hot blocks for binary/categorical variables, a single
  affine-scaled channel in [-1, 1] for numeric/geospatial variables;
* sequence matrix ``T x 5`` - one row per trip with layout
  ``[orig_x, orig_y, dest_x, dest_y, purpose]``, zero rows after the tour ends.

The purpose channel uses a grid of evenly spaced values in [-1, 1] whose
centre value 0.0 is the reserved ``END`` label, so zero padding rows decode as
"tour finished". Real purpose labels take the remaining grid points in order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .errors import CapacityError, DimensionError, IntegrityError, ParameterError, SchemaError

KINDS = ("numeric", "binary", "categorical", "geospatial")
END = "END"
SEQ_FEATURES = 5
DEFAULT_MAX_LEN = 20
MIN_LOCATIONS, MAX_LOCATIONS = 3, 15

HOME_X, HOME_Y = "M_DOMXCOOR", "M_DOMYCOOR"
TRIP_COLUMNS = ("D_ORIXCOOR", "D_ORIYCOOR", "D_DESXCOOR", "D_DESYCOOR", "D_MOTIF")
PERSON_ID = "person_id"

DATASET_MAGIC = b"DPDS"
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str
    labels: tuple = ()
    low: float | None = None
    high: float | None = None
    bins: tuple = ()  # bin edges used when a numeric variable is histogrammed
    alias: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.is_categorical:
            if not self.labels:
                raise SchemaError(f"variable {self.name!r}: empty label list")
            if len(set(self.labels)) != len(self.labels):
                raise SchemaError(f"variable {self.name!r}: duplicate labels")
            if self.kind == "binary" and len(self.labels) != 2:
                raise SchemaError(f"binary variable {self.name!r} needs exactly 2 labels")
        else:
            if self.low is None or self.high is None or not self.low < self.high:
                raise SchemaError(f"variable {self.name!r}: need numeric range with min < max")

    @property
    def is_categorical(self) -> bool:
        return self.kind in ("binary", "categorical")

    @property
    def width(self) -> int:
        return len(self.labels) if self.is_categorical else 1

    def bin_labels(self) -> list[str]:
        """Category labels, or ``"lo-hi"`` labels for the numeric bin edges."""
        if self.is_categorical:
            return list(self.labels)
        if not self.bins:
            raise SchemaError(f"numeric variable {self.name!r} declares no bin edges")
        e = self.bins
        return [f"{_fmt(e[i])}-{_fmt(e[i + 1])}" for i in range(len(e) - 1)]

    def bin_index(self, value) -> int:
        """Bin of ``value``; numeric bins are [lo, hi) except the last, which is closed."""
        if self.is_categorical:
            return self.labels.index(value)
        e = self.bins
        v = float(value)
        if v < e[0] or v > e[-1]:
            raise SchemaError(f"{self.name}={v} outside bin edges [{e[0]}, {e[-1]}]")
        return min(int(np.searchsorted(e, v, side="right")) - 1, len(e) - 2)

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "labels": list(self.labels),
                "low": self.low, "high": self.high, "bins": list(self.bins), "alias": self.alias}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["kind"], tuple(d.get("labels", ())), d.get("low"), d.get("high"),
                   tuple(d.get("bins", ())), d.get("alias"))


@dataclass(frozen=True)
class DerivedVariable:
    """A categorical view of another categorical variable (e.g. Employed from status)."""

    name: str
    source: str
    mapping: tuple  # pairs (source label, derived label)
    labels: tuple

    def to_dict(self):
        return {"name": self.name, "source": self.source,
                "mapping": [list(p) for p in self.mapping], "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["source"], tuple(tuple(p) for p in d["mapping"]), tuple(d["labels"]))


def _fmt(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


@dataclass(frozen=True)
class SurveySchema:
    variables: tuple
    purposes: tuple
    x_range: tuple
    y_range: tuple
    derived: tuple = ()

    def __post_init__(self):
        names = [v.name for v in self.variables] + [d.name for d in self.derived]
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be unique")
        if not self.purposes or END in self.purposes:
            raise SchemaError(f"purpose labels must be nonempty and must not contain {END!r}")
        for lo, hi in (self.x_range, self.y_range):
            if not lo < hi:
                raise SchemaError("coordinate range needs min < max")

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def variable(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name or v.alias == name:
                return v
        raise SchemaError(f"unknown variable {name!r}")

    def categorical_view(self, name: str):
        """Return ``(labels, fn)`` where ``fn(record)`` gives the bin label of a record.

        Works for categorical/binary variables, binned numeric variables and
        derived variables, by name or alias.
        """
        for d in self.derived:
            if d.name == name:
                table = dict(d.mapping)
                src = d.source
                return list(d.labels), lambda r: table[r.attributes[src]]
        var = self.variable(name)
        labels = var.bin_labels()
        if var.is_categorical:
            return labels, lambda r: r.attributes[var.name]
        return labels, lambda r: labels[var.bin_index(r.attributes[var.name])]

    def to_dict(self):
        return {"variables": [v.to_dict() for v in self.variables], "purposes": list(self.purposes),
                "x_range": list(self.x_range), "y_range": list(self.y_range),
                "derived": [d.to_dict() for d in self.derived]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Variable.from_dict(v) for v in d["variables"]), tuple(d["purposes"]),
                   tuple(d["x_range"]), tuple(d["y_range"]),
                   tuple(DerivedVariable.from_dict(x) for x in d.get("derived", ())))


AGE_EDGES = tuple(float(x) for x in range(5, 96, 10))
# projected metres around a synthetic urban centre
CENTER = (300_000.0, 5_040_000.0)
HALF_EXTENT = 40_000.0


def survey_schema() -> SurveySchema:
    """Schema mirroring the survey columns listed for synthesis."""
    xr = (CENTER[0] - HALF_EXTENT, CENTER[0] + HALF_EXTENT)
    yr = (CENTER[1] - HALF_EXTENT, CENTER[1] + HALF_EXTENT)
    statuses = ("full_time", "part_time", "student", "retired", "at_home", "other")
    return SurveySchema(
        variables=(
            Variable("P_AGE", "numeric", low=5.0, high=95.0, bins=AGE_EDGES, alias="AgeGroup"),
            Variable("P_SEXE", "binary", labels=("M", "F"), alias="Gender"),
            Variable("P_MOBIL", "categorical", labels=("yes", "no"), alias="Mobile"),
            Variable("P_STATUT", "categorical", labels=statuses, alias="Status"),
            Variable("PERMIT", "categorical", labels=("yes", "no"), alias="Permit"),
            Variable(HOME_X, "geospatial", low=xr[0], high=xr[1]),
            Variable(HOME_Y, "geospatial", low=yr[0], high=yr[1]),
        ),
        purposes=("work", "school", "shopping", "leisure", "escort", "other", "home"),
        x_range=xr,
        y_range=yr,
        derived=(DerivedVariable(
            "Employed", "P_STATUT",
            tuple((s, "yes" if s in ("full_time", "part_time") else "no") for s in statuses),
            ("yes", "no")),),
    )


# ---------------------------------------------------------------------------
# records


@dataclass
class Trip:
    ox: float
    oy: float
    dx: float
    dy: float
    purpose: str

    @property
    def length_m(self) -> float:
        return math.hypot(self.dx - self.ox, self.dy - self.oy)


@dataclass
class RawRecord:
    person_id: int
    attributes: dict
    trips: list = field(default_factory=list)

    @property
    def n_locations(self) -> int:
        return len(self.trips) + 1 if self.trips else 0


@dataclass
class EncodedAgent:
    tabular: np.ndarray
    sequence: np.ndarray
    seq_len: int | None
    person_id: int = -1


# ---------------------------------------------------------------------------
# codec


def _purpose_grid(n_labels: int):
    """Grid values for ``labels + [END]``; END sits at 0.0."""
    m = math.ceil(n_labels / 2)
    slots = [k / m for k in range(-m, 0)] + [k / m for k in range(1, m + 1)]
    return np.array(slots[:n_labels] + [0.0])


@dataclass(frozen=True)
class Codec:
    schema: SurveySchema
    max_len: int = DEFAULT_MAX_LEN

    def __post_init__(self):
        if self.max_len < 1:
            raise ParameterError("max_len must be >= 1")

    # layout

    @property
    def blocks(self) -> list[tuple[Variable, int, int]]:
        out, start = [], 0
        for v in self.schema.variables:
            out.append((v, start, v.width))
            start += v.width
        return out

    @property
    def width(self) -> int:
        return sum(v.width for v in self.schema.variables)

    @property
    def purpose_vocab(self) -> tuple:
        return tuple(self.schema.purposes) + (END,)

    @property
    def purpose_grid(self) -> np.ndarray:
        return _purpose_grid(len(self.schema.purposes))

    # scalar helpers

    @staticmethod
    def scale(v, lo, hi):
        return 2.0 * (np.asarray(v, dtype=float) - lo) / (hi - lo) - 1.0

    @staticmethod
    def unscale(e, lo, hi):
        v = lo + (np.asarray(e, dtype=float) + 1.0) * (hi - lo) / 2.0
        return np.clip(v, lo, hi)

    def encode_value(self, var: Variable, value) -> np.ndarray:
        if var.is_categorical:
            try:
                idx = var.labels.index(value)
            except ValueError:
                raise SchemaError(f"variable {var.name!r}: unseen label {value!r}") from None
            out = np.zeros(var.width)
            out[idx] = 1.0
            return out
        v = float(value)
        if not var.low <= v <= var.high:
            raise SchemaError(f"variable {var.name!r}: value {v} outside [{var.low}, {var.high}]")
        return np.array([self.scale(v, var.low, var.high)])

    def decode_value(self, var: Variable, block):
        block = np.asarray(block, dtype=float)
        if var.is_categorical:
            return var.labels[int(np.argmax(block))]
        return float(self.unscale(block[0], var.low, var.high))

    def encode_purpose(self, label) -> float:
        try:
            return float(self.purpose_grid[self.schema.purposes.index(label)])
        except ValueError:
            raise SchemaError(f"trip purpose: unseen label {label!r}") from None

    def decode_purpose(self, value) -> str:
        return self.purpose_vocab[int(np.argmin(np.abs(self.purpose_grid - float(value))))]

    # records

    def encode_tabular(self, record: RawRecord) -> np.ndarray:
        try:
            return np.concatenate([self.encode_value(v, record.attributes[v.name])
                                   for v in self.schema.variables])
        except KeyError as exc:
            raise SchemaError(f"record {record.person_id} lacks variable {exc.args[0]!r}") from None

    def encode_trip(self, trip: Trip) -> np.ndarray:
        (xl, xh), (yl, yh) = self.schema.x_range, self.schema.y_range
        for name, v, lo, hi in (("origin x", trip.ox, xl, xh), ("origin y", trip.oy, yl, yh),
                                ("destination x", trip.dx, xl, xh), ("destination y", trip.dy, yl, yh)):
            if not lo <= v <= hi:
                raise SchemaError(f"trip {name} {v} outside [{lo}, {hi}]")
        return np.array([self.scale(trip.ox, xl, xh), self.scale(trip.oy, yl, yh),
                         self.scale(trip.dx, xl, xh), self.scale(trip.dy, yl, yh),
                         self.encode_purpose(trip.purpose)])

    def decode_trip(self, row) -> Trip:
        (xl, xh), (yl, yh) = self.schema.x_range, self.schema.y_range
        return Trip(float(self.unscale(row[0], xl, xh)), float(self.unscale(row[1], yl, yh)),
                    float(self.unscale(row[2], xl, xh)), float(self.unscale(row[3], yl, yh)),
                    self.decode_purpose(row[4]))

    def to_dict(self):
        return {"schema": self.schema.to_dict(), "max_len": self.max_len}

    @classmethod
    def from_dict(cls, d):
        return cls(SurveySchema.from_dict(d["schema"]), int(d["max_len"]))


def fit_codec(records: Sequence[RawRecord], schema: SurveySchema, max_len: int = DEFAULT_MAX_LEN) -> Codec:
    """Build a codec for ``schema`` after checking that every record conforms.

    Ranges and label orders come from the schema, never from the sample.
    """
    if not records:
        raise ParameterError("fit_codec needs at least one record")
    codec = Codec(schema, max_len)
    for r in records:
        codec.encode_tabular(r)
        for t in r.trips:
            codec.encode_trip(t)
    return codec


def pad_sequence(rows, T: int = DEFAULT_MAX_LEN) -> tuple[np.ndarray, int]:
    rows = np.asarray(rows, dtype=float).reshape(-1, SEQ_FEATURES)
    n = rows.shape[0]
    if n == 0:
        raise CapacityError("cannot pad an empty trip sequence")
    if n > T:
        raise CapacityError(f"{n} trips exceed the sequence capacity T={T}")
    out = np.zeros((T, SEQ_FEATURES))
    out[:n] = rows
    return out, n


def encode(codec: Codec, record: RawRecord) -> EncodedAgent:
    rows = [codec.encode_trip(t) for t in record.trips]
    seq, n = pad_sequence(rows, codec.max_len)
    return EncodedAgent(codec.encode_tabular(record), seq, n, record.person_id)


def decode(codec: Codec, agent: EncodedAgent) -> RawRecord:
    """Invert :func:`encode`.

    One-hot blocks decode by argmax, so soft generator outputs are accepted.
    Without a stored ``seq_len`` the sequence is cut at the first END row.
    """
    tab = np.asarray(agent.tabular, dtype=float)
    if tab.shape != (codec.width,):
        raise DimensionError(f"tabular width {tab.shape} does not match codec width {codec.width}")
    attrs = {v.name: codec.decode_value(v, tab[s:s + w]) for v, s, w in codec.blocks}
    seq = np.asarray(agent.sequence, dtype=float)
    if seq.ndim != 2 or seq.shape[1] != SEQ_FEATURES:
        raise DimensionError(f"sequence shape {seq.shape} is not T x {SEQ_FEATURES}")
    if agent.seq_len is not None:
        n = agent.seq_len
    else:
        n = 0
        while n < seq.shape[0] and codec.decode_purpose(seq[n, 4]) != END:
            n += 1
    trips = [codec.decode_trip(seq[i]) for i in range(n)]
    return RawRecord(agent.person_id, attrs, trips)


def filter_home_based(records, tol: float = 1.0, min_locations: int = MIN_LOCATIONS,
                      max_locations: int = MAX_LOCATIONS):
    """Keep tours that leave from and return to home with 3..15 location points.

    A tour of ``k`` trips visits ``k + 1`` location points (home counted at
    both ends), so Home-Work-Home is 3 locations.
    """
    kept = []
    for r in records:
        if not r.trips:
            continue
        hx, hy = float(r.attributes[HOME_X]), float(r.attributes[HOME_Y])
        first, last = r.trips[0], r.trips[-1]
        if math.hypot(first.ox - hx, first.oy - hy) > tol or math.hypot(last.dx - hx, last.dy - hy) > tol:
            continue
        if min_locations <= len(r.trips) + 1 <= max_locations:
            kept.append(r)
    return kept


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    codec: Codec
    tabular: np.ndarray      # N x W
    sequences: np.ndarray    # N x T x 5
    seq_lens: np.ndarray     # N, int
    person_ids: np.ndarray   # N, int
    provenance: str = ""

    def __post_init__(self):
        n = self.tabular.shape[0]
        if self.tabular.shape != (n, self.codec.width):
            raise DimensionError(f"tabular block {self.tabular.shape} vs codec width {self.codec.width}")
        if self.sequences.shape != (n, self.codec.max_len, SEQ_FEATURES):
            raise DimensionError(f"sequence block {self.sequences.shape} vs T={self.codec.max_len}")
        if self.seq_lens.shape != (n,) or self.person_ids.shape != (n,):
            raise DimensionError("seq_lens/person_ids must have one entry per agent")

    @property
    def schema(self) -> SurveySchema:
        return self.codec.schema

    def __len__(self):
        return self.tabular.shape[0]

    def __getitem__(self, i) -> EncodedAgent:
        return EncodedAgent(self.tabular[i], self.sequences[i], int(self.seq_lens[i]), int(self.person_ids[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.codec, self.tabular[idx], self.sequences[idx], self.seq_lens[idx],
                       self.person_ids[idx], self.provenance)

    def records(self) -> list[RawRecord]:
        return [decode(self.codec, self[i]) for i in range(len(self))]

    @classmethod
    def from_records(cls, records, codec: Codec, provenance: str = "") -> "Dataset":
        agents = [encode(codec, r) for r in records]
        n = len(agents)
        return cls(codec,
                   np.array([a.tabular for a in agents]).reshape(n, codec.width),
                   np.array([a.sequence for a in agents]).reshape(n, codec.max_len, SEQ_FEATURES),
                   np.array([a.seq_len for a in agents], dtype=np.int64).reshape(n),
                   np.array([a.person_id for a in agents], dtype=np.int64).reshape(n),
                   provenance)


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split into (train, validation)."""
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise ParameterError(f"split of {n} agents at fraction {fraction} leaves an empty part")
    perm = np.random.Generator(np.random.Philox(int(seed))).permutation(n)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


def save_dataset(path, dataset: Dataset) -> None:
    meta = {"codec": dataset.codec.to_dict(), "provenance": dataset.provenance, "count": len(dataset)}
    container.write_container(path, DATASET_MAGIC, DATASET_VERSION, [
        ("meta", container.pack_json(meta)),
        ("tabular", container.pack_array(dataset.tabular)),
        ("sequences", container.pack_array(dataset.sequences)),
        ("seq_lens", container.pack_array(dataset.seq_lens)),
        ("person_ids", container.pack_array(dataset.person_ids)),
    ])


def load_dataset(path) -> Dataset:
    sec = container.read_container(path, DATASET_MAGIC, DATASET_VERSION)
    try:
        meta = container.unpack_json(sec["meta"])
        return Dataset(Codec.from_dict(meta["codec"]),
                       container.unpack_array(sec["tabular"]),
                       container.unpack_array(sec["sequences"]),
                       container.unpack_array(sec["seq_lens"]),
                       container.unpack_array(sec["person_ids"]),
                       meta.get("provenance", str(path)))
    except KeyError as exc:
        raise IntegrityError(f"dataset file lacks section {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# CSV diaries


def csv_columns(schema: SurveySchema) -> list[str]:
    return [PERSON_ID] + schema.names + list(TRIP_COLUMNS)


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_diary_csv(path, records, schema: SurveySchema) -> None:
    """One row per trip; persons without trips get one row with blank trip fields."""
    cols = csv_columns(schema)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            person = [r.person_id] + [r.attributes[n] for n in schema.names]
            if not r.trips:
                w.writerow([_cell(x) for x in person] + [""] * len(TRIP_COLUMNS))
            for t in r.trips:
                w.writerow([_cell(x) for x in person + [t.ox, t.oy, t.dx, t.dy, t.purpose]])


def _parse(var: Variable, text: str):
    if var.is_categorical:
        return text
    v = float(text)
    return int(v) if text.lstrip("-").isdigit() else v


def read_diary_csv(path, schema: SurveySchema) -> list[RawRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in csv_columns(schema) if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        by_id: dict[int, RawRecord] = {}
        for row in reader:
            pid = int(row[PERSON_ID])
            rec = by_id.get(pid)
            if rec is None:
                attrs = {v.name: _parse(v, row[v.name]) for v in schema.variables}
                rec = by_id[pid] = RawRecord(pid, attrs, [])
            if row[TRIP_COLUMNS[0]] != "":
                rec.trips.append(Trip(float(row["D_ORIXCOOR"]), float(row["D_ORIYCOOR"]),
                                      float(row["D_DESXCOOR"]), float(row["D_DESYCOOR"]), row["D_MOTIF"]))
    return list(by_id.values())
