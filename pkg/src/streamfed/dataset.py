"""Sample data model, CSV ingestion and the synthetic population generator.

A patient's data is stored column-wise: one timestamp vector, one label
vector and a ``(n_records, n_streams)`` value matrix whose columns follow the
canonical order of ``streams``. :class:`SampleRecord` is the row view.

Synthetic ground truth
----------------------
Every stream maps each affect class to an integer *level* in ``-5..5``; the
mapping is a fixed permutation derived from the stream name, so it is the same
for every patient and every run. A sample of class ``c`` on stream ``s`` is::

    value = baseline[s] + unit[s] * (level[s][c] + noise_sigma * N(0, 1))

With ``noise_sigma = 0`` every single stream already identifies the class;
noise makes streams individually ambiguous while their combination stays
informative.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .streams import MAX_STREAMS, StreamSubset

N_CLASSES = 11
DEFAULT_UNIVERSE = ("ECG", "EDA", "ST", "Resp", "SBP", "DBP")
TIME_COLUMN = "t"
LABEL_COLUMN = "affect"

# (resting baseline, physiological units per affect level)
STREAM_CATALOG: dict[str, tuple[float, float]] = {
    "ECG": (70.0, 3.0),  # heart rate, bpm
    "EDA": (5.0, 0.4),  # skin conductance, uS
    "ST": (33.0, 0.3),  # skin temperature, C
    "Resp": (15.0, 1.0),  # breaths per minute
    "SBP": (120.0, 4.0),  # mmHg
    "DBP": (80.0, 3.0),  # mmHg
}
_LEVEL_SD = math.sqrt(10.0)  # sd of a uniform draw over -5..5


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


class DegenerateDataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SampleRecord:
    timestamp: int
    values: Mapping[str, float]
    label: int | None = None


@dataclass(eq=False)
class PatientDataset:
    patient_id: str
    streams: StreamSubset
    timestamps: np.ndarray
    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(
            len(self.timestamps), len(self.streams)
        )
        if not (len(self.timestamps) == len(self.labels) == self.values.shape[0]):
            raise ValueError("timestamps, values and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError(f"labels must lie in [0, {N_CLASSES - 1}]")
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.labels)

    def record(self, i: int) -> SampleRecord:
        vals = dict(zip(self.streams.members, self.values[i].tolist()))
        return SampleRecord(int(self.timestamps[i]), vals, int(self.labels[i]))

    def records(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def take(self, indices: Sequence[int] | np.ndarray) -> "PatientDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            timestamps=self.timestamps[idx],
            values=self.values[idx],
            labels=self.labels[idx],
        )

    @classmethod
    def from_records(
        cls, patient_id: str, streams: StreamSubset, records: Iterable[SampleRecord]
    ) -> "PatientDataset":
        records = list(records)
        for r in records:
            if set(r.values) != set(streams.members):
                raise ValueError(
                    f"record at t={r.timestamp} carries {sorted(r.values)}, "
                    f"expected {list(streams.members)}"
                )
        return cls(
            patient_id,
            streams,
            [r.timestamp for r in records],
            [[r.values[s] for s in streams] for r in records],
            [r.label for r in records],
        )


@dataclass(frozen=True)
class LabelSkew:
    class_weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.class_weights)
        if len(w) != N_CLASSES:
            raise ValueError(f"label skew needs {N_CLASSES} weights, got {len(w)}")
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("label skew weights must be non-negative and sum to 1")
        object.__setattr__(self, "class_weights", w)

    @classmethod
    def uniform(cls) -> "LabelSkew":
        return cls((1.0 / N_CLASSES,) * N_CLASSES)

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> "LabelSkew":
        total = float(sum(counts))
        return cls(tuple(c / total for c in counts))

    @classmethod
    def mid_heavy(cls) -> "LabelSkew":
        """Unimodal skew peaking just above neutral; extremes are rare."""
        return cls.from_counts([2, 3, 5, 8, 11, 14, 16, 14, 11, 9, 7])

    @property
    def degenerate(self) -> bool:
        return sum(1 for w in self.class_weights if w > 0) < 2


# ---------------------------------------------------------------------------
# CSV


def _format_value(x: float) -> str:
    return repr(float(x))


def dumps_csv(ds: PatientDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([TIME_COLUMN, *ds.streams.members, LABEL_COLUMN])
    for t, row, y in zip(ds.timestamps.tolist(), ds.values.tolist(), ds.labels.tolist()):
        w.writerow([t, *(_format_value(v) for v in row), y])
    return buf.getvalue()


def write_csv(ds: PatientDataset, path: str | Path) -> None:
    Path(path).write_text(dumps_csv(ds), encoding="utf-8")


def load_csv(
    path: str | Path, streams: StreamSubset, patient_id: str | None = None
) -> PatientDataset:
    """Read one patient's CSV file.

    Rows are numbered from 1 starting at the first data row. Columns other
    than the timestamp, the owned streams and ``affect`` are ignored.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        for col in (TIME_COLUMN, *streams.members, LABEL_COLUMN):
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        t_idx = header.index(TIME_COLUMN)
        s_idx = [header.index(s) for s in streams]
        y_idx = header.index(LABEL_COLUMN)

        ts, vals, labels = [], [], []
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                t = int(row[t_idx])
            except (ValueError, IndexError):
                raise ParseError(f"{path}: row {rowno}: bad timestamp") from None
            rv = []
            for s, i in zip(streams, s_idx):
                cell = row[i].strip() if i < len(row) else ""
                if not cell:
                    raise ParseError(f"{path}: row {rowno}: missing value for {s}")
                try:
                    rv.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: row {rowno}: bad value for {s}: {cell!r}") from None
            cell = row[y_idx].strip() if y_idx < len(row) else ""
            try:
                y = int(cell)
            except ValueError:
                raise ParseError(f"{path}: row {rowno}: affect {cell!r} is not an integer") from None
            if not 0 <= y < N_CLASSES:
                raise ParseError(f"{path}: row {rowno}: affect {y} outside 0..{N_CLASSES - 1}")
            ts.append(t)
            vals.append(rv)
            labels.append(y)

    try:
        return PatientDataset(patient_id or path.stem, streams, ts, vals, labels)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Synthetic population


def class_levels(stream: str) -> np.ndarray:
    """Integer level in -5..5 for each affect class on `stream`."""
    h = hashlib.blake2b(stream.encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(h, "little"))
    return rng.permutation(N_CLASSES).astype(np.float64) - (N_CLASSES - 1) / 2


def class_mean_table(streams: Sequence[str]) -> np.ndarray:
    """Noise-free value of every (class, stream) pair, shape (11, len(streams))."""
    cols = []
    for s in streams:
        base, unit = STREAM_CATALOG[s]
        cols.append(base + unit * class_levels(s))
    return np.stack(cols, axis=1)


def nearest_mean_classify(ds: PatientDataset) -> np.ndarray:
    """Lookup classifier on the generator's own class-mean table."""
    table = class_mean_table(ds.streams.members)
    scale = np.array([STREAM_CATALOG[s][1] for s in ds.streams])
    d = ((ds.values[:, None, :] - table[None, :, :]) / scale) ** 2
    return d.sum(axis=2).argmin(axis=1)


def _normalise_distribution(dist, n_max: int) -> np.ndarray:
    if isinstance(dist, Mapping):
        p = np.zeros(n_max)
        for k, w in dist.items():
            k = int(k)
            if not 1 <= k <= n_max:
                raise ValueError(f"stream count {k} outside 1..{n_max}")
            p[k - 1] = float(w)
    else:
        p = np.asarray(dist, dtype=np.float64)
        if len(p) > n_max:
            if np.any(p[n_max:] > 0):
                raise ValueError(f"stream counts above {n_max} have non-zero mass")
            p = p[:n_max]
        p = np.pad(p, (0, n_max - len(p)))
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("streams-per-patient distribution must be non-negative and sum to 1")
    return p


def generate_synthetic(
    seed: int,
    n_patients: int,
    streams_per_patient,
    samples_per_patient: int,
    skew: LabelSkew | None = None,
    noise_sigma: float = 0.35,
    universe: Sequence[str] = DEFAULT_UNIVERSE,
    assignment: str = "random",
    classes_per_patient: int | None = None,
) -> list[PatientDataset]:
    """Generate a synthetic physiological population with a known label function.

    Args:
        streams_per_patient: probabilities for owning 1..len(universe) streams,
            as a sequence (index 0 is one stream) or a ``{count: weight}`` map.
        assignment: ``"random"`` draws each patient's streams uniformly from the
            universe; ``"nested"`` gives a k-stream patient the first k streams
            of `universe` in the listed order.
        classes_per_patient: when set, each patient only ever experiences this
            many affect classes (drawn per patient, weights renormalised from
            `skew`), producing label-skewed non-IID clients.
    """
    if n_patients < 1 or samples_per_patient < 1:
        raise ValueError("n_patients and samples_per_patient must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if assignment not in ("random", "nested"):
        raise ValueError(f"unknown stream assignment {assignment!r}")
    universe = tuple(universe)
    if len(set(universe)) != len(universe) or not 1 <= len(universe) <= MAX_STREAMS:
        raise ValueError(f"universe must hold 1..{MAX_STREAMS} distinct streams")
    unknown = [s for s in universe if s not in STREAM_CATALOG]
    if unknown:
        raise ValueError(f"no catalog entry for streams {unknown}")
    skew = skew or LabelSkew.uniform()
    if skew.degenerate:
        warnings.warn(
            "label skew puts all mass on one class; models will overfit to it",
            DegenerateDataWarning,
            stacklevel=2,
        )
    p_count = _normalise_distribution(streams_per_patient, len(universe))
    weights = np.asarray(skew.class_weights)

    rng = np.random.default_rng(seed)
    out = []
    width = len(str(n_patients - 1))
    for i in range(n_patients):
        k = int(rng.choice(len(universe), p=p_count)) + 1
        if assignment == "nested":
            owned = universe[:k]
        else:
            owned = tuple(universe[j] for j in sorted(rng.choice(len(universe), k, replace=False)))
        streams = StreamSubset(owned)

        w = weights
        if classes_per_patient is not None:
            support = np.flatnonzero(weights > 0)
            m = min(classes_per_patient, len(support))
            keep = rng.choice(support, m, replace=False)
            w = np.zeros(N_CLASSES)
            w[keep] = weights[keep]
            w /= w.sum()
        labels = rng.choice(N_CLASSES, size=samples_per_patient, p=w)

        cols = streams.members
        means = class_mean_table(cols)[labels]
        units = np.array([STREAM_CATALOG[s][1] for s in cols])
        noise = rng.standard_normal((samples_per_patient, len(cols)))
        values = means + units * noise_sigma * noise

        out.append(
            PatientDataset(
                f"p{i:0{width}d}",
                streams,
                np.arange(samples_per_patient),
                values,
                labels,
            )
        )
    return out


def train_test_split(
    ds: PatientDataset, train_fraction: float, seed: int
) -> tuple[PatientDataset, PatientDataset]:
    """Random partition; the train side gets round-half-up(n * f) records.

    Both halves keep their records in original (chronological) order.
    """
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(ds)
    n_train = min(n, math.floor(n * train_fraction + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    return ds.take(np.sort(perm[:n_train])), ds.take(np.sort(perm[n_train:]))


@dataclass(frozen=True)
class Normalizer:
    """Per-stream z-scoring."""

    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    @classmethod
    def fit(cls, datasets: Iterable[PatientDataset]) -> "Normalizer":
        cols: dict[str, list[np.ndarray]] = {}
        for ds in datasets:
            for j, s in enumerate(ds.streams):
                cols.setdefault(s, []).append(ds.values[:, j])
        mean, std = {}, {}
        for s, parts in sorted(cols.items()):
            v = np.concatenate(parts)
            if v.size == 0:
                continue
            mean[s] = float(v.mean())
            sd = float(v.std())
            std[s] = sd if sd > 0 else 1.0
        return cls(mean, std)

    @classmethod
    def reference(cls, streams: Iterable[str]) -> "Normalizer":
        """Device-level constants from the stream catalog; needs no patient data."""
        mean, std = {}, {}
        for s in streams:
            base, unit = STREAM_CATALOG[s]
            mean[s] = base
            std[s] = unit * _LEVEL_SD
        return cls(mean, std)

    def transform(self, ds: PatientDataset) -> PatientDataset:
        missing = [s for s in ds.streams if s not in self.mean]
        if missing:
            raise ValueError(f"normalizer has no statistics for {missing}")
        mu = np.array([self.mean[s] for s in ds.streams])
        sd = np.array([self.std[s] for s in ds.streams])
        return replace(ds, values=(ds.values - mu) / sd)

    def transform_values(self, streams: StreamSubset, values: np.ndarray) -> np.ndarray:
        mu = np.array([self.mean[s] for s in streams])
        sd = np.array([self.std[s] for s in streams])
        return (np.asarray(values, dtype=np.float64) - mu) / sd
