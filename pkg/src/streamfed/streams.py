"""Stream subsets, power-set enumeration and cohort assignment."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .dataset import PatientDataset

MAX_STREAMS = 6
KEY_SEP = "+"


@dataclass(frozen=True, order=True, init=False)
class StreamSubset:
    """Canonical, sorted, non-empty set of stream names.

    Equal subsets compare, hash and serialize identically, so instances are
    used directly as dictionary keys for cohorts, models and elections.
    """

    members: tuple[str, ...]

    def __init__(self, members: Iterable[str]):
        names = tuple(sorted(set(members)))
        if not names:
            raise ValueError("stream subset must be non-empty")
        for name in names:
            if not name or KEY_SEP in name or "," in name:
                raise ValueError(f"invalid stream name {name!r}")
        object.__setattr__(self, "members", names)

    @classmethod
    def parse(cls, key: str) -> "StreamSubset":
        return cls(key.split(KEY_SEP))

    @property
    def key(self) -> str:
        return KEY_SEP.join(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, name: object) -> bool:
        return name in self.members

    def issubset(self, other: "StreamSubset") -> bool:
        return set(self.members) <= set(other.members)

    def sort_key(self) -> tuple[int, tuple[str, ...]]:
        return (len(self.members), self.members)

    def __str__(self) -> str:
        return self.key

    def __repr__(self) -> str:
        return f"StreamSubset({self.key!r})"


def power_set(streams: StreamSubset) -> list[StreamSubset]:
    """All 2^n - 1 non-empty subsets, ordered by size then lexicographically.

    The full set is included.
    """
    members = streams.members
    out = []
    for size in range(1, len(members) + 1):
        out.extend(StreamSubset(c) for c in itertools.combinations(members, size))
    return out


def project(ds: "PatientDataset", subset: StreamSubset) -> "PatientDataset":
    """Restrict a patient's records to `subset`; labels and timestamps are kept."""
    missing = [s for s in subset if s not in ds.streams]
    if missing:
        raise ValueError(
            f"patient {ds.patient_id} does not own streams: {', '.join(missing)}"
        )
    if subset == ds.streams:
        return ds
    cols = [ds.streams.members.index(s) for s in subset]
    return replace(ds, streams=subset, values=ds.values[:, cols])


def build_cohorts(
    patients: Iterable["PatientDataset"],
) -> dict[StreamSubset, list[tuple[str, "PatientDataset"]]]:
    cohorts: dict[StreamSubset, list[tuple[str, PatientDataset]]] = {}
    for ds in patients:
        for subset in power_set(ds.streams):
            cohorts.setdefault(subset, []).append((ds.patient_id, project(ds, subset)))
    return dict(sorted(cohorts.items(), key=lambda kv: kv[0].sort_key()))
