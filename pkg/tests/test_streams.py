import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamfed.dataset import PatientDataset
from streamfed.streams import StreamSubset, build_cohorts, power_set, project

NAMES = ["A", "B", "C", "D", "E", "F"]


def bitmask_subsets(names):
    names = sorted(names)
    out = set()
    for mask in range(1, 2 ** len(names)):
        out.add(tuple(n for i, n in enumerate(names) if mask >> i & 1))
    return out


def make_ds(pid, streams, n=5):
    s = StreamSubset(streams)
    vals = np.arange(n * len(s), dtype=float).reshape(n, len(s))
    return PatientDataset(pid, s, np.arange(n), vals, np.arange(n) % 11)


def test_subset_is_canonical():
    s = StreamSubset(["C", "A", "B", "A"])
    assert s.members == ("A", "B", "C")
    assert s.key == "A+B+C"
    assert StreamSubset.parse("C+B+A") == s
    assert StreamSubset(["B", "A"]) == StreamSubset(["A", "B"])


@pytest.mark.parametrize("bad", [[], ["A+B"], ["A,B"]])
def test_subset_rejects_bad_members(bad):
    with pytest.raises(ValueError):
        StreamSubset(bad)


def test_power_set_example_order():
    got = [s.members for s in power_set(StreamSubset("ABC"))]
    assert got == [("A",), ("B",), ("C",), ("A", "B"), ("A", "C"), ("B", "C"), ("A", "B", "C")]


def test_power_set_singleton():
    assert power_set(StreamSubset(["A"])) == [StreamSubset(["A"])]


@pytest.mark.parametrize("n", range(1, 7))
def test_power_set_matches_bitmask_oracle(n):
    ps = power_set(StreamSubset(NAMES[:n]))
    assert len(ps) == 2**n - 1
    assert len(set(ps)) == len(ps)
    assert {s.members for s in ps} == bitmask_subsets(NAMES[:n])
    assert all(list(s.members) == sorted(s.members) for s in ps)
    assert [s.sort_key() for s in ps] == sorted(s.sort_key() for s in ps)


def test_six_stream_universe_has_63_subsets():
    assert len(power_set(StreamSubset(["ECG", "EDA", "ST", "Resp", "SBP", "DBP"]))) == 63


def test_project_keeps_records_and_labels():
    ds = make_ds("p", "ABC")
    sub = project(ds, StreamSubset("AB"))
    assert sub.streams.members == ("A", "B")
    np.testing.assert_array_equal(sub.values, ds.values[:, :2])
    np.testing.assert_array_equal(sub.labels, ds.labels)
    np.testing.assert_array_equal(sub.timestamps, ds.timestamps)
    assert project(ds, StreamSubset("CA")).values[0].tolist() == [0.0, 2.0]


def test_project_to_own_set_is_identity():
    ds = make_ds("p", "AB")
    assert project(ds, StreamSubset("AB")) is ds


def test_project_missing_stream_names_it():
    with pytest.raises(ValueError, match="D"):
        project(make_ds("p", "A"), StreamSubset("D"))


def test_cohorts_two_patients():
    cohorts = build_cohorts([make_ds("x", "AB"), make_ds("y", "A")])
    members = {s.key: [pid for pid, _ in v] for s, v in cohorts.items()}
    assert members == {"A": ["x", "y"], "B": ["x"], "A+B": ["x"]}


def test_cohorts_single_patient_single_stream():
    assert len(build_cohorts([make_ds("x", "A")])) == 1


def test_nested_cohort_memberships_total_26():
    pats = [make_ds(f"p{k}", NAMES[:k]) for k in range(1, 5)]
    cohorts = build_cohorts(pats)
    assert sum(len(v) for v in cohorts.values()) == 1 + 3 + 7 + 15
    per = {}
    for v in cohorts.values():
        for pid, _ in v:
            per[pid] = per.get(pid, 0) + 1
    assert per == {"p1": 1, "p2": 3, "p3": 7, "p4": 15}


@given(st.sets(st.sampled_from(NAMES), min_size=1, max_size=6))
def test_membership_count_property(owned):
    cohorts = build_cohorts([make_ds("p", sorted(owned), n=2)])
    assert len(cohorts) == 2 ** len(owned) - 1
    for subset, entries in cohorts.items():
        (_, ds), = entries
        assert ds.streams == subset
        assert len(ds) == 2


def test_oracle_agrees_with_itertools():
    # sanity for the oracle itself
    for n in range(1, 7):
        combos = {c for k in range(1, n + 1) for c in itertools.combinations(NAMES[:n], k)}
        assert combos == bitmask_subsets(NAMES[:n])
