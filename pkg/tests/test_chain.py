import hashlib
import json

import numpy as np
import pytest

from protocol import aggregators_per_round_subset, election_counts, random_run
from streamfed.aggregate import WeightedParams, fed_average
from streamfed.chain import (
    Contract,
    ContractRejected,
    Kind,
    LedgerEntry,
    content_digest,
    load_blobs,
    load_ledger,
    params_blob,
    replay,
)
from streamfed.nn import ModelParams, NetShape
from streamfed.streams import StreamSubset

ECG = StreamSubset(["ECG"])
PAIR = StreamSubset(["ECG", "EDA"])


def wp(value, n=1, src="", dim=1):
    shape = NetShape(dim, (), 2)
    return WeightedParams(ModelParams(shape, np.full(shape.n_params, float(value))), n, src)


def test_register_once():
    c = Contract()
    c.register_finished("c1", [ECG])
    assert c.finished == {"c1"}
    assert len(c.ledger) == 1 and c.ledger[0].kind is Kind.REGISTERED
    with pytest.raises(ContractRejected):
        c.register_finished("c1", [ECG])
    assert [e.kind for e in c.ledger] == [Kind.REGISTERED]


def test_seq_numbers_increase():
    c = Contract()
    for i in range(1, 6):
        c.register_finished(f"c{i}", [ECG])
    assert [e.seq for e in c.ledger] == [1, 2, 3, 4, 5]


def test_single_candidate_elected():
    c = Contract(seed=42)
    c.register_finished("only", [ECG, PAIR])
    events = c.elect_aggregators()
    assert {(e.subset, e.elected) for e in events} == {(ECG, "only"), (PAIR, "only")}
    assert c.aggregator_for(ECG) == "only"


def test_hash_election_pinned_by_oracle():
    seed = 2024
    c = Contract(seed)
    for name in ("zeta", "alpha", "mid"):
        c.register_finished(name, [ECG])
    (ev,) = c.elect_aggregators([ECG])
    h = int.from_bytes(hashlib.blake2b(f"{seed}|1|ECG".encode(), digest_size=8).digest(), "big")
    assert ev.elected == sorted(["zeta", "alpha", "mid"])[h % 3]


def test_round_robin_policy():
    c = Contract(policy="round_robin")
    winners = []
    for _ in range(6):
        for name in ("a", "b", "c"):
            c.register_finished(name, [ECG])
        (ev,) = c.elect_aggregators()
        winners.append(ev.elected)
        for name in ("a", "b", "c"):
            c.submit_params(name, ECG, wp(1, src=name))
        c.broadcast_aggregate(ev.elected, ECG, fed_average(c.collect(ev.elected, ECG)))
    assert winners == ["a", "b", "c", "a", "b", "c"]


def test_election_frequencies():
    counts = election_counts(seed=7)
    assert all(200 <= v <= 300 for v in counts.values()), counts


def test_no_candidates_annotation():
    c = Contract()
    c.register_finished("a", [ECG])
    events = c.elect_aggregators([ECG, PAIR])
    assert [e.subset for e in events] == [ECG]
    kinds = [(e.kind, e.subset) for e in c.ledger]
    assert (Kind.NO_CANDIDATES, "ECG+EDA") in kinds


def test_election_needs_finished_clients():
    with pytest.raises(ContractRejected):
        Contract().elect_aggregators([ECG])


def test_submit_before_election_rejected():
    c = Contract()
    c.register_finished("a", [ECG])
    n = len(c.ledger)
    with pytest.raises(ContractRejected):
        c.submit_params("a", ECG, wp(1))
    assert len(c.ledger) == n


def test_submit_routes_and_records_digest():
    c = Contract()
    c.register_finished("a", [ECG])
    c.register_finished("b", [ECG])
    (ev,) = c.elect_aggregators()
    da = c.submit_params("a", ECG, wp(1.0, 3, "a"))
    db = c.submit_params("b", ECG, wp(2.0, 5, "b"))
    assert da != db
    subs = [e for e in c.ledger if e.kind is Kind.PARAMS_SUBMITTED]
    assert [e.digest for e in subs] == [da, db]
    assert da == content_digest(params_blob(wp(1.0).params, ECG))
    assert all(e.recipient == ev.elected for e in subs)
    inbox = c.collect(ev.elected, ECG)
    assert sorted((x.source, x.n_samples) for x in inbox) == [("a", 3), ("b", 5)]


def test_submit_rejections():
    c = Contract()
    c.register_finished("a", [ECG])
    c.elect_aggregators()
    with pytest.raises(ContractRejected):
        c.submit_params("stranger", ECG, wp(1))
    c.submit_params("a", ECG, wp(1))
    with pytest.raises(ContractRejected):
        c.submit_params("a", ECG, wp(1))
    with pytest.raises(TypeError):
        c.submit_params("a", ECG, b"raw bytes")


def test_broadcast_by_non_aggregator_rejected():
    c = Contract()
    c.register_finished("a", [ECG])
    c.register_finished("b", [ECG])
    (ev,) = c.elect_aggregators()
    other = "b" if ev.elected == "a" else "a"
    n = len(c.ledger)
    with pytest.raises(ContractRejected):
        c.broadcast_aggregate(other, ECG, wp(0).params)
    assert len(c.ledger) == n


def test_broadcast_updates_participants_and_advances():
    c = Contract()
    for name in ("a", "b", "c"):
        c.register_finished(name, [ECG])
    (ev,) = c.elect_aggregators()
    for name in ("a", "b", "c"):
        c.submit_params(name, ECG, wp(ord(name), 1, name))
    agg = fed_average(c.collect(ev.elected, ECG))
    c.broadcast_aggregate(ev.elected, ECG, agg)
    assert c.round == 2
    for name in ("a", "b", "c"):
        r, p = c.latest_aggregate(name, ECG)
        assert r == 1 and p.theta.tobytes() == agg.theta.tobytes()


def test_dropout_rules():
    c = Contract()
    with pytest.raises(ContractRejected):
        c.mark_dropped("ghost")
    for name in ("a", "b"):
        c.register_finished(name, [ECG])
    (ev,) = c.elect_aggregators()
    with pytest.raises(ContractRejected):
        c.mark_dropped(ev.elected)
    other = "b" if ev.elected == "a" else "a"
    c.mark_dropped(other, "crash")
    with pytest.raises(ContractRejected):
        c.submit_params(other, ECG, wp(1))
    with pytest.raises(ContractRejected):
        c.register_finished("late", [ECG])


def test_ledger_json_round_trip(tmp_path):
    contract, _ = random_run(3, n_clients=5, n_rounds=2)
    contract.export(tmp_path)
    entries = load_ledger(tmp_path / "ledger.jsonl")
    assert entries == contract.ledger
    first = json.loads((tmp_path / "ledger.jsonl").read_text().splitlines()[0])
    assert {"seq", "round", "kind", "subset", "sender", "recipient", "digest"} <= set(first)
    rep = replay(entries, load_blobs(tmp_path / "blobs"))
    assert rep.ok, rep.errors


def test_determinism():
    a, _ = random_run(11, n_clients=6, n_rounds=3)
    b, _ = random_run(11, n_clients=6, n_rounds=3)
    assert a.dumps_ledger() == b.dumps_ledger()


def test_replay_reproduces_final_models():
    contract, expected = random_run(5)
    rep = replay(contract.ledger, contract.blobs)
    assert rep.ok, rep.errors
    assert rep.final_models == expected
    assert all(v == 1 for v in aggregators_per_round_subset(contract.ledger).values())


def test_replay_detects_tampering():
    contract, _ = random_run(6, n_clients=5, n_rounds=2)
    entries = list(contract.ledger)
    i = next(i for i, e in enumerate(entries) if e.kind is Kind.AGGREGATE_BROADCAST)
    e = entries[i]
    entries[i] = LedgerEntry(e.seq, e.round, e.kind, e.subset, e.sender, e.recipient, "0" * 16, e.n_samples, e.subsets, e.note)
    assert not replay(entries, contract.blobs).ok

    blobs = dict(contract.blobs)
    k = next(iter(blobs))
    blobs[k] = blobs[k][:-1] + bytes([blobs[k][-1] ^ 1])
    assert not replay(contract.ledger, blobs).ok

    dup = list(contract.ledger)
    el = next(e for e in dup if e.kind is Kind.ELECTED)
    dup.append(LedgerEntry(dup[-1].seq + 1, el.round, Kind.ELECTED, el.subset, recipient=el.recipient))
    assert any("second aggregator" in m for m in replay(dup, contract.blobs).errors)
