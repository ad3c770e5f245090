import numpy as np
import pytest

from streamfed import nn
from streamfed.aggregate import WeightedParams, fed_average
from streamfed.chain import Contract, Kind, content_digest
from streamfed.client import TRANSITIONS, Client, ClientConfig, LifecycleError, Phase
from streamfed.dataset import SampleRecord, generate_synthetic
from streamfed.forest import ForestConfig
from streamfed.harness import ExperimentConfig, simulate
from streamfed.nn import TrainConfig
from streamfed.streams import StreamSubset, power_set

FAST = ClientConfig(
    train=TrainConfig(max_epochs=3, batch_size=32),
    hidden=(8,),
    calibration_samples=21,
    forest=ForestConfig(n_trees=4),
)


def patient(seed, k, n=120, noise=0.35, universe=("ECG", "EDA", "ST")):
    dist = [0.0] * len(universe)
    dist[k - 1] = 1.0
    (p,) = generate_synthetic(seed, 1, dist, n, noise_sigma=noise, universe=universe, assignment="nested")
    return p


def small_cfg(**kw):
    base = dict(
        n_patients=3,
        device_count_distribution=(1 / 3, 1 / 3, 1 / 3, 0, 0, 0),
        samples_per_patient=150,
        train=TrainConfig(max_epochs=3, batch_size=32),
        hidden=(8,),
        forest=ForestConfig(n_trees=4),
        federation_rounds=2,
        calibration_samples=21,
        baseline=False,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_transition_table_shape():
    assert TRANSITIONS[Phase.COLLECTING] == {Phase.TRAINING}
    assert TRANSITIONS[Phase.READY] == set()
    # Aggregating is the only optional phase and is never entered from Training
    assert Phase.AGGREGATING not in TRANSITIONS[Phase.TRAINING]


def test_one_stream_client_training_registers_once():
    c = Client("phone-a", patient(0, 1), FAST)
    contract = Contract()
    assert c.step(contract) is Phase.TRAINING
    assert c.step(contract) is Phase.AWAITING_ELECTION
    assert list(c.model_store) == [StreamSubset(["ECG"])]
    assert [e.kind for e in contract.ledger] == [Kind.REGISTERED]


def test_elected_client_aggregates_two_submissions():
    a = Client("phone-a", patient(1, 1), FAST)
    b = Client("phone-b", patient(2, 1), FAST)
    contract = Contract(seed=3)
    for c in (a, b):
        c.step(contract)
        c.step(contract)
    local = {c.address: c.model_store[StreamSubset(["ECG"])].copy() for c in (a, b)}
    (ev,) = contract.elect_aggregators()
    for c in (a, b):
        c.step(contract)
    leader = a if ev.elected == a.address else b
    assert leader.phase is Phase.AGGREGATING
    leader.step(contract)
    broadcasts = [e for e in contract.ledger if e.kind is Kind.AGGREGATE_BROADCAST]
    assert len(broadcasts) == 1
    oracle = fed_average([WeightedParams(local[x.address], x.n_train, x.address) for x in (a, b)])
    for c in (a, b):
        if c.phase is Phase.AWAITING_ELECTION:
            c.step(contract)
        assert c.phase is Phase.CALIBRATING
        assert c.model_store[StreamSubset(["ECG"])].theta.tobytes() == oracle.theta.tobytes()


def test_full_lifecycle_three_clients():
    sim = simulate(small_cfg())
    for c in sim.clients:
        assert c.phase is Phase.READY
        assert c.forest is not None
        assert set(c.model_store) == set(power_set(c.streams))
        assert c.rounds_done == 2
    assert sim.contract.round == 3


@pytest.mark.parametrize("seed", range(12))
def test_phase_machine_soundness(seed):
    n = 1 + seed % 3
    cfg = small_cfg(seed=seed, n_patients=n, dropout_rate=0.3 if seed % 2 else 0.0,
                    samples_per_patient=60, calibration_samples=14)
    sim = simulate(cfg)
    for c in sim.clients:
        trace = [t for t in sim.trace() if t.address == c.address]
        assert trace[0].phase is Phase.COLLECTING
        for t in trace:
            assert t.next_phase == t.phase or t.next_phase in TRANSITIONS[t.phase]
        if not c.crashed:
            assert trace[-1].next_phase is Phase.READY
            visited = {t.phase for t in trace}
            if Phase.AGGREGATING in visited:
                assert any(e.recipient == c.address for e in sim.contract.ledger if e.kind is Kind.ELECTED)


def test_store_completeness_after_round():
    sim = simulate(small_cfg(federation_rounds=1))
    for c in sim.clients:
        for s in c.subsets:
            r, p = sim.contract.latest_aggregate(c.address, s)
            assert p.theta.tobytes() == c.model_store[s].theta.tobytes()


def test_predict_affect_requires_ready():
    c = Client("phone-a", patient(0, 2), FAST)
    with pytest.raises(LifecycleError):
        c.predict_affect(SampleRecord(0, {"ECG": 1.0, "EDA": 1.0}))


def test_predict_affect_schema_and_range():
    sim = simulate(small_cfg(n_patients=1, device_count_distribution=(0, 1, 0, 0, 0, 0)))
    (c,) = sim.clients
    rec = c.holdout.record(0)
    assert 0 <= c.predict_affect(SampleRecord(rec.timestamp, rec.values)) <= 10
    missing = dict(rec.values)
    missing.popitem()
    with pytest.raises(LifecycleError):
        c.predict_affect(SampleRecord(0, missing))


def test_noiseless_record_matches_generator_label():
    cfg = small_cfg(
        n_patients=1,
        device_count_distribution=(0, 0, 1, 0, 0, 0),
        noise_sigma=0.0,
        samples_per_patient=1500,
        calibration_samples=210,
        train=TrainConfig(max_epochs=60),
        hidden=(32,),
        federation_rounds=1,
    )
    (c,) = simulate(cfg).clients
    hits = [c.predict_affect(SampleRecord(r.timestamp, r.values)) == r.label for r in c.holdout.records()]
    assert all(hits)


def test_dropout_client_contributes_nothing():
    cfg = small_cfg(n_patients=6, dropout_rate=0.5, seed=4,
                    device_count_distribution=(1, 0, 0, 0, 0, 0), federation_rounds=1)
    sim = simulate(cfg)
    assert sim.dropped
    for addr in sim.dropped:
        assert not any(e.sender == addr for e in sim.contract.ledger if e.kind is Kind.PARAMS_SUBMITTED)
        assert any(e.kind is Kind.DROPPED and e.sender == addr for e in sim.contract.ledger)
    assert all(c.phase is Phase.READY for c in sim.live())


def test_raw_data_never_reaches_ledger():
    sim = simulate(small_cfg())
    raw = set().union(*(c.raw_digests() for c in sim.clients))
    assert raw
    for e in sim.contract.ledger:
        assert e.digest is None or e.digest not in raw
    for digest, blob in sim.contract.blobs.items():
        assert content_digest(blob) == digest
        nn.loads_params(blob)
