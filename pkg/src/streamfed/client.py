"""Smartphone client: a cooperative state machine driven one phase step at a time.

Lifecycle::

    Collecting -> Training -> AwaitingElection -> [Aggregating] -> Calibrating -> Ready
                     ^                |                 |
                     +----------------+-----------------+   (another federation round)

A client only talks to the contract, and only with model parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping

import numpy as np

from . import nn
from .aggregate import WeightedParams, fed_average
from .chain import Contract, ContractRejected, content_digest, election_hash
from .dataset import Normalizer, PatientDataset, SampleRecord, dumps_csv, train_test_split
from .forest import (
    CalibrationRow,
    ForestConfig,
    ForestModel,
    calibration_matrix,
    row_vector,
    schema_for,
    train_forest_matrix,
)
from .nn import ModelParams, NetShape, TrainConfig
from .streams import StreamSubset, power_set, project

log = logging.getLogger(__name__)


class Phase(str, Enum):
    COLLECTING = "Collecting"
    TRAINING = "Training"
    AWAITING_ELECTION = "AwaitingElection"
    AGGREGATING = "Aggregating"
    CALIBRATING = "Calibrating"
    READY = "Ready"


TRANSITIONS: dict[Phase, set[Phase]] = {
    Phase.COLLECTING: {Phase.TRAINING},
    Phase.TRAINING: {Phase.AWAITING_ELECTION},
    Phase.AWAITING_ELECTION: {Phase.AGGREGATING, Phase.TRAINING, Phase.CALIBRATING},
    Phase.AGGREGATING: {Phase.TRAINING, Phase.CALIBRATING},
    Phase.CALIBRATING: {Phase.READY},
    Phase.READY: set(),
}


class LifecycleError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClientConfig:
    train: TrainConfig = TrainConfig()
    hidden: tuple[int, ...] = (64, 32)
    federation_rounds: int = 1
    weighted_aggregation: bool = True
    forest: ForestConfig = ForestConfig()
    train_fraction: float = 0.7
    calibration_samples: int = 140
    calibration_days: int = 7
    normalization: str = "reference"
    seed: int = 0


@dataclass(frozen=True)
class TraceEntry:
    step: int
    address: str
    phase: Phase
    next_phase: Phase
    action: str


def shared_init_seed(seed: int, subset: StreamSubset) -> int:
    """Initial-model seed shared by every client training `subset`."""
    return election_hash(seed, 0, "init:" + subset.key) % 2**63


class Client:
    """One patient's smartphone.

    `source` stands in for the patient's IoT devices: one device per owned
    stream, read column by column while Collecting.
    """

    def __init__(self, address: str, source: PatientDataset, cfg: ClientConfig = ClientConfig()):
        self.address = address
        self.source = source
        self.cfg = cfg
        self.phase = Phase.COLLECTING
        self.round = 0
        self.rounds_done = 0
        self.crashed = False
        self.model_store: dict[StreamSubset, ModelParams] = {}
        self.n_train = 0
        self.forest: ForestModel | None = None
        self.trace: list[TraceEntry] = []
        self.histories: dict[StreamSubset, nn.History] = {}
        self._steps = 0
        self._calib_rows: list[int] = []
        self.data: PatientDataset | None = None
        self.train_data: PatientDataset | None = None
        self.window: PatientDataset | None = None
        self.holdout: PatientDataset | None = None
        self.normalizer: Normalizer | None = None

    @property
    def streams(self) -> StreamSubset:
        return self.source.streams

    @property
    def subsets(self) -> list[StreamSubset]:
        return power_set(self.streams)

    # -- device stubs ------------------------------------------------------

    def get_data(self, stream: str) -> np.ndarray:
        return self.source.values[:, self.source.streams.members.index(stream)]

    # -- scheduler entry point ---------------------------------------------

    def step(self, contract: Contract, clock: int = 0) -> Phase:
        """Run one unit of work for the current phase and return the new phase."""
        before = self.phase
        if self.crashed:
            action = "crashed"
        else:
            handler = {
                Phase.COLLECTING: self._collect,
                Phase.TRAINING: self._train,
                Phase.AWAITING_ELECTION: self._await_election,
                Phase.AGGREGATING: self._aggregate,
                Phase.CALIBRATING: self._calibrate,
                Phase.READY: lambda c: "idle",
            }[self.phase]
            try:
                action = handler(contract)
            except ContractRejected as exc:
                log.warning("%s: contract rejected call: %s", self.address, exc)
                self.phase = before
                action = f"rejected: {exc}"
        if self.phase != before and self.phase not in TRANSITIONS[before]:
            raise LifecycleError(f"illegal transition {before.value} -> {self.phase.value}")
        self._steps += 1
        self.trace.append(TraceEntry(clock, self.address, before, self.phase, action))
        return self.phase

    # -- phases ------------------------------------------------------------

    def _collect(self, contract: Contract) -> str:
        cols = [self.get_data(s) for s in self.streams]
        self.data = PatientDataset(
            self.source.patient_id,
            self.streams,
            self.source.timestamps,
            np.column_stack(cols),
            self.source.labels,
        )
        train, test = train_test_split(self.data, self.cfg.train_fraction, self.cfg.seed)
        if len(train) == 0 or len(test) < 2:
            raise LifecycleError(f"{self.address}: not enough records to split")
        n_cal = min(self.cfg.calibration_samples, len(test) - 1)
        self.train_data = train
        self.window = test.take(np.arange(n_cal))
        self.holdout = test.take(np.arange(n_cal, len(test)))
        if self.cfg.normalization == "local":
            self.normalizer = Normalizer.fit([train])
        else:
            self.normalizer = Normalizer.reference(self.streams)
        self.n_train = len(train)
        self.phase = Phase.TRAINING
        return f"collected {len(self.data)} records from {len(self.streams)} devices"

    def _features(self, ds: PatientDataset, subset: StreamSubset) -> np.ndarray:
        sub = project(ds, subset)
        return self.normalizer.transform_values(subset, sub.values)

    def _train(self, contract: Contract) -> str:
        round_ = contract.round
        if self.rounds_done and round_ == self.round:
            return "waiting for next round"
        trained, histories = {}, {}
        for subset in self.subsets:
            if subset in self.model_store:
                start = self.model_store[subset]
            else:
                shape = NetShape(len(subset), self.cfg.hidden)
                start = nn.init_params(shape, shared_init_seed(self.cfg.seed, subset))
            X = self._features(self.train_data, subset)
            tcfg = _with_seed(self.cfg.train, self.cfg.seed, self.address, subset, round_)
            trained[subset], histories[subset] = nn.train(
                X, self.train_data.labels, tcfg, init=start
            )
        contract.register_finished(self.address, self.subsets)
        self.round = round_
        self.model_store.update(trained)
        self.histories.update(histories)
        self.phase = Phase.AWAITING_ELECTION
        return f"trained {len(self.subsets)} models, registered"

    def _submit_all(self, contract: Contract) -> int:
        sent = 0
        for subset in self.subsets:
            if contract.aggregator_for(subset) is None or contract.has_submitted(self.address, subset):
                continue
            wp = WeightedParams(self.model_store[subset], self.n_train, self.address)
            contract.submit_params(self.address, subset, wp)
            sent += 1
        return sent

    def _round_complete(self, contract: Contract) -> bool:
        for subset in self.subsets:
            hit = contract.latest_aggregate(self.address, subset)
            if hit is None or hit[0] != self.round:
                return False
        return True

    def _finish_round(self, contract: Contract) -> str:
        for subset in self.subsets:
            self.model_store[subset] = contract.latest_aggregate(self.address, subset)[1]
        self.rounds_done += 1
        if self.rounds_done < self.cfg.federation_rounds:
            self.phase = Phase.TRAINING
        else:
            self.phase = Phase.CALIBRATING
        return f"round {self.round} aggregates installed"

    def _await_election(self, contract: Contract) -> str:
        if not contract.election_closed or contract.round != self.round:
            if self._round_complete(contract):
                return self._finish_round(contract)
            return "waiting for election"
        sent = self._submit_all(contract)
        if contract.assigned_subsets(self.address):
            self.phase = Phase.AGGREGATING
            return f"submitted {sent}; elected aggregator"
        if self._round_complete(contract):
            return self._finish_round(contract)
        return f"submitted {sent}; waiting for aggregates"

    def _aggregate(self, contract: Contract) -> str:
        done = []
        if contract.round == self.round:
            for subset in contract.assigned_subsets(self.address):
                if contract.is_broadcast(subset) or not contract.ready_to_aggregate(subset):
                    continue
                contribs = contract.collect(self.address, subset)
                agg = fed_average(contribs, weighted=self.cfg.weighted_aggregation)
                rule = "weighted" if self.cfg.weighted_aggregation else "unweighted"
                contract.broadcast_aggregate(self.address, subset, agg, rule)
                done.append(subset.key)
        if self._round_complete(contract):
            return self._finish_round(contract) + (f"; broadcast {done}" if done else "")
        return f"broadcast {done}" if done else "waiting for submissions"

    def _calibrate(self, contract: Contract) -> str:
        n = len(self.window)
        per_day = max(1, -(-n // self.cfg.calibration_days))
        start = len(self._calib_rows)
        self._calib_rows.extend(range(start, min(n, start + per_day)))
        if len(self._calib_rows) < n:
            return f"calibration rows {len(self._calib_rows)}/{n}"
        X, y, cols = calibration_matrix(self.model_store, self.window, self.normalizer)
        self.forest = train_forest_matrix(X, y, cols, _forest_seed(self.cfg.forest, self.address))
        self.phase = Phase.READY
        return f"forest trained on {n} rows"

    # -- inference and evaluation -------------------------------------------

    def predict_affect(self, record: SampleRecord) -> int:
        if self.phase is not Phase.READY or self.forest is None:
            raise LifecycleError(f"{self.address} is {self.phase.value}, not Ready")
        if set(record.values) != set(self.streams.members):
            raise LifecycleError(
                f"record streams {sorted(record.values)} do not match owned {list(self.streams)}"
            )
        x = np.array([[record.values[s] for s in self.streams]])
        preds = {}
        norm = self.normalizer.transform_values(self.streams, x)
        for subset in self.subsets:
            idx = [self.streams.members.index(m) for m in subset]
            preds[subset] = int(nn.predict(self.model_store[subset], norm[:, idx])[0])
        row = CalibrationRow(dict(zip(self.streams.members, x[0].tolist())), preds)
        return int(self.forest.predict_matrix(row_vector(row, schema_for(self.streams))[None])[0])

    def evaluate(self, ds: PatientDataset | None = None) -> dict:
        """Forest and per-subset-model accuracy on held-out records."""
        ds = self.holdout if ds is None else ds
        if self.forest is None:
            raise LifecycleError(f"{self.address} has no forest")
        X, y, _ = calibration_matrix(self.model_store, ds, self.normalizer)
        k = len(self.streams)
        models = {
            s.key: float(np.mean(X[:, k + j] == y)) for j, s in enumerate(self.subsets)
        }
        forest_acc = float(np.mean(self.forest.predict_matrix(X) == y))
        return {"forest": forest_acc, "models": models, "n": int(len(y))}

    def raw_digests(self) -> set[str]:
        """Digests of every serialized raw-data batch this client holds."""
        out = set()
        parts = [self.source, self.data, self.train_data, self.window, self.holdout]
        for ds in parts:
            if ds is None:
                continue
            out.add(content_digest(dumps_csv(ds).encode()))
            for subset in power_set(ds.streams):
                out.add(content_digest(dumps_csv(project(ds, subset)).encode()))
        return out


def _with_seed(cfg: TrainConfig, seed: int, address: str, subset: StreamSubset, round_: int) -> TrainConfig:
    return replace(cfg, seed=election_hash(seed, round_, f"{address}:{subset.key}") % 2**63)


def _forest_seed(cfg: ForestConfig, address: str) -> ForestConfig:
    return replace(cfg, seed=election_hash(cfg.seed, 0, "forest:" + address) % 2**63)


def model_accuracies(models: Mapping[StreamSubset, ModelParams], ds: PatientDataset, normalizer: Normalizer) -> dict[str, float]:
    out = {}
    for subset, params in models.items():
        sub = project(ds, subset)
        X = normalizer.transform_values(subset, sub.values)
        out[subset.key] = nn.accuracy(params, X, sub.labels)
    return out
