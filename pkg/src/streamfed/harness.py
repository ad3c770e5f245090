"""Experiment configuration, the seeded scheduler and the experiment drivers."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from .aggregate import WeightedParams, fed_average
from .chain import Contract, Kind, election_hash, replay
from .client import Client, ClientConfig, Phase, shared_init_seed
from .dataset import (
    N_CLASSES,
    STREAM_CATALOG,
    LabelSkew,
    Normalizer,
    PatientDataset,
    generate_synthetic,
    load_csv,
    train_test_split,
)
from .forest import ForestConfig
from .nn import NetShape, TrainConfig
from .streams import MAX_STREAMS, StreamSubset, project

log = logging.getLogger(__name__)

COHORT_ORDER = ("ST", "ECG", "EDA", "Resp", "SBP", "DBP")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_patients: int = 142
    # probability of a patient owning 1, 2, ... streams
    device_count_distribution: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25, 0.0, 0.0)
    universe: tuple[str, ...] = COHORT_ORDER
    stream_assignment: str = "nested"
    label_skew: Any = "mid_heavy"
    noise_sigma: float = 0.35
    samples_per_patient: int = 1000
    classes_per_patient: int | None = None
    label_bins: int | None = None
    data_dir: str | None = None
    train_fraction: float = 0.7
    train: TrainConfig = TrainConfig()
    hidden: tuple[int, ...] = (64, 32)
    forest: ForestConfig = ForestConfig()
    federation_rounds: int = 3
    aggregation: str = "weighted"
    election_policy: str = "hash"
    calibration_samples: int = 140
    calibration_days: int = 7
    normalization: str = "reference"
    dropout_rate: float = 0.0
    max_steps: int = 100_000
    baseline: bool = True
    sweep_max_nodes: int = 0
    sweep_classes_per_node: int = 4
    sweep_rounds_per_node: int = 3
    output_dir: str = "runs/latest"

    # -- construction --------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(d)
        try:
            if "train" in kw:
                kw["train"] = _sub(TrainConfig, kw["train"], "train")
            if "forest" in kw:
                kw["forest"] = _sub(ForestConfig, kw["forest"], "forest")
            for key in ("device_count_distribution", "universe", "hidden"):
                if key in kw:
                    kw[key] = tuple(kw[key])
            if isinstance(kw.get("label_skew"), list):
                kw["label_skew"] = tuple(kw["label_skew"])
            cfg = cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["hidden"] = list(self.hidden)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def skew(self) -> LabelSkew:
        s = self.label_skew
        if s == "uniform":
            return LabelSkew.uniform()
        if s == "mid_heavy":
            return LabelSkew.mid_heavy()
        return LabelSkew(tuple(s))

    def validate(self) -> None:
        errs = []
        for name in ("n_patients", "samples_per_patient", "federation_rounds",
                     "calibration_samples", "calibration_days", "max_steps"):
            if getattr(self, name) < 1:
                errs.append(f"{name}: must be >= 1")
        if len(set(self.universe)) != len(self.universe) or not 1 <= len(self.universe) <= MAX_STREAMS:
            errs.append(f"universe: needs 1..{MAX_STREAMS} distinct streams")
        if self.data_dir is None:
            unknown = [s for s in self.universe if s not in STREAM_CATALOG]
            if unknown:
                errs.append(f"universe: no synthetic catalog entry for {unknown}")
        p = np.asarray(self.device_count_distribution, dtype=float)
        if p.size > MAX_STREAMS or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            errs.append("device_count_distribution: must be <= 6 non-negative weights summing to 1")
        elif np.any(p[len(self.universe):] > 0):
            errs.append("device_count_distribution: mass on counts larger than the universe")
        if self.stream_assignment not in ("nested", "random"):
            errs.append("stream_assignment: must be 'nested' or 'random'")
        try:
            self.skew()
        except (ValueError, TypeError) as exc:
            errs.append(f"label_skew: {exc}")
        if self.noise_sigma < 0:
            errs.append("noise_sigma: must be >= 0")
        if self.classes_per_patient is not None and not 1 <= self.classes_per_patient <= N_CLASSES:
            errs.append(f"classes_per_patient: must lie in 1..{N_CLASSES}")
        if self.label_bins is not None and not 2 <= self.label_bins <= N_CLASSES:
            errs.append(f"label_bins: must lie in 2..{N_CLASSES}")
        if not 0 < self.train_fraction < 1:
            errs.append("train_fraction: must lie in (0, 1)")
        if any(h < 1 for h in self.hidden):
            errs.append("hidden: widths must be >= 1")
        if self.aggregation not in ("weighted", "unweighted"):
            errs.append("aggregation: must be 'weighted' or 'unweighted'")
        if self.election_policy not in ("hash", "round_robin"):
            errs.append("election_policy: must be 'hash' or 'round_robin'")
        if self.normalization not in ("reference", "local"):
            errs.append("normalization: must be 'reference' or 'local'")
        if not 0 <= self.dropout_rate < 1:
            errs.append("dropout_rate: must lie in [0, 1)")
        if self.sweep_max_nodes < 0 or self.sweep_rounds_per_node < 1:
            errs.append("sweep_max_nodes must be >= 0 and sweep_rounds_per_node >= 1")
        if not 1 <= self.sweep_classes_per_node <= N_CLASSES:
            errs.append(f"sweep_classes_per_node: must lie in 1..{N_CLASSES}")
        if errs:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errs))

    def client_config(self) -> ClientConfig:
        return ClientConfig(
            train=self.train,
            hidden=self.hidden,
            federation_rounds=self.federation_rounds,
            weighted_aggregation=self.aggregation == "weighted",
            forest=self.forest,
            train_fraction=self.train_fraction,
            calibration_samples=self.calibration_samples,
            calibration_days=self.calibration_days,
            normalization=self.normalization,
            seed=self.seed,
        )


def _sub(cls, d, name):
    if isinstance(d, cls):
        return d
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(name + '.' + k for k in unknown)}")
    try:
        return cls(**d)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


# ---------------------------------------------------------------------------
# population


def bin_labels(ds: PatientDataset, bins: int | None) -> PatientDataset:
    if bins is None:
        return ds
    return replace(ds, labels=ds.labels * bins // N_CLASSES)


def load_population(cfg: ExperimentConfig) -> list[PatientDataset]:
    if cfg.data_dir is not None:
        patients = []
        for path in sorted(Path(cfg.data_dir).glob("*.csv")):
            header = path.read_text(encoding="utf-8").split("\n", 1)[0].split(",")
            owned = [s for s in cfg.universe if s in header]
            if not owned:
                raise ConfigError(f"data_dir: {path.name} carries none of the universe streams")
            patients.append(load_csv(path, StreamSubset(owned)))
        if not patients:
            raise ConfigError(f"data_dir: no CSV files in {cfg.data_dir}")
    else:
        patients = generate_synthetic(
            cfg.seed,
            cfg.n_patients,
            cfg.device_count_distribution,
            cfg.samples_per_patient,
            cfg.skew(),
            cfg.noise_sigma,
            universe=cfg.universe,
            assignment=cfg.stream_assignment,
            classes_per_patient=cfg.classes_per_patient,
        )
    return [bin_labels(p, cfg.label_bins) for p in patients]


def address_of(patient_id: str) -> str:
    return f"phone-{patient_id}"


# ---------------------------------------------------------------------------
# scheduler


@dataclass
class Simulation:
    cfg: ExperimentConfig
    contract: Contract
    clients: list[Client]
    steps: int = 0
    dropped: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: ExperimentConfig, patients: list[PatientDataset]) -> "Simulation":
        ids = [p.patient_id for p in patients]
        if len(set(ids)) != len(ids):
            raise ConfigError("patient ids must be unique; they become client addresses")
        contract = Contract(cfg.seed, cfg.election_policy)
        ccfg = cfg.client_config()
        clients = [Client(address_of(p.patient_id), p, ccfg) for p in patients]
        return cls(cfg, contract, clients)

    def live(self) -> list[Client]:
        return [c for c in self.clients if not c.crashed]

    def _registration_complete(self) -> bool:
        live = self.live()
        return bool(live) and all(
            c.phase is Phase.AWAITING_ELECTION and c.round == self.contract.round for c in live
        )

    def _inject_dropouts(self, rng: np.random.Generator) -> None:
        if self.cfg.dropout_rate <= 0:
            return
        live = self.live()
        for c in live:
            if len(self.live()) <= 1:
                break
            if rng.random() < self.cfg.dropout_rate:
                c.crashed = True
                self.contract.mark_dropped(c.address, "crashed before submitting")
                self.dropped.append(c.address)

    def run(self) -> None:
        """Interleave client steps in a seeded order until every live client is Ready."""
        rng = np.random.default_rng([self.cfg.seed, 0x5C4ED])
        while True:
            live = self.live()
            if all(c.phase is Phase.READY for c in live):
                return
            for i in rng.permutation(len(self.clients)):
                c = self.clients[i]
                if c.crashed or c.phase is Phase.READY:
                    continue
                c.step(self.contract, self.steps)
                self.steps += 1
                if self.steps > self.cfg.max_steps:
                    raise RuntimeError(f"step budget of {self.cfg.max_steps} exhausted")
            if not self.contract.election_closed and self._registration_complete():
                self._inject_dropouts(rng)
                self.contract.elect_aggregators()

    def trace(self):
        return sorted((t for c in self.clients for t in c.trace), key=lambda t: t.step)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class BaselineResult:
    accuracy: float
    streams: str
    n_patients: int
    n_train: int
    n_test: int
    epochs: int


def run_baseline(cfg: ExperimentConfig, patients: list[PatientDataset] | None = None) -> BaselineResult:
    """Centralized model on the pooled patients that own every stream in use.

    "Every stream" is the union of streams owned across the population; with
    the nested cohort design this is the largest cohort's set.
    """
    patients = load_population(cfg) if patients is None else patients
    if not patients:
        raise ConfigError("baseline needs at least one patient")
    full = StreamSubset(s for p in patients for s in p.streams)
    cohort = [p for p in patients if p.streams == full]
    if not cohort:
        raise ConfigError(f"no patient owns the full stream set {full.key}")
    trains, tests = [], []
    for p in cohort:
        tr, te = train_test_split(p, cfg.train_fraction, cfg.seed)
        trains.append(tr)
        tests.append(te)
    norm = Normalizer.fit(trains)
    Xtr = np.vstack([norm.transform(t).values for t in trains])
    ytr = np.concatenate([t.labels for t in trains])
    Xte = np.vstack([norm.transform(t).values for t in tests])
    yte = np.concatenate([t.labels for t in tests])
    shape = NetShape(len(full), cfg.hidden)
    params, hist = nn.train(Xtr, ytr, replace(cfg.train, seed=cfg.seed), shape=shape)
    return BaselineResult(nn.accuracy(params, Xte, yte), full.key, len(cohort), len(ytr), len(yte), len(hist))


@dataclass
class SweepResult:
    subset: str
    curve: list[tuple[int, float]]
    single_node: list[float]
    best_so_far: list[float]

    @property
    def median_single(self) -> float:
        return float(np.median(self.single_node))


def _federated_rounds(
    contract: Contract,
    subset: StreamSubset,
    nodes: list[tuple[str, np.ndarray, np.ndarray]],
    start: nn.ModelParams,
    cfg: ExperimentConfig,
    rounds: int,
) -> nn.ModelParams:
    params = start
    for _ in range(rounds):
        local = []
        for addr, X, y in nodes:
            tcfg = replace(cfg.train, seed=election_hash(cfg.seed, contract.round, addr) % 2**63)
            p, _ = nn.train(X, y, tcfg, init=params)
            contract.register_finished(addr, [subset])
            local.append((addr, p, len(y)))
        (event,) = contract.elect_aggregators([subset])
        for addr, p, n in local:
            contract.submit_params(addr, subset, WeightedParams(p, n, addr))
        contribs = contract.collect(event.elected, subset)
        params = fed_average(contribs, weighted=cfg.aggregation == "weighted")
        contract.broadcast_aggregate(event.elected, subset, params, cfg.aggregation)
    return params


def node_sweep(cfg: ExperimentConfig, max_nodes: int | None = None, subset: StreamSubset | None = None) -> SweepResult:
    """Admit label-skewed nodes one by one into a single-subset federation.

    Every node owns `subset` (default: the first four universe streams) and
    only experiences ``sweep_classes_per_node`` affect classes. After each
    admission the admitted nodes run ``sweep_rounds_per_node`` federation
    rounds, continuing from the current aggregate, and the aggregate is
    scored on the pooled test split of all nodes. Each node is also trained
    alone for the same number of rounds to give the single-node baseline.
    """
    max_nodes = max_nodes or cfg.sweep_max_nodes
    if max_nodes < 1:
        raise ConfigError("sweep needs max_nodes >= 1")
    subset = subset or StreamSubset(cfg.universe[: min(4, len(cfg.universe))])
    dist = [0.0] * len(subset)
    dist[-1] = 1.0
    pop = generate_synthetic(
        cfg.seed,
        max_nodes,
        dist,
        cfg.samples_per_patient,
        cfg.skew(),
        cfg.noise_sigma,
        universe=subset.members,
        assignment="nested",
        classes_per_patient=cfg.sweep_classes_per_node,
    )
    norm = Normalizer.reference(subset.members)
    nodes, tests = [], []
    for p in pop:
        p = bin_labels(p, cfg.label_bins)
        tr, te = train_test_split(p, cfg.train_fraction, cfg.seed)
        nodes.append((address_of(p.patient_id), norm.transform(tr).values, tr.labels))
        tests.append(norm.transform(te))
    Xte = np.vstack([t.values for t in tests])
    yte = np.concatenate([t.labels for t in tests])

    shape = NetShape(len(subset), cfg.hidden)
    init = nn.init_params(shape, shared_init_seed(cfg.seed, subset))
    rounds = cfg.sweep_rounds_per_node

    single = []
    for node in nodes:
        c = Contract(cfg.seed, cfg.election_policy)
        p = _federated_rounds(c, subset, [node], init, cfg, rounds)
        single.append(nn.accuracy(p, Xte, yte))

    contract = Contract(cfg.seed, cfg.election_policy)
    params = init
    curve, best = [], []
    for k in range(1, max_nodes + 1):
        params = _federated_rounds(contract, subset, nodes[:k], params, cfg, rounds)
        acc = nn.accuracy(params, Xte, yte)
        curve.append((k, acc))
        best.append(max(acc, best[-1]) if best else acc)
    return SweepResult(subset.key, curve, single, best)


@dataclass
class MetricsReport:
    subset_model_accuracy: dict[str, float]
    client_forest_accuracy: dict[str, float]
    client_best_model_accuracy: dict[str, float]
    client_streams: dict[str, str]
    population_mean: float
    population_std: float
    baseline: dict | None
    node_sweep: dict | None
    ledger: dict
    dropped: list[str]
    steps: int

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def ledger_stats(contract: Contract) -> dict:
    counts = {k.value: 0 for k in Kind}
    for e in contract.ledger:
        counts[e.kind.value] += 1
    rep = replay(contract.ledger, contract.blobs)
    return {
        "entries": len(contract.ledger),
        "by_kind": counts,
        "rounds_completed": contract.round - 1,
        "replay_ok": rep.ok,
        "replay_errors": rep.errors,
    }


def privacy_audit(sim: Simulation) -> list[str]:
    """Ledger digests that collide with a serialized raw-data batch (should be empty)."""
    raw = set()
    for c in sim.clients:
        raw |= c.raw_digests()
    return sorted({e.digest for e in sim.contract.ledger if e.digest in raw})


def simulate(cfg: ExperimentConfig, patients: list[PatientDataset] | None = None) -> Simulation:
    patients = load_population(cfg) if patients is None else patients
    sim = Simulation.create(cfg, patients)
    sim.run()
    return sim


def run_experiment(cfg: ExperimentConfig) -> tuple[MetricsReport, Simulation]:
    patients = load_population(cfg)
    sim = simulate(cfg, patients)

    forest_acc, best_model, streams = {}, {}, {}
    pooled: dict[StreamSubset, list[PatientDataset]] = {}
    for c in sim.live():
        ev = c.evaluate()
        forest_acc[c.address] = ev["forest"]
        best_model[c.address] = max(ev["models"].values())
        streams[c.address] = c.streams.key
        for s in c.subsets:
            pooled.setdefault(s, []).append((c, project(c.holdout, s)))

    subset_acc = {}
    for s in sorted(pooled, key=StreamSubset.sort_key):
        hits = total = 0
        for c, ds in pooled[s]:
            X = c.normalizer.transform_values(s, ds.values)
            hits += int(np.sum(nn.predict(c.model_store[s], X) == ds.labels))
            total += len(ds)
        subset_acc[s.key] = hits / total if total else float("nan")

    accs = np.array(list(forest_acc.values()))
    baseline = None
    if cfg.baseline:
        try:
            baseline = asdict(run_baseline(cfg, patients))
        except ConfigError as exc:
            log.warning("baseline skipped: %s", exc)
    sweep = None
    if cfg.sweep_max_nodes:
        sw = node_sweep(cfg)
        sweep = asdict(sw)

    stats = ledger_stats(sim.contract)
    stats["privacy_collisions"] = privacy_audit(sim)
    report = MetricsReport(
        subset_model_accuracy=subset_acc,
        client_forest_accuracy=forest_acc,
        client_best_model_accuracy=best_model,
        client_streams=streams,
        population_mean=float(accs.mean()) if accs.size else float("nan"),
        population_std=float(accs.std()) if accs.size else float("nan"),
        baseline=baseline,
        node_sweep=sweep,
        ledger=stats,
        dropped=sim.dropped,
        steps=sim.steps,
    )
    return report, sim


def write_outputs(report: MetricsReport, sim: Simulation, out: str | Path) -> Path:
    from .forest import dumps_forest

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.dumps(), encoding="utf-8")
    sim.contract.export(out / "ledger")
    fdir = out / "forests"
    fdir.mkdir(exist_ok=True)
    for c in sim.live():
        if c.forest is not None:
            (fdir / f"{c.address}.json").write_text(dumps_forest(c.forest), encoding="utf-8")
    with (out / "trace.jsonl").open("w", encoding="utf-8") as fh:
        for t in sim.trace():
            fh.write(json.dumps({"step": t.step, "address": t.address, "phase": t.phase.value,
                                 "next": t.next_phase.value, "action": t.action}, sort_keys=True) + "\n")
    if report.node_sweep:
        write_sweep_csv(report.node_sweep, out / "node_sweep.csv")
    rows = ["client,streams,forest_accuracy,best_model_accuracy"]
    for a in sorted(report.client_forest_accuracy):
        rows.append(f"{a},{report.client_streams[a]},{report.client_forest_accuracy[a]!r},"
                    f"{report.client_best_model_accuracy[a]!r}")
    (out / "clients.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def write_sweep_csv(sweep: dict, path: Path) -> None:
    lines = ["nodes,accuracy,best_so_far"]
    for (k, acc), b in zip(sweep["curve"], sweep["best_so_far"]):
        lines.append(f"{k},{acc!r},{b!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
