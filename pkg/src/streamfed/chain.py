"""Simulated aggregator-election contract.

The contract is a single serialized state machine. Every accepted mutating
call appends to an append-only ledger; rejected calls raise
:class:`ContractRejected` and leave the ledger untouched. Parameter payloads
stay off-ledger in a content-addressed blob store; the ledger only carries
their 64-bit digests, which is enough to replay and audit every aggregation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from .aggregate import WeightedParams, fed_average
from .nn import ModelParams, dumps_params, loads_params
from .streams import StreamSubset


class ContractRejected(Exception):
    pass


class Kind(str, Enum):
    REGISTERED = "Registered"
    DROPPED = "Dropped"
    ELECTED = "Elected"
    NO_CANDIDATES = "NoCandidates"
    PARAMS_SUBMITTED = "ParamsSubmitted"
    PARAMS_DELIVERED = "ParamsDelivered"
    AGGREGATE_BROADCAST = "AggregateBroadcast"


PAYLOAD_KINDS = {Kind.PARAMS_SUBMITTED, Kind.PARAMS_DELIVERED, Kind.AGGREGATE_BROADCAST}


def content_digest(blob: bytes) -> str:
    """64-bit BLAKE2b content hash as 16 hex digits."""
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def election_hash(seed: int, round_: int, subset_key: str) -> int:
    h = hashlib.blake2b(f"{seed}|{round_}|{subset_key}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def params_blob(params: ModelParams, subset: StreamSubset) -> bytes:
    return dumps_params(params, subset.key)


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    round: int
    kind: Kind
    subset: str | None = None
    sender: str | None = None
    recipient: str | None = None
    digest: str | None = None
    n_samples: int | None = None
    subsets: tuple[str, ...] = ()
    note: str | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["subsets"] = list(self.subsets)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "LedgerEntry":
        d = json.loads(line)
        d["kind"] = Kind(d["kind"])
        d["subsets"] = tuple(d.get("subsets", ()))
        return cls(**d)


@dataclass(frozen=True)
class ContractEvent:
    round: int
    subset: StreamSubset
    elected: str


@dataclass
class _Round:
    finished: dict[str, tuple[StreamSubset, ...]] = field(default_factory=dict)
    dropped: set[str] = field(default_factory=set)
    elected: dict[StreamSubset, str] | None = None
    submitted: dict[StreamSubset, dict[str, str]] = field(default_factory=dict)
    broadcast: set[StreamSubset] = field(default_factory=set)


class Contract:
    """Registers finished learners, elects one aggregator per subset and
    routes parameters.

    Args:
        seed: seed of the simulated on-chain randomness beacon.
        policy: ``"hash"`` picks candidate ``H(seed, round, key) mod k`` from the
            sorted candidate list; ``"round_robin"`` picks ``(round - 1) mod k``.
    """

    def __init__(self, seed: int = 0, policy: str = "hash"):
        if policy not in ("hash", "round_robin"):
            raise ValueError(f"unknown election policy {policy!r}")
        self.seed = seed
        self.policy = policy
        self.round = 1
        self.ledger: list[LedgerEntry] = []
        self.events: list[ContractEvent] = []
        self.blobs: dict[str, bytes] = {}
        self._r = _Round()
        self._inbox: dict[tuple[str, StreamSubset], list[tuple[str, str, int]]] = {}
        self._updates: dict[str, dict[StreamSubset, tuple[int, str]]] = {}

    # -- internals ---------------------------------------------------------

    def _append(self, kind: Kind, **kw) -> LedgerEntry:
        entry = LedgerEntry(len(self.ledger) + 1, self.round, kind, **kw)
        self.ledger.append(entry)
        return entry

    def _store(self, params: ModelParams, subset: StreamSubset) -> str:
        if not isinstance(params, ModelParams):
            raise TypeError("the contract only accepts model parameters")
        blob = params_blob(params, subset)
        digest = content_digest(blob)
        self.blobs.setdefault(digest, blob)
        return digest

    def _candidates(self, subset: StreamSubset) -> list[str]:
        return sorted(
            a
            for a, subs in self._r.finished.items()
            if subset in subs and a not in self._r.dropped
        )

    def _require_elected(self, subset: StreamSubset) -> str:
        if self._r.elected is None or subset not in self._r.elected:
            raise ContractRejected(
                f"round {self.round}: no aggregator elected for {subset.key}"
            )
        return self._r.elected[subset]

    # -- views -------------------------------------------------------------

    @property
    def finished(self) -> set[str]:
        return set(self._r.finished)

    @property
    def election_closed(self) -> bool:
        return self._r.elected is not None

    def aggregator_for(self, subset: StreamSubset) -> str | None:
        if self._r.elected is None:
            return None
        return self._r.elected.get(subset)

    def assigned_subsets(self, client: str) -> list[StreamSubset]:
        if self._r.elected is None:
            return []
        return [s for s, a in self._r.elected.items() if a == client]

    def participants(self, subset: StreamSubset) -> list[str]:
        return self._candidates(subset)

    def has_submitted(self, client: str, subset: StreamSubset) -> bool:
        return client in self._r.submitted.get(subset, {})

    def ready_to_aggregate(self, subset: StreamSubset) -> bool:
        got = self._r.submitted.get(subset, {})
        return all(a in got for a in self._candidates(subset))

    def is_broadcast(self, subset: StreamSubset) -> bool:
        return subset in self._r.broadcast

    def latest_aggregate(self, client: str, subset: StreamSubset) -> tuple[int, ModelParams] | None:
        """(round, params) of the newest aggregate routed to `client` for `subset`."""
        hit = self._updates.get(client, {}).get(subset)
        if hit is None:
            return None
        round_, digest = hit
        return round_, loads_params(self.blobs[digest])[0]

    # -- transactions ------------------------------------------------------

    def register_finished(self, client: str, subsets: Iterable[StreamSubset]) -> LedgerEntry:
        """Signal learning finished for this round, listing the trained subsets."""
        if client in self._r.finished:
            raise ContractRejected(f"{client} already registered in round {self.round}")
        if self._r.elected is not None:
            raise ContractRejected(f"round {self.round}: registration closed")
        subs = tuple(sorted(set(subsets), key=StreamSubset.sort_key))
        self._r.finished[client] = subs
        return self._append(
            Kind.REGISTERED, sender=client, subsets=tuple(s.key for s in subs)
        )

    def mark_dropped(self, client: str, reason: str = "timeout") -> LedgerEntry:
        if client not in self._r.finished:
            raise ContractRejected(f"{client} is not registered in round {self.round}")
        if client in self._r.dropped:
            raise ContractRejected(f"{client} already marked dropped")
        if self.assigned_subsets(client):
            raise ContractRejected(f"{client} is an elected aggregator; cannot drop it")
        self._r.dropped.add(client)
        return self._append(Kind.DROPPED, sender=client, note=reason)

    def elect_aggregators(
        self, subsets: Iterable[StreamSubset] | None = None
    ) -> list[ContractEvent]:
        if self._r.elected is not None:
            raise ContractRejected(f"round {self.round}: election already held")
        live = [a for a in self._r.finished if a not in self._r.dropped]
        if not live:
            raise ContractRejected(f"round {self.round}: no finished clients")
        if subsets is None:
            subsets = {s for a in live for s in self._r.finished[a]}
        subsets = sorted(set(subsets), key=StreamSubset.sort_key)
        if not subsets:
            raise ContractRejected("no subsets to elect for")

        elected: dict[StreamSubset, str] = {}
        events = []
        for subset in subsets:
            cands = self._candidates(subset)
            if not cands:
                self._append(Kind.NO_CANDIDATES, subset=subset.key)
                continue
            if self.policy == "hash":
                idx = election_hash(self.seed, self.round, subset.key) % len(cands)
            else:
                idx = (self.round - 1) % len(cands)
            winner = cands[idx]
            elected[subset] = winner
            self._append(Kind.ELECTED, subset=subset.key, recipient=winner)
            events.append(ContractEvent(self.round, subset, winner))
        self._r.elected = elected
        self.events.extend(events)
        if not elected:
            self._advance()
        return events

    def submit_params(self, sender: str, subset: StreamSubset, wp: WeightedParams) -> str:
        """Route one client's parameters to the subset's aggregator; returns the digest."""
        if not isinstance(wp, WeightedParams):
            raise TypeError("the contract only accepts model parameters")
        aggregator = self._require_elected(subset)
        if sender not in self._candidates(subset):
            raise ContractRejected(f"{sender} is not a live participant for {subset.key}")
        if self.has_submitted(sender, subset):
            raise ContractRejected(f"{sender} already submitted {subset.key} this round")
        digest = self._store(wp.params, subset)
        self._r.submitted.setdefault(subset, {})[sender] = digest
        self._inbox.setdefault((aggregator, subset), []).append((sender, digest, wp.n_samples))
        self._append(
            Kind.PARAMS_SUBMITTED,
            subset=subset.key,
            sender=sender,
            recipient=aggregator,
            digest=digest,
            n_samples=wp.n_samples,
        )
        return digest

    def collect(self, aggregator: str, subset: StreamSubset) -> list[WeightedParams]:
        """Hand the aggregator every submission routed to it for `subset`."""
        if self._require_elected(subset) != aggregator:
            raise ContractRejected(f"{aggregator} is not the aggregator for {subset.key}")
        pending = self._inbox.pop((aggregator, subset), [])
        out = []
        for sender, digest, n in pending:
            self._append(
                Kind.PARAMS_DELIVERED,
                subset=subset.key,
                sender=sender,
                recipient=aggregator,
                digest=digest,
                n_samples=n,
            )
            out.append(WeightedParams(loads_params(self.blobs[digest])[0], n, sender))
        return out

    def broadcast_aggregate(
        self, sender: str, subset: StreamSubset, params: ModelParams, rule: str = "weighted"
    ) -> str:
        if self._require_elected(subset) != sender:
            raise ContractRejected(f"{sender} is not the aggregator for {subset.key}")
        if subset in self._r.broadcast:
            raise ContractRejected(f"{subset.key} already broadcast in round {self.round}")
        if rule not in ("weighted", "unweighted"):
            raise ValueError(f"unknown aggregation rule {rule!r}")
        digest = self._store(params, subset)
        self._append(
            Kind.AGGREGATE_BROADCAST,
            subset=subset.key,
            sender=sender,
            digest=digest,
            note=rule,
        )
        for client in self._candidates(subset):
            self._updates.setdefault(client, {})[subset] = (self.round, digest)
        self._r.broadcast.add(subset)
        if self._r.broadcast >= set(self._r.elected):
            self._advance()
        return digest

    def _advance(self) -> None:
        self.round += 1
        self._r = _Round()

    # -- export ------------------------------------------------------------

    def dumps_ledger(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.ledger)

    def export(self, directory: str | Path) -> None:
        """Write ``ledger.jsonl`` and the off-ledger payloads under ``blobs/``."""
        directory = Path(directory)
        (directory / "blobs").mkdir(parents=True, exist_ok=True)
        (directory / "ledger.jsonl").write_text(self.dumps_ledger(), encoding="utf-8")
        for digest, blob in sorted(self.blobs.items()):
            (directory / "blobs" / f"{digest}.params").write_bytes(blob)


def load_ledger(path: str | Path) -> list[LedgerEntry]:
    text = Path(path).read_text(encoding="utf-8")
    return [LedgerEntry.from_json(line) for line in text.splitlines() if line.strip()]


def load_blobs(directory: str | Path) -> dict[str, bytes]:
    return {p.stem: p.read_bytes() for p in sorted(Path(directory).glob("*.params"))}


# ---------------------------------------------------------------------------
# replay verification


@dataclass
class ReplayReport:
    ok: bool
    errors: list[str]
    aggregates: dict[tuple[int, str], str]
    final_models: dict[str, dict[str, str]]
    n_entries: int


def replay(entries: list[LedgerEntry], blobs: dict[str, bytes]) -> ReplayReport:
    """Re-derive every broadcast aggregate from the ledger and payload store.

    Checks sequence monotonicity, election membership, one aggregator per
    (round, subset), submit/deliver correspondence and that each recomputed
    aggregate hashes to the broadcast digest. Returns the final aggregate
    digest per client and subset.
    """
    errors: list[str] = []
    last_seq = 0
    registered: dict[int, dict[str, tuple[str, ...]]] = {}
    dropped: dict[int, set[str]] = {}
    elected: dict[tuple[int, str], str] = {}
    submitted: dict[tuple[int, str, str], tuple[str, int]] = {}
    delivered: dict[tuple[int, str], list[tuple[str, str, int]]] = {}
    aggregates: dict[tuple[int, str], str] = {}
    final: dict[str, dict[str, str]] = {}

    for digest, blob in blobs.items():
        if content_digest(blob) != digest:
            errors.append(f"blob {digest} does not hash to its name")

    for e in entries:
        if e.seq <= last_seq:
            errors.append(f"seq {e.seq} not increasing after {last_seq}")
        last_seq = e.seq
        if (e.digest is not None) != (e.kind in PAYLOAD_KINDS):
            errors.append(f"seq {e.seq}: digest presence does not match kind {e.kind.value}")
        rkey = (e.round, e.subset)
        if e.kind is Kind.REGISTERED:
            registered.setdefault(e.round, {})[e.sender] = e.subsets
        elif e.kind is Kind.DROPPED:
            dropped.setdefault(e.round, set()).add(e.sender)
        elif e.kind is Kind.ELECTED:
            if rkey in elected:
                errors.append(f"seq {e.seq}: second aggregator for {e.subset} in round {e.round}")
            if e.recipient not in registered.get(e.round, {}):
                errors.append(f"seq {e.seq}: {e.recipient} elected without registering")
            elected[rkey] = e.recipient
        elif e.kind is Kind.PARAMS_SUBMITTED:
            skey = (e.round, e.subset, e.sender)
            if skey in submitted:
                errors.append(f"seq {e.seq}: duplicate submission by {e.sender}")
            submitted[skey] = (e.digest, e.n_samples)
        elif e.kind is Kind.PARAMS_DELIVERED:
            if submitted.pop((e.round, e.subset, e.sender), None) != (e.digest, e.n_samples):
                errors.append(f"seq {e.seq}: delivery without a matching submission")
            delivered.setdefault(rkey, []).append((e.sender, e.digest, e.n_samples))
        elif e.kind is Kind.AGGREGATE_BROADCAST:
            if elected.get(rkey) != e.sender:
                errors.append(f"seq {e.seq}: broadcast by non-aggregator {e.sender}")
            contribs = []
            for sender, digest, n in delivered.pop(rkey, []):
                if digest not in blobs:
                    errors.append(f"seq {e.seq}: missing payload {digest}")
                    continue
                contribs.append(WeightedParams(loads_params(blobs[digest])[0], n, sender))
            if not contribs:
                errors.append(f"seq {e.seq}: broadcast with no delivered contributions")
                continue
            agg = fed_average(contribs, weighted=(e.note != "unweighted"))
            got = content_digest(params_blob(agg, StreamSubset.parse(e.subset)))
            if got != e.digest:
                errors.append(f"seq {e.seq}: aggregate digest {got} != ledger {e.digest}")
            aggregates[rkey] = got
            gone = dropped.get(e.round, set())
            for client, subs in registered.get(e.round, {}).items():
                if e.subset in subs and client not in gone:
                    final.setdefault(client, {})[e.subset] = got

    return ReplayReport(not errors, errors, aggregates, final, len(entries))
