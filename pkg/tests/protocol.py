"""Randomized contract driver shared by the chain tests and the acceptance suite."""

import numpy as np

from streamfed.aggregate import WeightedParams, fed_average
from streamfed.chain import Contract, Kind, content_digest, params_blob
from streamfed.nn import ModelParams, NetShape
from streamfed.streams import StreamSubset, power_set

UNIVERSE = ("ECG", "EDA", "ST", "Resp")


def random_run(seed, n_clients=20, n_rounds=10, dropout=0.1, policy="hash"):
    """Drive a contract through `n_rounds` full rounds with random params.

    Returns the contract and the final aggregate digest each live client
    should hold per subset, tracked independently of the ledger.
    """
    rng = np.random.default_rng(seed)
    contract = Contract(seed, policy)
    owned = {}
    for i in range(n_clients):
        k = int(rng.integers(1, len(UNIVERSE) + 1))
        owned[f"c{i:02d}"] = StreamSubset([UNIVERSE[j] for j in rng.choice(len(UNIVERSE), k, replace=False)])
    expected = {}
    for _ in range(n_rounds):
        round_ = contract.round
        order = [list(owned)[i] for i in rng.permutation(n_clients)]
        trained = {}
        for c in order:
            subs = power_set(owned[c])
            trained[c] = subs
            contract.register_finished(c, subs)
        events = contract.elect_aggregators()
        aggregators = {e.elected for e in events}
        dropped = set()
        for c in order:
            if c not in aggregators and rng.random() < dropout:
                contract.mark_dropped(c, "injected")
                dropped.add(c)
        live = [c for c in order if c not in dropped]
        for c in live:
            for s in trained[c]:
                p = ModelParams(NetShape(len(s), (2,), 3), rng.normal(size=NetShape(len(s), (2,), 3).n_params))
                contract.submit_params(c, s, WeightedParams(p, int(rng.integers(1, 100)), c))
        for e in sorted(events, key=lambda e: rng.random()):
            contribs = contract.collect(e.elected, e.subset)
            agg = fed_average(contribs)
            contract.broadcast_aggregate(e.elected, e.subset, agg)
            d = content_digest(params_blob(agg, e.subset))
            for c in live:
                if e.subset in trained[c]:
                    expected.setdefault(c, {})[e.subset.key] = d
        assert contract.round == round_ + 1
    return contract, expected


def aggregators_per_round_subset(ledger):
    counts = {}
    for e in ledger:
        if e.kind is Kind.ELECTED:
            counts[(e.round, e.subset)] = counts.get((e.round, e.subset), 0) + 1
    return counts


def election_counts(seed, rounds=1000, k=4, policy="hash"):
    contract = Contract(seed, policy)
    cands = [f"n{i}" for i in range(k)]
    subset = StreamSubset(["ECG"])
    counts = dict.fromkeys(cands, 0)
    for _ in range(rounds):
        for c in cands:
            contract.register_finished(c, [subset])
        (ev,) = contract.elect_aggregators()
        counts[ev.elected] += 1
        for c in cands:
            p = ModelParams(NetShape(1, (), 2), np.zeros(4))
            contract.submit_params(c, subset, WeightedParams(p, 1, c))
        contract.broadcast_aggregate(ev.elected, subset, fed_average(contract.collect(ev.elected, subset)))
    return counts
