"""Per-subset parameter averaging run by an elected aggregator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ModelParams


@dataclass(eq=False)
class WeightedParams:
    params: ModelParams
    n_samples: int
    source: str = ""

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def _canonical_order(contributions: list[WeightedParams]) -> list[WeightedParams]:
    # source address first; payload bytes break ties so any input permutation
    # yields the same summation order
    return sorted(
        contributions,
        key=lambda c: (c.source, c.n_samples, c.params.theta.tobytes()),
    )


def fed_average(contributions: list[WeightedParams], weighted: bool = True) -> ModelParams:
    """Sample-weighted mean of parameter vectors (FedAvg).

    Computed as ``theta_0 + sum_i w_i * (theta_i - theta_0)`` over the
    canonical order, which returns identical inputs bit-exactly, and clipped
    to the per-coordinate input range. ``weighted=False`` gives every
    contribution the same weight.
    """
    if not contributions:
        raise ValueError("nothing to aggregate")
    shape = contributions[0].params.shape
    for i, c in enumerate(contributions):
        if c.params.shape != shape:
            raise ValueError(
                f"contribution {i} has shape {c.params.shape.dims}, expected {shape.dims}"
            )
    ordered = _canonical_order(list(contributions))
    n = np.array([c.n_samples if weighted else 1 for c in ordered], dtype=np.float64)
    w = n / n.sum()

    base = ordered[0].params.theta
    acc = np.zeros_like(base)
    for wi, c in zip(w, ordered):
        acc += wi * (c.params.theta - base)
    out = base + acc

    stack = np.stack([c.params.theta for c in ordered])
    out = np.clip(out, stack.min(axis=0), stack.max(axis=0))
    return ModelParams(shape, out)
