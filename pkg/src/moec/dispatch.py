"""Capacity-limited top-1 token dispatch and routing-share statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import ClusterConfig
from .numerics import ContractError, Tensor

OVERFLOW = -1


@dataclass(frozen=True)
class DispatchResult:
    assignment: np.ndarray  # expert id per token, OVERFLOW when it did not fit
    gate: np.ndarray  # gate value of the chosen expert (0 on overflow)
    counts: np.ndarray  # tokens received per expert
    overflow: int
    capacity: int

    @property
    def num_tokens(self) -> int:
        return self.assignment.size

    @property
    def num_experts(self) -> int:
        return self.counts.size

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.num_tokens

    @property
    def overflow_rate(self) -> float:
        return self.overflow / self.num_tokens

    def check(self) -> None:
        """Hard invariants; raises ``AssertionError`` on violation."""
        assert np.all(self.counts <= self.capacity), "expert over capacity"
        assert int(self.counts.sum()) + self.overflow == self.num_tokens
        assert self.counts.sum() == np.count_nonzero(self.assignment != OVERFLOW)


def expert_capacity(capacity_factor: float, num_tokens: int, num_experts: int) -> int:
    if capacity_factor <= 0:
        raise ContractError("capacity factor must be positive")
    # rounding guard: 2 * 64 / 16 must not become 9 through float noise
    return int(math.ceil(capacity_factor * num_tokens / num_experts - 1e-9))


def dispatch(
    gates,
    selected,
    capacity_factor: float,
    num_experts: int | None = None,
    num_tokens: int | None = None,
    mask=None,
) -> DispatchResult:
    """Assign each token to its top-1 expert in batch order until it is full."""
    a = gates.values if isinstance(gates, Tensor) else np.asarray(gates, dtype=np.float64)
    choice = np.asarray(selected).reshape(len(a), -1)[:, 0]
    T = len(a) if num_tokens is None else num_tokens
    N = a.shape[1] if num_experts is None else num_experts
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if not keep[choice].all():
            raise ContractError("a token selected a masked expert")
    cap = expert_capacity(capacity_factor, T, N)
    counts = np.zeros(N, dtype=np.int64)
    assignment = np.full(T, OVERFLOW, dtype=np.int64)
    gate = np.zeros(T)
    for t in range(T):
        i = int(choice[t])
        if counts[i] < cap:
            counts[i] += 1
            assignment[t] = i
            gate[t] = a[t, i]
    overflow = int(T - counts.sum())
    return DispatchResult(assignment, gate, counts, overflow, cap)


def cluster_fractions(result: DispatchResult, cfg: ClusterConfig):
    """Per-expert token fractions, per-cluster shares and within-cluster shares.

    Returns ``(expert, cluster, within)`` where ``within[c]`` is the split of
    cluster ``c``'s tokens among its members (zeros if it received none).
    """
    counts = result.counts.astype(np.float64)
    expert = counts / result.num_tokens
    per_cluster = counts.reshape(cfg.num_clusters, cfg.cluster_size)
    totals = per_cluster.sum(axis=1)
    cluster = totals / result.num_tokens
    within = np.divide(
        per_cluster,
        totals[:, None],
        out=np.zeros_like(per_cluster),
        where=totals[:, None] > 0,
    )
    return expert, cluster, within
