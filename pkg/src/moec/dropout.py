"""Expert dropout at the routing stage.

A mask removes expert ids from the candidate list for one step.  The
cluster-level variant drops the same number of experts inside every
cluster, so each cluster keeps at least one candidate; the global-level
variant ignores cluster structure and can empty a cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import ClusterConfig
from .numerics import ContractError

LEVELS = ("none", "cluster", "global")


@dataclass(frozen=True)
class ExpertMask:
    keep: np.ndarray  # bool, length N; True = candidate
    seed: int | None = None
    level: str = "none"
    rate: float = 0.0

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool)
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)
        if self.level not in LEVELS:
            raise ValueError(f"unknown dropout level {self.level!r}")
        if not keep.any():
            raise ContractError("mask must keep at least one expert")

    def __array__(self, dtype=None, copy=None):
        return self.keep if dtype is None else self.keep.astype(dtype)

    def __len__(self) -> int:
        return self.keep.size

    @property
    def num_experts(self) -> int:
        return self.keep.size

    @property
    def survivors(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")


def drop_count(size: int, rate: float) -> int:
    # floor, with a small guard so e.g. 0.75 * 8 isn't floored to 5
    return int(math.floor(rate * size + 1e-9))


def cluster_level_mask(cfg: ClusterConfig, rate: float, seed: int) -> ExpertMask:
    """Drop ``floor(rate * L)`` experts, chosen independently in every cluster."""
    _check_rate(rate)
    L = cfg.cluster_size
    k = drop_count(L, rate)
    if k > L - 1:
        raise ContractError(f"rate {rate} would empty clusters of size {L}")
    keep = np.ones(cfg.num_experts, dtype=bool)
    if k:
        rng = np.random.default_rng(seed)
        for c in range(cfg.num_clusters):
            dropped = rng.choice(L, size=k, replace=False)
            keep[c * L + dropped] = False
    return ExpertMask(keep, seed=seed, level="cluster", rate=rate)


def global_level_mask(num_experts: int, rate: float, seed: int) -> ExpertMask:
    """Drop ``floor(rate * N)`` experts uniformly from all ``N``."""
    _check_rate(rate)
    k = drop_count(num_experts, rate)
    keep = np.ones(num_experts, dtype=bool)
    if k:
        rng = np.random.default_rng(seed)
        keep[rng.choice(num_experts, size=k, replace=False)] = False
    return ExpertMask(keep, seed=seed, level="global", rate=rate)


def inference_mask(num_experts: int) -> ExpertMask:
    return ExpertMask(np.ones(num_experts, dtype=bool))


def make_mask(level: str, cfg: ClusterConfig, rate: float, seed: int) -> ExpertMask:
    if level == "none" or rate == 0.0:
        _check_rate(rate)
        return inference_mask(cfg.num_experts)
    if level == "cluster":
        return cluster_level_mask(cfg, rate, seed)
    if level == "global":
        return global_level_mask(cfg.num_experts, rate, seed)
    raise ValueError(f"unknown dropout level {level!r}")
