"""Auxiliary routing objectives: load balance and expert-cluster losses.

All differentiable quantities are ``Tensor`` values on the active tape;
routing probabilities ``p`` are 1 x N row vectors.  Under expert dropout
only surviving experts enter the statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, Tensor

DEFAULT_BALANCE_COEF = 1e-2
DEFAULT_CLUSTER_COEF = 1e-2
DEFAULT_INTER_COEF = 0.0
_MAX_EPS = 1e-12


@dataclass(frozen=True)
class ClusterConfig:
    """``num_experts`` experts split into ``num_clusters`` contiguous groups."""

    num_experts: int
    num_clusters: int

    def __post_init__(self):
        if self.num_experts < 1 or self.num_clusters < 1:
            raise ContractError("need at least one expert and one cluster")
        if self.num_experts % self.num_clusters:
            raise ContractError(
                f"{self.num_experts} experts cannot be split into "
                f"{self.num_clusters} equal clusters"
            )

    @classmethod
    def from_cluster_size(cls, num_experts: int, cluster_size: int) -> "ClusterConfig":
        if cluster_size < 1 or num_experts % cluster_size:
            raise ContractError(f"cluster size {cluster_size} does not divide {num_experts}")
        return cls(num_experts, num_experts // cluster_size)

    @property
    def cluster_size(self) -> int:
        return self.num_experts // self.num_clusters

    def cluster_of(self, expert: int) -> int:
        return expert // self.cluster_size

    def members(self, cluster: int) -> range:
        L = self.cluster_size
        return range(cluster * L, (cluster + 1) * L)

    def cluster_ids(self) -> np.ndarray:
        return np.arange(self.num_experts) // self.cluster_size


@dataclass
class LossBreakdown:
    task: float
    balance: float
    clustering: float
    balance_coef: float = DEFAULT_BALANCE_COEF
    cluster_coef: float = DEFAULT_CLUSTER_COEF
    inter_coef: float = DEFAULT_INTER_COEF

    @property
    def total(self) -> float:
        return self.task + self.balance + self.clustering


@dataclass
class RoutingStats:
    fractions: np.ndarray  # f, length N
    mean_probs: np.ndarray  # p, length N
    cluster_probs: list[np.ndarray]  # surviving p per cluster
    cluster_means: np.ndarray  # p-bar, length m
    num_tokens: int
    counts: np.ndarray
    c_intra: float
    c_inter: float


def token_fractions(assignments, num_experts: int, num_tokens: int | None = None) -> np.ndarray:
    """``f_i = Count_i / T``; ids < 0 (overflow markers) are not counted."""
    a = np.asarray(assignments, dtype=np.int64).reshape(-1)
    T = a.size if num_tokens is None else int(num_tokens)
    if T < 1:
        raise ContractError("empty batch")
    kept = a[a >= 0]
    if kept.size and kept.max() >= num_experts:
        raise ContractError(f"expert id {kept.max()} out of range for N={num_experts}")
    return np.bincount(kept, minlength=num_experts).astype(np.float64) / T


def mean_routing_prob(gates: Tensor) -> Tensor:
    """Column mean of the gate matrix: ``p_i = (1/T) sum_x alpha_i(x)``."""
    return nx.mean(gates, axis=0)


def _survivors(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.arange(n)
    mask = np.asarray(getattr(mask, "keep", mask), dtype=bool)
    if mask.shape != (n,):
        raise DimensionError(f"mask length {mask.size} != {n}")
    return np.flatnonzero(mask)


def balance_loss(
    fractions,
    probs: Tensor,
    num_experts: int | None = None,
    coef: float = DEFAULT_BALANCE_COEF,
    mask=None,
) -> Tensor:
    """``coef * N * sum_i f_i p_i`` with ``f`` held constant."""
    p = nx.as_tensor(probs)
    f = np.asarray(fractions, dtype=np.float64).reshape(1, -1)
    if f.shape != p.shape:
        raise DimensionError(f"f {f.shape} and p {p.shape} differ")
    n = p.shape[1] if num_experts is None else num_experts
    keep = _survivors(mask, p.shape[1])
    if keep.size != p.shape[1]:
        p = nx.select_columns(p, keep)
        f = f[:, keep]
    return nx.scale(nx.sum(nx.mul(p, Tensor(f))), coef * n)


def _cluster_matrices(cfg: ClusterConfig, keep: np.ndarray, skip_empty: bool = False):
    """Averaging matrix (survivors x m') and its 0/1 spread-back (m' x survivors).

    ``m'`` is ``m`` unless ``skip_empty`` drops clusters with no survivors.
    """
    cid = cfg.cluster_ids()[keep]
    counts = np.bincount(cid, minlength=cfg.num_clusters)
    if np.any(counts == 0):
        if not skip_empty:
            empty = int(np.flatnonzero(counts == 0)[0])
            raise ContractError(f"cluster {empty} has no surviving experts")
        live = np.flatnonzero(counts)
        cid = np.searchsorted(live, cid)
        counts = counts[live]
    onehot = np.zeros((keep.size, counts.size))
    onehot[np.arange(keep.size), cid] = 1.0
    return onehot / counts[None, :], onehot.T.copy()


def cluster_means(probs: Tensor, cfg: ClusterConfig, mask=None, skip_empty=False) -> Tensor:
    p = nx.as_tensor(probs)
    keep = _survivors(mask, cfg.num_experts)
    avg, _ = _cluster_matrices(cfg, keep, skip_empty)
    return nx.matmul(nx.select_columns(p, keep), Tensor(avg))


def cluster_variances(probs: Tensor, cfg: ClusterConfig, mask=None, skip_empty=False) -> Tensor:
    """Population variance of surviving ``p`` inside each cluster (1 x m).

    With ``skip_empty`` clusters that lost every expert are left out
    instead of raising.
    """
    p = nx.as_tensor(probs)
    if p.shape != (1, cfg.num_experts):
        raise DimensionError(f"p shape {p.shape} does not match N={cfg.num_experts}")
    keep = _survivors(mask, cfg.num_experts)
    avg, spread = _cluster_matrices(cfg, keep, skip_empty)
    ps = nx.select_columns(p, keep)
    centre = nx.matmul(nx.matmul(ps, Tensor(avg)), Tensor(spread))
    return nx.matmul(nx.square(nx.sub(ps, centre)), Tensor(avg))


def intra_cluster_variance(probs: Tensor, cfg: ClusterConfig, mask=None, skip_empty=False) -> Tensor:
    """Mean over clusters of the within-cluster variance of ``p``."""
    return nx.mean(cluster_variances(probs, cfg, mask, skip_empty))


def inter_cluster_constraint(means: Tensor, mu: float) -> Tensor:
    """``exp(-mu * (max - second_max) / max)`` over the cluster means."""
    pbar = nx.as_tensor(means)
    m = pbar.shape[1]
    if mu == 0:
        return Tensor([[1.0]])
    if m < 2:
        raise ContractError("inter-cluster term needs at least two clusters")
    v = pbar.values[0]
    if np.any(v < 0):
        raise ContractError("cluster means must be non-negative")
    top = int(np.argmax(v))
    if v[top] <= _MAX_EPS:
        raise ContractError("largest cluster mean is zero")
    first = nx.max(pbar)
    rest = np.delete(np.arange(m), top)
    second = nx.max(nx.select_columns(pbar, rest))
    gap = nx.div(nx.sub(first, second), first)
    return nx.exp(nx.scale(gap, -mu))


def clustering_loss(
    probs: Tensor,
    cfg: ClusterConfig,
    mask=None,
    coef: float = DEFAULT_CLUSTER_COEF,
    mu: float = DEFAULT_INTER_COEF,
    skip_empty: bool = False,
) -> Tensor:
    """``coef * N * C_intra * C_inter``."""
    c_intra = intra_cluster_variance(probs, cfg, mask, skip_empty)
    loss = nx.scale(c_intra, coef * cfg.num_experts)
    if mu != 0:
        means = cluster_means(probs, cfg, mask, skip_empty)
        loss = nx.mul(loss, inter_cluster_constraint(means, mu))
    return loss


def clustering_terms(probs, cfg: ClusterConfig, mask=None, mu: float = 0.0, skip_empty=False):
    """``(C_intra, C_inter)`` as floats, for logging."""
    p = Tensor(nx.as_tensor(probs).values)
    c_intra = intra_cluster_variance(p, cfg, mask, skip_empty).item()
    means = cluster_means(p, cfg, mask, skip_empty)
    if means.shape[1] < 2 or mu == 0:
        c_inter = 1.0
    else:
        c_inter = inter_cluster_constraint(means, mu).item()
    return c_intra, c_inter


def total_loss(task, balance, clustering):
    """Plain sum of the three objective terms."""
    return nx.add(nx.add(task, balance), clustering)
