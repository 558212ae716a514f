"""Toy MoE layer, task head, task losses and checkpoint I/O.

The expert layer runs every expert densely on the batch and zeroes the
contributions of unselected (token, expert) pairs.  At toy sizes this is
cheaper than per-expert gathers on the tape, and the result (values and
gradients) is identical to running each expert only on its own tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dispatch import OVERFLOW, DispatchResult, dispatch
from .dropout import ExpertMask, inference_mask
from .gating import GateOutput, RouterParams, RoutingBatch, gate_values, routing_scores, top_k_select
from .losses import ClusterConfig, RoutingStats, clustering_terms
from .numerics import ContractError, DimensionError, Tensor

CHECKPOINT_MAGIC = "moec-checkpoint"
CHECKPOINT_VERSION = 1


def _uniform(rng, fan_in: int, shape, name: str) -> Tensor:
    b = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-b, b, shape), requires_grad=True, name=name)


@dataclass
class ExpertFFN:
    """``relu(x W1 + b1) W2 + b2``."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, hidden_dim: int, ffn_dim: int, prefix: str) -> "ExpertFFN":
        return cls(
            _uniform(rng, hidden_dim, (hidden_dim, ffn_dim), f"{prefix}.w1"),
            _uniform(rng, hidden_dim, (1, ffn_dim), f"{prefix}.b1"),
            _uniform(rng, ffn_dim, (ffn_dim, hidden_dim), f"{prefix}.w2"),
            _uniform(rng, ffn_dim, (1, hidden_dim), f"{prefix}.b2"),
        )

    def __call__(self, x: Tensor) -> Tensor:
        h = nx.relu(nx.add(nx.matmul(x, self.w1), self.b1))
        return nx.add(nx.matmul(h, self.w2), self.b2)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


@dataclass
class MoELayer:
    router: RouterParams
    experts: list[ExpertFFN]
    clusters: ClusterConfig
    capacity_factor: float = 2.0
    dropout_level: str = "none"
    dropout_rate: float = 0.0

    def __post_init__(self):
        n = len(self.experts)
        if n != self.router.num_experts or n != self.clusters.num_experts:
            raise DimensionError("router, experts and cluster config disagree on N")
        shapes = {tuple(t.shape for t in (e.w1, e.b1, e.w2, e.b2)) for e in self.experts}
        if len(shapes) != 1:
            raise DimensionError("experts must share identical shapes")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def hidden_dim(self) -> int:
        return self.experts[0].w1.shape[0]

    @property
    def ffn_dim(self) -> int:
        return self.experts[0].w1.shape[1]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        hidden_dim: int,
        ffn_dim: int,
        clusters: ClusterConfig,
        *,
        routing_dim: int = 8,
        normalize: bool = True,
        gating: str = "softmax",
        temperature: float = 1.0,
        capacity_factor: float = 2.0,
        dropout_level: str = "none",
        dropout_rate: float = 0.0,
    ) -> "MoELayer":
        n = clusters.num_experts
        router = RouterParams.init(
            rng, n, hidden_dim, routing_dim,
            normalize=normalize, gating=gating, temperature=temperature,
        )
        experts = [ExpertFFN.init(rng, hidden_dim, ffn_dim, f"expert{i}") for i in range(n)]
        return cls(router, experts, clusters, capacity_factor, dropout_level, dropout_rate)

    def tensors(self) -> dict[str, Tensor]:
        out = dict(self.router.tensors())
        for i, e in enumerate(self.experts):
            out.update(e.tensors(f"expert{i}"))
        return out


@dataclass
class TaskHead:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, hidden_dim: int, out_dim: int) -> "TaskHead":
        return cls(
            _uniform(rng, hidden_dim, (hidden_dim, out_dim), "head.weight"),
            _uniform(rng, hidden_dim, (1, out_dim), "head.bias"),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add(nx.matmul(x, self.weight), self.bias)

    def tensors(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


@dataclass
class MoEModel:
    """One MoE layer (with residual) followed by a linear head."""

    layer: MoELayer
    head: TaskHead
    task: str = "regression"
    meta: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        out = self.layer.tensors()
        out.update(self.head.tensors())
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, t in params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != t.shape:
                raise DimensionError(f"{name}: expected {t.shape}, got {v.shape}")
            v = v.copy()
            v.setflags(write=False)
            t.values = v

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.parameters().items()}

    def forward(self, x: Tensor, mask: ExpertMask | None = None, train: bool = True, mu: float = 0.0):
        out, gate, result, stats = moe_forward(RoutingBatch(x), self.layer, mask, train, mu=mu)
        return self.head(out), gate, result, stats


def _expert_stack(experts: list[ExpertFFN]):
    w1 = nx.concat([e.w1 for e in experts], axis=1)
    b1 = nx.concat([e.b1 for e in experts], axis=1)
    w2 = nx.concat([e.w2 for e in experts], axis=0)
    b2 = nx.concat([e.b2 for e in experts], axis=0)
    return w1, b1, w2, b2


def moe_forward(
    batch: RoutingBatch,
    layer: MoELayer,
    mask: ExpertMask | None = None,
    train: bool = True,
    *,
    mu: float = 0.0,
) -> tuple[Tensor, GateOutput, DispatchResult, RoutingStats]:
    """Route, dispatch, run experts and add the residual.

    Overflowed tokens get a zero expert contribution, so their output is the
    input.  With ``train`` false the mask is ignored (all experts eligible).
    """
    x = batch.hidden
    if x.shape[1] != layer.hidden_dim:
        raise DimensionError(f"hidden dim {x.shape[1]} != layer dim {layer.hidden_dim}")
    n, T = layer.num_experts, x.shape[0]
    if not train or mask is None:
        mask = inference_mask(n)
    keep = np.asarray(mask, dtype=bool)

    scores = routing_scores(batch, layer.router, keep)
    gates = gate_values(scores, layer.router.gating, keep)
    selected = top_k_select(gates, 1, keep)
    result = dispatch(gates, selected, layer.capacity_factor, n, T, keep)

    routed = result.assignment != OVERFLOW
    onehot = np.zeros((T, n))
    onehot[np.flatnonzero(routed), result.assignment[routed]] = 1.0
    weight = nx.mul(gates, Tensor(onehot))  # T x N, alpha on the chosen expert

    F = layer.ffn_dim
    spread = np.kron(np.eye(n), np.ones((1, F)))  # N x (N*F)
    w1, b1, w2, b2 = _expert_stack(layer.experts)
    hidden = nx.relu(nx.add(nx.matmul(x, w1), b1))
    gated = nx.mul(hidden, nx.matmul(weight, Tensor(spread)))
    y = nx.add(nx.matmul(gated, w2), nx.matmul(weight, b2))
    out = nx.add(x, y)

    gate_out = GateOutput(gates, selected, scores, keep)
    stats = routing_stats(gates, result, layer.clusters, keep, mu=mu,
                          skip_empty=mask.level == "global")
    return out, gate_out, result, stats


def routing_stats(gates: Tensor, result: DispatchResult, cfg: ClusterConfig, keep,
                  mu: float = 0.0, skip_empty: bool = False) -> RoutingStats:
    p = gates.values.mean(axis=0)
    kept = np.flatnonzero(keep)
    cluster_probs = [p[[j for j in cfg.members(c) if keep[j]]] for c in range(cfg.num_clusters)]
    means = np.array([cp.mean() if cp.size else 0.0 for cp in cluster_probs])
    c_intra, c_inter = clustering_terms(p, cfg, keep if kept.size < p.size else None,
                                        mu, skip_empty=skip_empty)
    return RoutingStats(
        fractions=result.fractions,
        mean_probs=p,
        cluster_probs=cluster_probs,
        cluster_means=means,
        num_tokens=result.num_tokens,
        counts=result.counts.copy(),
        c_intra=c_intra,
        c_inter=c_inter,
    )


def task_loss(outputs: Tensor, targets, kind: str = "regression") -> Tensor:
    """Mean-squared error, or mean negative log-likelihood of integer labels."""
    if kind in ("regression", "mse", "regression-mse"):
        tgt = nx.as_tensor(targets)
        if tgt.shape != outputs.shape:
            raise DimensionError(f"outputs {outputs.shape} vs targets {tgt.shape}")
        return nx.mean(nx.square(nx.sub(outputs, tgt)))
    if kind in ("classification", "nll", "classification-nll"):
        labels = np.asarray(targets, dtype=np.int64).reshape(-1)
        if labels.size != outputs.shape[0]:
            raise DimensionError(f"{outputs.shape[0]} rows vs {labels.size} labels")
        if labels.min() < 0 or labels.max() >= outputs.shape[1]:
            raise ContractError("label out of range")
        shift = nx.stop_gradient(nx.max(outputs, axis=1))
        z = nx.sub(outputs, shift)
        logz = nx.log(nx.sum(nx.exp(z), axis=1))
        picked = nx.take(z, np.arange(labels.size), labels)
        return nx.neg(nx.mean(nx.sub(picked, logz)))
    raise ValueError(f"unknown task loss {kind!r}")


def build_model(
    rng: np.random.Generator,
    hidden_dim: int,
    ffn_dim: int,
    out_dim: int,
    clusters: ClusterConfig,
    task: str = "regression",
    **layer_kwargs,
) -> MoEModel:
    layer = MoELayer.init(rng, hidden_dim, ffn_dim, clusters, **layer_kwargs)
    head = TaskHead.init(rng, hidden_dim, out_dim)
    return MoEModel(layer, head, task)


# ---------------------------------------------------------------- checkpoints
#
# Text format, UTF-8:
#   moec-checkpoint 1
#   <name> <rows> <cols>
#   <rows*cols floats, row-major, space separated, repr precision>
#   ... one header/value line pair per parameter, sorted by name


def save_checkpoint(path, params: dict[str, np.ndarray] | MoEModel) -> None:
    if isinstance(params, MoEModel):
        params = params.state()
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for name in sorted(params):
        v = np.asarray(params[name], dtype=np.float64)
        if v.ndim != 2 or " " in name:
            raise ValueError(f"cannot store parameter {name!r} with shape {v.shape}")
        lines.append(f"{name} {v.shape[0]} {v.shape[1]}")
        lines.append(" ".join(repr(float(x)) for x in v.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError("empty checkpoint")
    magic, _, version = lines[0].partition(" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint: header {lines[0]!r}")
    if int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = {}
    body = lines[1:]
    if len(body) % 2:
        raise ValueError("truncated checkpoint")
    for head, data in zip(body[::2], body[1::2]):
        name, r, c = head.split()
        vals = np.array([float(x) for x in data.split()], dtype=np.float64)
        out[name] = vals.reshape(int(r), int(c))
    return out
