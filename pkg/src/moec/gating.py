"""Router: token/expert scores, gate values and top-k selection.

Scores are ``h . e_i`` in the plain form.  With ``normalize`` on, the token
is first projected to a low-dimensional routing space and both the token
and the expert embeddings are scaled to unit length, so the score is a
cosine divided by a learnable temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, Tensor

MASK_VALUE = -1e30
_NORM_EPS = 1e-30


@dataclass
class RoutingBatch:
    """Hidden states of ``T`` tokens entering the router."""

    hidden: Tensor

    @property
    def num_tokens(self) -> int:
        return self.hidden.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.hidden.shape[1]


@dataclass
class RouterParams:
    expert_embeddings: Tensor  # N x routing_dim
    projection: Tensor | None = None  # hidden_dim x routing_dim
    log_temperature: Tensor | None = None  # 1x1, temperature = exp(.)
    gating: str = "softmax"
    normalize: bool = False

    def __post_init__(self):
        if self.expert_embeddings.shape[0] < 1:
            raise ContractError("router needs at least one expert")
        if self.gating not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown gating kind {self.gating!r}")

    @property
    def num_experts(self) -> int:
        return self.expert_embeddings.shape[0]

    @property
    def temperature(self) -> float:
        if self.log_temperature is None:
            return 1.0
        return float(np.exp(self.log_temperature.item()))

    def tensors(self) -> dict[str, Tensor]:
        out = {"router.expert_embeddings": self.expert_embeddings}
        if self.projection is not None:
            out["router.projection"] = self.projection
        if self.log_temperature is not None:
            out["router.log_temperature"] = self.log_temperature
        return out

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        num_experts: int,
        hidden_dim: int,
        routing_dim: int = 8,
        *,
        normalize: bool = True,
        gating: str = "softmax",
        temperature: float = 1.0,
    ) -> "RouterParams":
        if not normalize:
            routing_dim = hidden_dim
        bound = 1.0 / np.sqrt(routing_dim)
        emb = Tensor(
            rng.uniform(-bound, bound, (num_experts, routing_dim)),
            requires_grad=True,
            name="router.expert_embeddings",
        )
        proj = log_t = None
        if normalize:
            b = 1.0 / np.sqrt(hidden_dim)
            proj = Tensor(
                rng.uniform(-b, b, (hidden_dim, routing_dim)),
                requires_grad=True,
                name="router.projection",
            )
            log_t = Tensor(
                [[np.log(temperature)]], requires_grad=True, name="router.log_temperature"
            )
        return cls(emb, proj, log_t, gating=gating, normalize=normalize)


@dataclass
class GateOutput:
    gates: Tensor  # T x N, alpha
    selected: np.ndarray  # T x k expert ids
    scores: Tensor  # T x N, masked entries hold MASK_VALUE
    mask: np.ndarray = field(repr=False)


def _unit_rows(x: Tensor) -> Tensor:
    norm = nx.sqrt(nx.add(nx.sum(nx.square(x), axis=1), _NORM_EPS))
    return nx.div(x, norm)


def _mask_bias(mask: np.ndarray, num_tokens: int) -> np.ndarray:
    bias = np.where(np.asarray(mask, dtype=bool), 0.0, MASK_VALUE)
    return np.broadcast_to(bias.reshape(1, -1), (num_tokens, bias.size))


def routing_scores(batch: RoutingBatch, params: RouterParams, mask) -> Tensor:
    """Per-token, per-expert routing scores with masked experts at ``MASK_VALUE``."""
    h = batch.hidden
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (params.num_experts,):
        raise DimensionError(f"mask length {mask.size} != {params.num_experts} experts")
    if params.normalize:
        if params.projection is None:
            raise ContractError("normalized routing needs a projection matrix")
        if h.shape[1] != params.projection.shape[0]:
            raise DimensionError(
                f"hidden dim {h.shape[1]} != projection input {params.projection.shape[0]}"
            )
        z = _unit_rows(nx.matmul(h, params.projection))
        e = _unit_rows(params.expert_embeddings)
        s = nx.matmul(z, nx.transpose(e))
        if params.log_temperature is not None:
            s = nx.div(s, nx.exp(params.log_temperature))
    else:
        if h.shape[1] != params.expert_embeddings.shape[1]:
            raise DimensionError(
                f"hidden dim {h.shape[1]} != embedding dim {params.expert_embeddings.shape[1]}"
            )
        s = nx.matmul(h, nx.transpose(params.expert_embeddings))
    if not mask.all():
        s = nx.add(s, Tensor(_mask_bias(mask, h.shape[0])))
    return s


def gate_values(scores: Tensor, kind: str = "softmax", mask=None) -> Tensor:
    """Gate values from scores.

    Softmax is taken over the candidate experts with the row maximum
    subtracted first.  Masked experts end up at exactly zero in both
    branches.  ``mask`` defaults to "every entry above ``MASK_VALUE / 2``".
    """
    sv = scores.values
    cand = sv > MASK_VALUE / 2 if mask is None else np.broadcast_to(
        np.asarray(mask, dtype=bool).reshape(1, -1), sv.shape
    )
    if not cand.any(axis=1).all():
        raise ContractError("every token needs at least one candidate expert")
    if kind == "softmax":
        shift = nx.stop_gradient(nx.max(scores, axis=1))
        e = nx.exp(nx.sub(scores, shift))
        return nx.div(e, nx.sum(e, axis=1))
    if kind == "sigmoid":
        g = nx.sigmoid(scores)
        if not cand.all():
            g = nx.mul(g, Tensor(cand.astype(np.float64)))
        return g
    raise ValueError(f"unknown gating kind {kind!r}")


def top_k_select(gates, k: int = 1, mask=None) -> np.ndarray:
    """Indices of the ``k`` largest gate values per token (ties: lowest index)."""
    a = gates.values if isinstance(gates, Tensor) else np.asarray(gates, dtype=np.float64)
    a = np.atleast_2d(a)
    n = a.shape[1]
    cand = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if k < 1 or k > int(cand.sum()):
        raise ContractError(f"k={k} but only {int(cand.sum())} candidate experts")
    keyed = np.where(cand[None, :], a, -np.inf)
    # stable sort on the negated values keeps the lowest index first among ties
    order = np.argsort(-keyed, axis=1, kind="stable")
    return order[:, :k]


def combine_outputs(expert_outputs, gates: Tensor, selected: np.ndarray) -> Tensor:
    """``y_t = sum_{i in K_t} alpha_{t,i} * E_i(x_t)``.

    ``expert_outputs`` maps ``(token, expert)`` to that expert's output
    (a 1 x d tensor).  Gate values are used as-is, without renormalising
    over the selected set.
    """
    rows = []
    for t, chosen in enumerate(np.atleast_2d(selected)):
        acc = None
        for i in chosen:
            key = (t, int(i))
            if key not in expert_outputs:
                raise ContractError(f"missing expert output for token {t}, expert {int(i)}")
            term = nx.mul(nx.take(gates, [t], [int(i)]), expert_outputs[key])
            acc = term if acc is None else nx.add(acc, term)
        rows.append(acc)
    return nx.concat(rows, axis=0)
