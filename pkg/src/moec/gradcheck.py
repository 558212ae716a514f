"""Finite-difference checks of every loss surface.

Each check draws random points, computes the tape gradient and compares it
with a central difference.  ``fault`` flips the sign of one component's
analytic gradient; it exists so the checker itself can be tested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dropout import cluster_level_mask
from .gating import RoutingBatch, gate_values
from .losses import ClusterConfig, balance_loss, clustering_loss, mean_routing_prob, token_fractions
from .model import build_model, moe_forward, task_loss
from .numerics import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckReport:
    name: str
    max_rel_error: float
    worst_point: int
    points: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _logit_loss(kind: str, cfg: ClusterConfig, fractions, mask, mu: float):
    def loss(logits: Tensor) -> Tensor:
        p = mean_routing_prob(gate_values(logits, "softmax", mask))
        # unit coefficients: the coefficient is a plain scale, and small
        # gradients would hide errors under the max(1, |numeric|) metric
        if kind == "balance":
            return balance_loss(fractions, p, cfg.num_experts, 1.0, mask)
        return clustering_loss(p, cfg, mask, 1.0, mu)

    return loss


def _check_logits(kind: str, points: int, seed: int, mu: float = 0.0, fault: bool = False):
    rng = np.random.default_rng(seed)
    worst, where = 0.0, -1
    for k in range(points):
        n = int(rng.choice([4, 8]))
        m = int(rng.choice([2, 4] if n == 8 else [2]))
        cfg = ClusterConfig(n, m)
        T = int(rng.integers(3, 9))
        mask = None
        if k % 3 == 2:
            mask = cluster_level_mask(cfg, 0.5 if cfg.cluster_size >= 2 else 0.0, seed + k).keep
        scale = 0.05 if k % 4 == 0 else 2.0  # near-uniform and spread-out points
        x0 = rng.normal(0.0, scale, (T, n))
        keep = np.ones(n, bool) if mask is None else mask
        choice = np.where(keep[None, :], x0, -np.inf).argmax(axis=1)
        fractions = token_fractions(choice, n)
        loss = _logit_loss(kind, cfg, fractions, mask, mu)

        leaf = Tensor(x0, requires_grad=True)
        with nx.Tape() as tape:
            out = loss(leaf)
        g = nx.backward(tape, out)[leaf]
        if fault:
            g = -g

        def f(x):
            return loss(Tensor(x)).item()

        err = nx.finite_difference_check(f, x0, g)
        if err > worst:
            worst, where = err, k
    return worst, where


def _check_end_to_end(points: int, seed: int, fault: bool = False):
    """Scalar objective of the toy model vs. all of its parameters."""
    worst, where = 0.0, -1
    for k in range(points):
        rng = np.random.default_rng([seed, k])
        cfg = ClusterConfig(4, 2)
        model = build_model(rng, 4, 4, 2, cfg, routing_dim=4, capacity_factor=2.0)
        x = rng.normal(size=(6, 4))
        y = rng.normal(size=(6, 2))
        names = list(model.parameters())
        mu = float(k % 2)

        def objective():
            out, gate, res, _ = moe_forward(RoutingBatch(Tensor(x)), model.layer, None, True)
            pred = model.head(out)
            p = mean_routing_prob(gate.gates)
            total = nx.add(task_loss(pred, y), balance_loss(res.fractions, p, 4, 1e-2))
            return nx.add(total, clustering_loss(p, cfg, None, 1e-2, mu))

        params = model.parameters()
        with nx.Tape() as tape:
            out = objective()
        grads = nx.backward(tape, out)
        base = {n: params[n].values.copy() for n in names}
        flat0 = np.concatenate([base[n].reshape(-1) for n in names])
        gflat = np.concatenate(
            [grads.get(params[n], np.zeros(params[n].shape)).reshape(-1) for n in names]
        )
        if fault:
            gflat = -gflat
        sizes = [base[n].size for n in names]
        cuts = np.cumsum(sizes)[:-1]

        def f(vec):
            for n, chunk in zip(names, np.split(vec, cuts)):
                v = chunk.reshape(base[n].shape).copy()
                v.setflags(write=False)
                params[n].values = v
            return objective().item()

        err = nx.finite_difference_check(f, flat0, gflat)
        model.set_parameters(base)
        if err > worst:
            worst, where = err, k
    return worst, where


def run_all(points: int = 50, seed: int = 0, fault: str | None = None) -> list[CheckReport]:
    """Balance, clustering (mu=0 and mu=1) and end-to-end checks."""
    reports = []
    for name, kind, mu in (
        ("balance", "balance", 0.0),
        ("clustering_mu0", "clustering", 0.0),
        ("clustering_mu1", "clustering", 1.0),
    ):
        err, where = _check_logits(kind, points, seed, mu, fault=(fault == kind or fault == name))
        reports.append(CheckReport(name, err, where, points))
    err, where = _check_end_to_end(points, seed, fault=fault in ("end_to_end", "end-to-end"))
    reports.append(CheckReport("end_to_end", err, where, points))
    return reports
