"""Synthetic tasks, the training loop and experiment sweeps."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .dispatch import cluster_fractions
from .dropout import LEVELS, ExpertMask, drop_count, inference_mask, make_mask
from .losses import (
    ClusterConfig,
    LossBreakdown,
    balance_loss,
    clustering_loss,
    clustering_terms,
    mean_routing_prob,
)
from .model import MoEModel, build_model, task_loss
from .numerics import ContractError, Tensor

log = logging.getLogger(__name__)

SWEEP_AXES = {
    "cluster-size": "cluster_size",
    "dropout-rate": "dropout_rate",
    "mu": "inter_coef",
    "expert-count": "num_experts",
}


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; ``state`` holds a diagnostic snapshot."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class SyntheticTaskSpec:
    hidden_dim: int = 16
    num_groups: int = 8
    noise: float = 0.5
    center_scale: float = 1.0
    task: str = "regression"
    out_dim: int = 4
    target_noise: float = 0.0
    train_size: int = 2048
    val_size: int = 512
    seed: int = 0
    centers: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_groups < 1:
            raise ContractError("need at least one token group")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.train_size < 1 or self.val_size < 1:
            raise ContractError("train and validation sets must be non-empty")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    group: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


def generate_synthetic(spec: SyntheticTaskSpec) -> tuple[Dataset, Dataset]:
    """Gaussian clusters of tokens with one target function per cluster.

    Regression targets are ``x @ A_g`` (plus optional target noise);
    classification targets are the group id.  Task parameters, training
    samples and validation samples come from separate seed streams.
    """
    task_ss, train_ss, val_ss = np.random.SeedSequence(spec.seed).spawn(3)
    task_rng = np.random.default_rng(task_ss)
    d, G = spec.hidden_dim, spec.num_groups
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=np.float64)
        if centers.shape != (G, d):
            raise ContractError(f"centers shape {centers.shape} != {(G, d)}")
    else:
        centers = task_rng.normal(0.0, spec.center_scale, (G, d))
    maps = task_rng.normal(0.0, 1.0 / np.sqrt(d), (G, d, spec.out_dim))

    def draw(ss, n):
        rng = np.random.default_rng(ss)
        g = rng.integers(0, G, n)
        x = centers[g] + spec.noise * rng.normal(size=(n, d))
        if spec.task == "classification":
            y = g.copy()
        else:
            y = np.einsum("nd,ndo->no", x, maps[g])
            if spec.target_noise:
                y = y + spec.target_noise * rng.normal(size=y.shape)
        return Dataset(x, y, g)

    return draw(train_ss, spec.train_size), draw(val_ss, spec.val_size)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    balance_coef: float = 1e-2
    cluster_coef: float = 1e-2
    inter_coef: float = 0.0
    dropout_rate: float = 0.0
    dropout_level: str = "none"
    clustering: bool = True
    num_experts: int = 8
    cluster_size: int = 4
    capacity_factor: float = 2.0
    hidden_dim: int = 16
    ffn_dim: int = 32
    routing_dim: int = 8
    normalize: bool = True
    gating: str = "softmax"
    temperature: float = 1.0
    balance_n_mode: str = "full"
    log_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("steps", self.steps >= 0, "must be >= 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("lr", self.lr >= 0, "must be >= 0"),
            ("adam_beta1", 0 <= self.adam_beta1 < 1, "must lie in [0, 1)"),
            ("adam_beta2", 0 <= self.adam_beta2 < 1, "must lie in [0, 1)"),
            ("adam_eps", self.adam_eps > 0, "must be > 0"),
            ("balance_coef", self.balance_coef >= 0, "must be >= 0"),
            ("cluster_coef", self.cluster_coef >= 0, "must be >= 0"),
            ("inter_coef", self.inter_coef >= 0, "must be >= 0"),
            ("dropout_rate", 0 <= self.dropout_rate < 1, "dropout rate must lie in [0, 1)"),
            ("dropout_level", self.dropout_level in LEVELS, f"must be one of {LEVELS}"),
            ("num_experts", self.num_experts >= 1, "must be >= 1"),
            ("cluster_size", self.cluster_size >= 1 and self.num_experts % self.cluster_size == 0,
             "must be >= 1 and divide num_experts"),
            ("capacity_factor", self.capacity_factor > 0, "must be > 0"),
            ("hidden_dim", self.hidden_dim >= 1, "must be >= 1"),
            ("ffn_dim", self.ffn_dim >= 1, "must be >= 1"),
            ("routing_dim", self.routing_dim >= 1, "must be >= 1"),
            ("gating", self.gating in ("softmax", "sigmoid"), "must be 'softmax' or 'sigmoid'"),
            ("temperature", self.temperature > 0, "must be > 0"),
            ("balance_n_mode", self.balance_n_mode in ("full", "surviving"),
             "must be 'full' or 'surviving'"),
            ("log_interval", self.log_interval >= 1, "must be >= 1"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise ConfigError(key, f"{rule}, got {getattr(self, key)!r}")
        if self.inter_coef > 0 and self.num_experts // self.cluster_size < 2:
            raise ConfigError("inter_coef", "inter-cluster term needs at least two clusters")
        if self.dropout_level == "cluster":
            if drop_count(self.cluster_size, self.dropout_rate) > self.cluster_size - 1:
                raise ConfigError("dropout_rate", "rate would empty every cluster")

    @property
    def clusters(self) -> ClusterConfig:
        return ClusterConfig.from_cluster_size(self.num_experts, self.cluster_size)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class MetricsRow:
    step: int
    train_task: float
    val_task: float
    balance: float
    clustering: float
    c_intra: float
    c_inter: float
    val_c_intra: float
    fractions: np.ndarray
    cluster_shares: np.ndarray
    overflow_rate: float
    val_fractions: np.ndarray = field(repr=False, default=None)
    within_shares: np.ndarray = field(repr=False, default=None)
    val_within_shares: np.ndarray = field(repr=False, default=None)


@dataclass
class TrainResult:
    model: MoEModel
    metrics: list[MetricsRow]
    config: TrainConfig
    max_count_ratio: float = 0.0

    @property
    def best_val(self) -> float:
        return min(r.val_task for r in self.metrics)

    @property
    def best_step(self) -> int:
        return min(self.metrics, key=lambda r: r.val_task).step

    @property
    def final(self) -> MetricsRow:
        return self.metrics[-1]


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(t.shape) for k, t in params.items()}
        self.v = {k: np.zeros(t.shape) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, t in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros(t.shape)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new = t.values - upd
            new.setflags(write=False)
            t.values = new


def mask_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 0xD0]).generate_state(1)[0])


def make_model(cfg: TrainConfig, out_dim: int, task: str = "regression") -> MoEModel:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1A]))
    return build_model(
        rng, cfg.hidden_dim, cfg.ffn_dim, out_dim, cfg.clusters, task,
        routing_dim=cfg.routing_dim, normalize=cfg.normalize, gating=cfg.gating,
        temperature=cfg.temperature, capacity_factor=cfg.capacity_factor,
        dropout_level=cfg.dropout_level, dropout_rate=cfg.dropout_rate,
    )


def objective(model: MoEModel, x, y, mask: ExpertMask, cfg: TrainConfig, train: bool = True):
    """Forward pass plus every loss term; returns tensors and diagnostics."""
    clusters = model.layer.clusters
    pred, gate, result, stats = model.forward(Tensor(x), mask, train, mu=cfg.inter_coef)
    task = task_loss(pred, y, model.task)
    keep = gate.mask
    p = mean_routing_prob(gate.gates)
    n_bal = clusters.num_experts if cfg.balance_n_mode == "full" else int(keep.sum())
    bal = balance_loss(result.fractions, p, n_bal, cfg.balance_coef, keep)
    terms = [task, bal]
    clu = None
    if cfg.clustering:
        clu = clustering_loss(
            p, clusters, keep, cfg.cluster_coef, cfg.inter_coef,
            skip_empty=mask is not None and mask.level == "global",
        )
        terms.append(clu)
    total = nx.add(terms[0], terms[1])
    if clu is not None:
        total = nx.add(total, clu)
    breakdown = LossBreakdown(
        task.item(), bal.item(), 0.0 if clu is None else clu.item(),
        cfg.balance_coef, cfg.cluster_coef if cfg.clustering else 0.0, cfg.inter_coef,
    )
    return total, breakdown, result, stats


def evaluate(model: MoEModel, data: Dataset, cfg: TrainConfig):
    """Validation task loss and inference routing statistics (no dropout)."""
    n = model.layer.num_experts
    mask = inference_mask(n)
    T = cfg.batch_size
    losses, weights = [], []
    counts = np.zeros(n)
    probs = np.zeros(n)
    for start in range(0, len(data), T):
        xb, yb = data.x[start:start + T], data.y[start:start + T]
        pred, gate, result, _ = model.forward(Tensor(xb), mask, train=False)
        losses.append(task_loss(pred, yb, model.task).item())
        weights.append(len(xb))
        counts += result.counts
        probs += gate.gates.values.sum(axis=0)
    val_loss = float(np.average(losses, weights=weights))
    p = probs / len(data)
    c_intra, _ = clustering_terms(p, model.layer.clusters)
    return val_loss, counts / len(data), c_intra


def train(
    model: MoEModel | None,
    data: tuple[Dataset, Dataset],
    cfg: TrainConfig,
    *,
    on_step=None,
) -> TrainResult:
    """Adam on ``task + balance + clustering``; deterministic for a given seed.

    Metrics are logged at step 0, every ``log_interval`` steps and at the end;
    the row for step ``s`` describes the parameters after ``s`` updates.
    """
    train_set, val_set = data
    if model is None:
        out_dim = int(train_set.y.max()) + 1 if train_set.y.ndim == 1 else train_set.y.shape[1]
        model = make_model(cfg, out_dim, "classification" if train_set.y.ndim == 1 else "regression")
    if train_set.x.shape[1] != model.layer.hidden_dim:
        raise ContractError("data hidden dim does not match the model")
    params = model.parameters()
    by_id = {id(t): k for k, t in params.items()}
    opt = Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA]))
    clusters = model.layer.clusters
    metrics: list[MetricsRow] = []
    worst = 0.0
    T = min(cfg.batch_size, len(train_set))

    for step in range(cfg.steps + 1):
        idx = batch_rng.choice(len(train_set), size=T, replace=False)
        xb, yb = train_set.x[idx], train_set.y[idx]
        mask = make_mask(cfg.dropout_level, clusters, cfg.dropout_rate, mask_seed(cfg.seed, step))
        with nx.Tape() as tape:
            total, parts, result, stats = objective(model, xb, yb, mask, cfg)
        result.check()
        worst = max(worst, float(result.counts.max()) / result.capacity)
        if not math.isfinite(total.item()):
            raise TrainingDiverged(
                f"non-finite loss at step {step}",
                {
                    "step": step,
                    "loss": dataclasses.asdict(parts),
                    "param_norms": {k: float(np.linalg.norm(t.values)) for k, t in params.items()},
                },
            )
        if step % cfg.log_interval == 0 or step == cfg.steps:
            val_loss, val_frac, val_c_intra = evaluate(model, val_set, cfg)
            _, shares, within = cluster_fractions(result, clusters)
            val_counts = val_frac.reshape(clusters.num_clusters, clusters.cluster_size)
            tot = val_counts.sum(axis=1, keepdims=True)
            val_within = np.divide(val_counts, tot, out=np.zeros_like(val_counts), where=tot > 0)
            metrics.append(MetricsRow(
                step=step,
                train_task=parts.task,
                val_task=val_loss,
                balance=parts.balance,
                clustering=parts.clustering,
                c_intra=stats.c_intra,
                c_inter=stats.c_inter,
                val_c_intra=val_c_intra,
                fractions=result.fractions.copy(),
                cluster_shares=shares,
                overflow_rate=result.overflow_rate,
                val_fractions=val_frac,
                within_shares=within.reshape(-1),
                val_within_shares=val_within.reshape(-1),
            ))
            if on_step is not None:
                on_step(metrics[-1])
        if step == cfg.steps:
            break
        grads = nx.backward(tape, total)
        named = {by_id[id(t)]: g for t, g in grads.items() if id(t) in by_id}
        for t in params.values():
            t.grad = None
        opt.step(named)

    return TrainResult(model, metrics, cfg, worst)


def run(task_spec: SyntheticTaskSpec, cfg: TrainConfig) -> TrainResult:
    if task_spec.hidden_dim != cfg.hidden_dim:
        raise ConfigError("hidden_dim", "task and model hidden dims differ")
    data = generate_synthetic(task_spec)
    out_dim = task_spec.num_groups if task_spec.task == "classification" else task_spec.out_dim
    model = make_model(cfg, out_dim, task_spec.task)
    return train(model, data, cfg)


@dataclass
class SweepRow:
    axis: str
    value: float
    variant: str
    seed: int
    final_val: float
    best_val: float
    best_step: int
    final_c_intra: float
    overflow_rate: float


def _sweep_job(args):
    task_spec, cfg, axis, value, variant = args
    res = run(task_spec, cfg)
    return SweepRow(
        axis=axis,
        value=value,
        variant=variant,
        seed=cfg.seed,
        final_val=res.final.val_task,
        best_val=res.best_val,
        best_step=res.best_step,
        final_c_intra=res.final.c_intra,
        overflow_rate=res.final.overflow_rate,
    )


def sweep(
    task_spec: SyntheticTaskSpec,
    base: TrainConfig,
    axis: str,
    values,
    variants: dict[str, dict] | None = None,
    workers: int = 1,
) -> list[SweepRow]:
    """One training run per (value, variant), all sharing data and seed.

    Rows come back in ``values`` order, variants in insertion order within
    each value.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError("axis", f"unknown sweep axis {axis!r}")
    key = SWEEP_AXES[axis]
    variants = variants or {"": {}}
    jobs = []
    for v in values:
        for name, overrides in variants.items():
            changes = dict(overrides)
            changes[key] = int(v) if key in ("cluster_size", "num_experts") else float(v)
            if key == "num_experts" and "cluster_size" not in changes:
                changes["cluster_size"] = min(base.cluster_size, changes[key])
            try:
                cfg = base.replace(**changes)
            except (ConfigError, ContractError) as exc:
                raise ConfigError("values", f"{axis}={v}: {exc}") from exc
            jobs.append((copy.deepcopy(task_spec), cfg, axis, v, name))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


# presets ----------------------------------------------------------------

def preset(name: str, seed: int = 0) -> tuple[SyntheticTaskSpec, TrainConfig]:
    """Named toy setups.

    ``default``: 8 token groups, 8 experts in 2 clusters, plenty of data.
    ``overfit``: 256 noisy training tokens against 16 experts.
    """
    if name == "default":
        spec = SyntheticTaskSpec(num_groups=8, train_size=4096, val_size=512, seed=seed)
        cfg = TrainConfig(num_experts=8, cluster_size=4, seed=seed)
    elif name == "overfit":
        spec = SyntheticTaskSpec(
            num_groups=8, train_size=256, val_size=512, target_noise=0.3, seed=seed
        )
        # a faster learning rate so the baseline actually overfits within 2k steps
        cfg = TrainConfig(num_experts=16, cluster_size=4, lr=3e-3, seed=seed)
    else:
        raise KeyError(f"unknown preset {name!r}")
    return spec, cfg
