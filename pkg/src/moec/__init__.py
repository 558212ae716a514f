"""Mixture of expert clusters: routing, auxiliary losses and a toy trainer."""

from .dispatch import DispatchResult, cluster_fractions, dispatch
from .dropout import ExpertMask, cluster_level_mask, global_level_mask, inference_mask
from .gating import (
    GateOutput,
    RouterParams,
    RoutingBatch,
    combine_outputs,
    gate_values,
    routing_scores,
    top_k_select,
)
from .losses import (
    ClusterConfig,
    LossBreakdown,
    RoutingStats,
    balance_loss,
    clustering_loss,
    inter_cluster_constraint,
    intra_cluster_variance,
    mean_routing_prob,
    token_fractions,
    total_loss,
)
from .model import ExpertFFN, MoELayer, MoEModel, moe_forward, task_loss
from .numerics import Tape, Tensor, backward, finite_difference_check
from .simulator import (
    MetricsRow,
    SyntheticTaskSpec,
    TrainConfig,
    generate_synthetic,
    preset,
    sweep,
    train,
)

__version__ = "0.1.0"
