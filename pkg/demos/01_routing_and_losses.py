"""Walk through one routing step by hand.

Eight tokens meet four experts arranged as two clusters of two. We score,
gate, pick the top expert, dispatch under a capacity limit, and then look at
the two auxiliary losses.
"""

import numpy as np

from moec import ClusterConfig, RouterParams, RoutingBatch, Tensor
from moec import balance_loss, clustering_loss, dispatch, gate_values, routing_scores, top_k_select
from moec.losses import cluster_means, intra_cluster_variance, mean_routing_prob

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

router = RouterParams.init(rng, num_experts=4, hidden_dim=6, routing_dim=3)
tokens = Tensor(rng.normal(size=(8, 6)))
keep = np.ones(4, dtype=bool)

scores = routing_scores(RoutingBatch(tokens), router, keep)
gates = gate_values(scores)
chosen = top_k_select(gates, 1)
print("gate values (rows sum to 1):\n", gates.values)
print("top-1 expert per token:", chosen[:, 0])

# capacity 1.0 * 8 / 4 = 2 tokens per expert; the rest fall through
res = dispatch(gates, chosen, capacity_factor=1.0)
print("capacity", res.capacity, "| counts", res.counts, "| overflow", res.overflow)
print("assignment (-1 = residual only):", res.assignment)

clusters = ClusterConfig(num_experts=4, num_clusters=2)
p = mean_routing_prob(gates)
print("\nmean routing probability p:", p.values[0])
print("cluster means:", cluster_means(p, clusters).values[0])
print("C_intra:", intra_cluster_variance(p, clusters).item())
print("balance loss  (coef 1e-2):", balance_loss(res.fractions, p, 4, 1e-2).item())
print("clustering    (coef 1e-2, mu=0):", clustering_loss(p, clusters, coef=1e-2).item())
print("clustering    (coef 1e-2, mu=1):", clustering_loss(p, clusters, coef=1e-2, mu=1.0).item())

# the same probabilities with cluster-mates made equal: the clustering loss vanishes
flat = p.values.reshape(2, 2).mean(axis=1).repeat(2).reshape(1, 4)
print("after equalising within clusters:", clustering_loss(Tensor(flat), clusters).item())
