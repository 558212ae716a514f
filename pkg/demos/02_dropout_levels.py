"""Cluster-level vs global-level expert dropout.

Both schemes remove the same number of experts. The cluster-level scheme
takes the same number out of every cluster, so each cluster keeps a
survivor. The global scheme ignores clusters and sometimes wipes one out.
"""

import numpy as np

from moec import ClusterConfig, cluster_level_mask, global_level_mask

cfg = ClusterConfig(num_experts=8, num_clusters=2)

print("a few masks at rate 0.5 (1 = still a candidate):")
for seed in range(4):
    c = cluster_level_mask(cfg, 0.5, seed).keep.astype(int)
    g = global_level_mask(8, 0.5, seed).keep.astype(int)
    print(f"  seed {seed}: cluster {c[:4]} {c[4:]}   global {g[:4]} {g[4:]}")

trials = 10_000
empty = sum(not global_level_mask(8, 0.5, s).keep.reshape(2, 4).any(axis=1).all() for s in range(trials))
print(f"\nglobal masks that empty a cluster: {empty}/{trials} "
      f"(expected {2 / 70:.4f} = 2 of the C(8,4) ways to drop 4)")
empty = sum(not cluster_level_mask(cfg, 0.5, s).keep.reshape(2, 4).any(axis=1).all() for s in range(trials))
print(f"cluster-level masks that empty a cluster: {empty}/{trials}")

hits = np.zeros(8)
for s in range(trials):
    hits += ~cluster_level_mask(cfg, 0.25, s).keep
print("\nper-expert drop frequency at rate 0.25:", np.round(hits / trials, 3))
