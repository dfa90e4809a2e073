"""
Density and diversity in the greedy selector
============================================

Uncertain candidates are re-ranked by how well they cover the unlabeled
pool (cosine similarity of downsampled images) minus how much they repeat
the training pool (mutual information).  This walk-through builds both
matrices and shows how the trade-off weight changes the selection.
"""

import numpy as np

from hybrid_al.data import generate_phantom, split_pools
from hybrid_al.represent import (
    DENSITY,
    DIVERSITY,
    HybridConfig,
    coverage,
    descriptor,
    greedy_hybrid_select,
    pairwise_matrices,
    redundancy,
)

volumes = {v.id: v for v in generate_phantom(7)}
pools = split_pools(list(volumes.values()), (3, 22, 1, 4), seed=2)

desc = {k: descriptor(volumes[k.volume_id].image, k) for k in pools.training + pools.unlabeled}
print("descriptor length:", desc[pools.training[0]].values.size)

# Pretend the first six unlabeled volumes are the uncertain candidates.
candidates = pools.unlabeled[:6]
sim, mi = pairwise_matrices([desc[k] for k in candidates], [desc[k] for k in pools.unlabeled],
                            [desc[k] for k in pools.training])
print("similarity", sim.raw.shape, "mutual information", mi.raw.shape)
print("raw MI range:", np.round([mi.raw.min(), mi.raw.max()], 3), "-> normalized to [0, 1]")

for i, key in enumerate(candidates):
    print(f"{key}  {volumes[key.volume_id].cohort:>6s}  coverage {coverage(sim, [i]):.3f}  redundancy {redundancy(mi, [i]):.3f}")

# Density only, the hybrid at two weights, and diversity only.
for label, cfg in [
    ("density only", HybridConfig(0.0, 3, DENSITY)),
    ("hybrid lam=0.5", HybridConfig(0.5, 3)),
    ("hybrid lam=2", HybridConfig(2.0, 3)),
    ("diversity only", HybridConfig(0.0, 3, DIVERSITY)),
]:
    picked = greedy_hybrid_select(sim, mi, cfg)
    print(f"{label:>15s}: {[str(candidates[i]) for i in picked]}"
          f"  F={coverage(sim, picked):.3f} R={redundancy(mi, picked):.3f}")
