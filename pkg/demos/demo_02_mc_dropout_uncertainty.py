"""
Class-wise uncertainty from MC dropout
======================================

A per-pixel classifier is trained on one volume.  Repeated stochastic
passes with dropout active give a per-class variance, averaged over
pixels, that ranks unlabeled volumes for acquisition.
"""

import numpy as np

from hybrid_al.data import generate_phantom, split_pools
from hybrid_al.metrics import mean_dice
from hybrid_al.model import TrainConfig, extract_features, predict_labels, predict_mc, train
from hybrid_al.uncertainty import class_uncertainty, scalar_score, slice_class_uncertainty

volumes = {v.id: v for v in generate_phantom(7)}
pools = split_pools(list(volumes.values()), (1, 24, 1, 4), seed=1)
train_vol = volumes[pools.training[0].volume_id]
val_vol = volumes[pools.validation[0]]
print("training volume", train_vol.id, "cohort", train_vol.cohort)

# Eight features per pixel: intensity, local box statistics, a smoothed
# intensity and the normalized coordinates.
X = extract_features(train_vol.image)
print("features:", X.shape)

# A short training run with the benchmark learning rate.
config = TrainConfig(lr=2e-3)
model = train(X, train_vol.labels.ravel(), config, n_classes=4,
              validation=[(extract_features(val_vol.image), val_vol.labels)], seed=0)
print("validation Dice by checkpoint:", [(s, round(d, 3)) for s, d in model.history])

# Ten dropout passes over one unlabeled volume.
vol = volumes[pools.unlabeled[0].volume_id]
samples = predict_mc(model, extract_features(vol.image), T=10, seed=0)
print("samples:", samples.probs.shape, "(passes, classes, pixels)")
per_class = class_uncertainty(samples)
print("per-class uncertainty:", np.round(per_class, 5), "-> scalar", round(scalar_score(per_class), 5))

# Slices are scored separately; a volume's score is their mean.
per_slice = slice_class_uncertainty(samples, vol.depth)
print("slice scalars:", np.round([scalar_score(s) for s in per_slice], 5))

# Ranking the whole unlabeled pool: volumes the model gets wrong tend to
# score high, and those are mostly from the cohort it has not seen.
rows = []
for key in pools.unlabeled:
    v = volumes[key.volume_id]
    f = extract_features(v.image)
    s = predict_mc(model, f, 10, seed=0)
    score = np.mean([scalar_score(p) for p in slice_class_uncertainty(s, v.depth)])
    d = mean_dice(predict_labels(model, f).reshape(v.labels.shape), v.labels, 4)
    rows.append((score, v.id, v.cohort, d))
for score, vid, cohort, d in sorted(rows, reverse=True)[:8]:
    print(f"{vid} {cohort:>6s} uncertainty {score:.5f} dice {d:.3f}")
