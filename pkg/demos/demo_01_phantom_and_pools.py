"""
Phantom volumes and acquisition pools
=====================================

The benchmark data are synthetic multi-structure volumes from two cohorts
that differ in structure size, intensity and texture.  This walk-through
generates them, splits them into pools and moves a sample into training.
"""

import tempfile
from pathlib import Path

import numpy as np

from hybrid_al.data import PhantomConfig, generate_phantom, load_dataset, move_to_training, save_dataset, split_pools

# Thirty 16x64x64 volumes with four foreground structures.
config = PhantomConfig()
volumes = generate_phantom(seed=7, config=config)
print(len(volumes), "volumes of shape", volumes[0].image.shape)

# The minority cohort is about a third of the data.
cohorts = [v.cohort for v in volumes]
print({c: cohorts.count(c) for c in sorted(set(cohorts))})

# Class balance over the whole dataset, as a fraction of foreground pixels.
labels = np.concatenate([v.labels.ravel() for v in volumes])
fg = labels[labels > 0]
print("foreground class fractions:", np.round(np.bincount(fg)[1:] / fg.size, 3))

# Mean structure intensity per cohort: the minority sits between the
# majority's levels, which is what makes it hard for a majority-trained model.
for cohort in sorted(set(cohorts)):
    vals = [v.image[v.labels == 2].mean() for v in volumes if v.cohort == cohort]
    print(f"{cohort:>6s}: class-2 intensity {np.mean(vals):.3f}")

# Split 1/24/1/4 into training, unlabeled, validation and test.
pools = split_pools(volumes, (1, 24, 1, 4), seed=0)
print("training:", [str(k) for k in pools.training], "validation:", pools.validation, "test:", pools.test)

# Slice-wise pools hold one key per slice instead.
slice_pools = split_pools(volumes, (1, 24, 1, 4), seed=0, rule="slice")
print(len(slice_pools.training), "training slices,", len(slice_pools.unlabeled), "unlabeled slices")

# Acquiring a unit moves it from the unlabeled pool to training.
pools = move_to_training(pools, pools.unlabeled[:1])
print(len(pools.training), "training /", len(pools.unlabeled), "unlabeled")

# Round trip through the on-disk format: a manifest plus one binary file per volume.
with tempfile.TemporaryDirectory() as tmp:
    save_dataset(volumes[:3], tmp, config.n_classes)
    print((Path(tmp) / "manifest.tsv").read_text())
    back = load_dataset(Path(tmp) / "manifest.tsv")
    print("round trip identical:", all(a.same_as(b) for a, b in zip(volumes, back)))
