"""
Synthetic overlapping chromosome pairs
======================================

Build a small dataset of overlapping pairs, clean it, and write colour
overlays: red and green mark the two chromosomes, blue their overlap.
"""

from pathlib import Path

import numpy as np

from chromoseg import datagen as dg
from chromoseg import evaluation as ev
from chromoseg import preprocess as pp

out = Path("demo_output")
out.mkdir(exist_ok=True)

# sample k uses source pair k modulo the number of pairs
cfg = dg.GenConfig(n_samples=24, seed=1)
print("distinct pairs:", dg.pair_census(cfg.n_sources))

raw = dg.generate_dataset(cfg)
ds = pp.clean_dataset(raw)
print("raw", raw.shape, "-> cleaned", ds.shape)

# class frequencies: background dominates, the overlap is a few percent
freq = np.bincount(ds.labels.ravel(), minlength=4) / ds.labels.size
for name, f in zip(ev.CLASS_NAMES, freq):
    print(f"{name:<14}{f:7.3%}")

for i in range(4):
    ev.render_overlay(ds.images[i], ds.labels[i], out / f"sample{i}.ppm")

# the overlap is brighter on average but its intensities still share support
# with single-chromosome pixels, which is why a threshold rule struggles
hist = ev.intensity_histogram(ds)
print("overlap mass inside single support:", round(ev.overlap_mass_in_single_support(hist), 3))
