"""Label cleaning, cropping and train/validation/test splitting."""

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, Sample
from .errors import ConfigError, StructuralError

CROP = (88, 88)
# nonzero 8-neighbours a chromosome pixel needs to survive artifact removal
MIN_NEIGHBOURS = 3

_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _neighbour_stack(label, fill):
    """(8, h, w) array of the 8-neighbours of every pixel; off-image reads ``fill``."""
    h, w = label.shape
    padded = np.pad(label, 1, constant_values=fill)
    return np.stack([padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _OFFSETS])


def fix_label4(label):
    """Replace every 4 with the majority of its valid 8-neighbours.

    Neighbours labelled 4 (or off the image) do not vote.  Ties go to the
    smaller label and a 4 with no valid neighbour becomes background.  All
    replacements read the input map, so neighbouring 4s do not influence each
    other.
    """
    label = np.asarray(label)
    bad = label == 4
    if not bad.any():
        return label.copy()
    nb = _neighbour_stack(label.astype(np.int16), fill=-1)
    votes = np.stack([(nb == c).sum(axis=0) for c in range(4)])
    # argmax returns the first maximum, i.e. the smaller label on ties;
    # all-zero votes give 0 as required
    winner = votes.argmax(axis=0).astype(label.dtype)
    return np.where(bad, winner, label)


def remove_artifacts(label):
    """Set 1/2 pixels with fewer than 3 nonzero 8-neighbours to background.

    One simultaneous pass over the input map; labels 0 and 3 never change.
    """
    label = np.asarray(label)
    nb = _neighbour_stack(label, fill=0)
    count = (nb != 0).sum(axis=0)
    drop = ((label == 1) | (label == 2)) & (count < MIN_NEIGHBOURS)
    return np.where(drop, 0, label).astype(label.dtype)


def crop_center(sample, size=CROP):
    """Central crop; the top/left offset is the floor of half the excess."""
    h, w = sample.image.shape
    th, tw = size
    if h < th or w < tw:
        raise StructuralError(f"cannot crop {h}x{w} to {th}x{tw}")
    top, left = (h - th) // 2, (w - tw) // 2
    sl = (slice(top, top + th), slice(left, left + tw))
    return Sample(sample.image[sl], sample.label[sl], sample.meta)


def clean_dataset(ds, size=CROP):
    """fix_label4, then remove_artifacts, then crop_center on every sample."""
    h, w = ds.shape
    th, tw = size
    if h < th or w < tw:
        raise StructuralError(f"cannot crop {h}x{w} to {th}x{tw}")
    top, left = (h - th) // 2, (w - tw) // 2
    labels = np.empty((len(ds), th, tw), np.uint8)
    for i, lab in enumerate(ds.labels):
        labels[i] = remove_artifacts(fix_label4(lab))[top:top + th, left:left + tw]
    images = ds.images[:, top:top + th, left:left + tw]
    return Dataset(images, labels, list(ds.meta))


@dataclass
class SplitSpec:
    train_frac: float = 0.64
    val_frac: float = 0.16
    test_frac: float = 0.20
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-12):
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fracs}")


def split_indices(n, spec):
    """Seeded shuffle of ``range(n)`` cut into train/val/test index arrays.

    Train and validation sizes are floored; the test part takes the remainder.
    """
    if n < 3:
        raise ConfigError(f"need at least 3 samples to split, got {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = math.floor(spec.train_frac * n + 1e-9)
    n_val = math.floor(spec.val_frac * n + 1e-9)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split(ds, spec):
    train, val, test = split_indices(len(ds), spec)
    return ds.subset(train), ds.subset(val), ds.subset(test)
