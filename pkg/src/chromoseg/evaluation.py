"""Per-class IOU, confusion matrices, intensity histograms and overlays.

Class ids: 0 background, 1 first chromosome, 2 second chromosome, 3 overlap.
An IOU whose union is empty is undefined and reported as ``None``; undefined
values are left out of means instead of counting as a perfect score.
"""

import json
from dataclasses import dataclass

import numpy as np

from .dataset import to_u8
from .errors import StructuralError
from .netpbm import write_ppm

NUM_CLASSES = 4
CLASS_NAMES = ("background", "chromosome_1", "chromosome_2", "overlap")
# red, green, blue for the labelled classes; background shows the image
CLASS_COLOURS = {1: (255, 0, 0), 2: (0, 255, 0), 3: (0, 0, 255)}


def _pair(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise StructuralError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return pred, truth


def iou(pred, truth, class_id):
    """Global IOU of one class over a set of label maps (None if undefined)."""
    pred, truth = _pair(pred, truth)
    p, t = pred == class_id, truth == class_id
    union = np.count_nonzero(p | t)
    if union == 0:
        return None
    return np.count_nonzero(p & t) / union


def confusion_matrix(pred, truth, num_classes=NUM_CLASSES):
    """Pixel counts with rows = true class and columns = predicted class."""
    pred, truth = _pair(pred, truth)
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf):
    conf = np.asarray(conf)
    out = []
    for c in range(conf.shape[0]):
        inter = conf[c, c]
        union = conf[c, :].sum() + conf[:, c].sum() - inter
        out.append(None if union == 0 else float(inter / union))
    return out


def merge_chromosomes(labels):
    """Collapse chromosome 2 into chromosome 1 for the three-class comparison."""
    labels = np.asarray(labels)
    return np.where(labels == 2, 1, labels).astype(labels.dtype)


@dataclass
class IouReport:
    per_class_global: list
    per_class_mean: list
    confusion: np.ndarray
    n_images: int
    applicable_fraction: float | None = None

    def to_dict(self):
        d = {
            "classes": list(CLASS_NAMES),
            "n_images": self.n_images,
            "per_class_global": self.per_class_global,
            "per_class_mean": self.per_class_mean,
            "confusion": np.asarray(self.confusion).tolist(),
        }
        if self.applicable_fraction is not None:
            d["applicable_fraction"] = self.applicable_fraction
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self):
        fmt = lambda v: "     n/a" if v is None else f"{v:8.4f}"
        lines = [f"images: {self.n_images}",
                 f"{'class':<14}{'global':>8}{'mean':>8}"]
        for name, g, m in zip(CLASS_NAMES, self.per_class_global, self.per_class_mean):
            lines.append(f"{name:<14}{fmt(g)}{fmt(m)}")
        if self.applicable_fraction is not None:
            lines.append(f"applicable fraction: {self.applicable_fraction:.4f}")
        lines.append("confusion (rows true, cols predicted):")
        for row in np.asarray(self.confusion):
            lines.append(" ".join(f"{int(v):>9d}" for v in row))
        return "\n".join(lines) + "\n"


def evaluate(pred, truth, applicable_fraction=None):
    """IouReport for stacks of predicted and true label maps ``(n, h, w)``."""
    pred, truth = _pair(pred, truth)
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64)
    per_image = []
    for p, t in zip(pred, truth):
        c = confusion_matrix(p, t)
        conf += c
        per_image.append(iou_from_confusion(c))
    means = []
    for k in range(NUM_CLASSES):
        vals = [row[k] for row in per_image if row[k] is not None]
        means.append(float(np.mean(vals)) if vals else None)
    return IouReport(iou_from_confusion(conf), means, conf, len(pred), applicable_fraction)


def intensity_histogram(ds):
    """256-bin histograms of byte intensities for single-chromosome and overlap pixels.

    Returns a ``(2, 256)`` int64 array: row 0 holds labels 1 and 2, row 1 label 3.
    """
    hist = np.zeros((2, 256), np.int64)
    if len(ds) == 0:
        return hist
    vals = to_u8(ds.images)
    labels = ds.labels
    hist[0] = np.bincount(vals[(labels == 1) | (labels == 2)], minlength=256)
    hist[1] = np.bincount(vals[labels == 3], minlength=256)
    return hist


def histogram_csv(hist):
    lines = ["class,bin,count"]
    for name, row in zip(("single", "overlap"), hist):
        lines += [f"{name},{b},{int(c)}" for b, c in enumerate(row)]
    return "\n".join(lines) + "\n"


def overlap_mass_in_single_support(hist):
    """Fraction of overlap-class pixels whose intensity lies within the
    [min, max] range of single-chromosome intensities."""
    single, overlap = hist
    total = overlap.sum()
    nz = np.nonzero(single)[0]
    if total == 0 or nz.size == 0:
        return 0.0
    return float(overlap[nz[0]:nz[-1] + 1].sum() / total)


def overlay_rgb(image, labels):
    image, labels = _pair(image, labels)
    v = to_u8(image)
    rgb = np.repeat(v[..., None], 3, axis=2)
    for c, colour in CLASS_COLOURS.items():
        rgb[labels == c] = colour
    return rgb


def render_overlay(image, labels, path):
    """Write a P6 PPM: background shows the gray image, classes 1/2/3 are red/green/blue."""
    write_ppm(overlay_rgb(image, labels), path)
