"""Semi-synthetic overlapping-chromosome dataset generation.

Single chromosomes (procedural phantoms or imported PGM pairs) are rotated,
translated onto a shared canvas two at a time, and combined.  The image is the
pixelwise mean of the two grayscale rasters and the label is ``mask_a +
2 * mask_b``, so the overlap carries label 3.  The chromosome with the lower
source id is always ``a``.

Randomness is derived per sample from ``mix_seed(config.seed, index)`` and per
rejected draw from ``mix_seed(sample_seed, attempt)``, so samples can be
generated in any order (or in parallel) and still give identical datasets.
"""

import itertools
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import Dataset, Sample, SampleMeta, read_dataset, to_u8, write_dataset
from .errors import ConfigError, StructuralError
from .netpbm import read_pgm

__all__ = [
    "ChromoImage", "PhantomParams", "GenConfig", "mix_seed", "combine_channels",
    "downscale2x", "place", "compose_pair", "generate_phantom", "phantom_sources",
    "load_pgm_sources", "pair_census", "generate_dataset", "write_dataset", "read_dataset",
]

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# acceptance-rate guard: fewer than 1% accepted over this many draws is fatal
RATE_WINDOW = 10_000
MIN_ACCEPT_RATE = 0.01


def splitmix64(x):
    x = (x + GOLDEN_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix_seed(seed, index):
    """Derive a child seed: ``splitmix64(seed ^ splitmix64(index))``.

    Both arguments are taken modulo 2**64.
    """
    return splitmix64((seed & MASK64) ^ splitmix64(index & MASK64))


@dataclass
class ChromoImage:
    gray: np.ndarray  # (h, w) float64 in [0, 1], zero outside mask
    mask: np.ndarray  # (h, w) bool
    id: object = None
    endpoints: tuple = ()  # (row, col) telomere positions when known

    def __post_init__(self):
        if self.gray.shape != self.mask.shape:
            raise StructuralError(
                f"gray {self.gray.shape} and mask {self.mask.shape} differ in shape")


@dataclass
class PhantomParams:
    """Shape and intensity ranges for procedural chromosomes.

    Lengths and widths are in working-resolution pixels; phantoms are drawn at
    twice that resolution and downscaled like the real source images.
    """

    length: tuple = (22.0, 44.0)
    half_width: tuple = (2.6, 3.6)
    body_intensity: tuple = (0.4, 0.7)
    telomere_intensity: tuple = (0.9, 1.0)
    max_bend: float = 0.25  # control-point offset as a fraction of length
    noise: float = 0.04


@dataclass
class GenConfig:
    n_samples: int = 13_000
    canvas: tuple = (94, 93)
    angle_set: tuple = tuple(range(0, 360, 15))
    max_translation: int = 12
    min_overlap: int = 1
    seed: int = 0
    n_sources: int = 12
    source_dir: str | None = None
    phantom: PhantomParams = field(default_factory=PhantomParams)

    def __post_init__(self):
        if self.n_samples < 0:
            raise ConfigError("n_samples must be non-negative")
        if self.min_overlap < 1:
            raise ConfigError("min_overlap must be at least 1")
        if self.max_translation < 0:
            raise ConfigError("max_translation must be non-negative")
        if not self.angle_set:
            raise ConfigError("angle_set must not be empty")
        if self.source_dir is None and self.n_sources < 2:
            raise ConfigError("at least two source chromosomes are needed")


def combine_channels(dapi, cy3):
    """Merge the DNA and telomere-probe channels by per-pixel maximum."""
    dapi, cy3 = np.asarray(dapi), np.asarray(cy3)
    if dapi.shape != cy3.shape:
        raise StructuralError(f"channel shapes differ: {dapi.shape} vs {cy3.shape}")
    return np.maximum(dapi, cy3)


def downscale2x(img):
    """Halve resolution by averaging 2x2 blocks; an odd last row/column is dropped."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def largest_component(mask):
    """Largest 4-connected component of a boolean mask (ties: lowest label)."""
    lab, n = ndimage.label(mask)
    if n <= 1:
        return lab > 0
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


def _rotation(angle):
    t = math.radians(angle)
    return math.cos(t), math.sin(t)


def place(chromo, angle, offset, canvas):
    """Rotate ``chromo`` about its mask centroid and translate it onto a canvas.

    Positive angles turn counterclockwise as displayed (rows pointing down).
    ``offset`` is ``(dx, dy)``: the shift in columns and rows applied after
    rotation, so angle 0 with offset (0, 0) reproduces the source at the canvas
    origin.  Gray values are resampled bilinearly; the mask is resampled with
    the same weights and thresholded at 0.5.

    Returns the placed ChromoImage, or None when nothing lands on the canvas.
    """
    h, w = canvas
    rows, cols = np.nonzero(chromo.mask)
    if rows.size == 0:
        return None
    cr, cc = rows.mean(), cols.mean()
    cos_t, sin_t = _rotation(angle)
    dx, dy = offset

    rr, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    qy = rr - dy - cr
    qx = xx - dx - cc
    src_x = qx * cos_t - qy * sin_t + cc
    src_y = qx * sin_t + qy * cos_t + cr
    coords = np.stack([src_y, src_x])

    gray = ndimage.map_coordinates(chromo.gray.astype(np.float64), coords, order=1,
                                   mode="grid-constant", cval=0.0)
    weight = ndimage.map_coordinates(chromo.mask.astype(np.float64), coords, order=1,
                                     mode="grid-constant", cval=0.0)
    mask = weight >= 0.5
    if not mask.any():
        return None
    gray = np.clip(np.where(mask, gray, 0.0), 0.0, 1.0)

    ends = tuple(_forward(p, (cr, cc), cos_t, sin_t, offset) for p in chromo.endpoints)
    return ChromoImage(gray, mask, chromo.id, ends)


def _forward(point, centre, cos_t, sin_t, offset):
    r, c = point
    cr, cc = centre
    sx, sy = c - cc, r - cr
    x = sx * cos_t + sy * sin_t + cc + offset[0]
    y = -sx * sin_t + sy * cos_t + cr + offset[1]
    return (y, x)


def placed_extent(chromo, angle, offset):
    """Row/column range covered by the mask pixel centres after placement."""
    rows, cols = np.nonzero(chromo.mask)
    cr, cc = rows.mean(), cols.mean()
    cos_t, sin_t = _rotation(angle)
    sx, sy = cols - cc, rows - cr
    x = sx * cos_t + sy * sin_t + cc + offset[0]
    y = -sx * sin_t + sy * cos_t + cr + offset[1]
    return y.min(), y.max(), x.min(), x.max()


def compose_pair(a, b, min_overlap=1):
    """Average two placed chromosomes and sum their masks into a label map.

    Returns a Sample, or None when fewer than ``min_overlap`` pixels overlap.
    """
    if a.gray.shape != b.gray.shape:
        raise StructuralError(f"canvas shapes differ: {a.gray.shape} vs {b.gray.shape}")
    label = a.mask.astype(np.uint8) + 2 * b.mask.astype(np.uint8)
    if np.count_nonzero(label == 3) < min_overlap:
        return None
    image = (a.gray + b.gray) / 2
    return Sample(image, label)


def _spine(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def generate_phantom(rng, params=None, length=None, body=None, chromo_id=None, half_width=None):
    """Draw one chromosome-like band along a random quadratic Bezier spine.

    The body has intensity around ``body`` (drawn from the params when not
    given) with smooth noise; bright spots at both ends mimic the telomere
    probe and are merged in with :func:`combine_channels`.  The band is drawn
    at twice the working resolution and then downscaled.
    """
    params = params or PhantomParams()
    if length is None:
        length = rng.uniform(*params.length)
    if body is None:
        body = rng.uniform(*params.body_intensity)
    if half_width is None:
        half_width = rng.uniform(*params.half_width)
    telomere = rng.uniform(*params.telomere_intensity)
    bend = rng.uniform(-params.max_bend, params.max_bend) * length

    # everything below is at 2x resolution
    L, hw = 2 * length, 2 * half_width
    margin = hw + 4
    p0 = np.array([0.0, 0.0])
    p2 = np.array([0.0, L])
    p1 = np.array([2 * bend, L / 2])
    pts = _spine(p0, p1, p2, max(64, int(L * 2)))
    lo = pts.min(axis=0) - margin
    pts = pts - lo
    height = int(math.ceil(pts[:, 0].max() + margin))
    width = int(math.ceil(pts[:, 1].max() + margin))
    height += height % 2
    width += width % 2

    rr, cc = np.mgrid[0:height, 0:width].astype(np.float64)
    pix = np.stack([rr.ravel(), cc.ravel()], axis=1)
    dist = np.full(pix.shape[0], np.inf)
    for chunk in np.array_split(pts, max(1, len(pts) // 32)):
        d = np.sqrt(((pix[:, None, :] - chunk[None, :, :]) ** 2).sum(-1)).min(axis=1)
        np.minimum(dist, d, out=dist)
    dist = dist.reshape(height, width)
    band = dist <= hw

    noise = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=3.0)
    noise *= params.noise / max(noise.std(), 1e-12)
    # slightly darker rim, brighter core
    profile = 1.0 - 0.15 * (dist / hw) ** 2
    dapi = np.where(band, np.clip(body * profile + noise, 0.0, 1.0), 0.0)

    ends = (pts[0], pts[-1])
    sigma = 0.9 * hw
    cy3 = np.zeros_like(dapi)
    for e in ends:
        cy3 = np.maximum(cy3, telomere * np.exp(-((rr - e[0]) ** 2 + (cc - e[1]) ** 2) / (2 * sigma ** 2)))
    cy3 = np.where(band, cy3, 0.0)

    gray2 = combine_channels(dapi, cy3)
    gray = downscale2x(gray2)
    mask = largest_component(downscale2x(band.astype(np.float64)) >= 0.5)
    # renormalise block means on the rim so edge pixels keep body intensity
    cover = downscale2x(band.astype(np.float64))
    gray = np.where(mask, np.clip(gray / np.maximum(cover, 1e-12), 0.0, 1.0), 0.0)
    endpoints = tuple((e[0] / 2 - 0.25, e[1] / 2 - 0.25) for e in ends)
    return ChromoImage(gray, mask, chromo_id, endpoints)


def phantom_sources(n, seed, params=None):
    """A karyotype of ``n`` phantoms numbered by decreasing size and brightness.

    Source 0 is the longest, widest and brightest, mirroring how chromosomes are
    numbered by size; this gives the label-1 chromosome (lower id) a visible
    signature.
    """
    params = params or PhantomParams()
    out = []
    for i in range(n):
        frac = i / (n - 1) if n > 1 else 0.0
        length = params.length[1] - frac * (params.length[1] - params.length[0])
        body = params.body_intensity[1] - frac * (params.body_intensity[1] - params.body_intensity[0])
        half_width = params.half_width[1] - frac * (params.half_width[1] - params.half_width[0])
        rng = np.random.default_rng(mix_seed(seed, (1 << 63) + i))
        out.append(generate_phantom(rng, params, length=length, body=body, chromo_id=i,
                                    half_width=half_width))
    return out


def _natural_key(s):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


def load_pgm_sources(directory, downscale=False):
    """Import ``<id>_gray.pgm`` / ``<id>_mask.pgm`` pairs from a directory.

    Ids are ordered naturally ("2" before "10").  Any mask pixel > 0 is
    foreground; only the largest 4-connected component is kept and gray values
    outside it are zeroed.
    """
    directory = Path(directory)
    ids = sorted((p.name[:-len("_gray.pgm")] for p in directory.glob("*_gray.pgm")), key=_natural_key)
    if not ids:
        raise FileNotFoundError(f"no *_gray.pgm files in {directory}")
    out = []
    for cid in ids:
        mask_path = directory / f"{cid}_mask.pgm"
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask file {mask_path}")
        gray = read_pgm(directory / f"{cid}_gray.pgm").astype(np.float64) / 255
        raw_mask = read_pgm(mask_path) > 0
        if gray.shape != raw_mask.shape:
            raise StructuralError(f"{cid}: gray {gray.shape} and mask {raw_mask.shape} differ")
        if downscale:
            gray = downscale2x(gray)
            raw_mask = downscale2x(raw_mask.astype(np.float64)) >= 0.5
        mask = largest_component(raw_mask)
        if not mask.any():
            raise StructuralError(f"{cid}: mask is empty")
        out.append(ChromoImage(np.where(mask, gray, 0.0), mask, cid))
    return out


def pair_census(n):
    """Number of unordered pairs among ``n`` chromosomes."""
    return math.comb(n, 2)


def _sources(config):
    if config.source_dir is not None:
        return load_pgm_sources(config.source_dir)
    return phantom_sources(config.n_sources, config.seed, config.phantom)


def _draw(a, b, config, rng):
    """One attempt at a sample from the source pair (a, b); None on rejection."""
    h, w = config.canvas
    angles = config.angle_set
    ang_a = float(angles[rng.integers(len(angles))])
    ang_b = float(angles[rng.integers(len(angles))])
    t = config.max_translation
    shift = rng.integers(-t, t + 1, size=2)

    centre = ((h - 1) / 2, (w - 1) / 2)
    offsets = []
    for chromo, extra in ((a, (0, 0)), (b, (int(shift[0]), int(shift[1])))):
        rows, cols = np.nonzero(chromo.mask)
        dx = int(round(centre[1] - cols.mean())) + extra[0]
        dy = int(round(centre[0] - rows.mean())) + extra[1]
        offsets.append((dx, dy))

    for chromo, ang, off in ((a, ang_a, offsets[0]), (b, ang_b, offsets[1])):
        r0, r1, c0, c1 = placed_extent(chromo, ang, off)
        if r0 < 1 or c0 < 1 or r1 > h - 2 or c1 > w - 2:
            return None
    pa = place(a, ang_a, offsets[0], config.canvas)
    pb = place(b, ang_b, offsets[1], config.canvas)
    if pa is None or pb is None:
        return None
    sample = compose_pair(pa, pb, config.min_overlap)
    if sample is None:
        return None
    sample.meta = SampleMeta((a.id, b.id), (ang_a, ang_b), tuple(offsets), 0)
    return sample


def _generate_one(index, sources, pairs, config):
    i, j = pairs[index % len(pairs)]
    a, b = sources[i], sources[j]
    sample_seed = mix_seed(config.seed, index)
    for attempt in range(RATE_WINDOW):
        rng = np.random.default_rng(mix_seed(sample_seed, attempt))
        sample = _draw(a, b, config, rng)
        if sample is not None:
            sample.meta.seed = sample_seed
            image = to_u8(sample.image).astype(np.float32) / np.float32(255)
            return Sample(image, sample.label, sample.meta), attempt + 1
    return None, RATE_WINDOW


def generate_dataset(config, threads=1):
    """Generate ``config.n_samples`` overlapping pairs.

    Sample ``k`` uses source pair ``k mod C(n, 2)`` in lexicographic order.
    Image values are quantised to multiples of 1/255 so the dataset survives a
    file round trip unchanged.

    Raises:
        ConfigError: fewer than 1% of draws were accepted over a window of
            10,000 consecutive draws.
    """
    if config.n_samples == 0:
        return Dataset.empty(*config.canvas)
    sources = _sources(config)
    if len(sources) < 2:
        raise ConfigError("at least two source chromosomes are needed")
    pairs = list(itertools.combinations(range(len(sources)), 2))

    work = lambda k: _generate_one(k, sources, pairs, config)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, range(config.n_samples)))
    else:
        results = []
        for k in range(config.n_samples):
            results.append(work(k))
            if results[-1][0] is None:
                break

    draws = accepted = 0
    for sample, n_draws in results:
        draws += n_draws
        accepted += sample is not None
        if draws >= RATE_WINDOW:
            if accepted < MIN_ACCEPT_RATE * draws:
                raise ConfigError(
                    f"only {accepted} of {draws} draws produced an overlapping pair; "
                    "widen max_translation/angle_set or lower min_overlap")
            draws = accepted = 0
        if sample is None:
            raise ConfigError(
                f"no overlapping pair in {RATE_WINDOW} consecutive draws; "
                "the transform ranges make overlap improbable")
    return Dataset.from_samples([s for s, _ in results])
