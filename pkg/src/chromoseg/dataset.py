"""In-memory dataset container and the CHRSEG01 binary file format.

File layout (little-endian)::

    magic    8 bytes  b"CHRSEG01"
    count    u32      number of samples
    height   u16
    width    u16
    then per sample: height*width u8 image bytes (round(gray * 255)),
                     height*width u8 label bytes (0..3)
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, StructuralError

MAGIC = b"CHRSEG01"
HEADER = struct.Struct("<8sIHH")


@dataclass
class SampleMeta:
    pair: tuple
    angles: tuple
    offsets: tuple
    seed: int


@dataclass
class Sample:
    image: np.ndarray  # (h, w) float in [0, 1]
    label: np.ndarray  # (h, w) uint8 in 0..3
    meta: SampleMeta | None = None

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise StructuralError(
                f"image {self.image.shape} and label {self.label.shape} differ in shape")


@dataclass
class Dataset:
    """A stack of equally sized samples.

    ``images`` is ``(n, h, w)`` float32 and ``labels`` is ``(n, h, w)`` uint8.
    ``meta`` is either empty or holds one entry per sample.
    """

    images: np.ndarray
    labels: np.ndarray
    meta: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 3 or self.images.shape != self.labels.shape:
            raise StructuralError(
                f"images {self.images.shape} and labels {self.labels.shape} must be equal (n, h, w)")
        if self.meta and len(self.meta) != len(self.images):
            raise StructuralError("meta must be empty or have one entry per sample")

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((0, height, width), np.float32), np.zeros((0, height, width), np.uint8))

    @classmethod
    def from_samples(cls, samples, shape=None):
        samples = list(samples)
        if not samples:
            if shape is None:
                raise StructuralError("shape is required for an empty sample list")
            return cls.empty(*shape)
        return cls(np.stack([s.image for s in samples]),
                   np.stack([s.label for s in samples]),
                   [s.meta for s in samples] if all(s.meta is not None for s in samples) else [])

    @property
    def shape(self):
        return self.images.shape[1:]

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return Sample(self.images[i], self.labels[i], self.meta[i] if self.meta else None)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        meta = [self.meta[i] for i in indices] if self.meta else []
        return Dataset(self.images[indices], self.labels[indices], meta)


def to_u8(gray):
    """Quantise [0, 1] intensities to bytes the way the file format stores them."""
    return np.clip(np.rint(np.asarray(gray, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def encode_dataset(ds):
    h, w = ds.shape
    parts = [HEADER.pack(MAGIC, len(ds), h, w)]
    images = to_u8(ds.images)
    for img, lab in zip(images, ds.labels):
        parts.append(img.tobytes())
        parts.append(lab.tobytes())
    return b"".join(parts)


def decode_dataset(buf):
    if len(buf) < HEADER.size:
        raise FormatError(f"dataset file too short for header ({len(buf)} bytes)")
    magic, count, h, w = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    expected = HEADER.size + count * 2 * h * w
    if len(buf) != expected:
        raise FormatError(f"dataset file has {len(buf)} bytes, header implies {expected}")
    body = np.frombuffer(buf, dtype=np.uint8, offset=HEADER.size).reshape(count, 2, h, w)
    labels = body[:, 1].copy()
    # 4 is tolerated as the known erroneous label that cleaning repairs
    if labels.size and labels.max() > 4:
        raise FormatError("label bytes must lie in 0..3 (4 tolerated before cleaning)")
    images = body[:, 0].astype(np.float32) / np.float32(255)
    return Dataset(images, labels)


def write_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def read_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
