"""Synthetic datasets and their binary file format.

File layout (all little-endian)::

    offset  size    field
    0       4       magic b"WBDS"
    4       2       format version (uint16, currently 1)
    6       2       reserved, zero
    8       4       d, input dimension (uint32)
    12      4       n, number of examples (uint32)
    16      4       K, number of classes (uint32)
    20      64      run-config digest, ASCII hex, NUL padded
    84      8*n*d   inputs, float64, row-major
    ...     4*n     labels, int32, values in [0, K)
"""

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"WBDS"
VERSION = 1
_HEADER = struct.Struct("<4sHHIII64s")

KINDS = ("gaussians2d", "rings2d", "gridpatterns64")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    kind: str = ""
    digest: str = ""

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError("x must be (n, d) and y (n,)")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.n_classes, self.kind, self.digest)

    def split(self, n_first):
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def gaussians2d(n, seed, n_classes=2, std=0.08):
    """Isotropic blobs in the unit square; two classes sit on the diagonal."""
    if n_classes < 2 or n_classes > 4:
        raise ValueError("gaussians2d supports 2 to 4 classes")
    rng = np.random.default_rng(seed)
    centers = np.array([[0.3, 0.3], [0.7, 0.7], [0.3, 0.7], [0.7, 0.3]])[:n_classes]
    y = rng.integers(0, n_classes, size=n)
    x = centers[y] + std * rng.standard_normal((n, 2))
    return Dataset(np.clip(x, 0.0, 1.0), y, n_classes, "gaussians2d")


def rings2d(n, seed, radii=(0.15, 0.35), width=0.03):
    """Concentric rings around the centre of the unit square."""
    rng = np.random.default_rng(seed)
    k = len(radii)
    y = rng.integers(0, k, size=n)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.asarray(radii)[y] + width * rng.standard_normal(n)
    x = 0.5 + r[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return Dataset(np.clip(x, 0.0, 1.0), y, k, "rings2d")


# seven-segment layout on an 8x8 canvas: (row slice, col slice) per segment
_SEGMENTS = {
    "a": (slice(0, 1), slice(2, 6)),
    "b": (slice(1, 4), slice(6, 7)),
    "c": (slice(4, 7), slice(6, 7)),
    "d": (slice(7, 8), slice(2, 6)),
    "e": (slice(4, 7), slice(1, 2)),
    "f": (slice(1, 4), slice(1, 2)),
    "g": (slice(3, 5), slice(2, 6)),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abfgcd"]


def digit_prototypes():
    protos = np.zeros((10, 8, 8))
    for k, segs in enumerate(_DIGITS):
        for s in segs:
            rows, cols = _SEGMENTS[s]
            protos[k, rows, cols] = 1.0
    return protos.reshape(10, 64)


def gridpatterns64(n, seed, noise=0.15, contrast=(0.6, 1.0)):
    """Noisy seven-segment digits on an 8x8 grid, ten classes."""
    rng = np.random.default_rng(seed)
    protos = digit_prototypes()
    y = rng.integers(0, 10, size=n)
    scale = rng.uniform(*contrast, size=(n, 1))
    x = protos[y] * scale + noise * rng.standard_normal((n, 64))
    return Dataset(np.clip(x, 0.0, 1.0), y, 10, "gridpatterns64")


def make_dataset(kind, n, seed, **kwargs):
    if kind == "gaussians2d":
        return gaussians2d(n, seed, **kwargs)
    if kind == "rings2d":
        return rings2d(n, seed, **kwargs)
    if kind == "gridpatterns64":
        return gridpatterns64(n, seed, **kwargs)
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {', '.join(KINDS)}")


def save_dataset(path, ds, digest=None):
    digest = ds.digest if digest is None else digest
    n, d = ds.x.shape
    header = _HEADER.pack(MAGIC, VERSION, 0, d, n, ds.n_classes, digest.encode("ascii"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.x.astype("<f8").tobytes())
        fh.write(ds.y.astype("<i4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, _, d, n, k, digest = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a workbench dataset")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    expected = off + 8 * n * d + 4 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    x = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 8 * n * d)
    return Dataset(x.astype(np.float64), y.astype(np.int64), k, digest=digest.rstrip(b"\0").decode("ascii"))
