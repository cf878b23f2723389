"""Hyperspectral cubes as collections of discrete measures.

Each pixel of a hyperspectral image is treated as a nonnegative mass
vector supported on the instrument's wavelength grid.  This module owns
that representation: cost matrices between support points, the global
mass normalization applied before any transport computation, seeded
pixel subsampling, and the binary HSIC/HSIL container formats.

Conventions
-----------
* a "measure" is a 1-D float64 array of nonnegative masses, aligned
  with a strictly increasing wavelength grid;
* pixel index = row * width + col (row-major);
* label 0 means "no ground truth".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HSIC_MAGIC = b"HSIC"
HSIL_MAGIC = b"HSIL"
FORMAT_VERSION = 1


def validate_grid(wavelengths: np.ndarray) -> np.ndarray:
    """Check a wavelength grid: 1-D, length >= 2, strictly increasing."""
    w = np.asarray(wavelengths, dtype=np.float64)
    if w.ndim != 1 or w.size < 2:
        raise ValueError("wavelength grid must be 1-D with at least 2 points")
    if not np.all(np.diff(w) > 0):
        raise ValueError("wavelength grid must be strictly increasing")
    return w


@dataclass
class HsiCube:
    """A hyperspectral image: ``reflectance[pixel, band]`` plus its grid.

    ``reflectance`` has shape (height*width, bands) in row-major pixel
    order; all entries are nonnegative.
    """

    height: int
    width: int
    wavelengths: np.ndarray
    reflectance: np.ndarray

    def __post_init__(self):
        self.wavelengths = validate_grid(self.wavelengths)
        self.reflectance = np.asarray(self.reflectance, dtype=np.float64)
        n, d = self.height * self.width, self.wavelengths.size
        if self.reflectance.shape != (n, d):
            raise ValueError(
                f"reflectance shape {self.reflectance.shape} does not match "
                f"{self.height}x{self.width} pixels with {d} bands"
            )
        if np.any(self.reflectance < 0):
            raise ValueError("reflectance values must be nonnegative")

    @property
    def bands(self) -> int:
        return self.wavelengths.size

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixel_masses(self) -> np.ndarray:
        """Total mass of every pixel, shape (n_pixels,)."""
        return self.reflectance.sum(axis=1)


@dataclass
class LabelMap:
    """Per-pixel integer labels; 0 marks pixels without ground truth."""

    height: int
    width: int
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.height * self.width,):
            raise ValueError("labels must be flat with height*width entries")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative")

    def class_count(self) -> int:
        """Number of distinct nonzero labels."""
        return int(np.unique(self.labels[self.labels > 0]).size)


def build_cost(wavelengths: np.ndarray) -> np.ndarray:
    """Pairwise squared-distance cost matrix of a wavelength grid.

    Parameters
    ----------
    wavelengths : array, shape (d,)
        Strictly increasing support points.

    Returns
    -------
    C : ndarray, shape (d, d)
        ``C[i, j] = (wavelengths[i] - wavelengths[j])**2``.
    """
    w = validate_grid(wavelengths)
    diff = w[:, None] - w[None, :]
    return diff * diff


def rescale_cost(C: np.ndarray, max_value: float = 10.0) -> np.ndarray:
    """Rescale a cost matrix so its largest entry equals ``max_value``."""
    C = np.asarray(C, dtype=np.float64)
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    top = C.max()
    if top <= 0:
        raise ValueError("cost matrix has no positive entry, cannot rescale")
    return C * (max_value / top)


def normalize_global(cube: HsiCube) -> HsiCube:
    """Divide every pixel by the largest total pixel mass in the cube.

    After this, every pixel's total mass lies in [0, 1] and the heaviest
    pixel has total mass exactly 1.  Band-to-band ratios are untouched.
    """
    masses = cube.pixel_masses()
    top = masses.max()
    if top <= 0:
        raise ValueError("cube has no pixel with positive mass")
    return HsiCube(
        height=cube.height,
        width=cube.width,
        wavelengths=cube.wavelengths,
        reflectance=cube.reflectance / top,
    )


def sample_pixels(
    cube: HsiCube,
    labels: LabelMap | None,
    n: int,
    seed: int,
    labeled_only: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` pixels uniformly without replacement, reproducibly.

    Zero-mass pixels are always excluded (they have no transport
    interpretation); with ``labeled_only`` the pool is further
    restricted to pixels whose ground-truth label is nonzero.

    Returns
    -------
    indices : ndarray of pixel indices, sorted ascending
    measures : ndarray, shape (n, bands)
    """
    pool = cube.pixel_masses() > 0
    if labeled_only:
        if labels is None:
            raise ValueError("labeled_only sampling requires a label map")
        if labels.labels.size != cube.n_pixels:
            raise ValueError("label map does not match cube dimensions")
        pool &= labels.labels > 0
    pool_idx = np.flatnonzero(pool)
    if n > pool_idx.size:
        raise ValueError(f"requested {n} pixels but pool has {pool_idx.size}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(pool_idx, size=n, replace=False))
    return chosen, cube.reflectance[chosen].copy()


# ---------------------------------------------------------------------------
# Binary containers.  Both formats are little-endian throughout.
#
# HSIC: magic "HSIC", u32 version, u32 H, u32 W, u32 d,
#       d float64 wavelengths, H*W*d float32 reflectances
#       (pixel-major, bands contiguous per pixel).
# HSIL: magic "HSIL", u32 version, u32 H, u32 W, H*W u16 labels.
# ---------------------------------------------------------------------------


def save_cube(path, cube: HsiCube) -> None:
    """Write a cube in the HSIC binary format."""
    with open(path, "wb") as f:
        f.write(HSIC_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, cube.height, cube.width, cube.bands))
        f.write(cube.wavelengths.astype("<f8").tobytes())
        f.write(cube.reflectance.astype("<f4").tobytes())


def load_cube(path) -> HsiCube:
    """Read a cube from the HSIC binary format."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != HSIC_MAGIC:
            raise ValueError(f"{path}: not an HSIC file (magic {magic!r})")
        version, h, w, d = struct.unpack("<IIII", f.read(16))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported HSIC version {version}")
        wavelengths = np.frombuffer(f.read(8 * d), dtype="<f8")
        data = np.frombuffer(f.read(4 * h * w * d), dtype="<f4")
        if data.size != h * w * d:
            raise ValueError(f"{path}: truncated reflectance payload")
    return HsiCube(
        height=h,
        width=w,
        wavelengths=wavelengths,
        reflectance=data.reshape(h * w, d).astype(np.float64),
    )


def save_labels(path, labels: LabelMap) -> None:
    """Write a label map in the HSIL binary format."""
    if labels.labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("labels exceed the u16 range of the HSIL format")
    with open(path, "wb") as f:
        f.write(HSIL_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, labels.height, labels.width))
        f.write(labels.labels.astype("<u2").tobytes())


def load_labels(path) -> LabelMap:
    """Read a label map from the HSIL binary format."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != HSIL_MAGIC:
            raise ValueError(f"{path}: not an HSIL file (magic {magic!r})")
        version, h, w = struct.unpack("<III", f.read(12))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported HSIL version {version}")
        raw = np.frombuffer(f.read(2 * h * w), dtype="<u2")
        if raw.size != h * w:
            raise ValueError(f"{path}: truncated label payload")
    return LabelMap(height=h, width=w, labels=raw.astype(np.int64))


def uniform_grid(bands: int) -> np.ndarray:
    """Synthetic wavelength grid 0..bands-1 for sources without metadata.

    The later cost rescale makes the absolute units irrelevant.
    """
    if bands < 2:
        raise ValueError("need at least 2 bands")
    return np.arange(bands, dtype=np.float64)
