import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from uotdl.measures import HsiCube, LabelMap, save_cube, save_labels


def make_synthetic_scene(kind="separable", height=20, width=30, bands=30, seed=0):
    """Small labeled scene with spectrally structured classes.

    ``separable``: three Gaussian-bump classes at distinct wavelengths.
    ``mass_twins``: classes 2 and 3 share one spectral shape and differ
    only by a factor-of-two total mass, so any method that normalizes
    pixels to probabilities cannot tell them apart.
    """
    rng = np.random.default_rng(seed)
    n = height * width
    grid = np.linspace(0.0, 1.0, bands)

    def bump(center, sigma=0.06):
        g = np.exp(-((grid - center) ** 2) / (2 * sigma**2))
        return g / g.sum()

    if kind == "separable":
        shapes = [bump(0.2), bump(0.5), bump(0.8)]
        mass = [1.0, 1.0, 1.0]
    elif kind == "mass_twins":
        shapes = [bump(0.25), bump(0.7), bump(0.7)]
        mass = [1.0, 1.0, 0.45]
    else:
        raise ValueError(kind)

    labels = rng.integers(1, len(shapes) + 1, size=n)
    labels[rng.uniform(size=n) < 0.08] = 0  # some pixels lack ground truth
    refl = np.empty((n, bands))
    for i in range(n):
        cls = labels[i] if labels[i] > 0 else rng.integers(1, len(shapes) + 1)
        base = shapes[cls - 1] * mass[cls - 1]
        scale = rng.uniform(0.92, 1.0)
        noise = rng.normal(0.0, 0.004, bands)
        refl[i] = np.maximum(base * scale + noise * base.max(), 1e-6)
    cube = HsiCube(height, width, grid, refl)
    label_map = LabelMap(height, width, labels)
    return cube, label_map


def write_scene(tmp_path, kind="separable", seed=0, **kw):
    cube, labels = make_synthetic_scene(kind=kind, seed=seed, **kw)
    cube_path = tmp_path / f"{kind}.hsic"
    labels_path = tmp_path / f"{kind}.hsil"
    save_cube(cube_path, cube)
    save_labels(labels_path, labels)
    return str(cube_path), str(labels_path), cube, labels
