"""End-to-end runs: subsample, train, cluster, match, in-paint, report.

A run is fully described by a `RunConfig`; identical configs (same seed
included) produce byte-identical metrics.  Reports are JSON files whose
metrics can be recomputed from the persisted confusion matrix; rendered
maps are plain portable pixmaps so no image codec is needed.

The balanced mode ("BCSC") is the same pipeline with the mass-conserving
barycenter recursion and per-pixel probability normalization switched
on; nothing else changes, so accuracy comparisons between the two modes
isolate the effect of keeping per-pixel mass information.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .barycenter import BarycenterConfig, balanced_barycenter, barycenter
from .clustering import (
    accuracy,
    apply_mapping,
    confusion_counts,
    hungarian_match,
    inpaint,
    purity,
    spectral_cluster,
)
from .measures import (
    HsiCube,
    LabelMap,
    build_cost,
    load_cube,
    load_labels,
    normalize_global,
    rescale_cost,
    sample_pixels,
    save_labels,
)
from .wdl import AdamParams, TrainConfig, train

DEFAULT_SWEEP_TAUS = [100.0, 1000.0, 10000.0, 100000.0]
DEFAULT_SWEEP_EPSILONS = [0.05, 0.06, 0.07, 0.08, 0.09, 0.1]
DEFAULT_SWEEP_NNS = [5, 10, 15, 20, 25, 30, 35, 40, 45, 50]
DEFAULT_SWEEP_ATOM_MULTIPLIERS = [0.5, 1.0, 2.0, 4.0]


class PipelineError(RuntimeError):
    """A stage failure, tagged with the stage name and config hash."""

    def __init__(self, stage: str, config_hash: str, cause: BaseException):
        self.stage = stage
        self.config_hash = config_hash
        self.cause = cause
        super().__init__(f"stage {stage} failed (config {config_hash}): {cause}")


@dataclass
class RunConfig:
    cube_path: str
    labels_path: str
    pixels: int = 1000
    atoms: int = 24
    clusters: int = 0  # 0: use the ground-truth class count
    nn: int = 25
    epsilon: float = 0.1
    tau: float = 1000.0
    iterations: int = 500
    learning_rate: float = 0.01
    inner_iters: int = 10
    seed: int = 0
    loss_kind: str = "quadratic"
    mode: str = "unbalanced"
    engine: str = "f32"
    cost_max: float = 10.0
    labeled_only: bool = True
    out_dir: str | None = None

    def __post_init__(self):
        for name in ("pixels", "atoms", "nn", "iterations", "inner_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.clusters < 0:
            raise ValueError("clusters must be nonnegative")
        if self.epsilon <= 0 or self.tau <= 0:
            raise ValueError("epsilon and tau must be positive")
        if self.mode not in ("unbalanced", "balanced"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class SweepGrid:
    taus: list = field(default_factory=lambda: list(DEFAULT_SWEEP_TAUS))
    epsilons: list = field(default_factory=lambda: list(DEFAULT_SWEEP_EPSILONS))
    nns: list = field(default_factory=lambda: list(DEFAULT_SWEEP_NNS))
    atom_multipliers: list = field(
        default_factory=lambda: list(DEFAULT_SWEEP_ATOM_MULTIPLIERS)
    )
    clusters: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        for name in ("taus", "epsilons", "nns", "atom_multipliers", "clusters"):
            if not getattr(self, name):
                raise ValueError(f"sweep grid field {name} is empty")


@dataclass
class RunReport:
    config: dict
    config_hash: str
    accuracy: float
    purity: float
    cluster_sizes: list
    confusion: list
    mapping: list
    loss_first: float
    loss_last: float
    loss_min: float
    wall_seconds: float
    seed: int
    scored_pixels: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def _stage(name, cfg_hash, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, cfg_hash, exc) from exc


def prepare_cube(cfg: RunConfig) -> tuple[HsiCube, LabelMap, np.ndarray]:
    """Load, normalize and build the rescaled cost matrix."""
    cube = load_cube(cfg.cube_path)
    labels = load_labels(cfg.labels_path)
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise ValueError("label map does not match cube dimensions")
    cube = normalize_global(cube)
    if cfg.mode == "balanced":
        # probability normalization per pixel: mass information discarded
        masses = cube.pixel_masses()
        scaled = np.where(masses[:, None] > 0, cube.reflectance / np.where(
            masses[:, None] > 0, masses[:, None], 1.0), 0.0)
        cube = HsiCube(cube.height, cube.width, cube.wavelengths, scaled)
    C = rescale_cost(build_cost(cube.wavelengths), cfg.cost_max)
    return cube, labels, C


def run_ubcsc(cfg: RunConfig) -> RunReport:
    """Execute the full pipeline for one configuration.

    Sampling, training, spectral clustering, Hungarian alignment,
    accuracy/purity on the sampled subset, then in-painting to the full
    scene.  Writes the report, the in-painted maps and rendered images
    into ``cfg.out_dir`` when set.
    """
    h = cfg.config_hash()
    t0 = time.perf_counter()
    cube, labels, C = _stage("load", h, prepare_cube, cfg)

    idx, spectra = _stage(
        "sample", h, sample_pixels, cube, labels, cfg.pixels, cfg.seed, cfg.labeled_only
    )
    truth = labels.labels[idx]
    K = cfg.clusters or labels.class_count()

    tcfg = TrainConfig(
        barycenter=BarycenterConfig(
            epsilon=cfg.epsilon, tau=cfg.tau, cost=C, inner_iters=cfg.inner_iters
        ),
        atoms=cfg.atoms,
        loss_kind=cfg.loss_kind,
        learning_rate=cfg.learning_rate,
        iterations=cfg.iterations,
        seed=cfg.seed,
        optimizer=AdamParams(),
        mode=cfg.mode,
        engine=cfg.engine,
    )
    result = _stage("train", h, train, spectra, tcfg)

    pred = _stage(
        "cluster", h, spectral_cluster, result.weights, cfg.nn, K, cfg.seed
    )
    mapping = _stage("match", h, hungarian_match, pred, truth)
    matched = apply_mapping(pred, mapping)
    acc = _stage("evaluate", h, accuracy, matched, truth)
    pur = _stage("evaluate", h, purity, pred, truth)
    confusion = confusion_counts(pred, truth)

    full = _stage("inpaint", h, inpaint, cube.reflectance, idx, matched)
    report = RunReport(
        config=asdict(cfg),
        config_hash=h,
        accuracy=float(acc),
        purity=float(pur),
        cluster_sizes=np.bincount(pred, minlength=K + 1)[1:].tolist(),
        confusion=confusion.tolist(),
        mapping=mapping.tolist(),
        loss_first=float(result.loss_trace[0]),
        loss_last=float(result.loss_trace[-1]),
        loss_min=float(result.loss_trace.min()),
        wall_seconds=time.perf_counter() - t0,
        seed=cfg.seed,
        scored_pixels=int(truth.size),
    )

    if cfg.out_dir is not None:
        _stage("emit", h, _emit_run_outputs, cfg, report, cube, labels, full)
    return report


def _emit_run_outputs(cfg, report, cube, labels, full_labels):
    import pathlib

    out = pathlib.Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"run-{report.config_hash}"
    (out / f"{stem}.json").write_text(report.to_json())
    pred_map = LabelMap(cube.height, cube.width, full_labels)
    save_labels(out / f"{stem}-labels.hsil", pred_map)
    render_labels(pred_map, labels, out / stem)
    index = out / "index.jsonl"
    line = json.dumps(
        {
            "hash": report.config_hash,
            "accuracy": report.accuracy,
            "purity": report.purity,
            "seed": report.seed,
            "file": f"{stem}.json",
        }
    )
    with open(index, "a") as fh:
        fh.write(line + "\n")


def recompute_metrics(report: RunReport) -> tuple[float, float]:
    """Accuracy and purity recomputed from the persisted confusion matrix."""
    confusion = np.asarray(report.confusion, dtype=np.int64)
    mapping = np.asarray(report.mapping)
    total = confusion.sum()
    hit = sum(
        confusion[c, mapping[c] - 1] for c in range(len(mapping)) if mapping[c] > 0
    )
    nonempty = confusion.sum(axis=1) > 0
    pur = float(
        np.mean(confusion[nonempty].max(axis=1) / confusion[nonempty].sum(axis=1))
    )
    return float(hit / total), pur


def run_sweep(grid: SweepGrid, base: RunConfig, class_count: int | None = None):
    """Cartesian hyperparameter sweep with resumable, per-run reports.

    Every combination derives its own seed from the base seed and the
    config hash, runs independently, and is flushed to ``out_dir``
    immediately.  Existing report files are not recomputed, so an
    interrupted sweep resumes where it stopped.  Individual failures are
    recorded and do not stop the sweep.

    Returns (reports, failures, summary).
    """
    import pathlib

    if base.out_dir is None:
        raise ValueError("sweep needs an output directory")
    out = pathlib.Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if class_count is None:
        class_count = load_labels(base.labels_path).class_count()

    reports = []
    failures = []
    for tau, eps, nn, mult, clusters in itertools.product(
        grid.taus, grid.epsilons, grid.nns, grid.atom_multipliers, grid.clusters
    ):
        atoms = max(1, round(mult * class_count))
        cfg = replace(
            base,
            tau=tau,
            epsilon=eps,
            nn=nn,
            atoms=atoms,
            clusters=clusters,
            out_dir=str(out),
        )
        cfg = replace(cfg, seed=derive_seed(base.seed, cfg))
        path = out / f"run-{cfg.config_hash()}.json"
        if path.exists():
            reports.append(RunReport.from_json(path.read_text()))
            continue
        try:
            reports.append(run_ubcsc(cfg))
        except PipelineError as err:
            failures.append({"hash": cfg.config_hash(), "error": str(err)})
    summary = summarize_sweep(reports, failures)
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2))
    return reports, failures, summary


def summarize_sweep(reports, failures=()):
    def pick(metric):
        best = max(reports, key=lambda r: getattr(r, metric), default=None)
        if best is None:
            return None
        return {
            "hash": best.config_hash,
            "accuracy": best.accuracy,
            "purity": best.purity,
            "config": best.config,
        }

    return {
        "runs": len(reports),
        "failures": list(failures),
        "best_by_accuracy": pick("accuracy"),
        "best_by_purity": pick("purity"),
    }


def derive_seed(base_seed: int, cfg: RunConfig) -> int:
    """Stable per-config seed: reproducible, independent across configs."""
    material = f"{base_seed}:{cfg.config_hash()}".encode()
    return int.from_bytes(hashlib.sha256(material).digest()[:4], "little")


# ---------------------------------------------------------------------------
# Gaussian interpolation demo
# ---------------------------------------------------------------------------


def demo_gaussians(
    tau: float = 0.5,
    epsilon: float = 0.001,
    steps: int = 5,
    bands: int = 96,
    sigma: float = 0.07,
    centers=(0.3, 0.7),
    inner_iters: int = 1200,
    balanced_iters: int = 2500,
):
    """Interpolate between two same-variance Gaussians, both ways.

    Returns a dict with the interpolation weights, per-weight total
    masses of the balanced and unbalanced barycenters, and the curves
    themselves.  The balanced column conserves mass; the unbalanced one
    does not (its mass dips between the endpoints) while keeping the
    Gaussian shape.
    """
    if steps < 3:
        raise ValueError("need at least 3 interpolation steps")
    grid = np.linspace(0.0, 1.0, bands)
    C = rescale_cost(build_cost(grid), 10.0)
    atoms = []
    for c in centers:
        g = np.exp(-((grid - c) ** 2) / (2 * sigma**2))
        atoms.append(g / g.sum())
    atoms = np.stack(atoms)

    lambdas = np.linspace(0.0, 1.0, steps)
    cfg_u = BarycenterConfig(epsilon=epsilon, tau=tau, cost=C, inner_iters=inner_iters)
    cfg_b = BarycenterConfig(
        epsilon=epsilon, tau=tau, cost=C, inner_iters=balanced_iters
    )
    curves_u, curves_b = [], []
    for lam in lambdas:
        w = [1.0 - lam, lam]
        curves_u.append(barycenter(atoms, w, cfg_u))
        curves_b.append(balanced_barycenter(atoms, w, cfg_b))
    curves_u = np.stack(curves_u)
    curves_b = np.stack(curves_b)
    return {
        "grid": grid,
        "lambdas": lambdas,
        "atoms": atoms,
        "unbalanced": curves_u,
        "balanced": curves_b,
        "unbalanced_mass": curves_u.sum(axis=1),
        "balanced_mass": curves_b.sum(axis=1),
    }


def write_demo_outputs(demo: dict, out_dir) -> None:
    """Persist the demo table (CSV), curves (JSON) and a PPM plot."""
    import pathlib

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["lambda,balanced_mass,unbalanced_mass"]
    for lam, mb, mu in zip(
        demo["lambdas"], demo["balanced_mass"], demo["unbalanced_mass"]
    ):
        rows.append(f"{lam:.6f},{mb:.9f},{mu:.9f}")
    (out / "mass_table.csv").write_text("\n".join(rows) + "\n")
    (out / "curves.json").write_text(
        json.dumps(
            {
                "grid": demo["grid"].tolist(),
                "lambdas": demo["lambdas"].tolist(),
                "balanced": demo["balanced"].tolist(),
                "unbalanced": demo["unbalanced"].tolist(),
            }
        )
    )
    for name in ("balanced", "unbalanced"):
        _write_curve_ppm(out / f"{name}.ppm", demo[name])


def _write_curve_ppm(path, curves, width=480, height=280, margin=10):
    """Minimal polyline raster: one colored curve per interpolation step."""
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    top = float(np.max(curves))
    if top <= 0:
        top = 1.0
    n_curves, d = curves.shape
    xs = margin + (np.arange(d) * (width - 2 * margin) / (d - 1)).astype(int)
    for ci, curve in enumerate(curves):
        color = _PALETTE[1 + (ci % (len(_PALETTE) - 1))]
        ys = height - 1 - margin - (
            (curve / top) * (height - 2 * margin)
        ).astype(int)
        for a in range(d - 1):
            x0, x1 = xs[a], xs[a + 1]
            y0, y1 = ys[a], ys[a + 1]
            steps = max(abs(x1 - x0), abs(y1 - y0), 1)
            for t in range(steps + 1):
                x = x0 + (x1 - x0) * t // steps
                y = y0 + (y1 - y0) * t // steps
                canvas[y, x] = color
    _write_ppm(path, canvas)


# 17 fixed colors, index 0 black (= unlabeled)
_PALETTE = np.array(
    [
        (0, 0, 0),
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (210, 245, 60),
        (250, 190, 212),
        (0, 128, 128),
        (220, 190, 255),
        (170, 110, 40),
        (128, 0, 0),
        (128, 128, 0),
        (0, 0, 128),
    ],
    dtype=np.uint8,
)


def _write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def label_image(label_map: LabelMap) -> np.ndarray:
    """Map labels onto the fixed palette (index 0 black, others cycle)."""
    labels = label_map.labels.reshape(label_map.height, label_map.width)
    idx = np.where(labels == 0, 0, 1 + (labels - 1) % (len(_PALETTE) - 1))
    return _PALETTE[idx]


def render_labels(pred: LabelMap, truth: LabelMap, out_prefix) -> list:
    """Write predicted, truth and disagreement maps as P6 pixmaps.

    The disagreement mask is black where prediction and truth agree (or
    truth is unlabeled) and red where they differ.
    """
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise ValueError("prediction and truth dimensions differ")
    paths = []
    for name, lm in (("pred", pred), ("truth", truth)):
        path = f"{out_prefix}-{name}.ppm"
        _write_ppm(path, label_image(lm))
        paths.append(path)
    disagree = (
        (pred.labels != truth.labels) & (truth.labels > 0)
    ).reshape(pred.height, pred.width)
    mask = np.zeros((pred.height, pred.width, 3), dtype=np.uint8)
    mask[disagree] = (230, 25, 75)
    path = f"{out_prefix}-disagreement.ppm"
    _write_ppm(path, mask)
    paths.append(path)
    return paths


def evaluate_maps(pred: LabelMap, truth: LabelMap) -> dict:
    """Hungarian-align a predicted map to truth and score it."""
    mapping = hungarian_match(pred.labels, truth.labels)
    matched = apply_mapping(pred.labels, mapping)
    return {
        "accuracy": accuracy(matched, truth.labels),
        "purity": purity(pred.labels, truth.labels),
        "mapping": mapping.tolist(),
    }
