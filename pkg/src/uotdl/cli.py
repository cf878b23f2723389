"""Command-line entry points.

Subcommands: ``run`` (full pipeline), ``train``, ``cluster``, ``sweep``,
``demo-gauss``, ``render``, ``evaluate``.  Any subcommand accepts
``--config FILE`` with a JSON object whose keys are the long flag names
(dashes or underscores); explicit flags override file values.  Exit
status is 0 on success and 1 with a stage-tagged message on failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .barycenter import BarycenterConfig
from .clustering import apply_mapping, hungarian_match, inpaint, spectral_cluster
from .measures import LabelMap, load_cube, load_labels, sample_pixels, save_labels
from .pipeline import (
    PipelineError,
    RunConfig,
    RunReport,
    SweepGrid,
    demo_gaussians,
    evaluate_maps,
    prepare_cube,
    render_labels,
    run_sweep,
    run_ubcsc,
    write_demo_outputs,
)
from .wdl import AdamState, TrainConfig, load_checkpoint, save_checkpoint, softmax_rows, train


def _add_run_flags(p: argparse.ArgumentParser, clustering=True):
    p.add_argument("--cube", required=False, help="HSIC cube file")
    p.add_argument("--labels", required=False, help="HSIL ground-truth file")
    p.add_argument("--pixels", type=int, help="subsample size n")
    p.add_argument("--atoms", type=int, help="dictionary atoms k")
    p.add_argument("--tau", type=float, help="marginal relaxation")
    p.add_argument("--epsilon", type=float, help="entropic regularization")
    p.add_argument("--iterations", type=int, help="training iterations")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--inner-iters", type=int, help="unrolled barycenter length L")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["quadratic", "tv", "kl"])
    p.add_argument("--mode", choices=["unbalanced", "balanced"])
    p.add_argument("--engine", choices=["f32", "f64"])
    p.add_argument("--include-unlabeled", action="store_true",
                   help="sample pixels without ground truth too")
    p.add_argument("--out", help="output directory")
    if clustering:
        p.add_argument("--clusters", type=int, help="cluster count K (0 = class count)")
        p.add_argument("--nn", type=int, help="nearest neighbours for the graph")


def _merge_config(args, defaults: dict) -> dict:
    """File values (if any) bound by CLI flags; flags win."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            for key, value in json.load(fh).items():
                merged[key.replace("-", "_")] = value
    for key in defaults:
        cli_val = getattr(args, _flag_attr(key), None)
        if cli_val is not None and cli_val is not False:
            merged[key] = cli_val
    return merged


_ATTR_ALIASES = {
    "cube_path": "cube",
    "labels_path": "labels",
    "loss_kind": "loss",
    "out_dir": "out",
}


def _flag_attr(key: str) -> str:
    return _ATTR_ALIASES.get(key, key)


def _run_config_from(args) -> RunConfig:
    defaults = {
        "cube_path": None,
        "labels_path": None,
        "pixels": 1000,
        "atoms": 24,
        "clusters": 0,
        "nn": 25,
        "epsilon": 0.1,
        "tau": 1000.0,
        "iterations": 500,
        "learning_rate": 0.01,
        "inner_iters": 10,
        "seed": 0,
        "loss_kind": "quadratic",
        "mode": "unbalanced",
        "engine": "f32",
        "labeled_only": True,
        "out_dir": None,
    }
    merged = _merge_config(args, defaults)
    if getattr(args, "include_unlabeled", False):
        merged["labeled_only"] = False
    if not merged["cube_path"] or not merged["labels_path"]:
        raise SystemExit("error: --cube and --labels are required (flag or config file)")
    return RunConfig(**merged)


def cmd_run(args) -> int:
    cfg = _run_config_from(args)
    report = run_ubcsc(cfg)
    print(json.dumps({
        "hash": report.config_hash,
        "accuracy": report.accuracy,
        "purity": report.purity,
        "seed": report.seed,
        "wall_seconds": round(report.wall_seconds, 2),
    }, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = _run_config_from(args)
    cube, labels, C = prepare_cube(cfg)
    idx, spectra = sample_pixels(cube, labels, cfg.pixels, cfg.seed, cfg.labeled_only)
    tcfg = TrainConfig(
        barycenter=BarycenterConfig(
            epsilon=cfg.epsilon, tau=cfg.tau, cost=C, inner_iters=cfg.inner_iters
        ),
        atoms=cfg.atoms,
        loss_kind=cfg.loss_kind,
        learning_rate=cfg.learning_rate,
        iterations=cfg.iterations,
        seed=cfg.seed,
        mode=cfg.mode,
        engine=cfg.engine,
    )
    result = train(spectra, tcfg)
    out = args.checkpoint or "model.uwdl"
    opt = AdamState.zeros(cfg.atoms, spectra.shape[1], spectra.shape[0])
    opt.step = cfg.iterations
    save_checkpoint(out, result.dictionary, result.logits, opt, tcfg)
    np.save(out + ".indices.npy", idx)
    print(json.dumps({
        "checkpoint": out,
        "loss_first": float(result.loss_trace[0]),
        "loss_last": float(result.loss_trace[-1]),
    }, indent=2))
    return 0


def cmd_cluster(args) -> int:
    cfg = _run_config_from(args)
    D, Z, _, header = load_checkpoint(args.checkpoint)
    idx = np.load(args.checkpoint + ".indices.npy")
    cube, labels, _ = prepare_cube(cfg)
    truth = labels.labels[idx]
    K = cfg.clusters or labels.class_count()
    weights = softmax_rows(Z)
    pred = spectral_cluster(weights, cfg.nn, K, cfg.seed)
    mapping = hungarian_match(pred, truth)
    matched = apply_mapping(pred, mapping)
    full = inpaint(cube.reflectance, idx, matched)
    result = evaluate_maps(
        LabelMap(cube.height, cube.width, full), labels
    )
    if cfg.out_dir:
        import pathlib

        out = pathlib.Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pred_map = LabelMap(cube.height, cube.width, full)
        save_labels(out / "clustered-labels.hsil", pred_map)
        render_labels(pred_map, labels, out / "clustered")
    print(json.dumps(result, indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config_from(args)
    grid_kwargs = {}
    if args.taus:
        grid_kwargs["taus"] = [float(v) for v in args.taus.split(",")]
    if args.epsilons:
        grid_kwargs["epsilons"] = [float(v) for v in args.epsilons.split(",")]
    if args.nns:
        grid_kwargs["nns"] = [int(v) for v in args.nns.split(",")]
    if args.atom_multipliers:
        grid_kwargs["atom_multipliers"] = [
            float(v) for v in args.atom_multipliers.split(",")
        ]
    if args.clusters_list:
        grid_kwargs["clusters"] = [int(v) for v in args.clusters_list.split(",")]
    grid = SweepGrid(**grid_kwargs)
    reports, failures, summary = run_sweep(grid, cfg)
    print(json.dumps(summary, indent=2))
    return 0 if not failures else 1


def cmd_demo_gauss(args) -> int:
    demo = demo_gaussians(tau=args.tau, epsilon=args.epsilon, steps=args.steps)
    out = args.out or "demo-gauss"
    write_demo_outputs(demo, out)
    table = [
        {
            "lambda": float(l),
            "balanced_mass": float(b),
            "unbalanced_mass": float(u),
        }
        for l, b, u in zip(
            demo["lambdas"], demo["balanced_mass"], demo["unbalanced_mass"]
        )
    ]
    print(json.dumps({"out": out, "table": table}, indent=2))
    return 0


def cmd_render(args) -> int:
    pred = load_labels(args.pred)
    truth = load_labels(args.truth)
    paths = render_labels(pred, truth, args.out or "map")
    print(json.dumps({"written": [str(p) for p in paths]}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    pred = load_labels(args.pred)
    truth = load_labels(args.truth)
    print(json.dumps(evaluate_maps(pred, truth), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uotdl",
        description="Unbalanced optimal-transport dictionary learning for "
        "unsupervised hyperspectral clustering",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline: sample, train, cluster, score")
    p.add_argument("--config", help="JSON config file; flags override")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("train", help="train a dictionary, save a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", help="output checkpoint path")
    _add_run_flags(p, clustering=False)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("cluster", help="cluster a saved checkpoint and score it")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    _add_run_flags(p)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("sweep", help="Cartesian hyperparameter sweep")
    p.add_argument("--config")
    p.add_argument("--taus", help="comma-separated marginal relaxations")
    p.add_argument("--epsilons", help="comma-separated regularizations")
    p.add_argument("--nns", help="comma-separated neighbour counts")
    p.add_argument("--atom-multipliers", help="multiples of the class count")
    p.add_argument("--clusters-list", help="comma-separated cluster counts")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("demo-gauss", help="balanced vs unbalanced interpolation demo")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=0.001)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_demo_gauss)

    p = sub.add_parser("render", help="render label maps as portable pixmaps")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("evaluate", help="score a predicted label map")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(fn=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PipelineError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
