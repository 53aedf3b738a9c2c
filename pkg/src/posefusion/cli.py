"""Command-line surface.

Subcommands: gen, train, train-selector, corrupt, eval, matrix,
experiment, report. Every subcommand accepts ``--config`` (a JSON file
with sections "synth", "train", "selector") plus flag overrides; flags
win. The dataset root can also come from POSEFUSION_DATA_ROOT.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, synth
from .errors import PoseFusionError
from .estimators import (
    EstimatorBundle,
    TactileNetConfig,
    TrainConfig,
    VisionNetConfig,
    train_estimators,
)
from .selector import SelectorCheckpoint, SelectorTrainConfig, train_selector


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _data_root(args) -> Path:
    root = args.data or os.environ.get("POSEFUSION_DATA_ROOT")
    if not root:
        raise PoseFusionError("no dataset root: pass --data or set POSEFUSION_DATA_ROOT")
    return Path(root)


def _scene_config(cfg: dict, args) -> synth.SceneConfig:
    section = dict(cfg.get("synth", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    for flag in ("object_id", "shape", "occluder_fraction"):
        v = getattr(args, flag, None)
        if v is not None:
            section[flag] = v
    return synth.SceneConfig.from_dict(section)


def _object_models(root: Path) -> dict:
    """Model point clouds for a dataset, from its generation summary."""
    summary = root / "summary.json"
    if not summary.exists():
        raise PoseFusionError(f"{summary} missing; cannot resolve object models")
    with open(summary) as f:
        cfg = synth.SceneConfig.from_dict(json.load(f)["config"])
    assets = synth.SceneAssets.build(cfg)
    return {assets.model.object_id: assets.model.points}


def _splits(root: Path, args):
    manifests = dataio.list_sequences(root)
    return dataio.split_dataset(manifests, args.split_ratio, args.split_seed)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args):
    cfg = _scene_config(_load_config(args.config), args)
    out = _data_root(args)
    synth.generate_dataset(cfg, args.sequences, args.frames, out, progress=not args.quiet)
    print(f"gen: wrote {args.sequences} sequences x {args.frames} frames to {out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    section = dict(cfg.get("train", {}))
    for flag in ("lr", "batch_size", "epochs"):
        v = getattr(args, flag)
        if v is not None:
            section[flag] = v
    train_cfg = TrainConfig(**{k: section[k] for k in ("lr", "batch_size", "epochs")
                               if k in section}) if section else TrainConfig()
    vision_cfg = VisionNetConfig(args.vision_variant or section.get(
        "vision_variant", "small"))
    root = _data_root(args)
    train_set, _ = _splits(root, args)
    train_set, _ = dataio.selector_holdout(train_set, args.selector_holdout)
    models = _object_models(root)
    bundle = train_estimators(train_set, models, train_cfg,
                              TactileNetConfig(), vision_cfg,
                              seed=args.seed or 0, progress=not args.quiet)
    bundle.save(args.out)
    print(f"train: {len(train_set)} sequences, {train_cfg.epochs} epochs, "
          f"final loss {bundle.log[-1]['total']:.6f} -> {args.out}")
    return 0


def cmd_train_selector(args):
    cfg = _load_config(args.config)
    section = dict(cfg.get("selector", {}))
    for flag in ("lr", "batch_size", "epochs"):
        v = getattr(args, flag)
        if v is not None:
            section[flag] = v
    sel_cfg = SelectorTrainConfig(**{k: section[k]
                                     for k in ("lr", "batch_size", "epochs")
                                     if k in section})
    root = _data_root(args)
    train_set, _ = _splits(root, args)
    _, holdout = dataio.selector_holdout(train_set, args.selector_holdout)
    bundle = _load_estimators(args.estimators)
    inputs, labels = evaluation.selector_training_windows(
        holdout, bundle, length=args.window, stride=args.stride,
        augment=not args.no_augment, seed=args.seed or 0)
    ckpt = train_selector(inputs, labels, sel_cfg, seed=args.seed or 0,
                          progress=not args.quiet)
    ckpt.save(args.out)
    print(f"train-selector: {inputs.shape[0]} windows, final accuracy "
          f"{ckpt.log[-1]['accuracy']:.3f} -> {args.out}")
    return 0


def _load_estimators(path):
    if not path or not Path(path).exists():
        raise PoseFusionError(f"estimator checkpoint not found: {path}")
    return EstimatorBundle.load(path)


def _load_selector(path):
    if not path or not Path(path).exists():
        raise PoseFusionError(f"selector checkpoint not found: {path}")
    return SelectorCheckpoint.load(path)


def cmd_corrupt(args):
    root = _data_root(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if (root / "summary.json").exists():
        shutil.copy(root / "summary.json", out / "summary.json")
    if args.kind == "occlusion_block":
        x, y, w, h = (int(v) for v in args.block.split(","))
        spec = dataio.CorruptionSpec(kind="occlusion_block", block=(x, y, w, h),
                                     seed=args.seed or 0)
    else:
        fingers = tuple(int(v) for v in args.fingers.split(",")) if args.fingers else ()
        spec = dataio.CorruptionSpec(kind="tactile_dropout", fingers=fingers,
                                     seed=args.seed or 0)
    if args.frames_range:
        a, b = (int(v) for v in args.frames_range.split(":"))
        spec.frame_range = (a, b)
    manifests = dataio.list_sequences(root)
    for m in manifests:
        frames = dataio.apply_corruption(dataio.read_sequence(m.path), spec)
        dataio.write_sequence(frames, out / m.sequence_id,
                              tactile_stats=m.tactile_stats)
    print(f"corrupt: applied {args.kind} to {len(manifests)} sequences -> {out}")
    return 0


def cmd_eval(args):
    root = _data_root(args)
    _, test_set = _splits(root, args)
    bundle = _load_estimators(args.estimators)
    selector = _load_selector(args.selector).model if args.selector else None
    report = evaluation.evaluate(
        test_set, bundle, selector, seed=args.seed,
        checkpoint_ids={"estimators": str(args.estimators),
                        "selector": str(args.selector)})
    evaluation.save_report(report, args.out)
    table = evaluation.render_table(report)
    if args.table:
        Path(args.table).write_text(table)
    if not args.quiet:
        print(table, end="")
    print(f"eval: report -> {args.out}")
    return 0


def cmd_matrix(args):
    root = _data_root(args)
    _, test_set = _splits(root, args)
    bundle = _load_estimators(args.estimators)
    selector = _load_selector(args.selector).model if args.selector else None
    report = evaluation.matrix_report(test_set, bundle, selector)
    evaluation.save_report(report, args.out)
    print(f"matrix: report -> {args.out}")
    return 0


def cmd_experiment(args):
    root = _data_root(args)
    _, test_set = _splits(root, args)
    if args.max_sequences:
        test_set = test_set[:args.max_sequences]
    bundle = _load_estimators(args.estimators)
    selector = _load_selector(args.selector).model
    severities = tuple(float(v) for v in args.severities.split(","))
    dropout = tuple(int(v) for v in args.dropout_fingers.split(","))
    report = evaluation.corruption_experiment(
        test_set, bundle, selector, occlusion_severities=severities,
        dropout_fingers=dropout, seed=args.seed or 0)
    evaluation.save_report(report, args.out)
    print(f"experiment: report -> {args.out}")
    return 0


def cmd_report(args):
    with open(args.report) as f:
        report = json.load(f)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if "per_object" in report:
        (out_dir / "table.tsv").write_text(evaluation.render_table(report))
        print(f"report: table -> {out_dir / 'table.tsv'}")
    if "grids" in report and args.plots:
        _render_matrix_plots(report, out_dir)
    if "occlusion" in report and args.plots:
        _render_experiment_plots(report, out_dir)
    return 0


def _render_matrix_plots(report, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for key, grid in report["grids"].items():
        arr = np.array([[np.nan if v is None else v for v in row] for row in grid])
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(arr, cmap="viridis")
        ax.set_xticks(range(4), report["contact_bins"])
        ax.set_yticks(range(4), report["occlusion_bins"])
        ax.set_xlabel("contact fingers")
        ax.set_ylabel("occlusion rate")
        ax.set_title(key)
        fig.colorbar(im)
        fname = out_dir / (key.replace("/", "_") + ".png")
        fig.savefig(fname, dpi=100, bbox_inches="tight")
        plt.close(fig)
        print(f"report: plot -> {fname}")


def _render_experiment_plots(report, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for kind in ("occlusion", "tactile_dropout"):
        rows = report[kind]
        xs = [r["severity"] for r in rows]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        for name in ("tactile", "vision", "fusion"):
            ax1.plot(xs, [r["selection_share"][name] for r in rows], label=name)
            ax2.plot(xs, [r["mean_positional_cm"][name] for r in rows], label=name)
        ax2.plot(xs, [r["mean_positional_cm"]["selectlstm"] for r in rows],
                 label="selectlstm", linewidth=2)
        ax1.set_ylabel("selection share")
        ax2.set_ylabel("positional error (cm)")
        for ax in (ax1, ax2):
            ax.set_xlabel("severity")
            ax.legend()
        fname = out_dir / f"experiment_{kind}.png"
        fig.savefig(fname, dpi=100, bbox_inches="tight")
        plt.close(fig)
        print(f"report: plot -> {fname}")


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posefusion",
                                description="Multi-modal in-hand pose estimation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--quiet", action="store_true")
        if data:
            sp.add_argument("--data", help="dataset root (or POSEFUSION_DATA_ROOT)")

    def split_flags(sp):
        sp.add_argument("--split-ratio", type=float, default=0.6)
        sp.add_argument("--split-seed", type=int, default=0)
        sp.add_argument("--selector-holdout", dest="selector_holdout",
                        type=float, default=0.25,
                        help="fraction of the train split reserved for "
                             "selector supervision (must match between "
                             "train and train-selector)")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--sequences", type=int, default=10)
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--object-id", dest="object_id")
    sp.add_argument("--shape", choices=synth.SHAPES)
    sp.add_argument("--occluder-fraction", dest="occluder_fraction", type=float)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train the three pose estimators")
    common(sp)
    split_flags(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--vision-variant", choices=("small", "resnet18"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("train-selector", help="train the selection network")
    common(sp)
    split_flags(sp)
    sp.add_argument("--estimators", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--window", type=int, default=20)
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--no-augment", dest="no_augment", action="store_true",
                    help="train on clean windows only (skip injected "
                         "occlusion/dropout variants)")
    sp.set_defaults(func=cmd_train_selector)

    sp = sub.add_parser("corrupt", help="apply a corruption to a dataset copy")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kind", choices=("occlusion_block", "tactile_dropout"),
                    required=True)
    sp.add_argument("--block", help="x,y,w,h in pixels")
    sp.add_argument("--fingers", help="comma-separated finger indices 0-4")
    sp.add_argument("--frames-range", dest="frames_range", help="start:stop")
    sp.set_defaults(func=cmd_corrupt)

    sp = sub.add_parser("eval", help="per-object error report")
    common(sp)
    split_flags(sp)
    sp.add_argument("--estimators", required=True)
    sp.add_argument("--selector")
    sp.add_argument("--out", required=True)
    sp.add_argument("--table")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("matrix", help="occlusion x contact error matrix")
    common(sp)
    split_flags(sp)
    sp.add_argument("--estimators", required=True)
    sp.add_argument("--selector")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("experiment", help="corruption robustness curves")
    common(sp)
    split_flags(sp)
    sp.add_argument("--estimators", required=True)
    sp.add_argument("--selector", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--severities", default="0.0,0.5,1.0")
    sp.add_argument("--dropout-fingers", dest="dropout_fingers", default="0,5")
    sp.add_argument("--max-sequences", dest="max_sequences", type=int)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("report", help="render tables/plots from a report")
    common(sp, data=False)
    sp.add_argument("--report", required=True)
    sp.add_argument("--out-dir", dest="out_dir", required=True)
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PoseFusionError, RuntimeError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
