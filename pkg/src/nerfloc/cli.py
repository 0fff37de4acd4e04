"""Command-line entry point: ``nerfloc <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_mod
from . import config as config_mod
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .evaluate import Detections, detections_to_json, track
from .field import (
    Primitive,
    SamplingConfig,
    SyntheticScene,
    load_scene,
    render_grid,
    sample_grid,
    write_pfm,
    write_ppm,
)
from .geometry import Intrinsics, Pose, orbit_pose, rotation_z
from .matching import LossConfig, hungarian_loss, match
from .model import Detector, ModelConfig, build_inputs
from .pipeline import (
    GROUPS,
    SPLITS,
    ablate,
    run_eval,
    run_train,
    save_run,
    split_views,
    variants_for,
    write_loss_csv,
    write_metrics_csv,
    write_metrics_json,
)
from .plotting import PlotError, figure_loss_curve, figure_map_bars, plot_csv
from .scenes import View, generate_corpus, orbit, write_corpus

log = logging.getLogger("nerfloc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ArgError(ConfigError):
    pass


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like WxH, got {text!r}") from None
    return w, h


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg = config_mod.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scenes(args) -> int:
    cfg = resolve_config(args)
    d = cfg.data
    count = args.count if args.count is not None else d.num_scenes
    lo = args.min_objects if args.min_objects is not None else d.min_objects
    hi = args.max_objects if args.max_objects is not None else d.max_objects
    if count < 1:
        raise ArgError("--count must be at least 1")
    scenes = generate_corpus(cfg.seed, count, lo, hi)
    paths = write_corpus(scenes, _out(args, "scenes"))
    print(f"wrote {len(paths)} scene files to {paths[0].parent}")
    return EXIT_OK


def render_series(scene, pose, scfg: SamplingConfig, deltas, modality: str, out_dir: Path) -> list[Path]:
    """Render the scene once per focal divisor; delta=1 is the fine camera."""
    mods = ["color", "depth"] if modality == "both" else [modality]
    fine = scfg.fine_intrinsics()
    written = []
    for delta in deltas:
        if delta <= 0:
            raise ArgError(f"--delta must be positive, got {delta}")
        intr = Intrinsics(fine.focal / delta, fine.principal, fine.grid)
        maps = render_grid(sample_grid(scene, pose, intr, scfg), mods)
        tag = "" if len(deltas) == 1 else f"_delta{delta:g}"
        if "color" in maps:
            p = out_dir / f"color{tag}.ppm"
            write_ppm(p, maps["color"])
            written.append(p)
        if "depth" in maps:
            p = out_dir / f"depth{tag}.pfm"
            write_pfm(p, maps["depth"])
            written.append(p)
    return written


def cmd_render(args) -> int:
    cfg = resolve_config(args)
    scfg = cfg.sampling
    if args.grid:
        scfg = replace(scfg, grid=args.grid)
    if args.focal:
        scfg = replace(scfg, focal=args.focal)
    scene = load_scene(args.scene)
    pose = orbit_pose(args.azimuth, args.elevation, args.radius)
    written = render_series(scene, pose, scfg, args.delta, args.modality, _out(args, "render"))
    for p in written:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out(args, "run")
    config_mod.dump(cfg, out / "config.json")

    def progress(epoch, loss):
        if epoch % max(1, cfg.train.epochs // 20) == 0 or epoch == cfg.train.epochs - 1:
            print(f"epoch {epoch:4d}  loss {loss:.5f}", flush=True)

    ck = run_train(cfg, progress=progress, dump_dir=out)
    path = save_run(ck, out)
    write_loss_csv(ck.loss_curve, out / "loss_curve.csv")
    figure_loss_curve(ck.loss_curve, out / "loss_curve.png")
    print(f"final loss {ck.final_loss:.6f}; checkpoint at {path}")
    return EXIT_OK


def _load_ckpt(args):
    ck = ckpt_mod.load(args.checkpoint)
    if args.set or args.seed is not None:
        raise ArgError("--set/--seed cannot modify a trained checkpoint's configuration")
    return ck


def cmd_eval(args) -> int:
    ck = _load_ckpt(args)
    report = run_eval(ck, args.split)
    out = _out(args, "eval")
    name = args.variant
    write_metrics_csv([report.row(name)], out / "metrics.csv")
    write_metrics_json({name: report}, out / "metrics.json")
    figure_map_bars({name: report}, out / "map.png")
    print(",".join(["variant", "map_0.1", "map_0.5", "map_0.9", "average"]))
    print(",".join([name] + [f"{v:.6f}" for v in report.row(name)[1:]]))
    print(f"loss {report.loss:.6f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ck = _load_ckpt(args)
    cfg = ck.config
    model = ck.build_model()
    if args.scene:
        scene = load_scene(args.scene)
        views = [View(Path(args.scene).stem, scene, orbit_pose(args.azimuth, args.elevation, args.radius), 0)]
    else:
        views = split_views(cfg, args.split)
    records = []
    for v in views:
        d = Detections.from_set(model.forward(v.scene, v.pose, cfg.sampling))
        records.append({"scene": v.scene_id, "pose_index": v.pose_index, "pose": v.pose.to_dict(),
                        "detections": detections_to_json(d, v.scene.class_table)})
    out = _out(args, "infer")
    (out / "detections.json").write_text(json.dumps(records, indent=1) + "\n")
    print(f"wrote detections for {len(records)} pose(s) to {out / 'detections.json'}")
    return EXIT_OK


def cmd_track(args) -> int:
    ck = _load_ckpt(args)
    cfg = ck.config
    model = ck.build_model()
    scene = load_scene(args.scene)
    poses = orbit(args.steps, args.radius, args.elevation, args.azimuth, np.deg2rad(args.sweep))
    steps = track(model, scene, poses, cfg.sampling)
    records = [{"step": t, "pose": p.to_dict(), "detections": detections_to_json(d, scene.class_table)}
               for t, (p, d) in enumerate(zip(poses, steps))]
    out = _out(args, "track")
    (out / "track.json").write_text(json.dumps(records, indent=1) + "\n")
    print(f"wrote {len(records)} tracking steps to {out / 'track.json'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = _out(args, "ablation")
    variants = variants_for(args.group)

    def progress(name, epoch, loss):
        if epoch == cfg.train.epochs - 1:
            print(f"{name}: final epoch loss {loss:.5f}", flush=True)

    result = ablate(cfg, variants, args.split, out, progress)
    figure_map_bars(result.reports, out / "ablation.png")
    write_metrics_json(result.reports, out / "ablation.json")
    print((out / "ablation.csv").read_text(), end="")
    return EXIT_OK


def gradcheck_config() -> tuple[ModelConfig, SamplingConfig]:
    """Miniature end-to-end setup used by ``gradcheck``."""
    mcfg = ModelConfig(d_model=16, heads=2, queries=4, layers_fine=1, layers_coarse=1, layers_decoder=1,
                       dtype="fp64")
    scfg = SamplingConfig(grid=(6, 6), samples_per_ray=8, focal=6.0)
    return mcfg, scfg


def gradcheck_scene():
    prims = (
        Primitive("box", Pose(rotation_z(0.4), [0.3, -0.2, 0.1]), [0.4, 0.3, 0.25], [0.9, 0.2, 0.2], 15.0, 0),
        Primitive("sphere", Pose(np.eye(3), [-0.5, 0.4, 0.0]), [0.35] * 3, [0.2, 0.8, 0.3], 20.0, 3),
    )
    return SyntheticScene(prims)


def run_gradcheck(mcfg: ModelConfig, scfg: SamplingConfig, seed: int = 0, step: float = 1e-6):
    if mcfg.dtype != "fp64":
        raise ArgError("gradcheck requires --dtype fp64")
    scene = gradcheck_scene()
    model = Detector(mcfg, scfg.samples_per_ray, scene.bounds, seed=seed)
    inputs = build_inputs(scene, orbit_pose(0.7, 0.45, 3.5), mcfg, scfg)
    lcfg = LossConfig()
    gts = scene.gt
    det = model.forward_tokens(inputs)
    assignment = match(det.boxes.data, det.logits.data, gts, lcfg)

    def loss():
        return hungarian_loss(model.forward_tokens(inputs), gts, lcfg, assignment)

    return ad.grad_check_report(loss, model.parameters(), step)


def cmd_gradcheck(args) -> int:
    if args.dtype != "fp64":
        raise ArgError("gradcheck requires --dtype fp64")
    mcfg, scfg = gradcheck_config()
    mcfg = replace(mcfg, layers_fine=args.layers, layers_coarse=args.layers, layers_decoder=args.layers)
    report = run_gradcheck(mcfg, scfg, seed=args.seed or 0)
    print(f"max relative error {report.max_error:.3e} (tolerance {args.tol:g})")
    print("worst parameters:")
    for name, err, idx in report.per_param[:args.top]:
        print(f"  {err:.3e}  {name}[{idx}]")
    ok = report.max_error < args.tol
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_plot(args) -> int:
    out = _out(args, "plots")
    for f in args.files:
        for p in plot_csv(f, out, with_lr=args.with_lr):
            print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, e.g. model.d_model=32")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nerfloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="write a synthetic scene corpus")
    p.add_argument("--count", type=int)
    p.add_argument("--min-objects", type=int)
    p.add_argument("--max-objects", type=int)
    p.set_defaults(func=cmd_gen_scenes)

    def add_camera(p):
        p.add_argument("--azimuth", type=float, default=0.6, help="radians")
        p.add_argument("--elevation", type=float, default=0.5, help="radians")
        p.add_argument("--radius", type=float, default=3.5)

    p = sub.add_parser("render", parents=[common], help="volume-render a scene to PPM/PFM")
    p.add_argument("--scene", required=True)
    p.add_argument("--modality", choices=("color", "depth", "both"), default="both")
    p.add_argument("--delta", type=float, nargs="+", default=[1.0],
                   help="focal divisor(s); 1 is the fine camera, 1.5 the default coarse one")
    p.add_argument("--grid", type=_parse_grid)
    p.add_argument("--focal", type=float)
    add_camera(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.set_defaults(func=cmd_train)

    def add_ckpt(p):
        p.add_argument("--checkpoint", required=True, help="checkpoint directory")

    p = sub.add_parser("eval", parents=[common], help="mAP@IoU of a checkpoint")
    add_ckpt(p)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--variant", default="model", help="row label in the metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="write per-pose detections as JSON")
    add_ckpt(p)
    p.add_argument("--scene", help="scene file; defaults to the checkpoint's dataset")
    p.add_argument("--split", choices=SPLITS, default="train")
    add_camera(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("track", parents=[common], help="per-pose detections along an orbit")
    add_ckpt(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--sweep", type=float, default=90.0, help="orbit arc in degrees")
    add_camera(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("ablate", parents=[common], help="train/evaluate ablation variants")
    p.add_argument("--group", choices=GROUPS, nargs="+", default=list(GROUPS))
    p.add_argument("--split", choices=SPLITS, default="train")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.add_argument("--dtype", choices=("fp32", "fp64"), default="fp64")
    p.add_argument("--layers", type=int, default=1, help="layers per encoder/decoder stack")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", parents=[common], help="SVG charts from loss or metrics CSVs")
    p.add_argument("files", nargs="+")
    p.add_argument("--with-lr", action="store_true", help="also chart the lr column of loss CSVs")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PlotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ad.NonFiniteError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
