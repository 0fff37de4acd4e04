"""Dataset assembly, train/eval runs and the ablation harness."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from . import checkpoint as ckpt_mod
from .checkpoint import Checkpoint
from .config import RunConfig
from .evaluate import THRESHOLDS, MetricsReport, evaluate
from .scenes import generate_corpus, in_train_split, make_views, read_corpus, scene_name
from .train import train

log = logging.getLogger(__name__)

METRICS_HEADER = ["variant", "map_0.1", "map_0.5", "map_0.9", "average"]
SPLITS = ("train", "val", "all", "heldout-poses")

MODALITY_VARIANTS = {
    "raw": ("raw",),
    "color": ("color",),
    "depth": ("depth",),
    "raw+color": ("raw", "color"),
    "raw+depth": ("raw", "depth"),
    "color+depth": ("color", "depth"),
    "raw+color+depth": ("raw", "color", "depth"),
}
FUSION_VARIANTS = {"attention": "attention", "mlp": "mlp"}
STREAM_VARIANTS = {"fine-only": "fine", "coarse-only": "coarse", "fused": "fused"}
GROUPS = ("modality", "fusion", "streams")


def load_scenes(cfg: RunConfig) -> dict:
    d = cfg.data
    if d.scenes_dir:
        return read_corpus(d.scenes_dir)
    scenes = generate_corpus(cfg.seed, d.num_scenes, d.min_objects, d.max_objects)
    return {scene_name(i): s for i, s in enumerate(scenes)}


def split_views(cfg: RunConfig, split: str, scenes: dict | None = None):
    """Views for ``split``; without holdout every scene counts as training data."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; choose from {SPLITS}")
    scenes = load_scenes(cfg) if scenes is None else scenes
    d = cfg.data
    if d.holdout:
        train_names = {n for n in scenes if in_train_split(cfg.seed, n)}
    else:
        train_names = set(scenes)
    if split == "train":
        chosen = {n: s for n, s in scenes.items() if n in train_names}
    elif split == "val":
        chosen = {n: s for n, s in scenes.items() if n not in train_names}
    else:
        chosen = dict(scenes) if split == "all" else {n: s for n, s in scenes.items() if n in train_names}
    if split == "heldout-poses":
        return make_views(chosen, d.heldout_poses, cfg.seed, d.pose_radius, purpose="heldout")
    return make_views(chosen, d.poses_per_scene, cfg.seed, d.pose_radius)


def run_train(cfg: RunConfig, progress=None, dump_dir=None) -> Checkpoint:
    views = split_views(cfg, "train")
    result = train(views, cfg.model, cfg.sampling, cfg.loss, cfg.train, seed=cfg.seed,
                   dump_dir=dump_dir, progress=progress)
    return Checkpoint.from_model(result.model, cfg, result.final_loss, result.loss_curve)


def run_eval(ckpt: Checkpoint, split: str = "train", thresholds=THRESHOLDS) -> MetricsReport:
    cfg = ckpt.config
    views = split_views(cfg, split)
    if not views:
        raise ValueError(f"split {split!r} is empty")
    report = evaluate(ckpt.build_model(), views, cfg.sampling, cfg.loss, thresholds)
    report.loss_curve = list(ckpt.loss_curve)
    return report


def write_metrics_csv(rows: list[list], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r[0]] + [f"{v:.6f}" for v in r[1:]])


def write_loss_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr"])
        for epoch, loss, lr in curve:
            w.writerow([epoch, repr(float(loss)), repr(float(lr))])


def write_metrics_json(reports: dict, path) -> None:
    Path(path).write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2) + "\n")


def variants_for(groups) -> dict:
    """Map variant name -> model-config overrides for the requested groups."""
    out = {}
    for g in groups:
        if g == "modality":
            out.update({f"modality:{k}": {"modality": v} for k, v in MODALITY_VARIANTS.items()})
        elif g == "fusion":
            out.update({f"fusion:{k}": {"fusion": v} for k, v in FUSION_VARIANTS.items()})
        elif g == "streams":
            out.update({f"streams:{k}": {"streams": v} for k, v in STREAM_VARIANTS.items()})
        else:
            raise ValueError(f"unknown ablation group {g!r}; choose from {GROUPS}")
    return out


@dataclass
class AblationResult:
    reports: dict      # variant -> MetricsReport
    checkpoints: dict  # variant -> Checkpoint


def ablate(cfg: RunConfig, variants: dict, split: str = "train", out_dir=None, progress=None) -> AblationResult:
    """Train and evaluate each variant on identical data and seeds."""
    if not variants:
        raise ValueError("variant list is empty")
    reports, ckpts = {}, {}
    for name, changes in variants.items():
        vcfg = replace(cfg, model=replace(cfg.model, **changes))
        log.info("ablation variant %s", name)
        ck = run_train(vcfg, progress=(lambda e, l, n=name: progress(n, e, l)) if progress else None)
        rep = run_eval(ck, split)
        reports[name], ckpts[name] = rep, ck
        if out_dir is not None:
            vdir = Path(out_dir) / name.replace(":", "_").replace("+", "-")
            vdir.mkdir(parents=True, exist_ok=True)
            write_metrics_json({name: rep}, vdir / "metrics.json")
            write_loss_csv(ck.loss_curve, vdir / "loss_curve.csv")
    if out_dir is not None:
        write_metrics_csv([reports[n].row(n) for n in variants], Path(out_dir) / "ablation.csv")
    return AblationResult(reports, ckpts)


def save_run(ckpt: Checkpoint, out_dir) -> Path:
    return ckpt_mod.save(ckpt, Path(out_dir) / "checkpoint")
