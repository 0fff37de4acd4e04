"""Training loop: warmup + cosine schedule, AdamW, gradient clipping."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .field import SamplingConfig
from .matching import LossConfig, hungarian_loss
from .model import Detector, ModelConfig, StreamInputs, build_inputs, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    base_lr: float = 5e-4
    warmup_lr: float = 1e-6
    warmup_epochs: int = 9
    min_lr: float = 1e-6
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        if min(self.base_lr, self.warmup_lr, self.min_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_lr`` to ``base_lr``, then cosine decay to ``min_lr``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_lr + (cfg.base_lr - cfg.warmup_lr) * epoch / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def clip(self, max_norm: float) -> float:
        total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params))
        if max_norm > 0 and total > max_norm:
            scale = max_norm / (total + 1e-12)
            for p in self.params:
                p.grad = p.grad * p.grad.dtype.type(scale)
        return total

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps) + c.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)


class TrainingDiverged(ad.NonFiniteError):
    pass


def prepare_inputs(views, mcfg: ModelConfig, scfg: SamplingConfig) -> list[StreamInputs]:
    return [build_inputs(v.scene, v.pose, mcfg, scfg) for v in views]


def _stack(inputs: list[StreamInputs]) -> StreamInputs:
    def cat(attr):
        arrs = [getattr(i, attr) for i in inputs]
        return None if arrs[0] is None else np.stack(arrs)

    return StreamInputs(cat("fine"), cat("coarse"))


def batch_loss(model: Detector, inputs: list[StreamInputs], gts: list, lcfg: LossConfig):
    """Mean set-prediction loss over a batch, sharing one stacked forward pass."""
    det = model.forward_tokens(_stack(inputs))
    total = None
    for b, gt in enumerate(gts):
        term = hungarian_loss(det[b], gt, lcfg)
        total = term if total is None else total + term
    return total * (1.0 / len(gts))


def mean_loss(model: Detector, inputs: list[StreamInputs], gts: list, lcfg: LossConfig) -> float:
    """Average per-view loss of the current weights, evaluated one view at a time."""
    vals = [float(hungarian_loss(model.forward_tokens(x), gt, lcfg).data) for x, gt in zip(inputs, gts)]
    return float(np.mean(vals))


@dataclass
class TrainResult:
    model: Detector
    loss_curve: list = field(default_factory=list)  # (epoch, mean loss, lr)
    final_loss: float = float("nan")


def train(views, mcfg: ModelConfig, scfg: SamplingConfig, lcfg: LossConfig, tcfg: TrainConfig,
          seed: int = 0, bounds=None, dump_dir=None, progress=None) -> TrainResult:
    """Fit a detector on ``views``; deterministic for a fixed seed."""
    if not views:
        raise ValueError("empty training set")
    bounds = bounds if bounds is not None else views[0].scene.bounds
    model = Detector(mcfg, scfg.samples_per_ray, bounds, seed=derive_seed(seed, "init"))
    for v in views:
        if len(v.scene.primitives) > mcfg.queries:
            raise ValueError(f"{v.scene_id} has more objects than queries ({mcfg.queries})")
    inputs = prepare_inputs(views, mcfg, scfg)
    gts = [v.scene.gt for v in views]
    params = model.parameters()
    opt = AdamW(params, tcfg)
    order_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    n = len(views)
    steps = math.ceil(n / tcfg.batch_size)
    curve = []
    for epoch in range(tcfg.epochs):
        order = order_rng.permutation(n)
        losses = []
        for s in range(steps):
            idx = order[s * tcfg.batch_size:(s + 1) * tcfg.batch_size]
            lr = lr_at(epoch + s / steps, tcfg)
            opt.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(model, [inputs[i] for i in idx], [gts[i] for i in idx], lcfg)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    ad.backward(loss, tape, params)
                for p in params:
                    if not np.isfinite(p.grad).all():
                        raise ad.NonFiniteError("backward", p.name)
            except ad.NonFiniteError as exc:
                _dump(dump_dir, epoch, s, [views[i] for i in idx], str(exc))
                raise TrainingDiverged("train", f"epoch {epoch} step {s}: {exc}") from exc
            opt.clip(tcfg.grad_clip)
            opt.step(lr)
            losses.append(float(loss.data))
        mean = float(np.mean(losses))
        curve.append((epoch, mean, lr_at(epoch, tcfg)))
        if progress is not None:
            progress(epoch, mean)
        log.info("epoch %d loss %.5f lr %.3g", epoch, mean, lr_at(epoch, tcfg))
    final = mean_loss(model, inputs, gts, lcfg)
    return TrainResult(model, curve, final)


def _dump(dump_dir, epoch, step, views, message) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir)
    path.mkdir(parents=True, exist_ok=True)
    info = {
        "epoch": epoch,
        "step": step,
        "error": message,
        "views": [{"scene": v.scene_id, "pose_index": v.pose_index, "pose": v.pose.to_dict()} for v in views],
    }
    (path / "nonfinite_dump.json").write_text(json.dumps(info, indent=2))
