"""Checkpoint directories: ``manifest.json`` plus a little-endian fp32 blob."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .model import Detector, derive_seed

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    state: dict            # parameter name -> array, in model order
    bounds: tuple
    final_loss: float | None = None
    loss_curve: list = field(default_factory=list)

    @classmethod
    def from_model(cls, model: Detector, cfg: RunConfig, final_loss=None, loss_curve=()) -> "Checkpoint":
        state = {name: p.data.copy() for name, p in model.named_parameters()}
        return cls(cfg, state, model.bounds, final_loss, list(loss_curve))

    def build_model(self, dtype: str | None = None) -> Detector:
        mcfg = self.config.model
        if dtype is not None and dtype != mcfg.dtype:
            mcfg = replace(mcfg, dtype=dtype)
        model = Detector(mcfg, self.config.sampling.samples_per_ray, self.bounds,
                         seed=derive_seed(self.config.seed, "init"))
        model.load_state(self.state)
        return model

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "seed": self.config.seed,
            "final_loss": self.final_loss,
            "loss_curve": [list(r) for r in self.loss_curve],
            "parameters": [
                {"name": name, "shape": list(arr.shape), "dtype": "fp32"} for name, arr in self.state.items()
            ],
        }


def save(ckpt: Checkpoint, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ckpt.state.values())
    (out / BLOB).write_bytes(blob)
    (out / MANIFEST).write_text(json.dumps(ckpt.manifest(), indent=2) + "\n")
    return out


def load(directory) -> Checkpoint:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
        blob = (d / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {d}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version!r} is not supported (expected {FORMAT_VERSION})")
    specs = manifest["parameters"]
    expected = sum(int(np.prod(s["shape"])) for s in specs) * 4
    if len(blob) != expected:
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest implies {expected}")
    cfg = config_mod.from_dict(manifest["config"])
    dtype = cfg.model.np_dtype
    state = {}
    offset = 0
    for s in specs:
        n = int(np.prod(s["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(s["shape"])
        state[s["name"]] = arr.astype(dtype)
        offset += 4 * n
    bounds = tuple(tuple(b) for b in manifest["bounds"])
    curve = [tuple(r) for r in manifest.get("loss_curve", [])]
    return Checkpoint(cfg, state, bounds, manifest.get("final_loss"), curve)
