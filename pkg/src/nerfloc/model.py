"""Two-stream transformer detector over radiance-field samples.

Data flow for one camera pose::

    fine grid  -> tokenize -> project_fine   -> encoder_fine   --+
                                                                  fuse -> decoder(queries) -> heads
    coarse grid-> tokenize -> project_coarse -> encoder_coarse --+

Every module draws its initial weights from a generator seeded by
``(seed, module path)``, so two configurations that share a module start
with bit-identical weights for it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .field import SampleGrid, SamplingConfig, SyntheticScene, render_grid, sample_grid
from .geometry import Pose

MODALITY_CHANNELS = {"raw": 7, "color": 3, "depth": 1}
STREAMS = ("fused", "fine", "coarse")
FUSIONS = ("attention", "mlp")
BOX_INFLATION = 1.25


def derive_seed(root: int, purpose: str) -> int:
    """64-bit sub-seed from sha256 of ``"<root>:<purpose>"``."""
    digest = hashlib.sha256(f"{int(root)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers_fine: int = 4
    layers_coarse: int = 4
    layers_decoder: int = 4
    queries: int = 8
    corners: int = 8
    num_classes: int = 4
    ffn_mult: int = 4
    modality: tuple = ("raw",)
    fusion: str = "attention"
    streams: str = "fused"
    dtype: str = "fp32"

    def __post_init__(self):
        object.__setattr__(self, "modality", tuple(self.modality))
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.corners != 8:
            raise ValueError("corner count is fixed at 8")
        if not self.modality or set(self.modality) - set(MODALITY_CHANNELS):
            raise ValueError(f"modality must be a non-empty subset of {sorted(MODALITY_CHANNELS)}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.streams not in STREAMS:
            raise ValueError(f"streams must be one of {STREAMS}")
        if self.dtype not in ad.DTYPES:
            raise ValueError(f"dtype must be one of {sorted(ad.DTYPES)}")

    @property
    def np_dtype(self):
        return ad.DTYPES[self.dtype]

    def d_in(self, samples_per_ray: int) -> int:
        n = 0
        for m in self.modality:
            n += MODALITY_CHANNELS[m] * (samples_per_ray if m == "raw" else 1)
        return n


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype, zero=False):
        super().__init__()
        w = np.zeros((d_in, d_out), dtype) if zero else _xavier(rng, d_in, d_out, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d, dtype):
        super().__init__()
        self.gain = Parameter(np.ones(d, dtype))
        self.shift = Parameter(np.zeros(d, dtype))

    def __call__(self, x):
        return ad.layer_norm(x) * self.gain + self.shift


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, rng, dims, dtype):
        super().__init__()
        self.layers = [Linear(rng, a, b, dtype) for a, b in zip(dims[:-1], dims[1:])]
        for i, layer in enumerate(self.layers):
            setattr(self, f"l{i}", layer)

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


class Attention(Module):
    def __init__(self, rng, d, heads, dtype, zero_out=False):
        super().__init__()
        self.heads = heads
        self.q = Linear(rng, d, d, dtype)
        self.k = Linear(rng, d, d, dtype)
        self.v = Linear(rng, d, d, dtype)
        self.out = Linear(rng, d, d, dtype, zero=zero_out)
        self.scale = 1.0 / np.sqrt(d // heads)

    def _split(self, x):
        *lead, t, d = x.shape
        x = x.reshape(*lead, t, self.heads, d // self.heads)
        n = x.ndim
        axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
        return x.transpose(axes)

    def __call__(self, xq, xkv):
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        n = k.ndim
        kt = k.transpose(list(range(n - 2)) + [n - 1, n - 2])
        attn = ad.softmax((q @ kt) * self.scale, axis=-1)
        ctx = attn @ v
        axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
        ctx = ctx.transpose(axes)
        *lead, t, h, dh = ctx.shape
        return self.out(ctx.reshape(*lead, t, h * dh))


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d_model, cfg.np_dtype
        self.norm1 = LayerNorm(d, dt)
        self.attn = Attention(rng, d, cfg.heads, dt)
        self.norm2 = LayerNorm(d, dt)
        self.ffn = MLP(rng, [d, cfg.ffn_mult * d, d], dt)

    def __call__(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig, layers: int):
        super().__init__()
        self.blocks = [EncoderLayer(rng, cfg) for _ in range(layers)]
        for i, b in enumerate(self.blocks):
            setattr(self, f"layer{i}", b)
        self.norm = LayerNorm(cfg.d_model, cfg.np_dtype)

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return self.norm(x)


class AttentionFusion(Module):
    """Fine tokens attend to coarse tokens; result added back onto the fine tokens."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d_model, cfg.np_dtype
        self.norm_fine = LayerNorm(d, dt)
        self.norm_coarse = LayerNorm(d, dt)
        self.attn = Attention(rng, d, cfg.heads, dt, zero_out=True)

    def __call__(self, fine, coarse):
        return fine + self.attn(self.norm_fine(fine), self.norm_coarse(coarse))


class MLPFusion(Module):
    """Two-layer perceptron over fine tokens stitched with the pooled coarse embedding."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.mlp = MLP(rng, [2 * d, d, d], cfg.np_dtype)

    def __call__(self, fine, coarse):
        pooled = coarse.mean(axes=-2, keepdims=True)
        pooled = ad.broadcast(pooled, fine.shape[:-1] + (pooled.shape[-1],))
        return self.mlp(ad.concat([fine, pooled], axis=-1))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d_model, cfg.np_dtype
        self.norm1 = LayerNorm(d, dt)
        self.self_attn = Attention(rng, d, cfg.heads, dt)
        self.norm2 = LayerNorm(d, dt)
        self.cross_attn = Attention(rng, d, cfg.heads, dt)
        self.norm3 = LayerNorm(d, dt)
        self.ffn = MLP(rng, [d, cfg.ffn_mult * d, d], dt)

    def __call__(self, q, memory):
        h = self.norm1(q)
        q = q + self.self_attn(h, h)
        q = q + self.cross_attn(self.norm2(q), memory)
        return q + self.ffn(self.norm3(q))


class Decoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.blocks = [DecoderLayer(rng, cfg) for _ in range(cfg.layers_decoder)]
        for i, b in enumerate(self.blocks):
            setattr(self, f"layer{i}", b)
        self.norm = LayerNorm(cfg.d_model, cfg.np_dtype)

    def __call__(self, queries, memory):
        q = queries
        if memory.ndim > 2 and q.ndim == 2:
            q = ad.broadcast(q, memory.shape[:-2] + q.shape)
        for b in self.blocks:
            q = b(q, memory)
        return self.norm(q)


@dataclass
class DetectionSet:
    boxes: Tensor   # (..., J, 8, 3) world corners
    logits: Tensor  # (..., J, C + 1); last column is the no-object class

    def numpy(self):
        return self.boxes.data, self.logits.data

    def probabilities(self) -> np.ndarray:
        z = self.logits.data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def __getitem__(self, i) -> "DetectionSet":
        return DetectionSet(self.boxes[i], self.logits[i])


class Heads(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d_model, cfg.np_dtype
        self.box = MLP(rng, [d, d, d, 3 * cfg.corners], dt)
        self.cls = Linear(rng, d, cfg.num_classes + 1, dt)
        self.corners = cfg.corners

    def __call__(self, dec, lo, hi) -> DetectionSet:
        center = (lo + hi) / 2
        half = (hi - lo) / 2 * BOX_INFLATION
        lo_i = (center - half).astype(dec.dtype)
        span = (2 * half).astype(dec.dtype)
        unit = ad.sigmoid(self.box(dec))
        unit = unit.reshape(*dec.shape[:-1], self.corners, 3)
        return DetectionSet(unit * span + lo_i, self.cls(dec))


# ---------------------------------------------------------------------------
# tokenization


def tokenize(grid: SampleGrid, modality, bounds, dtype=np.float64) -> np.ndarray:
    """One token per ray: (H*W, d_in) features for the selected modalities."""
    modality = tuple(modality)
    if not modality:
        raise ValueError("modality must not be empty")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    h, w, n, _ = grid.values.shape
    parts = []
    if "raw" in modality:
        pos = 2.0 * (grid.positions - lo) / (hi - lo) - 1.0
        raw = np.concatenate([pos, grid.colors, np.log1p(grid.sigmas)[..., None]], axis=-1)
        parts.append(raw.reshape(h * w, n * 7))
    rendered = render_grid(grid, [m for m in modality if m in ("color", "depth")]) \
        if ("color" in modality or "depth" in modality) else {}
    if "color" in modality:
        parts.append(rendered["color"].reshape(h * w, 3))
    if "depth" in modality:
        parts.append(rendered["depth"].reshape(h * w, 1) / grid.depths[-1])
    return np.concatenate(parts, axis=-1).astype(dtype)


@dataclass
class StreamInputs:
    """Token arrays for one pose; ``coarse`` is None in fine-only runs and vice versa."""

    fine: np.ndarray | None
    coarse: np.ndarray | None


def build_inputs(scene: SyntheticScene, pose: Pose, mcfg: ModelConfig, scfg: SamplingConfig) -> StreamInputs:
    fine = coarse = None
    if mcfg.streams in ("fused", "fine"):
        g = sample_grid(scene, pose, scfg.fine_intrinsics(), scfg)
        fine = tokenize(g, mcfg.modality, scene.bounds, mcfg.np_dtype)
    if mcfg.streams in ("fused", "coarse"):
        g = sample_grid(scene, pose, scfg.coarse_intrinsics(), scfg)
        coarse = tokenize(g, mcfg.modality, scene.bounds, mcfg.np_dtype)
    return StreamInputs(fine, coarse)


# ---------------------------------------------------------------------------
# the detector


class Detector(Module):
    def __init__(self, cfg: ModelConfig, samples_per_ray: int, bounds, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.samples_per_ray = samples_per_ray
        self.bounds = (tuple(map(float, bounds[0])), tuple(map(float, bounds[1])))
        self.seed = seed
        d_in = cfg.d_in(samples_per_ray)
        d, dt = cfg.d_model, cfg.np_dtype

        def rng(path):
            return np.random.default_rng(derive_seed(seed, path))

        if cfg.streams in ("fused", "fine"):
            self.project_fine = MLP(rng("project_fine"), [d_in, d, d, d], dt)
            self.encoder_fine = Encoder(rng("encoder_fine"), cfg, cfg.layers_fine)
        if cfg.streams in ("fused", "coarse"):
            self.project_coarse = MLP(rng("project_coarse"), [d_in, d, d, d], dt)
            self.encoder_coarse = Encoder(rng("encoder_coarse"), cfg, cfg.layers_coarse)
        if cfg.streams == "fused":
            fusion_cls = AttentionFusion if cfg.fusion == "attention" else MLPFusion
            self.fusion = fusion_cls(rng("fusion"), cfg)
        self.queries = Parameter(rng("queries").normal(size=(cfg.queries, d)).astype(dt))
        self.decoder = Decoder(rng("decoder"), cfg)
        self.heads = Heads(rng("heads"), cfg)
        for name, p in self.named_parameters():
            p.name = name

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name in own:
                own[name].assign(value)

    def encode_stream(self, tokens: np.ndarray, stream: str) -> Tensor:
        x = Tensor(np.asarray(tokens, dtype=self.cfg.np_dtype))
        if stream == "fine":
            return self.encoder_fine(self.project_fine(x))
        return self.encoder_coarse(self.project_coarse(x))

    def forward_tokens(self, inputs: StreamInputs) -> DetectionSet:
        """Detections from pre-tokenized streams; leading batch axes are allowed."""
        streams = self.cfg.streams
        if streams == "fused":
            memory = self.fusion(self.encode_stream(inputs.fine, "fine"),
                                 self.encode_stream(inputs.coarse, "coarse"))
        elif streams == "fine":
            memory = self.encode_stream(inputs.fine, "fine")
        else:
            memory = self.encode_stream(inputs.coarse, "coarse")
        dec = self.decoder(self.queries, memory)
        lo = np.asarray(self.bounds[0])
        hi = np.asarray(self.bounds[1])
        return self.heads(dec, lo, hi)

    def forward(self, scene: SyntheticScene, pose: Pose, scfg: SamplingConfig) -> DetectionSet:
        return self.forward_tokens(build_inputs(scene, pose, self.cfg, scfg))

    __call__ = forward

    def with_config(self, **changes) -> "Detector":
        """A fresh detector for a modified config, sharing this one's seed and bounds."""
        return Detector(replace(self.cfg, **changes), self.samples_per_ray, self.bounds, self.seed)


def count_parameters(cfg: ModelConfig, samples_per_ray: int) -> int:
    """Closed-form parameter count for a detector built from ``cfg``."""
    d, f, c = cfg.d_model, cfg.ffn_mult, cfg.num_classes
    lin = lambda a, b: a * b + b  # noqa: E731
    ln = 2 * d
    attn = 4 * lin(d, d)
    ffn = lin(d, f * d) + lin(f * d, d)
    project = lin(cfg.d_in(samples_per_ray), d) + 2 * lin(d, d)
    enc_layer = 2 * ln + attn + ffn
    total = 0
    if cfg.streams in ("fused", "fine"):
        total += project + cfg.layers_fine * enc_layer + ln
    if cfg.streams in ("fused", "coarse"):
        total += project + cfg.layers_coarse * enc_layer + ln
    if cfg.streams == "fused":
        total += 2 * ln + attn if cfg.fusion == "attention" else lin(2 * d, d) + lin(d, d)
    total += cfg.queries * d
    total += cfg.layers_decoder * (3 * ln + 2 * attn + ffn) + ln
    total += 2 * lin(d, d) + lin(d, 3 * cfg.corners) + lin(d, c + 1)
    return total
