"""Residual U-Net noise predictor with self-attention and timestep conditioning.

Architecture, desk-scaled: an input conv lifts the image to base_channels;
each level runs res_blocks_per_level residual blocks (two 3x3 convs with
group norm, SiLU, and an added per-channel timestep projection), followed by
self-attention at the configured resolutions; levels are joined by stride-2
conv downsampling and nearest-neighbour-plus-conv upsampling. The decoder
concatenates the encoder activation of each level (symmetric skips). The
middle of the U runs res block / attention / res block. Group norm uses 8
groups, falling back to one group per channel when channels < 8.

Every residual block's second conv and the output head conv are
zero-initialized, so an untrained block is the identity on its input and the
untrained network predicts zero noise.

The final conv emits in_channels noise-prediction channels, doubled to
2 * in_channels when ``learned_variance`` (second half: raw variance
interpolation logits), e.g. six channels for three-channel images.

Weights live in a flat name -> Tensor map whose manifest (names and shapes)
is a pure function of the config, which is what the checkpoint format stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import RngState, Tensor
from .numerics import tensor as T


class UNetConfigError(ValueError):
    pass


@dataclass
class UNetConfig:
    resolution: int = 32
    in_channels: int = 1
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 4)
    res_blocks_per_level: int = 2
    attention_resolutions: tuple = (16, 8)
    time_embed_dim: int = 128
    num_heads: int = 4
    learned_variance: bool = False

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.attention_resolutions = tuple(sorted(int(r) for r in self.attention_resolutions))
        if len(self.channel_mult) < 1:
            raise UNetConfigError("channel_mult needs at least one level")
        levels = len(self.channel_mult)
        if self.resolution % (1 << (levels - 1)):
            raise UNetConfigError(
                f"resolution {self.resolution} not divisible by 2^{levels - 1}"
            )
        level_res = set(self.level_resolutions())
        if not set(self.attention_resolutions) <= level_res:
            raise UNetConfigError(
                f"attention resolutions {self.attention_resolutions} not a subset "
                f"of level resolutions {sorted(level_res)}"
            )
        if self.time_embed_dim % 2:
            raise UNetConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        for i, ch in enumerate(self.level_channels()):
            if ch % self.num_heads and self.resolution >> i in self.attention_resolutions:
                raise UNetConfigError(
                    f"channels {ch} at level {i} not divisible by {self.num_heads} heads"
                )

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def level_resolutions(self) -> list[int]:
        return [self.resolution >> i for i in range(len(self.channel_mult))]

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels if self.learned_variance else self.in_channels


def num_groups(channels: int) -> int:
    return 8 if channels % 8 == 0 and channels >= 8 else channels


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding: half sines, half cosines of t at geometrically
    spaced frequencies running from 1 down to 1/10000 (endpoints inclusive)."""
    if dim % 2:
        raise UNetConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# -- weight manifest -----------------------------------------------------------


def _conv_shapes(name: str, cin: int, cout: int, k: int) -> dict:
    return {f"{name}.w": (cout, cin, k, k), f"{name}.b": (cout,)}


def _norm_shapes(name: str, ch: int) -> dict:
    return {f"{name}.g": (ch,), f"{name}.o": (ch,)}


def _resblock_shapes(name: str, cin: int, cout: int, emb: int) -> dict:
    shapes = {}
    shapes.update(_norm_shapes(f"{name}.norm1", cin))
    shapes.update(_conv_shapes(f"{name}.conv1", cin, cout, 3))
    shapes[f"{name}.emb.w"] = (emb, cout)
    shapes[f"{name}.emb.b"] = (cout,)
    shapes.update(_norm_shapes(f"{name}.norm2", cout))
    shapes.update(_conv_shapes(f"{name}.conv2", cout, cout, 3))
    if cin != cout:
        shapes.update(_conv_shapes(f"{name}.skip", cin, cout, 1))
    return shapes


def _attention_shapes(name: str, ch: int) -> dict:
    shapes = {}
    shapes.update(_norm_shapes(f"{name}.norm", ch))
    shapes.update(_conv_shapes(f"{name}.qkv", ch, 3 * ch, 1))
    shapes.update(_conv_shapes(f"{name}.proj", ch, ch, 1))
    return shapes


def param_manifest(config: UNetConfig) -> dict:
    """Ordered name -> shape map; a pure function of the config."""
    emb = config.time_embed_dim
    chans = config.level_channels()
    res = config.level_resolutions()
    nb = config.res_blocks_per_level
    man: dict = {}
    man["time.fc1.w"] = (emb, emb)
    man["time.fc1.b"] = (emb,)
    man["time.fc2.w"] = (emb, emb)
    man["time.fc2.b"] = (emb,)
    man.update(_conv_shapes("in", config.in_channels, chans[0], 3))
    prev = chans[0]
    for i, ch in enumerate(chans):
        for b in range(nb):
            man.update(_resblock_shapes(f"enc{i}.res{b}", prev if b == 0 else ch, ch, emb))
            if res[i] in config.attention_resolutions:
                man.update(_attention_shapes(f"enc{i}.attn{b}", ch))
        prev = ch
        if i < len(chans) - 1:
            man.update(_conv_shapes(f"down{i}", ch, ch, 3))
    man.update(_resblock_shapes("mid.res0", prev, prev, emb))
    man.update(_attention_shapes("mid.attn", prev))
    man.update(_resblock_shapes("mid.res1", prev, prev, emb))
    for i in reversed(range(len(chans))):
        ch = chans[i]
        for b in range(nb):
            cin = (prev + ch) if b == 0 else ch
            man.update(_resblock_shapes(f"dec{i}.res{b}", cin, ch, emb))
            if res[i] in config.attention_resolutions:
                man.update(_attention_shapes(f"dec{i}.attn{b}", ch))
        prev = ch
        if i > 0:
            man.update(_conv_shapes(f"up{i}", ch, ch, 3))
    man.update(_norm_shapes("out.norm", chans[0]))
    man.update(_conv_shapes("out", chans[0], config.out_channels, 3))
    return man


def param_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) for s in param_manifest(config).values())


_ZERO_INIT_SUFFIXES = (".conv2.w", ".proj.w")


def init_weights(config: UNetConfig, rng: RngState, dtype=np.float32) -> dict:
    """He-style fan-in init; res-block second convs, attention projections,
    and the output head start at zero (identity blocks, zero noise at init)."""
    params: dict[str, Tensor] = {}
    for i, (name, shape) in enumerate(param_manifest(config).items()):
        if name.endswith(".b") or name.endswith(".o") or name == "out.w" or any(
            name.endswith(sfx) for sfx in _ZERO_INIT_SUFFIXES
        ):
            data = np.zeros(shape, dtype=dtype)
        elif name.endswith(".g"):
            data = np.ones(shape, dtype=dtype)
        else:
            # convs are (out, in, kh, kw): fan over in*kh*kw; linears are (in, out)
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])
            std = math.sqrt(1.0 / max(fan_in, 1))
            data = (rng.derive(i).normal(shape, dtype=np.float64) * std).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# -- forward --------------------------------------------------------------------


def _conv(p: dict, name: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    return T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=padding)


def _norm(p: dict, name: str, x: Tensor) -> Tensor:
    return T.group_norm(x, num_groups(x.shape[1]), p[f"{name}.g"], p[f"{name}.o"])


def _resblock(p: dict, name: str, x: Tensor, emb: Tensor) -> Tensor:
    h = _conv(p, f"{name}.conv1", T.silu(_norm(p, f"{name}.norm1", x)))
    shift = T.add(T.matmul(T.silu(emb), p[f"{name}.emb.w"]), p[f"{name}.emb.b"])
    h = T.add(h, T.reshape(shift, (shift.shape[0], shift.shape[1], 1, 1)))
    h = _conv(p, f"{name}.conv2", T.silu(_norm(p, f"{name}.norm2", h)))
    skip = x if f"{name}.skip.w" not in p else _conv(p, f"{name}.skip", x, padding=0)
    return T.add(h, skip)


def _attention_block(p: dict, name: str, x: Tensor, heads: int) -> Tensor:
    n, c, h, w = x.shape
    qkv = _conv(p, f"{name}.qkv", _norm(p, f"{name}.norm", x), padding=0)
    d = c // heads
    # (N, 3C, H, W) -> (N, heads, 3d, HW) -> (N*heads, HW, 3d)
    qkv = T.reshape(qkv, (n, heads, 3 * d, h * w))
    qkv = T.transpose(qkv, (0, 1, 3, 2))
    qkv = T.reshape(qkv, (n * heads, h * w, 3 * d))
    att = T.attention(qkv[:, :, :d], qkv[:, :, d : 2 * d], qkv[:, :, 2 * d :])
    att = T.reshape(att, (n, heads, h * w, d))
    att = T.transpose(att, (0, 1, 3, 2))
    att = T.reshape(att, (n, c, h, w))
    return T.add(x, _conv(p, f"{name}.proj", att, padding=0))


def forward(x: Tensor, t, params: dict, config: UNetConfig) -> Tensor:
    """Predict noise (and variance logits) for a batch at timesteps ``t``.

    x: (N, in_channels, resolution, resolution); t: scalar or (N,) integers
    >= 1. Output: (N, out_channels, resolution, resolution).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    n = x.shape[0]
    expected = (n, config.in_channels, config.resolution, config.resolution)
    if x.shape != expected:
        raise UNetConfigError(f"input shape {x.shape} does not match config {expected}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    if t_arr.min() < 1:
        raise UNetConfigError(f"timesteps must be >= 1, got {t_arr.min()}")
    p = params
    dtype = x.dtype
    res = config.level_resolutions()
    nb = config.res_blocks_per_level

    emb = Tensor(timestep_embedding(t_arr, config.time_embed_dim).astype(dtype))
    emb = T.silu(T.add(T.matmul(emb, p["time.fc1.w"]), p["time.fc1.b"]))
    emb = T.add(T.matmul(emb, p["time.fc2.w"]), p["time.fc2.b"])

    h = _conv(p, "in", x)
    skips: list[Tensor] = []
    for i in range(len(res)):
        for b in range(nb):
            h = _resblock(p, f"enc{i}.res{b}", h, emb)
            if res[i] in config.attention_resolutions:
                h = _attention_block(p, f"enc{i}.attn{b}", h, config.num_heads)
        skips.append(h)
        if i < len(res) - 1:
            h = _conv(p, f"down{i}", h, stride=2)
    h = _resblock(p, "mid.res0", h, emb)
    h = _attention_block(p, "mid.attn", h, config.num_heads)
    h = _resblock(p, "mid.res1", h, emb)
    for i in reversed(range(len(res))):
        h = T.concat([h, skips[i]], axis=1)
        for b in range(nb):
            h = _resblock(p, f"dec{i}.res{b}", h, emb)
            if res[i] in config.attention_resolutions:
                h = _attention_block(p, f"dec{i}.attn{b}", h, config.num_heads)
        if i > 0:
            h = _conv(p, f"up{i}", T.upsample_nearest2x(h))
    return _conv(p, "out", T.silu(_norm(p, "out.norm", h)))


class UNet:
    """Config + weights bundle, callable as a diffusion model."""

    def __init__(self, config: UNetConfig, params: Optional[dict] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_weights(config, RngState(seed))
        manifest = param_manifest(config)
        names = list(self.params.keys())
        if names != list(manifest.keys()):
            raise UNetConfigError("parameter names do not match the config manifest")
        for name, shape in manifest.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise UNetConfigError(
                    f"parameter {name} has shape {self.params[name].shape}, manifest says {shape}"
                )

    def __call__(self, x, t) -> Tensor:
        return forward(x, t, self.params, self.config)

    def param_count(self) -> int:
        return param_count(self.config)

    def load_arrays(self, arrays: dict) -> None:
        """Replace weight values from name -> ndarray (e.g. EMA shadow)."""
        for name, arr in arrays.items():
            p = self.params[name]
            if tuple(p.shape) != tuple(arr.shape):
                raise UNetConfigError(f"array for {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def config_dict(self) -> dict:
        c = self.config
        return {
            "resolution": c.resolution,
            "in_channels": c.in_channels,
            "base_channels": c.base_channels,
            "channel_mult": ",".join(str(m) for m in c.channel_mult),
            "res_blocks_per_level": c.res_blocks_per_level,
            "attention_resolutions": ",".join(str(r) for r in c.attention_resolutions),
            "time_embed_dim": c.time_embed_dim,
            "num_heads": c.num_heads,
            "learned_variance": c.learned_variance,
        }


def config_from_dict(d: dict) -> UNetConfig:
    def ints(v):
        s = str(v).strip()
        return tuple(int(x) for x in s.split(",") if x != "") if s else ()

    return UNetConfig(
        resolution=int(d.get("resolution", 32)),
        in_channels=int(d.get("in_channels", 1)),
        base_channels=int(d.get("base_channels", 32)),
        channel_mult=ints(d.get("channel_mult", "1,2,4")),
        res_blocks_per_level=int(d.get("res_blocks_per_level", 2)),
        attention_resolutions=ints(d.get("attention_resolutions", "16,8")),
        time_embed_dim=int(d.get("time_embed_dim", 128)),
        num_heads=int(d.get("num_heads", 4)),
        learned_variance=str(d.get("learned_variance", "false")).lower() in ("1", "true", "yes"),
    )
