"""Conditional denoising transformer f(x, y, z_t, gamma) -> estimate of the clean cube.

Two streams run at the HR grid. The SR stream embeds [upsampled y, x] and refines
it with spatio-spectral layers; its per-layer features condition the denoising
stream through cross attention. The denoising stream embeds z_t, injects the
noise-level embedding as a per-channel scale/shift and ends in a 3x3 head whose
output is added to a residual anchor.

Feature maps are ``Tensor`` values shaped (C, H, W). Parameters live in a flat
``dict`` keyed by dotted paths, e.g. ``ds.blocks.1.mca.q.weight``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import numerics as nx
from .degradation import upsample_bilinear
from .numerics import Rng, Tensor

ModelParams = dict[str, Tensor]


@dataclass
class ModelConfig:
    bands: int
    msi_bands: int
    channels: int = 32
    n_layers: int = 4
    heads: int = 4
    window: int = 8
    ffn_expansion: int = 2
    nle_scale: float = 5000.0
    residual: str = "y"
    dtype: str = "float64"

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channels must be even and >= 2, got {self.channels}")
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.bands < 1 or self.msi_bands < 1:
            raise ValueError("band counts must be positive")
        if self.ffn_expansion < 1:
            raise ValueError("ffn_expansion must be >= 1")
        if self.residual not in ("y", "zt"):
            raise ValueError(f"residual must be 'y' or 'zt', got {self.residual!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --- parameter layout -----------------------------------------------------

# init kinds: "fan_in" (variance-scaled uniform), "zeros", "ones"


def _linear(prefix: str, out: int, inp: int, zero: bool = False):
    yield f"{prefix}.weight", (out, inp), "zeros" if zero else "fan_in"
    yield f"{prefix}.bias", (out,), "zeros"


def _norm(prefix: str, c: int):
    yield f"{prefix}.gain", (c,), "ones"
    yield f"{prefix}.bias", (c,), "zeros"


def _s2tl_layout(prefix: str, cfg: ModelConfig):
    c, hidden = cfg.channels, cfg.ffn_expansion * cfg.channels
    yield from _norm(f"{prefix}.norm1", c)
    for name in ("q", "k", "v"):
        yield from _linear(f"{prefix}.spatial.{name}", c, c)
    yield from _linear(f"{prefix}.spatial.proj", c, c, zero=True)
    yield from _norm(f"{prefix}.norm2", c)
    yield from _linear(f"{prefix}.spectral.qkv", 3 * c, c)
    yield f"{prefix}.spectral.temperature", (cfg.heads,), "ones"
    yield from _linear(f"{prefix}.spectral.proj", c, c, zero=True)
    yield from _norm(f"{prefix}.norm3", c)
    yield from _linear(f"{prefix}.ffn.expand", 2 * hidden, c)
    yield from _linear(f"{prefix}.ffn.out", c, hidden, zero=True)


def param_layout(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], str]]:
    c, bands = cfg.channels, cfg.bands
    yield "sr.embed.weight", (c, bands + cfg.msi_bands, 3, 3), "fan_in"
    yield "sr.embed.bias", (c,), "zeros"
    for l in range(cfg.n_layers):
        yield from _s2tl_layout(f"sr.blocks.{l}", cfg)
    yield "ds.embed.weight", (c, bands, 3, 3), "fan_in"
    yield "ds.embed.bias", (c,), "zeros"
    for l in range(cfg.n_layers):
        p = f"ds.blocks.{l}"
        yield from _linear(f"{p}.nle", 2 * c, c)
        yield from _norm(f"{p}.mca.norm_q", c)
        yield from _norm(f"{p}.mca.norm_kv", c)
        for name in ("q", "k", "v"):
            yield from _linear(f"{p}.mca.{name}", c, c)
        yield from _linear(f"{p}.mca.proj", c, c, zero=True)
        yield from _s2tl_layout(f"{p}.s2tl", cfg)
    yield "head.weight", (bands, c, 3, 3), "zeros"
    yield "head.bias", (bands,), "zeros"


def init_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    """Fan-in uniform init (variance 1/fan_in); block output projections and the head start at zero."""
    dtype = cfg.np_dtype
    params: ModelParams = {}
    for name, shape, kind in param_layout(cfg):
        if kind == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = math.sqrt(3.0 / fan_in)
            data = rng.spawn(name).uniform(-limit, limit, shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


def param_count(params: ModelParams) -> int:
    return sum(p.size for p in params.values())


# --- layers ---------------------------------------------------------------


def pointwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear map on (C, H, W)."""
    c, h, w = x.shape
    out = nx.matmul(weight, nx.reshape(x, (c, h * w))) + nx.reshape(bias, (bias.shape[0], 1))
    return nx.reshape(out, (weight.shape[0], h, w))


def _lin(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return pointwise(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def _ln(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return nx.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"], axis=0)


def _to_window_tokens(t: Tensor, window: int, heads: int) -> Tensor:
    """(C, H, W) -> (n_windows, heads, window**2, C/heads)."""
    win = nx.window_partition(t, window)
    n, c = win.shape[:2]
    t = nx.reshape(win, (n, heads, c // heads, window * window))
    return nx.transpose(t, (0, 1, 3, 2))


def windowed_attention(q_src: Tensor, kv_src: Tensor, p: ModelParams, prefix: str,
                       heads: int, window: int, return_attn: bool = False):
    """Multi-head attention inside non-overlapping windows; queries from ``q_src``, keys/values from ``kv_src``."""
    c, h, w = q_src.shape
    if kv_src.shape != q_src.shape:
        raise ValueError(f"query and key/value maps differ in shape: {q_src.shape} vs {kv_src.shape}")
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    d = c // heads
    q = _to_window_tokens(_lin(q_src, p, f"{prefix}.q"), window, heads)
    k = _to_window_tokens(_lin(kv_src, p, f"{prefix}.k"), window, heads)
    v = _to_window_tokens(_lin(kv_src, p, f"{prefix}.v"), window, heads)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = nx.softmax(scores, axis=-1)
    out = nx.matmul(attn, v)
    n = out.shape[0]
    out = nx.reshape(nx.transpose(out, (0, 1, 3, 2)), (n, c, window, window))
    out = _lin(nx.window_merge(out, window, h, w), p, f"{prefix}.proj")
    return (out, attn) if return_attn else out


def spatio_msa(f: Tensor, p: ModelParams, prefix: str, heads: int, window: int, return_attn: bool = False):
    _check_channels(f, p[f"{prefix}.q.weight"].shape[1])
    return windowed_attention(f, f, p, prefix, heads, window, return_attn)


def spectral_msa(f: Tensor, p: ModelParams, prefix: str, heads: int, return_attn: bool = False):
    """Transposed attention: a (C/heads)^2 channel-affinity map per head, linear in H*W."""
    c, h, w = f.shape
    _check_channels(f, p[f"{prefix}.qkv.weight"].shape[1])
    d = c // heads
    qkv = nx.reshape(_lin(f, p, f"{prefix}.qkv"), (3, heads, d, h * w))
    q, k, v = (nx.reshape(t, (heads, d, h * w)) for t in nx.split(qkv, 3, axis=0))
    q = nx.l2_normalize(q, axis=-1)
    k = nx.l2_normalize(k, axis=-1)
    temp = nx.reshape(p[f"{prefix}.temperature"], (heads, 1, 1))
    attn = nx.softmax(nx.mul(nx.matmul(q, nx.transpose(k, (0, 2, 1))), temp), axis=-1)
    out = nx.reshape(nx.matmul(attn, v), (c, h, w))
    out = _lin(out, p, f"{prefix}.proj")
    return (out, attn) if return_attn else out


def gated_ffn(f: Tensor, p: ModelParams, prefix: str) -> Tensor:
    _check_channels(f, p[f"{prefix}.expand.weight"].shape[1])
    a, gate = nx.split(_lin(f, p, f"{prefix}.expand"), 2, axis=0)
    return _lin(nx.mul(nx.gelu(a), gate), p, f"{prefix}.out")


def s2tl(f: Tensor, p: ModelParams, prefix: str, cfg: ModelConfig) -> Tensor:
    g = f + spatio_msa(_ln(f, p, f"{prefix}.norm1"), p, f"{prefix}.spatial", cfg.heads, cfg.window)
    h = g + spectral_msa(_ln(g, p, f"{prefix}.norm2"), p, f"{prefix}.spectral", cfg.heads)
    return h + gated_ffn(_ln(h, p, f"{prefix}.norm3"), p, f"{prefix}.ffn")


def noise_level_embedding(gamma: float, channels: int, scale: float = 5000.0) -> np.ndarray:
    """Interleaved sin/cos of (scale * gamma) / 10000**(2i/C), i = 0..C/2-1."""
    if channels % 2:
        raise ValueError(f"embedding width must be even, got {channels}")
    i = np.arange(channels // 2)
    arg = scale * gamma / 10000.0 ** (2 * i / channels)
    emb = np.empty(channels)
    emb[0::2] = np.sin(arg)
    emb[1::2] = np.cos(arg)
    return emb


def nle_merge(f_ds: Tensor, nle: np.ndarray, p: ModelParams, prefix: str) -> Tensor:
    c = f_ds.shape[0]
    e = Tensor(nle.reshape(c, 1), dtype=f_ds.dtype)
    st = nx.matmul(p[f"{prefix}.weight"], e) + nx.reshape(p[f"{prefix}.bias"], (2 * c, 1))
    s, b = (nx.reshape(t, (c, 1, 1)) for t in nx.split(st, 2, axis=0))
    return f_ds * (s + 1.0) + b


def nc_s2tl(f_ds: Tensor, f_sr: Tensor, nle: np.ndarray, p: ModelParams, prefix: str,
            cfg: ModelConfig) -> Tensor:
    if f_ds.shape != f_sr.shape:
        raise ValueError(f"stream resolution mismatch: denoising {f_ds.shape} vs SR {f_sr.shape}")
    m = nle_merge(f_ds, nle, p, f"{prefix}.nle")
    m = m + windowed_attention(_ln(m, p, f"{prefix}.mca.norm_q"), _ln(f_sr, p, f"{prefix}.mca.norm_kv"),
                               p, f"{prefix}.mca", cfg.heads, cfg.window)
    return s2tl(m, p, f"{prefix}.s2tl", cfg)


def _check_channels(f: Tensor, expected: int) -> None:
    if f.shape[0] != expected:
        raise ValueError(f"feature map has {f.shape[0]} channels, layer expects {expected}")


# --- full model -----------------------------------------------------------


def _factor(x: np.ndarray, y: np.ndarray) -> int:
    if x.shape[1] % y.shape[1] or x.shape[2] % y.shape[2]:
        raise ValueError(f"HR size {x.shape[1:]} is not a multiple of LR size {y.shape[1:]}")
    f = x.shape[1] // y.shape[1]
    if x.shape[2] // y.shape[2] != f:
        raise ValueError("anisotropic resolution ratio between x and y")
    return f


def _check_inputs(x: np.ndarray, y: np.ndarray, cfg: ModelConfig) -> None:
    if x.shape[0] != cfg.msi_bands:
        raise ValueError(f"x has {x.shape[0]} bands, model expects {cfg.msi_bands}")
    if y.shape[0] != cfg.bands:
        raise ValueError(f"y has {y.shape[0]} bands, model expects {cfg.bands}")


def sr_stream(x, y, params: ModelParams, cfg: ModelConfig) -> tuple[list[Tensor], np.ndarray]:
    """Hierarchical conditioning features F_1..F_L and the upsampled LR cube."""
    x, y = np.asarray(x), np.asarray(y)
    _check_inputs(x, y, cfg)
    y_up = upsample_bilinear(y, _factor(x, y)).astype(cfg.np_dtype)
    inp = Tensor(np.concatenate([y_up, x.astype(cfg.np_dtype)]), dtype=cfg.np_dtype)
    f = nx.conv2d_3x3(inp, params["sr.embed.weight"], params["sr.embed.bias"])
    feats = []
    for l in range(cfg.n_layers):
        f = s2tl(f, params, f"sr.blocks.{l}", cfg)
        feats.append(f)
    return feats, y_up


def denoise(x, y, zt, gamma: float, params: ModelParams, cfg: ModelConfig,
            sr_cache: tuple[list[Tensor], np.ndarray] | None = None) -> Tensor:
    """Predict the clean cube; returns a (B, H, W) tensor wired into the autodiff graph."""
    x, y, zt = np.asarray(x), np.asarray(y), np.asarray(zt)
    _check_inputs(x, y, cfg)
    if zt.shape != (cfg.bands, x.shape[1], x.shape[2]):
        raise ValueError(f"z_t shape {zt.shape} inconsistent with bands {cfg.bands} and x {x.shape}")
    feats, y_up = sr_cache if sr_cache is not None else sr_stream(x, y, params, cfg)
    z_in = Tensor(zt.astype(cfg.np_dtype), dtype=cfg.np_dtype)
    f = nx.conv2d_3x3(z_in, params["ds.embed.weight"], params["ds.embed.bias"])
    nle = noise_level_embedding(gamma, cfg.channels, cfg.nle_scale)
    for l in range(cfg.n_layers):
        f = nc_s2tl(f, feats[l], nle, params, f"ds.blocks.{l}", cfg)
    out = nx.conv2d_3x3(f, params["head.weight"], params["head.bias"])
    anchor = y_up if cfg.residual == "y" else zt.astype(cfg.np_dtype)
    return out + anchor


class CDFormer:
    """Parameters plus config, callable as a sampler denoiser (no gradients, cached SR stream)."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params
        self._cache_key = None
        self._cache = None

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng: Rng) -> "CDFormer":
        return cls(cfg, init_params(cfg, rng))

    def __call__(self, x, y, zt, gamma: float) -> np.ndarray:
        with nx.no_grad():
            # holding the inputs themselves keeps identity comparison safe
            if self._cache_key is None or self._cache_key[0] is not x or self._cache_key[1] is not y:
                self._cache = sr_stream(x, y, self.params, self.cfg)
                self._cache_key = (x, y)
            return denoise(x, y, zt, gamma, self.params, self.cfg, sr_cache=self._cache).data

    def clear_cache(self) -> None:
        self._cache_key = self._cache = None
