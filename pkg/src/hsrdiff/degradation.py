"""Observation model (spectral response and blur+decimation), synthetic scenes, cube files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import Rng, reflect_index


class CubeFormatError(ValueError):
    pass


@dataclass
class HsiCube:
    """Band-major image cube, ``data`` shaped (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (bands, height, width), got shape {self.data.shape}")
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def is_normalized(self) -> bool:
        return bool(self.data.min() >= 0.0 and self.data.max() <= 1.0)


def _data(c) -> np.ndarray:
    return c.data if isinstance(c, HsiCube) else np.asarray(c)


@dataclass
class SpectralResponse:
    """Row-normalised (b, B) matrix; row i integrates the hyperspectral bands into MSI band i."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"response matrix must be 2-D, got shape {m.shape}")
        if m.shape[0] > m.shape[1]:
            raise ValueError(f"response maps {m.shape[1]} bands to {m.shape[0]}; needs b <= B")
        if np.any(m < 0):
            raise ValueError("response weights must be nonnegative")
        if not np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("every response row must sum to 1")
        self.matrix = m

    @property
    def msi_bands(self) -> int:
        return self.matrix.shape[0]

    @property
    def bands(self) -> int:
        return self.matrix.shape[1]


def default_response(msi_bands: int, bands: int) -> SpectralResponse:
    """Smooth overlapping bumps evenly spread over the band axis, like RGB(+NIR) integration."""
    lam = np.arange(bands, dtype=np.float64)
    centers = (np.arange(msi_bands) + 0.5) * bands / msi_bands - 0.5
    width = max(bands / msi_bands * 0.6, 0.5)
    rows = np.exp(-0.5 * ((lam[None, :] - centers[:, None]) / width) ** 2)
    return SpectralResponse(rows / rows.sum(axis=1, keepdims=True))


def gaussian_taps(sigma: float) -> np.ndarray:
    """1-D Gaussian truncated at 4 sigma and renormalised."""
    radius = max(1, int(math.ceil(4.0 * sigma)))
    u = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (u / sigma) ** 2)
    return g / g.sum()


@dataclass
class SpatialDegradation:
    factor: int
    kernel_sigma: float | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.factor) != self.factor or self.factor < 2:
            raise ValueError(f"down-sampling factor must be an integer >= 2, got {self.factor}")
        self.factor = int(self.factor)
        if self.kernel_sigma is None:
            self.kernel_sigma = self.factor / 2.0
        if self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be positive")

    @property
    def taps(self) -> np.ndarray:
        return gaussian_taps(self.kernel_sigma)

    @property
    def radius(self) -> int:
        return len(self.taps) // 2

    @property
    def kernel(self) -> np.ndarray:
        g = self.taps
        return np.outer(g, g)

    def axis_matrix(self, n: int) -> np.ndarray:
        """(n/f, n) operator: reflect-boundary blur then sampling at offsets k*f + f//2."""
        if n % self.factor:
            raise ValueError(f"size {n} is not divisible by factor {self.factor}")
        if n not in self._cache:
            g = self.taps
            r = len(g) // 2
            src = reflect_index(n, r, r)
            m = np.zeros((n // self.factor, n))
            for k in range(n // self.factor):
                c = k * self.factor + self.factor // 2
                np.add.at(m[k], src[c:c + 2 * r + 1], g)
            self._cache[n] = m
        return self._cache[n]

    def valid_lr_mask(self, height: int, width: int) -> np.ndarray:
        """LR pixels whose blur support lies inside an HR crop of this size."""
        r, f = self.radius, self.factor

        def axis(n):
            c = np.arange(n // f) * f + f // 2
            return (c - r >= 0) & (c + r <= n - 1)

        return axis(height)[:, None] & axis(width)[None, :]


def apply_spectral_response(z, r: SpectralResponse) -> HsiCube:
    z = _data(z)
    if z.shape[0] != r.bands:
        raise ValueError(f"cube has {z.shape[0]} bands, response expects {r.bands}")
    b, h, w = z.shape
    out = (r.matrix @ z.reshape(b, h * w)).reshape(r.msi_bands, h, w)
    return HsiCube(out)


def apply_spatial_degradation(z, d: SpatialDegradation) -> HsiCube:
    z = _data(z)
    _, h, w = z.shape
    if h % d.factor or w % d.factor:
        raise ValueError(f"image {h}x{w} is not divisible by factor {d.factor}")
    ah, aw = d.axis_matrix(h), d.axis_matrix(w)
    return HsiCube(ah @ z @ aw.T)


def crop_to_factor(z, factor: int) -> HsiCube:
    z = _data(z)
    h, w = z.shape[1] - z.shape[1] % factor, z.shape[2] - z.shape[2] % factor
    return HsiCube(z[:, :h, :w])


def make_pair(z, r: SpectralResponse, d: SpatialDegradation) -> tuple[HsiCube, HsiCube, HsiCube]:
    """(x, y, z): the MSI observation, the LR-HSI observation and the reference itself."""
    z = z if isinstance(z, HsiCube) else HsiCube(z)
    return apply_spectral_response(z, r), apply_spatial_degradation(z, d), z


def bilinear_matrix(n_low: int, factor: int) -> np.ndarray:
    """(n_low*factor, n_low) interpolation placing LR sample k at HR position k*f + f//2."""
    n = n_low * factor
    pos = (np.arange(n) - factor // 2) / factor
    pos = np.clip(pos, 0, n_low - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_low - 1)
    frac = pos - lo
    m = np.zeros((n, n_low))
    m[np.arange(n), lo] += 1.0 - frac
    m[np.arange(n), hi] += frac
    return m


def upsample_bilinear(y, factor: int) -> np.ndarray:
    y = _data(y)
    _, h, w = y.shape
    return bilinear_matrix(h, factor) @ y @ bilinear_matrix(w, factor).T


# --- synthetic scenes -----------------------------------------------------


@dataclass
class SceneConfig:
    endmembers: int = 4
    bands: int = 16
    height: int = 64
    width: int = 64
    smoothness: float = 4.0
    seed: int = 0
    contrast: float = 3.0

    def __post_init__(self):
        if self.endmembers < 1:
            raise ValueError("need at least one endmember")
        if self.bands < 1 or self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be positive")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")


def random_signatures(k: int, bands: int, rng: Rng) -> np.ndarray:
    """k smooth positive spectra: baseline plus a few Gaussian bumps each, peak-normalised."""
    lam = np.linspace(0.0, 1.0, bands)
    sig = np.empty((k, bands))
    for i in range(k):
        s = np.full(bands, rng.uniform(0.05, 0.3))
        for _ in range(3):
            c, wdt, a = rng.uniform(-0.1, 1.1), rng.uniform(0.1, 0.4), rng.uniform(0.2, 1.0)
            s += a * np.exp(-0.5 * ((lam - c) / wdt) ** 2)
        sig[i] = s / s.max()
    return sig


def random_abundances(cfg: SceneConfig, rng: Rng) -> np.ndarray:
    """(K, H, W) nonnegative maps summing to 1 per pixel: low-passed noise through a softmax."""
    k = cfg.endmembers
    noise = rng.normal((k, cfg.height, cfg.width))
    smooth = np.stack([gaussian_filter(n, cfg.smoothness, mode="wrap") for n in noise])
    smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-12)
    logits = cfg.contrast * smooth
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def synthesize_scene(cfg: SceneConfig, rng: Rng | None = None) -> HsiCube:
    rng = rng if rng is not None else Rng(cfg.seed)
    sig = random_signatures(cfg.endmembers, cfg.bands, rng.spawn("signatures"))
    ab = random_abundances(cfg, rng.spawn("abundances"))
    z = np.einsum("kb,khw->bhw", sig, ab)
    return HsiCube(z / z.max())


# --- files ----------------------------------------------------------------

_CUBE_HEADER = struct.Struct("<4sHHIII")
_SRSP_HEADER = struct.Struct("<4sII")
_MAX_ELEMENTS = 1 << 34


def save_cube(path, cube) -> None:
    data = np.ascontiguousarray(_data(cube), dtype="<f4")
    b, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(_CUBE_HEADER.pack(b"HCUB", 1, 0, b, h, w))
        fh.write(data.tobytes())


def load_cube(path) -> HsiCube:
    raw = Path(path).read_bytes()
    if len(raw) < _CUBE_HEADER.size:
        raise CubeFormatError(f"{path}: truncated header")
    magic, version, _reserved, b, h, w = _CUBE_HEADER.unpack_from(raw)
    if magic != b"HCUB":
        raise CubeFormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise CubeFormatError(f"{path}: unsupported version {version}")
    n = b * h * w
    if n == 0 or n > _MAX_ELEMENTS:
        raise CubeFormatError(f"{path}: implausible dimensions {b}x{h}x{w}")
    expected = _CUBE_HEADER.size + 4 * n
    if len(raw) != expected:
        raise CubeFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_CUBE_HEADER.size).reshape(b, h, w)
    if not np.all(np.isfinite(data)):
        raise CubeFormatError(f"{path}: cube contains non-finite values")
    return HsiCube(data.astype(np.float32))


def save_response(path, r: SpectralResponse) -> None:
    m = np.ascontiguousarray(r.matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SRSP_HEADER.pack(b"SRSP", *m.shape))
        fh.write(m.tobytes())


def load_response(path) -> SpectralResponse:
    raw = Path(path).read_bytes()
    if len(raw) < _SRSP_HEADER.size:
        raise CubeFormatError(f"{path}: truncated header")
    magic, b, B = _SRSP_HEADER.unpack_from(raw)
    if magic != b"SRSP":
        raise CubeFormatError(f"{path}: bad magic {magic!r}")
    if b * B == 0 or b * B > _MAX_ELEMENTS:
        raise CubeFormatError(f"{path}: implausible dimensions {b}x{B}")
    if len(raw) != _SRSP_HEADER.size + 4 * b * B:
        raise CubeFormatError(f"{path}: length does not match {b}x{B} table")
    m = np.frombuffer(raw, dtype="<f4", offset=_SRSP_HEADER.size).reshape(b, B).astype(np.float64)
    # float32 storage loses ~1e-8 of the row sums; renormalise before validation
    return SpectralResponse(m / m.sum(axis=1, keepdims=True))
