"""Checkpoint files: model config, parameters, Adam state and the noise schedule.

Layout (little-endian)::

    "HSRD" | version u16 | config_len u32 | config text (key=value lines)
    param table | optimizer table | T u32 | alpha f64[T] | gamma f64[T+1]

A table is ``count u32`` followed by entries ``name_len u16 | name | rank u8 |
dims u32[rank] | data``. Entry data is float32, or float64 when the model config
says ``dtype=float64`` (so float64 runs resume without rounding).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .cdformer import ModelConfig, ModelParams
from .numerics import Tensor
from .schedule import NoiseSchedule
from .training import OptimState

MAGIC = b"HSRD"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ModelParams
    opt: OptimState
    schedule: NoiseSchedule


def _config_text(cfg: ModelConfig) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items()).encode()


def _parse_config(text: str) -> ModelConfig:
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, raw = line.partition("=")
        if key not in types:
            raise CheckpointError(f"unknown config key {key!r} in checkpoint")
        kind = types[key]
        values[key] = int(raw) if kind in ("int", int) else float(raw) if kind in ("float", float) else raw
    return ModelConfig(**values)


def _write_table(fh, entries: list[tuple[str, np.ndarray]], dtype) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, shape, dtype) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n > 1 << 34:
            raise CheckpointError(f"{self.path}: implausible tensor size {shape}")
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dtype)

    def table(self, dtype) -> dict[str, np.ndarray]:
        (count,) = self.unpack("I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("H")
            name = self.take(nlen).decode()
            (rank,) = self.unpack("B")
            dims = self.unpack(f"{rank}I") if rank else ()
            out[name] = self.array(tuple(dims), dtype)
        return out


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, opt: OptimState, schedule: NoiseSchedule) -> None:
    dtype = cfg.np_dtype
    text = _config_text(cfg)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(text)))
        fh.write(text)
        _write_table(fh, [(k, p.data) for k, p in params.items()], dtype)
        opt_entries = [("step", np.array(opt.step, dtype=np.float64))]
        opt_entries += [(f"m.{k}", v) for k, v in opt.m.items()]
        opt_entries += [(f"v.{k}", v) for k, v in opt.v.items()]
        _write_table(fh, opt_entries, dtype)
        fh.write(struct.pack("<I", schedule.T))
        fh.write(schedule.alpha.astype("<f8").tobytes())
        fh.write(schedule.gamma.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    rd = _Reader(raw, path)
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, clen = rd.unpack("HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = _parse_config(rd.take(clen).decode())
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc
    dtype = cfg.np_dtype
    params = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in rd.table(dtype).items()}
    otab = rd.table(dtype)
    step = int(otab.pop("step", 0))
    opt = OptimState(m={k[2:]: v.copy() for k, v in otab.items() if k.startswith("m.")},
                     v={k[2:]: v.copy() for k, v in otab.items() if k.startswith("v.")}, step=step)
    (T,) = rd.unpack("I")
    alpha = rd.array((T,), np.float64)
    gamma = rd.array((T + 1,), np.float64)
    if rd.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - rd.pos} trailing bytes")
    return Checkpoint(cfg, params, opt, NoiseSchedule(alpha=alpha, gamma=gamma))
