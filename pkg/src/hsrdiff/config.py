"""Run configuration: ``key = value`` lines under ``[section]`` headers, strictly validated."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .cdformer import ModelConfig
from .degradation import SceneConfig, SpatialDegradation
from .schedule import VARIANCES
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _stages(raw: str) -> list[tuple[int, int]]:
    """``"0:16, 4:32"`` -> [(0, 16), (4, 32)]."""
    out = []
    for item in raw.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        epoch, _, size = item.partition(":")
        out.append((int(epoch), int(size)))
    return out


def _optional_int(raw: str) -> int | None:
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _optional_float(raw: str) -> float | None:
    return None if raw.strip().lower() in ("", "none") else float(raw)


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


SCHEMA = {
    "run": {"seed": int},
    "data": {"bands": int, "msi_bands": int, "height": int, "width": int, "endmembers": int,
             "smoothness": float, "contrast": float, "factor": int, "kernel_sigma": _optional_float},
    "model": {"channels": int, "n_layers": int, "heads": int, "window": int, "ffn_expansion": int,
              "nle_scale": float, "residual": str, "dtype": str},
    "train": {"lr": float, "beta1": float, "beta2": float, "adam_eps": float, "batch_size": int,
              "epochs": int, "steps_per_epoch": int, "stages": _stages, "full_res_stage": _optional_int,
              "clip_norm": _optional_float, "checkpoint_every": int},
    "schedule": {"T": int, "beta_start": float, "beta_end": float},
    "sample": {"steps": int, "variance": str, "clip": _bool},
    "paths": {"data_dir": str, "checkpoint": str, "log": str},
}


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    msi_bands: int = 4
    factor: int = 4
    kernel_sigma: float | None = None
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint_every: int = 1
    T: int = 2000
    beta_start: float = 1e-6
    beta_end: float = 1e-2
    sample_steps: int = 100
    variance: str = "beta"
    clip: bool = True
    data_dir: Path = Path("data")
    checkpoint: Path = Path("model.ckpt")
    log: Path = Path("train.log")

    def degradation(self) -> SpatialDegradation:
        return SpatialDegradation(self.factor, self.kernel_sigma)

    def model_config(self, bands: int | None = None, msi_bands: int | None = None) -> ModelConfig:
        return ModelConfig(bands=bands or self.scene.bands, msi_bands=msi_bands or self.msi_bands, **self.model)


def _read(text: str, source: str) -> dict[str, dict[str, object]]:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    parsed: dict[str, dict[str, object]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        parsed[section] = {}
        for key, raw in cp.items(section):
            conv = SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                parsed[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from exc
    return parsed


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    p = _read(text, source)
    base = base_dir or Path.cwd()
    run, data, model = p.get("run", {}), p.get("data", {}), p.get("model", {})
    train, sched, samp, paths = p.get("train", {}), p.get("schedule", {}), p.get("sample", {}), p.get("paths", {})
    seed = run.get("seed", 0)
    try:
        scene = SceneConfig(
            endmembers=data.get("endmembers", 4), bands=data.get("bands", 16),
            height=data.get("height", 64), width=data.get("width", 64),
            smoothness=data.get("smoothness", 4.0), contrast=data.get("contrast", 3.0), seed=seed)
        tc = TrainConfig(
            lr=train.get("lr", 1e-4), beta1=train.get("beta1", 0.9), beta2=train.get("beta2", 0.999),
            adam_eps=train.get("adam_eps", 1e-8), batch_size=train.get("batch_size", 1),
            epochs=train.get("epochs", 10), steps_per_epoch=train.get("steps_per_epoch", 100),
            progressive_stages=train.get("stages", []), full_res_stage=train.get("full_res_stage"),
            clip_norm=train.get("clip_norm", 1.0), seed=seed)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig(
        seed=seed, scene=scene, msi_bands=data.get("msi_bands", 4), factor=data.get("factor", 4),
        kernel_sigma=data.get("kernel_sigma"), model=dict(model), train=tc,
        checkpoint_every=train.get("checkpoint_every", 1),
        T=sched.get("T", 2000), beta_start=sched.get("beta_start", 1e-6), beta_end=sched.get("beta_end", 1e-2),
        sample_steps=samp.get("steps", 100), variance=samp.get("variance", "beta"), clip=samp.get("clip", True),
        data_dir=base / paths.get("data_dir", "data"), checkpoint=base / paths.get("checkpoint", "model.ckpt"),
        log=base / paths.get("log", "train.log"))
    validate(cfg, source)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path), base_dir=path.parent)


def validate(cfg: RunConfig, source: str = "<config>") -> None:
    """Reject physically inconsistent combinations before any compute."""
    def fail(msg):
        raise ConfigError(f"{source}: {msg}")

    s = cfg.scene
    try:
        cfg.degradation()
        mc = cfg.model_config()
    except ValueError as exc:
        fail(str(exc))
    if not 1 <= cfg.msi_bands <= s.bands:
        fail(f"msi_bands ({cfg.msi_bands}) must lie in 1..bands ({s.bands})")
    if s.height % cfg.factor or s.width % cfg.factor:
        fail(f"image {s.height}x{s.width} is not divisible by factor {cfg.factor}")
    full = min(s.height, s.width)
    for epoch, size in cfg.train.progressive_stages:
        if size % cfg.factor:
            fail(f"patch size {size} (stage at epoch {epoch}) is not divisible by factor {cfg.factor}")
        if size > full:
            fail(f"patch size {size} exceeds image size {full}")
    smallest = min([size for _, size in cfg.train.progressive_stages] + [full])
    if mc.window > smallest:
        fail(f"window {mc.window} exceeds the smallest training size {smallest}")
    if cfg.checkpoint_every < 1:
        fail("checkpoint_every must be >= 1")
    if not 1 <= cfg.sample_steps <= cfg.T:
        fail(f"sample steps must lie in 1..T ({cfg.T})")
    if cfg.variance not in VARIANCES:
        fail(f"variance must be one of {VARIANCES}")
    if cfg.T < 1 or not 0 < cfg.beta_start <= cfg.beta_end < 1:
        fail("schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
