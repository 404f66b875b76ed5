"""Strict JSON configuration: unknown keys are errors, paths resolve against the file."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .osme import OsmeConfig, Stage
from .synth import SynthSpec
from .trainer import TrainConfig


_SCALARS = {
    bool: lambda v: isinstance(v, bool),
    int: lambda v: isinstance(v, int) and not isinstance(v, bool),
    float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    str: lambda v: isinstance(v, str),
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{key}")
        elif hint in _SCALARS and not _SCALARS[hint](value):
            raise ConfigError(f"{where}.{key}: expected {hint.__name__}, got {value!r}")
        elif cls is OsmeConfig and key == "backbone":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.backbone: expected a list of stages")
            value = tuple(_build(Stage, s, f"{where}.backbone[{n}]") for n, s in enumerate(value))
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def train_config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "train")


@dataclass(frozen=True)
class DataConfig:
    spec: SynthSpec = field(default_factory=SynthSpec)
    train_per_class: int = 20


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: Path | None = None
    figures: bool = True


def run_config_from_dict(data: dict, base: Path | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(data) - {"train", "data", "output"})
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    train = _build(TrainConfig, data.get("train", {}), "train")
    data_cfg = _build(DataConfig, data.get("data", {}), "data")
    if not 1 <= data_cfg.train_per_class < data_cfg.spec.images_per_class:
        raise ConfigError("data.train_per_class must be in [1, images_per_class)")
    if data_cfg.spec.K != train.osme.K:
        raise ConfigError(f"data.spec.K={data_cfg.spec.K} but train.osme.K={train.osme.K}")
    if (data_cfg.spec.size, data_cfg.spec.size) != train.osme.input_hw or train.osme.input_channels != 1:
        raise ConfigError("train.osme input shape must match the synthetic image size (single channel)")
    output = data.get("output", {})
    if not isinstance(output, dict):
        raise ConfigError("output: expected an object")
    extra = sorted(set(output) - {"dir", "figures"})
    if extra:
        raise ConfigError(f"output: unknown key(s) {', '.join(extra)}")
    out_dir = None
    if "dir" in output:
        out_dir = Path(output["dir"])
        if base is not None and not out_dir.is_absolute():
            out_dir = base / out_dir
    return RunConfig(train, data_cfg, out_dir, bool(output.get("figures", True)))


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return run_config_from_dict(data, base=path.resolve().parent)


def run_config_to_dict(cfg: RunConfig) -> dict:
    d = {"train": cfg.train.to_dict(),
         "data": {"spec": dataclasses.asdict(cfg.data.spec), "train_per_class": cfg.data.train_per_class},
         "output": {"figures": cfg.figures}}
    if cfg.out_dir is not None:
        d["output"]["dir"] = str(cfg.out_dir)
    return d


def desk_config() -> RunConfig:
    """Desk-scale run used by the CLI when no config file is given."""
    return RunConfig()


def micro_config() -> RunConfig:
    """A few-second run on a tiny network, handy for smoke tests."""
    osme = OsmeConfig(P=2, C=8, r=2, D=4, K=4, input_hw=(8, 8), backbone=(Stage(8),))
    train = TrainConfig(N=2, epochs=2, lr=0.05, osme=osme)
    data = DataConfig(SynthSpec(K=4, images_per_class=6, size=8, part_size=3, jitter=1), train_per_class=4)
    return RunConfig(train, data)

