"""Run configuration: INI-style sections, dotted ``section.key=value`` overrides.

Every key has a typed default; unknown sections or keys are rejected. The
resolved configuration is written next to each run's outputs.
"""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterable, Optional

from .harness import TrainConfig
from .renderer import ModelConfig, SamplingConfig


class ConfigError(ValueError):
    pass


def _defaults() -> Dict[str, Dict[str, object]]:
    model = {f.name: getattr(ModelConfig(), f.name) for f in fields(ModelConfig)}
    # the seed lives in [run] so one value drives every subcommand
    train = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig) if f.name not in ("model", "seed")}
    return {
        "data": {
            "scene": "sphere-box",
            "views": 6,
            "size": 32,
            "fov": 36.0,
            "radius": 3.0,
            "elevation": 20.0,
            "near": 1.5,
            "far": 4.5,
        },
        "model": model,
        "train": train,
        "eval": {"eval_views": (), "source_views": (), "n_coarse": 64, "n_fine": 64, "surface_samples": 20000},
        "run": {"seed": 0, "threads": 0},
    }


def _parse(value: str, default, key: str):
    s = value.strip()
    try:
        if isinstance(default, bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, tuple):
            return tuple(int(x) for x in s.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r} (expected {type(default).__name__})") from None
    return s


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


class RunConfig:
    def __init__(self, values: Optional[Dict[str, Dict[str, object]]] = None):
        self.values = _defaults()
        if values:
            for sec, kv in values.items():
                for k, v in kv.items():
                    self.set(f"{sec}.{k}", v)

    def get(self, dotted: str):
        sec, key = self._split(dotted)
        return self.values[sec][key]

    def _split(self, dotted: str):
        if "." not in dotted:
            raise ConfigError(f"config key {dotted!r} must be section.key")
        sec, key = dotted.split(".", 1)
        if sec not in self.values:
            raise ConfigError(f"unknown config section {sec!r}")
        if key not in self.values[sec]:
            raise ConfigError(f"unknown config key {dotted!r}")
        return sec, key

    def set(self, dotted: str, value) -> None:
        sec, key = self._split(dotted)
        default = self.values[sec][key]
        if isinstance(value, str):
            value = _parse(value, default, dotted)
        self.values[sec][key] = value

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                parser.read(p)
            except configparser.Error as e:
                raise ConfigError(f"cannot parse {p}: {e}") from None
            for sec in parser.sections():
                for k, v in parser.items(sec):
                    cfg.set(f"{sec}.{k}", v)
        cfg.apply_overrides(overrides)
        return cfg

    def to_text(self) -> str:
        out = []
        for sec, kv in self.values.items():
            out.append(f"[{sec}]")
            out += [f"{k} = {_format(v)}" for k, v in kv.items()]
            out.append("")
        return "\n".join(out)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**self.values["model"])
        except ValueError as e:
            raise ConfigError(f"model: {e}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(model=self.model_config(), seed=int(self.get("run.seed")), **self.values["train"])
        except ValueError as e:
            raise ConfigError(f"train: {e}") from None

    def eval_sampling(self) -> SamplingConfig:
        return SamplingConfig(int(self.values["eval"]["n_coarse"]), int(self.values["eval"]["n_fine"]))
