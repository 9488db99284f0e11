"""Pipeline configuration: one parameter block per stage, flat ``section.key = value`` files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .cluster import ClusterParams
from .evaluation import EvalConfig
from .selftrain import AugmentParams, SelfTrainSchedule
from .tracker import TrackerParams
from .trackopt import SmoothParams


class ConfigError(ValueError):
    pass


@dataclass
class MockParams:
    size_tolerance: float = 0.15
    density_log_sigma: float = 0.7
    min_confidence: float = 0.1

    def validate(self) -> None:
        if not (self.size_tolerance > 0 and self.density_log_sigma > 0 and 0 <= self.min_confidence <= 1):
            raise ValueError("mock: tolerances must be positive and min_confidence in [0, 1]")


@dataclass
class GlobalParams:
    seed: int = 0
    workers: int = 1
    detector: str = "mock"
    nms_threshold: float = 0.1
    input_root: str = ""
    output_root: str = ""

    def validate(self) -> None:
        if self.workers < 1:
            raise ValueError("run.workers must be >= 1")
        if not (self.detector == "mock" or self.detector.startswith("subprocess:")):
            raise ValueError("run.detector must be 'mock' or 'subprocess:<command>'")
        if not 0 <= self.nms_threshold <= 1:
            raise ValueError("run.nms_threshold must be in [0, 1]")


@dataclass
class PipelineConfig:
    run: GlobalParams = field(default_factory=GlobalParams)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    smooth: SmoothParams = field(default_factory=SmoothParams)
    selftrain: SelfTrainSchedule = field(default_factory=SelfTrainSchedule)
    augment: AugmentParams = field(default_factory=AugmentParams)
    mock: MockParams = field(default_factory=MockParams)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            block = getattr(self, f.name)
            if hasattr(block, "validate"):
                try:
                    block.validate()
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None

    def sections(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        block = getattr(self, section, None) if section in _SECTION_NAMES else None
        if block is None or not name or name not in {f.name for f in dataclasses.fields(block)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(block, name, _coerce(getattr(block, name), value, key))


_SECTION_NAMES = {f.name for f in dataclasses.fields(PipelineConfig)}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if text.lower() == "none" and (default is None or isinstance(default, tuple)):
            return None
        if isinstance(default, tuple) or (default is None and "," in text):
            return tuple(float(x) for x in text.split(","))
        if default is None:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for name, block in cfg.sections():
        for f in dataclasses.fields(block):
            lines.append(f"{name}.{f.name} = {_format(getattr(block, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    cfg = base if base is not None else PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Defaults, then the file, then ``key=value`` overrides; validated."""
    cfg = PipelineConfig()
    if path is not None:
        cfg = parse_config(Path(path).read_text(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    cfg.validate()
    return cfg
