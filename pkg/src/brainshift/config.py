"""Pipeline configuration: one strict JSON document with a section per stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict

from .align import AlignConfig
from .biomarkers import DEFAULT_BILATERAL_THRESHOLD
from .metrics import MetricsConfig
from .synthesis import LossWeights, SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifyConfig:
    k: int = 5
    seed: int = 0
    bilateral_threshold: float = DEFAULT_BILATERAL_THRESHOLD

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not 0 < self.bilateral_threshold <= 0.5:
            raise ValueError("bilateral_threshold must lie in (0, 0.5]")


@dataclass(frozen=True)
class PipelineConfig:
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)

    def __post_init__(self):
        # the stage configs share the top-level metric settings
        object.__setattr__(self, "align", replace(self.align, metrics=self.metrics))
        object.__setattr__(self, "synth", replace(self.synth, metrics=self.metrics))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metrics": _section(self.metrics),
            "align": _section(self.align, skip=("metrics",)),
            "synth": {**_section(self.synth, skip=("metrics", "weights")), "weights": _section(self.synth.weights)},
            "classify": _section(self.classify),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _section(obj, skip=()) -> Dict[str, Any]:
    out = {}
    for f in fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        fixed = bool(default) and not isinstance(default[0], str)
        if not isinstance(value, list) or (fixed and len(value) != len(default)):
            raise ConfigError(f"{where}: expected a list like {list(default)}, got {value!r}")
        return tuple(_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{where}: unsupported setting")


def _build(cls, data, where: str, skip=(), **extra):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    base = cls()
    allowed = {f.name for f in fields(cls)} - set(skip) - set(extra)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {k: _coerce(v, getattr(base, k), f"{where}.{k}") for k, v in data.items()}
    try:
        return replace(base, **kwargs, **extra)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def config_from_dict(data: Dict[str, Any]) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - {"metrics", "align", "synth", "classify"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}")
    metrics = _build(MetricsConfig, data.get("metrics", {}), "metrics")
    align = _build(AlignConfig, data.get("align", {}), "align", skip=("metrics",), metrics=metrics)
    synth_data = data.get("synth", {})
    if not isinstance(synth_data, dict):
        raise ConfigError("synth: expected an object")
    synth_data = dict(synth_data)
    weights = _build(LossWeights, synth_data.pop("weights", {}), "synth.weights")
    if not any(v > 0 for v in weights.as_dict().values()):
        raise ConfigError("synth.weights: at least one weight must be > 0")
    synth = _build(SynthConfig, synth_data, "synth", skip=("metrics",), weights=weights, metrics=metrics)
    classify = _build(ClassifyConfig, data.get("classify", {}), "classify")
    return PipelineConfig(metrics, align, synth, classify)


def parse_config(text: str) -> PipelineConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err}") from None
    return config_from_dict(data)


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def weights_from_json(text: str) -> LossWeights:
    """A bare LossWeights object, or a full config whose synth.weights is used."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err}") from None
    if isinstance(data, dict) and "synth" in data:
        return config_from_dict(data).synth.weights
    w = _build(LossWeights, data, "weights")
    if not any(v > 0 for v in w.as_dict().values()):
        raise ConfigError("weights: at least one weight must be > 0")
    return w
