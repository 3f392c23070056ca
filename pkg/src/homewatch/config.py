"""Pipeline configuration: a JSON document validated strictly against known keys."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from homewatch.forest import ForestConfig
from homewatch.lstm import LSTMConfig


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    ratio: float = 0.8
    chronological: bool = False
    stratify: bool = False


@dataclass
class PipelineConfig:
    window_size: int = 20
    seed: int = 0
    mi_grouping: str = "instance"
    min_run: int = 2
    max_gap: Optional[int] = None
    rules: Optional[str] = None
    rule_percentiles: tuple[float, float] = (1.0, 99.0)
    activity_forest: ForestConfig = field(default_factory=ForestConfig)
    anomaly_forest: ForestConfig = field(default_factory=ForestConfig)
    lstm: LSTMConfig = field(default_factory=LSTMConfig)
    split: SplitConfig = field(default_factory=SplitConfig)

    def validate(self) -> None:
        if self.window_size < 2:
            raise ConfigError("window_size must be >= 2")
        if self.mi_grouping not in ("instance", "activity"):
            raise ConfigError("mi_grouping must be 'instance' or 'activity'")
        if self.min_run < 1:
            raise ConfigError("min_run must be >= 1")
        if self.max_gap is not None and self.max_gap < 0:
            raise ConfigError("max_gap must be >= 0")
        lo, hi = self.rule_percentiles
        if not 0 <= lo <= hi <= 100:
            raise ConfigError("rule_percentiles must satisfy 0 <= lo <= hi <= 100")
        if not 0 < self.split.ratio < 1:
            raise ConfigError("split.ratio must be in (0, 1)")
        try:
            self.activity_forest.validate()
            self.anomaly_forest.validate()
            self.lstm.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rule_percentiles"] = list(self.rule_percentiles)
        return d


_SUBSECTIONS = {
    "activity_forest": ForestConfig,
    "anomaly_forest": ForestConfig,
    "lstm": LSTMConfig,
    "split": SplitConfig,
}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return doc


def config_from_dict(doc: dict) -> PipelineConfig:
    """Build a config; sub-sections without an explicit ``seed`` inherit the top-level one."""
    doc = dict(_build(PipelineConfig, doc, "config"))
    seed = int(doc.get("seed", 0))
    kwargs = {}
    for key, value in doc.items():
        if key in _SUBSECTIONS:
            cls = _SUBSECTIONS[key]
            sub = dict(_build(cls, value, key))
            if "seed" in {f.name for f in fields(cls)}:
                sub.setdefault("seed", seed)
            kwargs[key] = cls(**sub)
        elif key == "rule_percentiles":
            if not isinstance(value, (list, tuple)) or len(value) != 2:
                raise ConfigError("rule_percentiles must be a two-element list")
            kwargs[key] = (float(value[0]), float(value[1]))
        else:
            kwargs[key] = value
    for key, cls in _SUBSECTIONS.items():
        if key not in kwargs:
            kwargs[key] = cls(seed=seed) if "seed" in {f.name for f in fields(cls)} else cls()
    try:
        cfg = PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return config_from_dict({})
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
