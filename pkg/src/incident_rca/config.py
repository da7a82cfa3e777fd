"""Flat ``key = value`` configuration shared by every stage.

Grammar: one ``key = value`` per line, ``#`` starts a comment, blank lines are
ignored. Keys are namespaced (``twist.k_mad``); unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TwistConfig:
    k_mad: float = 3.0
    fallback_ratio: float = 0.2
    w1: float = 0.25
    w2: float = 0.25
    w3: float = 0.25
    w4: float = 0.25

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)

    def __post_init__(self) -> None:
        if any(w < 0 or not math.isfinite(w) for w in self.weights):
            raise ConfigError(f"twist weights must be finite and non-negative: {self.weights}")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"twist weights must sum to 1, got {sum(self.weights)!r}")
        if self.k_mad <= 0 or self.fallback_ratio < 0:
            raise ConfigError("twist.k_mad must be > 0 and twist.fallback_ratio >= 0")


@dataclass(frozen=True)
class MetricsConfig:
    lag: int = 2
    alpha: float = 0.05
    damping: float = 0.85
    mode: str = "pagerank"
    resample_step_s: float = 1.0

    def __post_init__(self) -> None:
        if self.lag < 1:
            raise ConfigError("metrics.lag must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("metrics.alpha must lie in (0, 1)")
        if not 0 <= self.damping < 1:
            raise ConfigError("metrics.damping must lie in [0, 1)")
        if self.mode not in ("pagerank", "random_walk"):
            raise ConfigError(f"metrics.mode must be pagerank or random_walk, got {self.mode!r}")
        if self.resample_step_s <= 0:
            raise ConfigError("metrics.resample_step_s must be > 0")


@dataclass(frozen=True)
class DiagConfig:
    window_s: int = 300
    log_cap: int = 200
    seed: int = 0
    token_budget: int = 8000

    def __post_init__(self) -> None:
        if self.window_s <= 0 or self.log_cap <= 0 or self.token_budget <= 0:
            raise ConfigError("diag.window_s, diag.log_cap and diag.token_budget must be > 0")


@dataclass(frozen=True)
class AgentConfig:
    max_iterations: int = 6
    model: str = "gpt-4.1-mini"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    vision: bool = False
    temperature: float = 1.0
    # "metrics" seeds the current ranking with the metrics ranking; "fused"
    # seeds it with the score-averaged metrics and trace rankings.
    seed_ranking: str = "metrics"

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ConfigError("agents.max_iterations must be >= 0")
        if self.seed_ranking not in ("metrics", "fused"):
            raise ConfigError("agents.seed_ranking must be metrics or fused")


@dataclass(frozen=True)
class CliConfig:
    backend: str = "http-chat"
    script: str = ""
    out: str = "rca-out"


@dataclass(frozen=True)
class Config:
    twist: TwistConfig = field(default_factory=TwistConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    diag: DiagConfig = field(default_factory=DiagConfig)
    agents: AgentConfig = field(default_factory=AgentConfig)
    cli: CliConfig = field(default_factory=CliConfig)
    # regex with a named group ``service``; empty keeps the default rule
    pod_pattern: str = ""

    def with_overrides(self, pairs: dict[str, Any]) -> "Config":
        """Return a copy with flat ``section.key`` overrides applied."""
        sections: dict[str, dict[str, Any]] = {}
        top: dict[str, Any] = {}
        for key, raw in pairs.items():
            if key == "core.pod_pattern":
                top["pod_pattern"] = str(raw)
                continue
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            cls = _SECTIONS[section]
            fields = {f.name: f for f in dataclasses.fields(cls)}
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            sections.setdefault(section, {})[name] = _coerce(key, raw, fields[name].type)
        replaced = {
            section: dataclasses.replace(getattr(self, section), **values)
            for section, values in sections.items()
        }
        return dataclasses.replace(self, **replaced, **top)

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section in _SECTIONS:
            for f in dataclasses.fields(_SECTIONS[section]):
                out[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        out["core.pod_pattern"] = self.pod_pattern
        return out


_SECTIONS = {
    "twist": TwistConfig,
    "metrics": MetricsConfig,
    "diag": DiagConfig,
    "agents": AgentConfig,
    "cli": CliConfig,
}


def _coerce(key: str, raw: Any, type_name: Any) -> Any:
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    text = raw.strip() if isinstance(raw, str) else raw
    try:
        if type_name == "bool":
            if isinstance(text, bool):
                return text
            lowered = str(text).lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        return str(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        pairs[key] = value.strip().strip('"')
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> Config:
    config = Config()
    if path is not None:
        config = config.with_overrides(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        config = config.with_overrides(overrides)
    return config
