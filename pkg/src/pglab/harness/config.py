"""Experiment configuration files (versioned JSON)."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from ..envs import PointMass1D, make_env, optimal_episode_return
from ..optimizer import OptimizerConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "PGLAB_OUTPUT_ROOT"
POINT_MASS_TARGET_RETURN = -5.0
TABULAR_THRESHOLD_FRACTION = 0.9

_TOP_LEVEL = {
    "schema_version", "name", "env", "algorithms", "defaults", "seeds", "output_dir",
    "checkpoint_interval", "success_threshold", "patience",
}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int = 1, path: str | None = None):
        super().__init__(message)
        self.message = message
        self.line = line
        self.path = path

    def __str__(self):
        where = f"{self.path}:" if self.path else ""
        return f"{where}{self.line}: {self.message}"


@dataclass
class AlgorithmEntry:
    name: str
    options: dict

    def optimizer_config(self, defaults: dict, seed: int) -> OptimizerConfig:
        return OptimizerConfig.from_dict({**defaults, **self.options, "seed": seed})


@dataclass
class ExperimentConfig:
    name: str
    env_name: str
    env_params: dict
    algorithms: list
    seeds: list
    output_dir: str
    defaults: dict = field(default_factory=dict)
    checkpoint_interval: int = 0
    success_threshold: float | None = None
    patience: int | None = None

    def make_env(self):
        return make_env(self.env_name, self.env_params)

    def resolved_threshold(self) -> float:
        if self.success_threshold is not None:
            return float(self.success_threshold)
        env = self.make_env()
        if isinstance(env, PointMass1D):
            return POINT_MASS_TARGET_RETURN
        return TABULAR_THRESHOLD_FRACTION * optimal_episode_return(env)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "env": {"name": self.env_name, "params": self.env_params},
            "algorithms": [{"name": a.name, **a.options} for a in self.algorithms],
            "defaults": self.defaults,
            "seeds": self.seeds,
            "output_dir": self.output_dir,
            "checkpoint_interval": self.checkpoint_interval,
            "success_threshold": self.success_threshold,
            "patience": self.patience,
        }


def _line_of(text: str, key: str, start: int = 0) -> tuple[int, int]:
    """(line number, offset) of the first ``"key":`` at or after ``start``; line 1 if absent."""
    m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, start)
    if not m:
        return 1, start
    return text.count("\n", 0, m.start()) + 1, m.start()


def parse_config(text: str, path: str | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, path) from None

    def fail(msg, key=None, start=0):
        line = _line_of(text, key, start)[0] if key else 1
        raise ConfigError(msg, line, path)

    if not isinstance(raw, dict):
        fail("top level must be a JSON object")
    for key in raw:
        if key not in _TOP_LEVEL:
            fail(f"unknown field {key!r}", key)
    if raw.get("schema_version") != SCHEMA_VERSION:
        fail(f"schema_version must be {SCHEMA_VERSION}", "schema_version")
    for key in ("name", "env", "algorithms", "seeds"):
        if key not in raw:
            fail(f"missing required field {key!r}")

    env = raw["env"]
    if not isinstance(env, dict) or not isinstance(env.get("name"), str):
        fail("env must be an object with a string 'name'", "env")
    env_params = env.get("params", {})
    try:
        make_env(env["name"], env_params)
    except (ValueError, TypeError) as exc:
        fail(f"bad environment: {exc}", "env")

    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        fail("seeds must be a nonempty list of integers", "seeds")

    defaults = raw.get("defaults", {})
    if not isinstance(defaults, dict):
        fail("defaults must be an object", "defaults")

    algs = raw["algorithms"]
    if not isinstance(algs, list) or not algs:
        fail("algorithms must be a nonempty list", "algorithms")
    _, offset = _line_of(text, "algorithms")
    entries, seen = [], set()
    for item in algs:
        if not isinstance(item, dict) or not isinstance(item.get("name"), str):
            fail("each algorithm needs a string 'name'", "name", offset)
        line, offset = _line_of(text, "name", offset)
        name = item["name"]
        if name in seen:
            raise ConfigError(f"duplicate algorithm name {name!r}", line, path)
        seen.add(name)
        options = {k: v for k, v in item.items() if k != "name"}
        options.setdefault("algorithm", name if name in ("ppo", "grpo", "hybrid") else None)
        try:
            OptimizerConfig.from_dict({**defaults, **options, "seed": seeds[0]})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"algorithm {name!r}: {exc}", line, path) from None
        entries.append(AlgorithmEntry(name, options))
        offset += 1

    for key in ("checkpoint_interval", "patience"):
        v = raw.get(key)
        if v is not None and (not isinstance(v, int) or v < 0):
            fail(f"{key} must be a non-negative integer", key)
    thr = raw.get("success_threshold")
    if thr is not None and not isinstance(thr, (int, float)):
        fail("success_threshold must be a number", "success_threshold")

    return ExperimentConfig(
        name=raw["name"],
        env_name=env["name"],
        env_params=env_params,
        algorithms=entries,
        seeds=list(seeds),
        output_dir=raw.get("output_dir", f"runs/{raw['name']}"),
        defaults=defaults,
        checkpoint_interval=raw.get("checkpoint_interval") or 0,
        success_threshold=thr,
        patience=raw.get("patience"),
    )


def load_config(path) -> ExperimentConfig:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", 1, path) from None
    return parse_config(text, path)


def resolve_output_dir(config: ExperimentConfig, override: str | None = None) -> Path:
    if override:
        return Path(override)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(config.output_dir)
    if root and not out.is_absolute():
        return Path(root) / out
    return out

