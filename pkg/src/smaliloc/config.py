"""Run configuration: built-in defaults < YAML config file < command-line flags."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import InputError
from .gateway import API_KEY_ENV, DEFAULT_BASE_URL, DEFAULT_MODEL
from .prompts import DEFAULT_TOKEN_BUDGET, KINDS

BACKENDS = ("http", "replay", "mock")


class ConfigError(InputError):
    pass


@dataclass(frozen=True)
class RunConfig:
    backend: str = "http"
    model: str = DEFAULT_MODEL
    base_url: str = DEFAULT_BASE_URL
    api_key_env: str = API_KEY_ENV
    temperature: float = 0.0
    max_output_tokens: int = 4096
    max_in_flight: int = 4
    min_interval: float = 0.0
    max_attempts: int = 4
    base_delay: float = 1.0
    jitter: float = 0.5
    gate_threshold: int = 0
    token_budget: int = DEFAULT_TOKEN_BUDGET
    parse_retries: int = 1
    max_parse_failures: int | None = None
    taxonomy: str | None = None
    families: str | None = None
    templates: Mapping[str, str] = field(default_factory=dict)
    cache_dir: str | None = None
    mock_script: str | None = None
    filter: tuple[str, ...] = ()
    decompiler: str | None = None

    def validate(self) -> RunConfig:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        checks = [
            (self.temperature >= 0, "temperature must be >= 0"),
            (self.max_output_tokens >= 1, "max_output_tokens must be >= 1"),
            (self.max_in_flight >= 1, "max_in_flight must be >= 1"),
            (self.min_interval >= 0, "min_interval must be >= 0"),
            (self.max_attempts >= 1, "max_attempts must be >= 1"),
            (self.base_delay >= 0 and self.jitter >= 0, "base_delay and jitter must be >= 0"),
            (0 <= self.gate_threshold <= 100, "gate_threshold must be within 0-100"),
            (self.token_budget >= 1, "token_budget must be >= 1"),
            (self.parse_retries >= 0, "parse_retries must be >= 0"),
            (self.max_parse_failures is None or self.max_parse_failures >= 0, "max_parse_failures must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        unknown = set(self.templates) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown template kinds {sorted(unknown)}")
        for label, path in [
            ("taxonomy", self.taxonomy),
            ("families", self.families),
            ("mock_script", self.mock_script),
            *((f"templates.{k}", v) for k, v in self.templates.items()),
        ]:
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{label} file not found: {path}")
        if self.backend == "mock" and not self.mock_script:
            raise ConfigError("backend 'mock' needs mock_script")
        if self.backend == "replay" and not self.cache_dir:
            raise ConfigError("backend 'replay' needs cache_dir")
        return self


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def _flatten(data: Mapping[str, Any], base: Path) -> dict[str, Any]:
    out = dict(data)
    retry = out.pop("retry", None)
    if retry:
        out.update({k: v for k, v in retry.items()})
    unknown = set(out) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    # relative paths in a config file are relative to that file
    for key in ("taxonomy", "families", "cache_dir", "mock_script"):
        if out.get(key):
            out[key] = str(base / out[key])
    if "templates" in out:
        out["templates"] = {k: str(base / v) for k, v in (out["templates"] or {}).items()}
    if "filter" in out:
        f = out["filter"]
        out["filter"] = (f,) if isinstance(f, str) else tuple(f or ())
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping")
        try:
            cfg = replace(cfg, **_flatten(data, path.parent))
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    given = {k: v for k, v in (overrides or {}).items() if v is not None}
    if given:
        cfg = replace(cfg, **given)
    return cfg.validate()
