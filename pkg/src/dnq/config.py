"""Configuration: TOML file, ``DNQ_*`` environment variables and CLI flags.

Precedence, highest first: CLI flag, environment variable, config file,
built-in default. Every key ``section.key`` has the environment variable
``DNQ_SECTION_KEY`` (``toolset`` maps to ``DNQ_TOOLSET``). Unknown keys are
rejected. The API token is never stored here: ``backend.token_env`` names
the environment variable that holds it.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Mapping

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from dnq.wiki import DEFAULT_USER_AGENT, PAGE_CHAR_CAP

ENV_PREFIX = "DNQ_"


class ConfigError(ValueError):
    pass


@dataclass
class BackendConfig:
    url: str = ""
    model: str = ""
    token_env: str = "DNQ_API_TOKEN"
    max_in_flight: int = 4
    timeout: float = 60.0
    # Sampling settings passed to the chat endpoint untouched.
    params: dict = field(default_factory=dict)


@dataclass
class PolicyConfig:
    retries: int = 2


@dataclass
class BudgetConfig:
    max_calls: int = 10
    max_entries_per_call: int = 5


@dataclass
class LimitsConfig:
    max_depth: int = 4
    max_steps: int = 25


@dataclass
class WikiConfig:
    backend: str = "offline"
    api_url: str = ""
    user_agent: str = DEFAULT_USER_AGENT
    min_interval: float = 0.1
    page_char_cap: int = PAGE_CHAR_CAP


@dataclass
class PathsConfig:
    base: str = ""
    corpus: str = ""
    out: str = ""


@dataclass
class EvalConfig:
    workers: int = 1


@dataclass
class LoggingConfig:
    level: str = "WARNING"
    format: str = "text"


@dataclass
class Config:
    toolset: str = "wiki"
    backend: BackendConfig = field(default_factory=BackendConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    limits: LimitsConfig = field(default_factory=LimitsConfig)
    wiki: WikiConfig = field(default_factory=WikiConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    CHOICES = {
        "toolset": ("chitchat", "wiki"),
        "wiki.backend": ("offline", "live"),
        "logging.format": ("text", "json"),
    }

    # -- key access -------------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        cfg = cls()
        out = []
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if dataclasses.is_dataclass(value):
                out += [f"{f.name}.{sub.name}" for sub in dataclasses.fields(value)]
            else:
                out.append(f.name)
        return out

    def _locate(self, key: str) -> tuple[Any, dataclasses.Field]:
        parts = key.split(".")
        target: Any = self
        for part in parts[:-1]:
            if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(target, part)
        fields = {f.name: f for f in dataclasses.fields(target)}
        f = fields.get(parts[-1])
        if f is None or dataclasses.is_dataclass(getattr(target, f.name)):
            raise ConfigError(f"unknown config key {key!r}")
        return target, f

    def get(self, key: str) -> Any:
        target, f = self._locate(key)
        return getattr(target, f.name)

    def set(self, key: str, value: Any) -> None:
        target, f = self._locate(key)
        current = getattr(target, f.name)
        value = _coerce(key, value, type(current))
        allowed = self.CHOICES.get(key)
        if allowed and value not in allowed:
            raise ConfigError(f"{key} must be one of {', '.join(allowed)}, got {value!r}")
        setattr(target, f.name, value)

    # -- sources ----------------------------------------------------------

    def update(self, data: Mapping[str, Any], prefix: str = "") -> None:
        for name, value in data.items():
            key = f"{prefix}{name}"
            if isinstance(value, Mapping) and key != "backend.params":
                self._require_section(key)
                self.update(value, key + ".")
            else:
                self.set(key, value)

    def _require_section(self, key: str) -> None:
        if "." in key or not dataclasses.is_dataclass(getattr(self, key, None)):
            raise ConfigError(f"unknown config key {key!r}")

    def apply_env(self, environ: Mapping[str, str] | None = None) -> None:
        environ = os.environ if environ is None else environ
        for key in self.keys():
            if key == "backend.params":
                continue
            name = ENV_PREFIX + key.replace(".", "_").upper()
            if name in environ:
                self.set(key, environ[name])

    @classmethod
    def from_toml(cls, text: str) -> Config:
        cfg = cls()
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        cfg.update(data)
        return cfg

    @classmethod
    def load(cls, path=None, environ: Mapping[str, str] | None = None,
             overrides: Mapping[str, Any] | None = None) -> Config:
        """Defaults, then ``path``, then the environment, then ``overrides``."""
        cfg = cls()
        if path:
            try:
                with open(path, "rb") as fh:
                    cfg.update(tomllib.load(fh))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        cfg.apply_env(environ)
        for key, value in (overrides or {}).items():
            if value is not None:
                cfg.set(key, value)
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def api_token(self, environ: Mapping[str, str] | None = None) -> str | None:
        environ = os.environ if environ is None else environ
        return environ.get(self.backend.token_env) or None


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is dict:
        if not isinstance(value, Mapping):
            raise ConfigError(f"{key} must be a table")
        return dict(value)
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("1", "true", "yes", "0", "false", "no"):
            return value.lower() in ("1", "true", "yes")
        raise ConfigError(f"{key} must be a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be an integer, got {value!r}") from None
    if kind is float:
        if isinstance(value, bool):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number, got {value!r}") from None
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value
