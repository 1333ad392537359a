"""Run configuration: role-to-backend wiring, policy, template source.

Config files are strict JSON: unknown keys are rejected at every level so
a typo cannot silently change a run. The config fingerprint covers
everything that determines prompt bytes and protocol behavior (policy,
reward params, role backend ids, template contents), and is stamped on
every trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final

from lm2.backends import Backend, BackendDescriptor, build_backend
from lm2.core import ROLES, content_hash
from lm2.errors import ConfigError
from lm2.orchestrator import RunPolicy
from lm2.templates import TemplateSet

_CONFIG_KEYS: Final = frozenset({"backends", "policy", "templates_dir", "log_level"})

_LOG_LEVELS: Final = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class RunConfig:
    """Everything a run needs besides the dataset itself."""

    backends: dict[str, BackendDescriptor] = field(default_factory=dict)
    policy: RunPolicy = RunPolicy()
    templates_dir: str | None = None
    log_level: str = "INFO"

    def __post_init__(self) -> None:
        unknown_roles = self.backends.keys() - set(ROLES)
        if unknown_roles:
            raise ConfigError(f"unknown backend roles: {sorted(unknown_roles)}")
        needed = {"decomposer", "solver"}
        if self.policy.enable_verifier:
            needed.add("verifier")
        missing = needed - self.backends.keys()
        if missing:
            raise ConfigError(f"missing backends for roles: {sorted(missing)}")
        if self.log_level not in _LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {_LOG_LEVELS}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = data.keys() - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw_backends = data.get("backends")
        if not isinstance(raw_backends, dict):
            raise ConfigError("config needs a 'backends' object mapping roles to descriptors")
        backends = {
            role: BackendDescriptor.from_dict(desc) for role, desc in raw_backends.items()
        }
        policy = RunPolicy.from_dict(data.get("policy", {}))
        return cls(
            backends=backends,
            policy=policy,
            templates_dir=data.get("templates_dir"),
            log_level=data.get("log_level", "INFO"),
        )

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        source = Path(path)
        if not source.exists():
            raise ConfigError(f"config not found: {source}")
        try:
            data = json.loads(source.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: not valid JSON: {exc}") from exc
        config = cls.from_dict(data)
        if config.templates_dir is not None:
            # Relative template dirs resolve against the config file.
            base = source.parent / config.templates_dir
            config.templates_dir = str(base) if not Path(config.templates_dir).is_absolute() else config.templates_dir
        return config

    def to_dict(self) -> dict[str, Any]:
        return {
            "backends": {role: desc.to_dict() for role, desc in sorted(self.backends.items())},
            "policy": self.policy.to_dict(),
            "templates_dir": self.templates_dir,
            "log_level": self.log_level,
        }

    def load_templates(self) -> TemplateSet:
        return TemplateSet.load(self.templates_dir)

    def build_backends(self) -> dict[str, Backend]:
        return {role: build_backend(desc) for role, desc in self.backends.items()}

    def fingerprint(self, templates: TemplateSet) -> str:
        """Hash of everything that shapes prompts and protocol decisions.

        Backend ids stand in for the backends themselves so a replay run
        (same ids, different kind) fingerprints identically to its
        recording run.
        """
        return content_hash(
            {
                "policy": self.policy.to_dict(),
                "backends": {role: desc.id for role, desc in self.backends.items()},
                "templates": templates.fingerprint(),
            }
        )
