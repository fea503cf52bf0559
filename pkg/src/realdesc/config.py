"""Run configuration: JSON files with environment interpolation.

Precedence: command-line flags > config file > defaults. String values may
reference environment variables as ``${VAR}`` or ``${VAR:-default}``.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ValidationError

_ENV_PATTERN = re.compile(r"\$\{(?P<name>[A-Za-z_][A-Za-z0-9_]*)(?::-(?P<default>[^}]*))?\}")


def interpolate_env(value):
    """Expand ${VAR} / ${VAR:-default} in strings, recursively in containers."""
    if isinstance(value, str):
        def sub(match):
            name = match.group("name")
            default = match.group("default")
            got = os.environ.get(name)
            if got is None:
                if default is not None:
                    return default
                raise ValidationError(f"config references unset environment variable {name!r}")
            return got
        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v) for v in value]
    return value


@dataclass
class RunConfig:
    backbone: str = "openai/clip-vit-base-patch32"
    style: str = "oxford"
    mode: str = "no_name"
    multires_enabled: bool = False
    multires: dict = field(default_factory=lambda: {"scale": 2, "alpha_init": 0.01, "alpha_lr": 1e-4})
    schedule: dict = field(default_factory=dict)
    freeze: dict = field(default_factory=lambda: {
        "text_encoder_trainable": True, "image_trainable_layers": 2, "extras_trainable": False})
    paths: dict = field(default_factory=dict)
    seed: int = 0
    expected: dict = field(default_factory=dict)  # reference targets for full-scale runs

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ValidationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
        payload = interpolate_env(payload)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    def merged(self, **overrides) -> "RunConfig":
        """Apply non-None flag overrides on top of this config."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in data:
                raise ValidationError(f"unknown config override {key!r}")
            if isinstance(data[key], dict) and isinstance(value, dict):
                data[key].update(value)
            else:
                data[key] = value
        return RunConfig(**data)
