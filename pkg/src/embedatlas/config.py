"""Service configuration: JSON file with ATLAS_* environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "ATLAS_"


@dataclass
class ServiceConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8000
    dataset_roots: tuple[str, ...] = ()
    embedder_url: str = "mock:"
    embedder_timeout: float = 10.0
    max_upload_bytes: int = 8 * 1024 * 1024
    max_k: int = 100
    default_neighbors: int = 9  # fills the 3x3 similar-results grid


def _coerce(name: str, raw: str, target_type: type):
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if name == "dataset_roots":
        return tuple(p for p in raw.split(",") if p)
    return raw


def load_config(path: str | Path | None = None, env: dict | None = None) -> ServiceConfig:
    """Build the config from defaults, then a JSON file, then ATLAS_*
    environment variables (highest precedence)."""
    env = os.environ if env is None else env
    values: dict = {}
    if path is not None:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
        values.update(doc)
    config = ServiceConfig()
    for f in fields(ServiceConfig):
        if f.name in values:
            raw = values[f.name]
            if f.name == "dataset_roots":
                raw = tuple(raw)
            setattr(config, f.name, raw)
        env_key = ENV_PREFIX + f.name.upper()
        if env_key in env:
            setattr(config, f.name, _coerce(f.name, env[env_key], type(getattr(config, f.name))))
    if config.max_k < 1 or config.default_neighbors < 1 or config.max_upload_bytes < 1:
        raise ValueError("config limits must be positive")
    return config
