"""Pipeline configuration: flat TOML file, CLI overrides, env vars for secrets."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .contracts import DEFAULT_CHART_TYPES

ENV_API_KEY = "A2PVIS_API_KEY"
ENV_BASE_URL = "A2PVIS_BASE_URL"
ENV_MODEL = "A2PVIS_MODEL"

DEFAULT_DATE_FORMATS = (
    "%Y-%m-%d",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y/%m/%d",
    "%m/%d/%Y",
    "%d/%m/%Y",
)


@dataclass
class PipelineConfig:
    # Run identity
    title: str = "Data Visualization Report"
    date: str = ""  # ISO date injected for determinism; empty means today
    seed: int = 42

    # Backend
    backend: str = "live"  # "live" | "replay"
    transcript_path: str = ""  # replay input transcript
    base_url: str = ""
    model: str = ""
    api_key: str = ""  # secrets come from the environment, never the file
    request_timeout_s: float = 60.0
    transport_retries: int = 2
    retry_backoff_s: float = 0.5
    reprompt_limit: int = 2
    max_tokens: int = 2048
    temperature_generate: float = 0.7
    temperature_judge: float = 0.0

    # Sniffer
    sample_size: int = 5
    max_rows: int = 100_000
    max_cell_bytes: int = 2048
    malformed_tolerance: float = 0.10
    date_formats: list[str] = field(default_factory=lambda: list(DEFAULT_DATE_FORMATS))
    categorical_max_ratio: float = 0.5
    categorical_max_distinct: int = 50
    datetime_min_ratio: float = 0.95

    # Visualizer
    directions: int = 6
    allowed_chart_types: list[str] = field(default_factory=lambda: list(DEFAULT_CHART_TYPES))
    script_dialect: str = "python-matplotlib"
    max_attempts: int = 3
    parallelism: int = 1
    judger_include_image: bool = False

    # Executor
    executor: str = "fake"  # "fake" | "runner"
    runner_command: str = "a2pvis-runner"
    script_timeout_s: float = 30.0

    # Insights
    insight_top_k: int = 3
    candidate_min: int = 5
    candidate_max: int = 7

    # Report
    page_marker_every: int = 2
    footer_template: str = "--- page {page} ---"
    revision_passes: list[str] = field(
        default_factory=lambda: ["structure", "transitions", "wording"]
    )

    def validate(self) -> None:
        problems = []
        if self.backend not in ("live", "replay"):
            problems.append(f"backend must be live or replay, got {self.backend!r}")
        if self.backend == "replay" and not self.transcript_path:
            problems.append("replay backend requires transcript_path")
        if self.max_attempts < 1:
            problems.append("max_attempts must be >= 1")
        if self.directions < 1:
            problems.append("directions must be >= 1")
        if self.sample_size < 1:
            problems.append("sample_size must be >= 1")
        if self.executor not in ("fake", "runner"):
            problems.append(f"executor must be fake or runner, got {self.executor!r}")
        if self.page_marker_every < 1:
            problems.append("page_marker_every must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def hash(self) -> str:
        """Stable digest over every config field except secrets."""
        data = {k: v for k, v in asdict(self).items() if k != "api_key"}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def public_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "api_key"}


class ConfigError(ValueError):
    pass


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Build a config from an optional TOML file, CLI overrides, and env secrets.

    Precedence: defaults < file < CLI overrides; the API key (and, if unset
    elsewhere, base URL and model) come from the environment.
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = PipelineConfig(**data)
    cfg.api_key = os.environ.get(ENV_API_KEY, cfg.api_key)
    if not cfg.base_url:
        cfg.base_url = os.environ.get(ENV_BASE_URL, "")
    if not cfg.model:
        cfg.model = os.environ.get(ENV_MODEL, "")
    cfg.validate()
    return cfg
