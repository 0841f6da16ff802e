"""Shared fixtures: canned profiles, artifacts, and in-memory replay gateways."""

from __future__ import annotations

from pathlib import Path

import pytest

from a2pvis.config import PipelineConfig
from a2pvis.contracts import (
    ChartArtifact,
    DatasetProfile,
    Direction,
    ExecutionOutcome,
    GeneratedScript,
    MetadataReport,
)
from a2pvis.executors import write_fake_figure
from a2pvis.gateway import Gateway, ReplayBackend

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def cfg() -> PipelineConfig:
    return PipelineConfig(backend="replay", transcript_path="unused", date="2025-06-30")


@pytest.fixture
def profile() -> DatasetProfile:
    return DatasetProfile(
        row_count=120,
        column_names=["date", "city", "sales"],
        column_types={"date": "datetime", "city": "categorical", "sales": "numeric"},
        sample_rows=[
            {"date": "2024-01-01", "city": "Aurora", "sales": "120.5"},
            {"date": "2024-01-02", "city": "Bellevue", "sales": "98.0"},
        ],
        source_path="sales.csv",
        sample_seed=42,
    )


@pytest.fixture
def metadata_report(profile) -> MetadataReport:
    return MetadataReport(
        profile=profile,
        narrative="Daily sales by city: columns date, city, sales over 120 rows.",
        generated_by="template-fallback",
    )


def make_gateway(entries: dict[tuple[str, int], str], tmp_path: Path | None = None, reprompt_limit: int = 2) -> Gateway:
    """Gateway over an in-memory transcript; records to tmp_path if given."""
    transcript = tmp_path / "transcript.jsonl" if tmp_path else None
    return Gateway(ReplayBackend(entries), transcript_path=transcript, reprompt_limit=reprompt_limit)


def make_artifact(tmp_path: Path, direction_id: int = 1, topic: str = "sales over time",
                  chart_type: str = "line", variables: list[str] | None = None) -> ChartArtifact:
    """Judger-passed artifact with a real figure file under tmp_path."""
    variables = variables or ["date", "sales"]
    figure_rel = f"charts/{direction_id}.png"
    write_fake_figure(tmp_path / figure_rel, seed=direction_id)
    direction = Direction(id=direction_id, topic=topic, chart_type=chart_type, variables=variables)
    script = GeneratedScript(
        direction_id=direction_id,
        dialect="python-matplotlib",
        source=f"plot()  # writes {figure_rel}",
        output_figure_path=figure_rel,
        attempt=0,
    )
    outcome = ExecutionOutcome(
        direction_id=direction_id,
        attempt=0,
        status="success",
        error_trace=None,
        figure_path=figure_rel,
        wall_time_ms=12,
    )
    return ChartArtifact(
        direction=direction,
        script=script,
        outcome=outcome,
        judger_verdict="pass",
        judger_reason="clear chart",
    )
