"""Inter-stage records and their validation.

Every record exchanged between pipeline stages is defined here as a frozen
dataclass. Construction validates invariants and raises ContractError listing
every violated rule, never just the first. Canonical serialization is JSON
with sorted keys and UTF-8 encoding, so identical records always produce
identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Type, TypeVar

from .textscan import split_sentences

DEFAULT_CHART_TYPES = ("bar", "line", "scatter", "histogram", "box", "heatmap")

COLUMN_TYPES = ("numeric", "integer", "categorical", "datetime", "boolean", "text")

RECORD_FORMAT_VERSION = 1


class ContractError(ValueError):
    """A record violates one or more of its invariants."""

    def __init__(self, record_type: str, violations: list[str]):
        self.record_type = record_type
        self.violations = violations
        super().__init__(f"{record_type}: " + "; ".join(violations))


def _require(violations: list[str], ok: bool, message: str) -> None:
    if not ok:
        violations.append(message)


@dataclass(frozen=True)
class DatasetProfile:
    """Deterministic structural summary of the input table."""

    row_count: int
    column_names: list[str]
    column_types: dict[str, str]
    sample_rows: list[dict[str, str]]
    source_path: str
    sample_seed: int

    def __post_init__(self):
        v: list[str] = []
        _require(v, self.row_count >= 0, "row_count must be non-negative")
        _require(
            v,
            set(self.column_types) == set(self.column_names),
            "column_types keys must equal column_names",
        )
        _require(
            v,
            all(t in COLUMN_TYPES for t in self.column_types.values()),
            "column_types values must be one of %s" % (COLUMN_TYPES,),
        )
        for i, row in enumerate(self.sample_rows):
            _require(
                v,
                set(row) == set(self.column_names),
                f"sample row {i} must have exactly the profiled columns",
            )
        _require(
            v,
            len(self.sample_rows) <= self.row_count,
            "sample_rows cannot exceed row_count",
        )
        if v:
            raise ContractError("DatasetProfile", v)


@dataclass(frozen=True)
class MetadataReport:
    """Profile plus the narrative dataset introduction."""

    profile: DatasetProfile
    narrative: str
    generated_by: str  # "model" | "template-fallback"

    def __post_init__(self):
        v: list[str] = []
        _require(v, bool(self.narrative.strip()), "narrative must be non-empty")
        _require(
            v,
            self.generated_by in ("model", "template-fallback"),
            "generated_by must be model or template-fallback",
        )
        if v:
            raise ContractError("MetadataReport", v)


@dataclass(frozen=True)
class Direction:
    """One machine-readable visualization plan."""

    id: int
    topic: str
    chart_type: str
    variables: list[str]

    def __post_init__(self):
        v: list[str] = []
        _require(v, bool(self.topic.strip()), "topic must be non-empty")
        _require(v, bool(self.variables), "variables must be non-empty")
        if v:
            raise ContractError("Direction", v)


def direction_violations(
    direction: Direction,
    profile: DatasetProfile,
    allowed_chart_types: tuple[str, ...] = DEFAULT_CHART_TYPES,
) -> list[str]:
    """Every rule the direction violates against the profile; [] if valid.

    Column matching is exact and case-sensitive.
    """
    violations: list[str] = []
    if not direction.variables:
        violations.append("empty_variables")
    for var in direction.variables:
        if var not in profile.column_names:
            violations.append(f"unknown_column:{var}")
    if direction.chart_type not in allowed_chart_types:
        violations.append(f"bad_chart_type:{direction.chart_type}")
    if not direction.topic.strip():
        violations.append("empty_topic")
    return violations


class DirectionRejected(ValueError):
    def __init__(self, direction: Direction, reasons: list[str]):
        self.direction = direction
        self.reasons = reasons
        super().__init__("direction rejected: " + ", ".join(reasons))


def validate_direction(
    direction: Direction,
    profile: DatasetProfile,
    allowed_chart_types: tuple[str, ...] = DEFAULT_CHART_TYPES,
) -> Direction:
    """Return the direction unchanged iff all rules hold, else raise with all reasons."""
    reasons = direction_violations(direction, profile, allowed_chart_types)
    if reasons:
        raise DirectionRejected(direction, reasons)
    return direction


@dataclass(frozen=True)
class GeneratedScript:
    """A plotting script tied to one direction and one output figure path."""

    direction_id: int
    dialect: str
    source: str
    output_figure_path: str
    attempt: int

    def __post_init__(self):
        v: list[str] = []
        _require(v, self.attempt >= 0, "attempt must be >= 0")
        count = self.source.count(self.output_figure_path)
        _require(
            v,
            count == 1,
            f"source must contain output_figure_path exactly once (found {count})",
        )
        if v:
            raise ContractError("GeneratedScript", v)


@dataclass(frozen=True)
class ExecutionOutcome:
    """Result of executing one script attempt.

    figure_path is relative to the run directory so recorded runs stay
    relocatable; callers resolve it against their run root.
    """

    direction_id: int
    attempt: int
    status: str  # "success" | "error" | "timeout"
    error_trace: str | None
    figure_path: str | None
    wall_time_ms: int

    def __post_init__(self):
        v: list[str] = []
        _require(v, self.status in ("success", "error", "timeout"), "invalid status")
        if self.status == "success":
            _require(v, bool(self.figure_path), "success requires figure_path")
        if self.status == "error":
            _require(
                v,
                bool(self.error_trace and self.error_trace.strip()),
                "error requires non-empty error_trace",
            )
        _require(v, self.wall_time_ms >= 0, "wall_time_ms must be >= 0")
        if v:
            raise ContractError("ExecutionOutcome", v)


@dataclass(frozen=True)
class ChartArtifact:
    """An executed figure plus its provenance and quality-gate verdict."""

    direction: Direction
    script: GeneratedScript
    outcome: ExecutionOutcome
    judger_verdict: str  # "pass" | "fail"
    judger_reason: str

    def __post_init__(self):
        v: list[str] = []
        _require(v, self.judger_verdict in ("pass", "fail"), "invalid judger_verdict")
        if v:
            raise ContractError("ChartArtifact", v)


@dataclass(frozen=True)
class InsightCandidate:
    """A three-sentence insight: observation, hedged reason, so-what."""

    chart_direction_id: int
    observation: str
    reason: str
    so_what: str
    raw_text: str

    def __post_init__(self):
        v: list[str] = []
        parts = split_sentences(self.raw_text)
        _require(
            v,
            len(parts) == 3,
            f"raw_text must split into exactly 3 sentences (got {len(parts)})",
        )
        if len(parts) == 3:
            _require(
                v,
                parts == [self.observation, self.reason, self.so_what],
                "sentence fields must map 1:1 to raw_text sentences",
            )
        if v:
            raise ContractError("InsightCandidate", v)


@dataclass(frozen=True)
class RubricScore:
    """Four 1-5 criterion scores; total is always the locally computed sum."""

    correctness_factuality: int
    specificity_traceability: int
    insightfulness_depth: int
    so_what_quality: int
    total: int

    CRITERIA = (
        "correctness_factuality",
        "specificity_traceability",
        "insightfulness_depth",
        "so_what_quality",
    )

    def __post_init__(self):
        v: list[str] = []
        for name in self.CRITERIA:
            value = getattr(self, name)
            _require(v, isinstance(value, int) and 1 <= value <= 5, f"{name} must be in [1, 5]")
        expected = (
            self.correctness_factuality
            + self.specificity_traceability
            + self.insightfulness_depth
            + self.so_what_quality
        )
        _require(v, self.total == expected, f"total must equal criterion sum {expected}")
        if v:
            raise ContractError("RubricScore", v)

    @classmethod
    def from_criteria(
        cls,
        correctness_factuality: int,
        specificity_traceability: int,
        insightfulness_depth: int,
        so_what_quality: int,
    ) -> "RubricScore":
        return cls(
            correctness_factuality,
            specificity_traceability,
            insightfulness_depth,
            so_what_quality,
            correctness_factuality
            + specificity_traceability
            + insightfulness_depth
            + so_what_quality,
        )


@dataclass(frozen=True)
class ScoredInsight:
    candidate: InsightCandidate
    score: RubricScore
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ContractError("ScoredInsight", ["rank must be >= 1"])


@dataclass(frozen=True)
class TopicOrder:
    ordered_direction_ids: list[int]
    rationale: str

    def __post_init__(self):
        v: list[str] = []
        ids = self.ordered_direction_ids
        _require(v, len(ids) == len(set(ids)), "ordered_direction_ids must be unique")
        _require(v, bool(ids), "ordered_direction_ids must be non-empty")
        if v:
            raise ContractError("TopicOrder", v)


@dataclass(frozen=True)
class ReportSection:
    heading: str
    body: str
    figure_ref: str
    caption: str
    transition: str = ""


@dataclass(frozen=True)
class ReportDocument:
    title: str
    date: str
    introduction: str
    sections: list[ReportSection]
    summary: str
    footer_template: str


# ---------------------------------------------------------------------------
# Canonical serialization

_NESTED: dict[str, Any] = {}  # filled below; field name -> contract class

T = TypeVar("T")


def serialize_record(record: Any) -> bytes:
    """Canonical bytes: JSON, sorted keys, UTF-8, no insignificant whitespace."""
    return json.dumps(
        asdict(record), sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def record_from_dict(cls: Type[T], data: dict[str, Any]) -> T:
    """Rebuild a contract record from a plain dict, validating invariants.

    Invariant violations raise ContractError; malformed structure raises
    ValueError. Records are rejected, never repaired.
    """
    if not isinstance(data, dict):
        raise ValueError(f"{cls.__name__}: expected object, got {type(data).__name__}")
    kwargs: dict[str, Any] = {}
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ValueError(f"{cls.__name__}: unknown fields {sorted(extra)}")
    for f in fields(cls):
        if f.name not in data:
            raise ValueError(f"{cls.__name__}: missing field {f.name}")
        value = data[f.name]
        nested = _NESTED.get(f"{cls.__name__}.{f.name}")
        if nested is not None:
            if isinstance(nested, tuple):  # list of nested records
                value = [record_from_dict(nested[0], item) for item in value]
            else:
                value = record_from_dict(nested, value)
        kwargs[f.name] = value
    return cls(**kwargs)


def deserialize_record(data: bytes, cls: Type[T]) -> T:
    return record_from_dict(cls, json.loads(data.decode("utf-8")))


_NESTED.update(
    {
        "MetadataReport.profile": DatasetProfile,
        "ChartArtifact.direction": Direction,
        "ChartArtifact.script": GeneratedScript,
        "ChartArtifact.outcome": ExecutionOutcome,
        "ScoredInsight.candidate": InsightCandidate,
        "ScoredInsight.score": RubricScore,
        "ReportDocument.sections": (ReportSection,),
    }
)
