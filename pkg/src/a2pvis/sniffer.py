"""Dataset profiling and the metadata narrative.

Profiling is deterministic and bounded: rows beyond the configured cap are
counted but not stored, sampling is seeded, and the downstream prompt is built
from the profile alone, never from raw data. The narrative is model-written
with a deterministic template fallback.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

from .config import PipelineConfig
from .contracts import DatasetProfile, MetadataReport
from .gateway import Gateway, GatewayError
from .prompts import load_template

log = logging.getLogger(__name__)

STAGE_NARRATIVE = "sniffer.metadata_narrative"


class IngestError(Exception):
    """Raised for unusable input files; .code is one of the documented errors."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass
class IngestedTable:
    """Parsed CSV held in memory; row_count includes valid rows not stored."""

    source_path: str
    column_names: list[str]
    rows: list[list[str]]
    row_count: int
    malformed_count: int


def ingest_table(
    path: str | Path,
    max_rows: int = 100_000,
    max_cell_bytes: int = 2048,
    malformed_tolerance: float = 0.10,
) -> IngestedTable:
    """Parse a headered CSV. Malformed rows are counted and skipped, never repaired."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError("io_error", f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError("empty_file", f"{path} has no content") from None
        except csv.Error as exc:
            raise IngestError("io_error", f"{path}: {exc}") from exc
        if not header or any(not name.strip() for name in header):
            raise IngestError("no_header", f"{path} first row is not a usable header")
        if len(set(header)) != len(header):
            raise IngestError("no_header", f"{path} header has duplicate column names")

        arity = len(header)
        rows: list[list[str]] = []
        row_count = 0
        malformed = 0
        for row in reader:
            if not row:
                continue
            if len(row) != arity:
                malformed += 1
                continue
            row_count += 1
            if len(rows) < max_rows:
                rows.append([_clip_cell(cell, max_cell_bytes) for cell in row])

    total = row_count + malformed
    if total and malformed / total > malformed_tolerance:
        raise IngestError(
            "too_many_malformed",
            f"{malformed} of {total} rows malformed (> {malformed_tolerance:.0%})",
        )
    return IngestedTable(
        source_path=str(path),
        column_names=header,
        rows=rows,
        row_count=row_count,
        malformed_count=malformed,
    )


def _clip_cell(cell: str, max_cell_bytes: int) -> str:
    encoded = cell.encode("utf-8")
    if len(encoded) <= max_cell_bytes:
        return cell
    return encoded[:max_cell_bytes].decode("utf-8", errors="ignore")


_BOOL_TOKENS = frozenset({"true", "false", "yes", "no", "0", "1"})
_NON_FINITE = frozenset({"nan", "inf", "infinity"})


def _parses_int(value: str) -> bool:
    try:
        int(value)
        return True
    except ValueError:
        return False


def _parses_float(value: str) -> bool:
    if value.lower().lstrip("+-") in _NON_FINITE:
        return False
    try:
        float(value)
        return True
    except ValueError:
        return False


def _parses_datetime(value: str, formats: list[str]) -> bool:
    for fmt in formats:
        try:
            datetime.strptime(value, fmt)
            return True
        except ValueError:
            continue
    return False


def infer_column_type(values: list[str], cfg: PipelineConfig | None = None) -> str:
    """First matching rule wins: boolean, integer, numeric, datetime, categorical, text.

    Empty strings are removed before testing; an all-empty column is text.
    """
    cfg = cfg or PipelineConfig()
    cleaned = [v.strip() for v in values if v.strip()]
    if not cleaned:
        return "text"
    lowered = {v.lower() for v in cleaned}
    if lowered <= _BOOL_TOKENS and len(lowered) <= 2:
        return "boolean"
    if all(_parses_int(v) for v in cleaned):
        return "integer"
    if all(_parses_float(v) for v in cleaned):
        return "numeric"
    parseable = sum(1 for v in cleaned if _parses_datetime(v, cfg.date_formats))
    if parseable / len(cleaned) >= cfg.datetime_min_ratio:
        return "datetime"
    distinct = len(set(cleaned))
    if distinct / len(cleaned) <= cfg.categorical_max_ratio and distinct <= cfg.categorical_max_distinct:
        return "categorical"
    return "text"


def profile(
    table: IngestedTable,
    sample_size: int,
    seed: int,
    cfg: PipelineConfig | None = None,
) -> DatasetProfile:
    """Per-column inferred types plus a seeded uniform sample without replacement."""
    cfg = cfg or PipelineConfig()
    column_types = {}
    for idx, name in enumerate(table.column_names):
        column_types[name] = infer_column_type([row[idx] for row in table.rows], cfg)
    k = min(sample_size, len(table.rows))
    picked = random.Random(seed).sample(range(len(table.rows)), k)
    sample_rows = [
        dict(zip(table.column_names, table.rows[i])) for i in picked
    ]
    return DatasetProfile(
        row_count=table.row_count,
        column_names=list(table.column_names),
        column_types=column_types,
        sample_rows=sample_rows,
        source_path=table.source_path,
        sample_seed=seed,
    )


def render_profile(p: DatasetProfile) -> str:
    """Compact JSON view of the profile; the only dataset view a prompt may contain."""
    return json.dumps(
        {
            "source": Path(p.source_path).name,
            "rows": p.row_count,
            "columns": [
                {"name": c, "type": p.column_types[c]} for c in p.column_names
            ],
            "sample_rows": p.sample_rows,
        },
        indent=2,
        ensure_ascii=False,
    )


def template_narrative(p: DatasetProfile) -> str:
    """Deterministic fallback narrative: introduction, attributes, themes."""
    name = Path(p.source_path).name
    lines = [
        f"The dataset {name} contains {p.row_count} rows across "
        f"{len(p.column_names)} columns.",
        "",
        "Attributes:",
    ]
    for col in p.column_names:
        lines.append(f"- {col} ({p.column_types[col]})")
    lines.append("")
    lines.append("Possible analysis themes:")
    types = set(p.column_types.values())
    numericish = {"numeric", "integer"} & types
    themes = []
    if "datetime" in types and numericish:
        themes.append("trends of the numeric fields over time")
    if ("categorical" in types or "boolean" in types) and numericish:
        themes.append("comparisons of numeric fields across groups")
    if numericish:
        themes.append("distributions and outliers of the numeric fields")
    if not themes:
        themes.append("frequency patterns across the recorded fields")
    for theme in themes:
        lines.append(f"- {theme}")
    return "\n".join(lines)


def compose_metadata_report(
    p: DatasetProfile, gateway: Gateway, cfg: PipelineConfig
) -> MetadataReport:
    """One gateway call over the profile only; template fallback on any failure."""
    system = load_template("metadata_narrative")
    user = (
        "Write a concise metadata report for the dataset profiled below. "
        "Introduce the dataset, enumerate its attributes using their exact "
        "column names, and outline plausible analysis themes.\n\n"
        + render_profile(p)
    )
    try:
        response = gateway.complete(
            STAGE_NARRATIVE,
            system,
            user,
            temperature=cfg.temperature_generate,
            max_tokens=cfg.max_tokens,
        )
        return MetadataReport(profile=p, narrative=response.text.strip(), generated_by="model")
    except GatewayError as exc:
        log.warning("metadata narrative fell back to template: %s", exc)
        return MetadataReport(
            profile=p, narrative=template_narrative(p), generated_by="template-fallback"
        )
