"""Direction generation, script generation, execution, repair, and the chart gate.

Per direction the flow is generate -> execute -> (rectify -> execute)* until
success or the attempt budget is spent, then a two-phase quality gate:
deterministic figure checks first, the model judger second. Only judger-pass
artifacts ever leave this module.
"""

from __future__ import annotations

import base64
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import PipelineConfig
from .contracts import (
    ChartArtifact,
    DatasetProfile,
    Direction,
    ExecutionOutcome,
    GeneratedScript,
    MetadataReport,
    direction_violations,
)
from .executors import Executor
from .gateway import Gateway, GatewayError
from .prompts import load_template
from .sniffer import render_profile

log = logging.getLogger(__name__)

STAGE_DIRECTIONS = "visualizer.direction_generator"
STAGE_SCRIPT = "visualizer.script_generator"
STAGE_RECTIFIER = "visualizer.rectifier"
STAGE_JUDGER = "visualizer.chart_judger"

TIMEOUT_NOTICE = "execution exceeded time limit"

MIN_FIGURE_BYTES = 1024


class NoValidDirections(Exception):
    pass


class ScriptContractViolation(Exception):
    pass


def figure_rel_path(direction_id: int) -> str:
    return f"charts/{direction_id}.png"


def _directions_prompt(report: MetadataReport, cfg: PipelineConfig, n: int) -> str:
    return (
        f"Propose up to {n} visualization directions for this dataset.\n"
        f"Allowed chart types: {', '.join(cfg.allowed_chart_types)}.\n\n"
        f"Metadata report:\n{report.narrative}\n\n"
        f"Profile:\n{render_profile(report.profile)}"
    )


def _filter_directions(
    candidates: list[dict], profile: DatasetProfile, cfg: PipelineConfig, n: int
) -> tuple[list[Direction], list[str]]:
    """Validate, dedup (chart_type + variable set, first wins), assign ids."""
    kept: list[Direction] = []
    rejections: list[str] = []
    seen: set[tuple[str, frozenset[str]]] = set()
    allowed = tuple(cfg.allowed_chart_types)
    for item in candidates:
        probe = Direction(
            id=len(kept) + 1,
            topic=item["topic"],
            chart_type=item["chart_type"],
            variables=item["variables"],
        )
        reasons = direction_violations(probe, profile, allowed)
        if reasons:
            rejections.append(f"{probe.topic!r}: {', '.join(reasons)}")
            continue
        key = (probe.chart_type, frozenset(probe.variables))
        if key in seen:
            continue
        seen.add(key)
        kept.append(probe)
        if len(kept) == n:
            break
    return kept, rejections


def generate_directions(
    report: MetadataReport, gateway: Gateway, cfg: PipelineConfig, n: int | None = None
) -> list[Direction]:
    """Validated, deduplicated directions; one semantic re-prompt round if none survive."""
    n = n or cfg.directions
    system = load_template("direction_generator")
    user = _directions_prompt(report, cfg, n)
    candidates = gateway.complete_structured(
        STAGE_DIRECTIONS,
        system,
        user,
        "direction-list",
        temperature=cfg.temperature_generate,
        max_tokens=cfg.max_tokens,
    )
    kept, rejections = _filter_directions(candidates, report.profile, cfg, n)
    if kept:
        return kept
    retry_user = (
        user
        + "\n\nEvery previous candidate was rejected:\n- "
        + "\n- ".join(rejections)
        + "\nPropose new directions that use only the profiled columns and allowed chart types."
    )
    candidates = gateway.complete_structured(
        STAGE_DIRECTIONS,
        system,
        retry_user,
        "direction-list",
        temperature=cfg.temperature_generate,
        max_tokens=cfg.max_tokens,
    )
    kept, rejections = _filter_directions(candidates, report.profile, cfg, n)
    if not kept:
        raise NoValidDirections("all candidates rejected after one re-prompt round")
    return kept


_FENCED_CODE = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.DOTALL)


def extract_code(text: str) -> str:
    match = _FENCED_CODE.search(text)
    return (match.group(1) if match else text).strip()


def script_contract_problems(source: str, output_path: str, variables: list[str]) -> list[str]:
    problems = []
    count = source.count(output_path)
    if count != 1:
        problems.append(f"output path {output_path!r} must appear exactly once (found {count})")
    for var in variables:
        if var not in source:
            problems.append(f"script never mentions variable {var!r}")
    return problems


def _script_prompt(
    direction: Direction, profile: DatasetProfile, cfg: PipelineConfig, dataset_path: str, output_path: str
) -> str:
    return (
        f"Write a {cfg.script_dialect} script for this chart.\n"
        f"Dataset file: {dataset_path}\n"
        f"Chart type: {direction.chart_type}\n"
        f"Topic: {direction.topic}\n"
        f"Use only these variables: {', '.join(direction.variables)}\n"
        f"Save the figure to exactly this path (reference it exactly once): {output_path}\n"
        "Render headlessly; never open an interactive display.\n\n"
        f"Column types: {json.dumps({c: profile.column_types[c] for c in direction.variables})}"
    )


def generate_script(
    direction: Direction,
    profile: DatasetProfile,
    gateway: Gateway,
    cfg: PipelineConfig,
    dataset_path: str,
) -> GeneratedScript:
    """Script for a validated direction; contract checked, one re-prompt allowed."""
    output_path = figure_rel_path(direction.id)
    system = load_template("script_generator")
    user = _script_prompt(direction, profile, cfg, dataset_path, output_path)
    response = gateway.complete(
        STAGE_SCRIPT, system, user, temperature=cfg.temperature_generate, max_tokens=cfg.max_tokens
    )
    source = extract_code(response.text)
    problems = script_contract_problems(source, output_path, direction.variables)
    if problems:
        retry_user = user + "\n\nYour previous script was rejected:\n- " + "\n- ".join(problems)
        response = gateway.complete(
            STAGE_SCRIPT,
            system,
            retry_user,
            temperature=cfg.temperature_generate,
            max_tokens=cfg.max_tokens,
        )
        source = extract_code(response.text)
        problems = script_contract_problems(source, output_path, direction.variables)
        if problems:
            raise ScriptContractViolation(
                f"direction {direction.id}: " + "; ".join(problems)
            )
    return GeneratedScript(
        direction_id=direction.id,
        dialect=cfg.script_dialect,
        source=source,
        output_figure_path=output_path,
        attempt=0,
    )


def execute_script(
    script: GeneratedScript, executor: Executor, run_dir: str | Path
) -> ExecutionOutcome:
    """Run one attempt and persist its outcome before returning."""
    outcome = executor.run(script)
    out_dir = Path(run_dir) / "outcomes"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{script.direction_id}_{script.attempt}.json"
    path.write_text(
        json.dumps(asdict(outcome), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return outcome


def rectify(
    script: GeneratedScript,
    outcome: ExecutionOutcome,
    gateway: Gateway,
    cfg: PipelineConfig,
    variables: list[str] | None = None,
) -> GeneratedScript:
    """Repair a failing script strictly from its error trace (one model call)."""
    if outcome.status == "timeout":
        diagnosis = f"Execution outcome: {TIMEOUT_NOTICE}."
    else:
        diagnosis = f"Error trace:\n{outcome.error_trace}"
    system = load_template("rectifier")
    user = (
        f"The following {script.dialect} script failed.\n\n"
        f"Script:\n```\n{script.source}\n```\n\n"
        f"{diagnosis}\n\n"
        "Apply the minimal fix. Keep the output figure path "
        f"{script.output_figure_path!r} referenced exactly once."
    )
    response = gateway.complete(
        STAGE_RECTIFIER, system, user, temperature=cfg.temperature_generate, max_tokens=cfg.max_tokens
    )
    source = extract_code(response.text)
    problems = script_contract_problems(source, script.output_figure_path, variables or [])
    if problems:
        raise ScriptContractViolation(f"direction {script.direction_id}: " + "; ".join(problems))
    return GeneratedScript(
        direction_id=script.direction_id,
        dialect=script.dialect,
        source=source,
        output_figure_path=script.output_figure_path,
        attempt=script.attempt + 1,
    )


def _deterministic_figure_check(figure: Path) -> str | None:
    """Reason string when the rendered file cannot be a meaningful chart."""
    if not figure.is_file():
        return "missing_figure"
    size = figure.stat().st_size
    if size == 0:
        return "empty_figure"
    if size < MIN_FIGURE_BYTES:
        return "small_figure"
    try:
        with Image.open(figure) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=float)
    except (UnidentifiedImageError, OSError):
        return "invalid_image"
    if pixels.var() == 0:
        return "blank_chart"
    return None


def judge_chart(
    outcome: ExecutionOutcome,
    direction: Direction,
    gateway: Gateway,
    cfg: PipelineConfig,
    run_dir: str | Path,
) -> tuple[str, str]:
    """Two-phase gate: deterministic figure checks, then the model judger.

    An unreachable judger fails the chart (conservative gating).
    """
    figure = Path(run_dir) / (outcome.figure_path or "")
    reason = _deterministic_figure_check(figure)
    if reason is not None:
        return "fail", reason

    image_data_url = None
    if cfg.judger_include_image:
        encoded = base64.b64encode(figure.read_bytes()).decode("ascii")
        image_data_url = f"data:image/png;base64,{encoded}"
    with Image.open(figure) as img:
        dims = img.size
    summary = {
        "topic": direction.topic,
        "chart_type": direction.chart_type,
        "variables": direction.variables,
        "figure_bytes": figure.stat().st_size,
        "figure_size_px": list(dims),
        "wall_time_ms": outcome.wall_time_ms,
        "attempts_used": outcome.attempt + 1,
    }
    system = load_template("chart_judger")
    user = "Judge this chart.\n" + json.dumps(summary, indent=2, ensure_ascii=False)
    try:
        verdict = gateway.complete_structured(
            STAGE_JUDGER,
            system,
            user,
            "judger-verdict",
            temperature=cfg.temperature_judge,
            max_tokens=512,
            image_data_url=image_data_url,
        )
    except GatewayError as exc:
        log.warning("judger unavailable for direction %d: %s", direction.id, exc)
        return "fail", "judger_unavailable"
    return verdict["verdict"], verdict["reason"]


def run_visualization_loop(
    directions: list[Direction],
    profile: DatasetProfile,
    executor: Executor,
    gateway: Gateway,
    cfg: PipelineConfig,
    run_dir: str | Path,
    dataset_path: str,
) -> tuple[list[ChartArtifact], dict[int, str]]:
    """Generate, execute, and repair every direction independently.

    Returns judger-pass artifacts in direction-id order plus a failure reason
    per direction that did not survive; a failing direction never aborts the
    loop.
    """
    run_dir = Path(run_dir)

    def process(direction: Direction) -> tuple[str, object]:
        try:
            script = generate_script(direction, profile, gateway, cfg, dataset_path)
        except (ScriptContractViolation, GatewayError) as exc:
            return "failure", f"script_generation_failed: {exc}"
        _persist_script(run_dir, script)
        try:
            outcome = execute_script(script, executor, run_dir)
            while outcome.status != "success" and outcome.attempt + 1 < cfg.max_attempts:
                try:
                    script = rectify(script, outcome, gateway, cfg, direction.variables)
                except (ScriptContractViolation, GatewayError) as exc:
                    return "failure", f"rectify_failed: {exc}"
                _persist_script(run_dir, script)
                outcome = execute_script(script, executor, run_dir)
        except GatewayError as exc:
            return "failure", f"gateway_failed: {exc}"
        if outcome.status != "success":
            return (
                "failure",
                f"execution_{outcome.status}_after_{outcome.attempt + 1}_attempts",
            )
        verdict, reason = judge_chart(outcome, direction, gateway, cfg, run_dir)
        _persist_judgement(run_dir, direction.id, verdict, reason)
        if verdict != "pass":
            return "failure", f"judger_fail: {reason}"
        return "artifact", ChartArtifact(
            direction=direction,
            script=script,
            outcome=outcome,
            judger_verdict=verdict,
            judger_reason=reason,
        )

    results: dict[int, tuple[str, object]] = {}
    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            futures = {d.id: pool.submit(process, d) for d in directions}
            for direction_id, future in futures.items():
                results[direction_id] = future.result()
    else:
        for direction in directions:
            results[direction.id] = process(direction)

    artifacts: list[ChartArtifact] = []
    failures: dict[int, str] = {}
    for direction in sorted(directions, key=lambda d: d.id):
        kind, value = results[direction.id]
        if kind == "artifact":
            artifacts.append(value)  # type: ignore[arg-type]
        else:
            failures[direction.id] = str(value)
            log.info("direction %d dropped: %s", direction.id, value)
    return artifacts, failures


def _persist_script(run_dir: Path, script: GeneratedScript) -> None:
    scripts_dir = run_dir / "scripts"
    scripts_dir.mkdir(parents=True, exist_ok=True)
    path = scripts_dir / f"{script.direction_id}_{script.attempt}.src"
    path.write_text(script.source + "\n", encoding="utf-8")


def _persist_judgement(run_dir: Path, direction_id: int, verdict: str, reason: str) -> None:
    judger_dir = run_dir / "judger"
    judger_dir.mkdir(parents=True, exist_ok=True)
    path = judger_dir / f"{direction_id}.json"
    path.write_text(
        json.dumps({"verdict": verdict, "reason": reason}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
