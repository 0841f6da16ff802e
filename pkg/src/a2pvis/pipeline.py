"""End-to-end pipeline driver: stage sequencing, persistence, resume.

Stages run in the fixed order sniff -> visualize -> insight -> present ->
build, each persisting its records under the run directory. Stage boundaries
are the only resume points; the manifest records config hash, stage statuses,
timings, and the record-format version.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict
from datetime import date as date_type
from datetime import datetime, timezone
from pathlib import Path

from .config import ENV_API_KEY, PipelineConfig
from .contracts import (
    RECORD_FORMAT_VERSION,
    ChartArtifact,
    DatasetProfile,
    MetadataReport,
    ScoredInsight,
    TopicOrder,
    record_from_dict,
)
from .executors import FakeExecutor, SubprocessExecutor
from .gateway import Gateway, GatewayError, LiveBackend, ReplayBackend
from .insights import NoValidCandidates, analyze_chart
from .presenter import PresenterResult, SectionDraft, present
from .report import ReportMeta, assemble, lint, lints_clean, revise
from .sniffer import IngestError, compose_metadata_report, ingest_table, profile
from .visualizer import NoValidDirections, generate_directions, run_visualization_loop

log = logging.getLogger(__name__)

STAGES = ("sniff", "visualize", "insight", "present", "build")

# Stage tags are namespaced by the stage that emits them, so per-tag sequence
# indices are identical whether a stage runs in a full run or a resume.
_TAG_PREFIX_STAGE = {
    "sniffer": "sniff",
    "visualizer": "visualize",
    "insight": "insight",
    "presenter": "present",
    "report": "build",
}

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NO_CHARTS = 3


class PipelineError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_CONFIG):
        self.exit_code = exit_code
        super().__init__(message)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise PipelineError(f"missing or unreadable record: {path} ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise PipelineError(f"corrupt record: {path} ({exc})") from exc


class PipelineRun:
    """State and persistence for one run directory."""

    def __init__(self, cfg: PipelineConfig, data_path: str | Path, run_dir: str | Path):
        self.cfg = cfg
        self.data_path = str(data_path)
        self.run_dir = Path(run_dir)
        self.gateway: Gateway | None = None
        self.manifest: dict = {}
        # In-memory stage products; reloaded from disk on resume.
        self.profile: DatasetProfile | None = None
        self.report: MetadataReport | None = None
        self.artifacts: list[ChartArtifact] | None = None
        self.selected_by_id: dict[int, list[ScoredInsight]] | None = None
        self.presenter_result: PresenterResult | None = None

    # -- infrastructure -----------------------------------------------------

    def _make_gateway(self) -> Gateway:
        if self.cfg.backend == "replay":
            backend = ReplayBackend.from_transcript(self.cfg.transcript_path)
        else:
            if not self.cfg.base_url or not self.cfg.model:
                raise PipelineError(
                    "live backend requires base_url and model (config or A2PVIS_* env vars)"
                )
            backend = LiveBackend(
                base_url=self.cfg.base_url,
                api_key=self.cfg.api_key,
                model=self.cfg.model,
                retries=self.cfg.transport_retries,
                timeout_s=self.cfg.request_timeout_s,
                retry_backoff_s=self.cfg.retry_backoff_s,
            )
        return Gateway(
            backend,
            transcript_path=self.run_dir / "transcript.jsonl",
            reprompt_limit=self.cfg.reprompt_limit,
        )

    def _make_executor(self):
        if self.cfg.executor == "runner":
            return SubprocessExecutor(
                self.run_dir, self.cfg.runner_command, timeout_s=self.cfg.script_timeout_s
            )
        return FakeExecutor(self.run_dir, timeout_s=self.cfg.script_timeout_s)

    def _log_error(self, stage: str, exc: Exception) -> None:
        entry = {
            "stage": stage,
            "error_type": type(exc).__name__,
            "message": str(exc),
            "at": _utcnow(),
        }
        path = self.run_dir / "errors.jsonl"
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _save_manifest(self) -> None:
        _write_json(self.run_dir / "manifest.json", self.manifest)

    def _init_manifest(self) -> None:
        self.manifest = {
            "record_format_version": RECORD_FORMAT_VERSION,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.public_dict(),
            "data_path": self.data_path,
            "created_at": _utcnow(),
            "stages": {name: {"status": "pending"} for name in STAGES},
        }
        self._save_manifest()

    # -- stage bodies --------------------------------------------------------

    def _stage_sniff(self) -> None:
        table = ingest_table(
            self.data_path,
            max_rows=self.cfg.max_rows,
            max_cell_bytes=self.cfg.max_cell_bytes,
            malformed_tolerance=self.cfg.malformed_tolerance,
        )
        self.profile = profile(table, self.cfg.sample_size, self.cfg.seed, self.cfg)
        _write_json(self.run_dir / "profile.json", asdict(self.profile))
        self.report = compose_metadata_report(self.profile, self.gateway, self.cfg)
        _write_json(self.run_dir / "metadata_report.json", asdict(self.report))

    def _stage_visualize(self) -> None:
        self._ensure_sniffed()
        directions = generate_directions(self.report, self.gateway, self.cfg)
        _write_json(self.run_dir / "directions.json", [asdict(d) for d in directions])
        executor = self._make_executor()
        artifacts, failures = run_visualization_loop(
            directions,
            self.profile,
            executor,
            self.gateway,
            self.cfg,
            self.run_dir,
            self.data_path,
        )
        self.artifacts = artifacts
        _write_json(self.run_dir / "artifacts.json", [asdict(a) for a in artifacts])
        _write_json(
            self.run_dir / "visualize_failures.json",
            {str(k): v for k, v in failures.items()},
        )

    def _stage_insight(self) -> None:
        self._ensure_sniffed()
        self._ensure_artifacts()
        assert self.artifacts is not None
        selected: dict[int, list[ScoredInsight]] = {}
        survivors: list[ChartArtifact] = []
        for artifact in self.artifacts:
            try:
                top, record = analyze_chart(artifact, self.report, self.gateway, self.cfg)
            except NoValidCandidates as exc:
                log.warning("chart %d dropped at insight stage: %s", artifact.direction.id, exc)
                self._log_error("insight", exc)
                continue
            selected[artifact.direction.id] = top
            survivors.append(artifact)
            _write_json(self.run_dir / "insights" / f"{artifact.direction.id}.json", record)
        self.artifacts = survivors
        self.selected_by_id = selected

    def _stage_present(self) -> None:
        self._ensure_sniffed()
        self._ensure_artifacts()
        self._ensure_selected()
        assert self.artifacts and self.selected_by_id is not None
        result = present(self.artifacts, self.selected_by_id, self.report, self.gateway, self.cfg)
        self.presenter_result = result
        _write_json(self.run_dir / "presenter" / "topic_order.json", asdict(result.order))
        _write_json(
            self.run_dir / "presenter" / "introduction.json", {"text": result.introduction}
        )
        _write_json(
            self.run_dir / "presenter" / "sections.json", [asdict(d) for d in result.drafts]
        )
        _write_json(self.run_dir / "presenter" / "summary.json", {"text": result.summary})

    def _stage_build(self) -> None:
        self._ensure_presented()
        result = self.presenter_result
        assert result is not None
        meta = ReportMeta(
            title=self.cfg.title,
            date=self.cfg.date,
            footer_template=self.cfg.footer_template,
            page_marker_every=self.cfg.page_marker_every,
        )
        document, markdown = assemble(
            result.introduction, result.drafts, result.summary, meta, self.run_dir
        )
        assembled_findings = lint(
            markdown,
            self.run_dir,
            self.cfg.date,
            len(result.drafts),
            self.cfg.page_marker_every,
            self.cfg.footer_template,
        )
        if not lints_clean(assembled_findings):
            raise PipelineError(
                f"assembled document failed lint: "
                f"{[f.rule for f in assembled_findings if not f.ok]}"
            )
        preserve = sorted({t for d in result.drafts for t in d.effect_tokens}) + [self.cfg.date]
        final_markdown, pass_log = revise(
            markdown, self.cfg.revision_passes, self.gateway, self.cfg, preserve
        )
        final_findings = lint(
            final_markdown,
            self.run_dir,
            self.cfg.date,
            len(result.drafts),
            self.cfg.page_marker_every,
            self.cfg.footer_template,
        )
        _write_json(self.run_dir / "lint.json", [asdict(f) for f in final_findings])
        _write_json(self.run_dir / "revision_log.json", pass_log)
        (self.run_dir / "report.md").write_text(final_markdown, encoding="utf-8")
        if not lints_clean(final_findings):
            raise PipelineError("final document failed lint after revision")

    # -- record loading for resume -------------------------------------------

    def _ensure_sniffed(self) -> None:
        if self.profile is None:
            self.profile = record_from_dict(
                DatasetProfile, _read_json(self.run_dir / "profile.json")
            )
        if self.report is None:
            self.report = record_from_dict(
                MetadataReport, _read_json(self.run_dir / "metadata_report.json")
            )

    def _ensure_artifacts(self) -> None:
        if self.artifacts is None:
            raw = _read_json(self.run_dir / "artifacts.json")
            self.artifacts = [record_from_dict(ChartArtifact, item) for item in raw]

    def _ensure_selected(self) -> None:
        if self.selected_by_id is None:
            self._ensure_artifacts()
            assert self.artifacts is not None
            selected = {}
            for artifact in self.artifacts:
                record = _read_json(
                    self.run_dir / "insights" / f"{artifact.direction.id}.json"
                )
                selected[artifact.direction.id] = [
                    record_from_dict(ScoredInsight, item) for item in record["selected"]
                ]
            self.selected_by_id = selected

    def _ensure_presented(self) -> None:
        if self.presenter_result is None:
            order = record_from_dict(
                TopicOrder, _read_json(self.run_dir / "presenter" / "topic_order.json")
            )
            introduction = _read_json(self.run_dir / "presenter" / "introduction.json")["text"]
            drafts = [
                SectionDraft(**item)
                for item in _read_json(self.run_dir / "presenter" / "sections.json")
            ]
            summary = _read_json(self.run_dir / "presenter" / "summary.json")["text"]
            self.presenter_result = PresenterResult(
                order=order, introduction=introduction, drafts=drafts, summary=summary
            )

    # -- driver ----------------------------------------------------------------

    _STAGE_BODIES = {
        "sniff": _stage_sniff,
        "visualize": _stage_visualize,
        "insight": _stage_insight,
        "present": _stage_present,
        "build": _stage_build,
    }

    def execute(self, from_stage: str = "sniff") -> int:
        """Run stages from from_stage onward; returns the process exit code."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if self.gateway is None:
            self.gateway = self._make_gateway()
        start_idx = STAGES.index(from_stage)
        for name in STAGES[start_idx:]:
            info = {"status": "running", "started_at": _utcnow()}
            self.manifest["stages"][name] = info
            self._save_manifest()
            started = time.monotonic()
            try:
                self._STAGE_BODIES[name](self)
            except (NoValidDirections,) as exc:
                self._log_error(name, exc)
                info.update(self._finish(started, "no_charts"))
                self._save_manifest()
                return EXIT_NO_CHARTS
            except PipelineError as exc:
                self._log_error(name, exc)
                info.update(self._finish(started, "failed"))
                self._save_manifest()
                raise
            except (IngestError, GatewayError) as exc:
                self._log_error(name, exc)
                info.update(self._finish(started, "failed"))
                self._save_manifest()
                raise PipelineError(str(exc)) from exc
            info.update(self._finish(started, "completed"))
            self._save_manifest()
            if name in ("visualize", "insight") and not self.artifacts:
                log.error("no chart survived gating; stopping before %s", STAGES[STAGES.index(name) + 1])
                return EXIT_NO_CHARTS
        return EXIT_OK

    @staticmethod
    def _finish(started: float, status: str) -> dict:
        return {
            "status": status,
            "finished_at": _utcnow(),
            "wall_ms": int((time.monotonic() - started) * 1000),
        }


def run_pipeline(cfg: PipelineConfig, data_path: str | Path, out_dir: str | Path) -> int:
    """Fresh run into out_dir; exit 0 on a report, 3 if gating emptied the run."""
    if not Path(data_path).is_file():
        raise PipelineError(f"dataset not found: {data_path}")
    if not cfg.date:
        cfg.date = date_type.today().isoformat()
    run = PipelineRun(cfg, data_path, out_dir)
    run.run_dir.mkdir(parents=True, exist_ok=True)
    run._init_manifest()
    return run.execute("sniff")


# Files that must already exist to resume from a given stage.
_RESUME_PREREQS: dict[str, tuple[str, ...]] = {
    "sniff": (),
    "visualize": ("profile.json", "metadata_report.json"),
    "insight": (
        "profile.json",
        "metadata_report.json",
        "directions.json",
        "artifacts.json",
        "outcomes",
        "judger",
    ),
    "present": (
        "profile.json",
        "metadata_report.json",
        "artifacts.json",
        "insights",
    ),
    "build": (
        "profile.json",
        "metadata_report.json",
        "artifacts.json",
        "presenter/topic_order.json",
        "presenter/introduction.json",
        "presenter/sections.json",
        "presenter/summary.json",
    ),
}


def _prune_transcript(run_dir: Path, from_stage: str) -> None:
    """Drop recorded calls for stages being re-run so each call stays unique."""
    path = run_dir / "transcript.jsonl"
    if not path.is_file():
        return
    keep_stages = set(STAGES[: STAGES.index(from_stage)])
    kept_lines = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        prefix = entry["stage_tag"].split(".", 1)[0]
        if _TAG_PREFIX_STAGE.get(prefix) in keep_stages:
            kept_lines.append(line)
    path.write_text("\n".join(kept_lines) + ("\n" if kept_lines else ""), encoding="utf-8")


def resume_pipeline(run_dir: str | Path, from_stage: str) -> int:
    """Continue a persisted run from a stage boundary."""
    run_dir = Path(run_dir)
    if from_stage not in STAGES:
        raise PipelineError(f"unknown stage {from_stage!r}; stages are {', '.join(STAGES)}")
    manifest_path = run_dir / "manifest.json"
    manifest = _read_json(manifest_path)
    if manifest.get("record_format_version") != RECORD_FORMAT_VERSION:
        raise PipelineError(
            f"record format {manifest.get('record_format_version')} does not match "
            f"{RECORD_FORMAT_VERSION}"
        )
    for name in STAGES[: STAGES.index(from_stage)]:
        if manifest["stages"].get(name, {}).get("status") != "completed":
            raise PipelineError(f"cannot resume from {from_stage}: stage {name} not completed")
    for rel in _RESUME_PREREQS[from_stage]:
        target = run_dir / rel
        if rel in ("outcomes", "judger", "insights"):
            if not target.is_dir() or not any(target.iterdir()):
                raise PipelineError(f"cannot resume from {from_stage}: missing records in {rel}/")
        elif not target.is_file():
            raise PipelineError(f"cannot resume from {from_stage}: missing {rel}")
    cfg = PipelineConfig(**manifest["config"])
    cfg.api_key = os.environ.get(ENV_API_KEY, cfg.api_key)
    run = PipelineRun(cfg, manifest["data_path"], run_dir)
    run.manifest = manifest
    _prune_transcript(run_dir, from_stage)
    return run.execute(from_stage)
