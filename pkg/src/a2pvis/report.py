"""Markdown assembly, lint invariants, and the multi-pass revision.

Assembly produces the canonical document layout; lint re-derives every
structural invariant from the text; revision passes are kept only when a
structural diff proves they preserved headings, figure references, captions,
and grounding tokens.
"""

from __future__ import annotations

import logging
import re
import shutil
from dataclasses import dataclass
from pathlib import Path

from .config import PipelineConfig
from .contracts import ReportDocument, ReportSection
from .gateway import Gateway, GatewayError
from .presenter import SectionDraft
from .prompts import load_template

log = logging.getLogger(__name__)

STAGE_REVISOR = "report.revisor"

ASSETS_DIR = "report_assets"


class MissingFigureFile(Exception):
    pass


@dataclass(frozen=True)
class ReportMeta:
    title: str
    date: str
    footer_template: str
    page_marker_every: int


def assemble(
    introduction: str,
    drafts: list[SectionDraft],
    summary: str,
    meta: ReportMeta,
    run_dir: str | Path,
) -> tuple[ReportDocument, str]:
    """Compose the full Markdown document and copy figures under report_assets/.

    Figure paths in the document are relative to the report file so the run
    directory stays relocatable. Refuses to embed a figure whose rendered
    file is missing.
    """
    run_dir = Path(run_dir)
    assets = run_dir / ASSETS_DIR
    assets.mkdir(parents=True, exist_ok=True)

    sections: list[ReportSection] = []
    lines: list[str] = [f"# {meta.title}", "", f"*{meta.date}*", "", "## Introduction", ""]
    lines.append(introduction)
    lines.append("")
    for ordinal, draft in enumerate(drafts, start=1):
        source = run_dir / draft.figure_source
        if not source.is_file():
            raise MissingFigureFile(f"figure for direction {draft.direction_id}: {source}")
        figure_rel = f"{ASSETS_DIR}/figure_{ordinal}.png"
        shutil.copyfile(source, run_dir / figure_rel)
        caption = f"Figure {ordinal}: {draft.topic}"
        section = ReportSection(
            heading=draft.topic,
            body=draft.body,
            figure_ref=figure_rel,
            caption=caption,
            transition=draft.transition,
        )
        sections.append(section)
        lines.append(f"## {section.heading}")
        lines.append("")
        lines.append(f"![Figure {ordinal}]({figure_rel})")
        lines.append("")
        lines.append(f"*{caption}*")
        lines.append("")
        lines.append(section.body)
        lines.append("")
        if section.transition:
            lines.append(section.transition)
            lines.append("")
        if ordinal % meta.page_marker_every == 0:
            lines.append(meta.footer_template.format(page=ordinal // meta.page_marker_every))
            lines.append("")
    lines.append("## Summary")
    lines.append("")
    lines.append(summary)
    lines.append("")
    markdown = "\n".join(lines)
    document = ReportDocument(
        title=meta.title,
        date=meta.date,
        introduction=introduction,
        sections=sections,
        summary=summary,
        footer_template=meta.footer_template,
    )
    return document, markdown


_HEADING = re.compile(r"^(#{1,6})\s+(.*)$")
_FIGURE_REF = re.compile(r"^!\[[^\]]*\]\(([^)]+)\)$")
_CAPTION = re.compile(r"^\*(Figure (\d+): .*)\*$")


def headings_of(markdown: str) -> list[tuple[int, str]]:
    out = []
    for line in markdown.splitlines():
        match = _HEADING.match(line)
        if match:
            out.append((len(match.group(1)), match.group(2).strip()))
    return out


def figure_refs_of(markdown: str) -> list[str]:
    out = []
    for line in markdown.splitlines():
        match = _FIGURE_REF.match(line.strip())
        if match:
            out.append(match.group(1))
    return out


def captions_of(markdown: str) -> list[str]:
    out = []
    for line in markdown.splitlines():
        match = _CAPTION.match(line.strip())
        if match:
            out.append(match.group(1))
    return out


@dataclass(frozen=True)
class LintFinding:
    rule: str
    ok: bool
    detail: str


def lint(
    markdown: str,
    run_dir: str | Path,
    expected_date: str,
    expected_sections: int,
    page_marker_every: int,
    footer_template: str,
) -> list[LintFinding]:
    """Re-derive every structural invariant from the document text."""
    run_dir = Path(run_dir)
    findings: list[LintFinding] = []

    heads = headings_of(markdown)
    hier_ok = bool(heads) and heads[0][0] == 1
    ones = [h for h in heads if h[0] == 1]
    hier_ok = hier_ok and len(ones) == 1
    for prev, cur in zip(heads, heads[1:]):
        if cur[0] > prev[0] + 1:
            hier_ok = False
    findings.append(
        LintFinding(
            "heading_hierarchy",
            hier_ok,
            "one H1 and no skipped levels" if hier_ok else f"bad hierarchy: {heads}",
        )
    )

    refs = figure_refs_of(markdown)
    numbers = []
    for ref in refs:
        match = re.search(r"figure_(\d+)\.png$", ref)
        numbers.append(int(match.group(1)) if match else -1)
    contiguous = numbers == list(range(1, expected_sections + 1))
    findings.append(
        LintFinding(
            "figure_numbering",
            contiguous,
            f"{numbers}" if not contiguous else f"figures 1..{expected_sections} in order",
        )
    )

    embeds_ok = len(refs) == len(set(refs)) == expected_sections
    caption_numbers = [int(re.match(r"Figure (\d+):", c).group(1)) for c in captions_of(markdown)]
    embeds_ok = embeds_ok and caption_numbers == numbers
    lines = [line.strip() for line in markdown.splitlines() if line.strip()]
    for i, line in enumerate(lines):
        if _FIGURE_REF.match(line):
            has_caption = i + 1 < len(lines) and _CAPTION.match(lines[i + 1]) is not None
            embeds_ok = embeds_ok and has_caption
    findings.append(
        LintFinding(
            "figure_embeds",
            embeds_ok,
            "each figure embedded exactly once with caption" if embeds_ok else "embed/caption mismatch",
        )
    )

    files_ok = all((run_dir / ref).is_file() for ref in refs)
    findings.append(
        LintFinding("figure_files", files_ok, "all embedded files exist" if files_ok else f"{refs}")
    )

    date_ok = f"*{expected_date}*" in markdown
    findings.append(
        LintFinding("date", date_ok, expected_date if date_ok else "injected date missing")
    )

    marker_prefix_suffix = footer_template.split("{page}")
    marker_re = re.compile(
        "^" + re.escape(marker_prefix_suffix[0]) + r"(\d+)" + re.escape(marker_prefix_suffix[1]) + "$"
    )
    seen_sections = 0
    marker_hits: list[tuple[int, int]] = []  # (page number, sections seen so far)
    for line in markdown.splitlines():
        match = _HEADING.match(line)
        if match and len(match.group(1)) == 2 and match.group(2) not in ("Introduction", "Summary"):
            seen_sections += 1
        mm = marker_re.match(line.strip())
        if mm:
            marker_hits.append((int(mm.group(1)), seen_sections))
    expected_markers = expected_sections // page_marker_every
    markers_ok = [m[0] for m in marker_hits] == list(range(1, expected_markers + 1)) and all(
        m[1] == m[0] * page_marker_every for m in marker_hits
    )
    findings.append(
        LintFinding(
            "page_markers",
            markers_ok,
            f"{len(marker_hits)} markers at cadence {page_marker_every}"
            if markers_ok
            else f"marker placement {marker_hits}, expected {expected_markers}",
        )
    )
    return findings


def lints_clean(findings: list[LintFinding]) -> bool:
    return all(f.ok for f in findings)


_MD_FENCE = re.compile(r"```(?:markdown|md)?\n(.*?)```", re.DOTALL)


def _extract_markdown(text: str) -> str:
    match = _MD_FENCE.search(text)
    if match and match.group(1).lstrip().startswith("#"):
        return match.group(1).strip()
    return text.strip()


def structural_snapshot(markdown: str) -> dict:
    return {
        "headings": headings_of(markdown),
        "figure_refs": sorted(figure_refs_of(markdown)),
        "captions": sorted(captions_of(markdown)),
    }


def preservation_violations(
    old: str, new: str, preserve_tokens: list[str]
) -> list[str]:
    """Structural differences that make a revision pass unacceptable."""
    before, after = structural_snapshot(old), structural_snapshot(new)
    violations = []
    if before["headings"] != after["headings"]:
        violations.append("heading set or order changed")
    if before["figure_refs"] != after["figure_refs"]:
        violations.append("figure reference set changed")
    if before["captions"] != after["captions"]:
        violations.append("caption lines changed")
    for token in preserve_tokens:
        if token in old and token not in new:
            violations.append(f"grounding token {token!r} lost")
    return violations


def revise(
    markdown: str,
    passes: list[str],
    gateway: Gateway,
    cfg: PipelineConfig,
    preserve_tokens: list[str] | None = None,
) -> tuple[str, list[dict]]:
    """Sequential revision passes, each kept only if it preserves structure.

    A violating or unavailable pass is discarded (its input text carries
    forward), so revision is total: the result always lints like its input.
    """
    preserve_tokens = preserve_tokens or []
    current = markdown
    pass_log: list[dict] = []
    for name in passes:
        system = load_template(f"revisor_{name}")
        user = "Revise this Markdown report.\n\n" + current
        try:
            response = gateway.complete(
                STAGE_REVISOR,
                system,
                user,
                temperature=cfg.temperature_generate,
                max_tokens=max(cfg.max_tokens, 4096),
            )
        except GatewayError as exc:
            log.warning("revision pass %s unavailable: %s", name, exc)
            pass_log.append({"pass": name, "accepted": False, "violations": [f"gateway: {exc}"]})
            continue
        revised = _extract_markdown(response.text)
        if not revised.endswith("\n"):
            revised += "\n"
        violations = preservation_violations(current, revised, preserve_tokens)
        if violations:
            log.warning("revision pass %s discarded: %s", name, "; ".join(violations))
            pass_log.append({"pass": name, "accepted": False, "violations": violations})
            continue
        current = revised
        pass_log.append({"pass": name, "accepted": True, "violations": []})
    return current, pass_log
