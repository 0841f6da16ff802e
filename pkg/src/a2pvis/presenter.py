"""Narrative stages between gated charts and the assembled document.

Every operation here yields usable text even when the model fails: orderings
fall back to generation order, prose falls back to deterministic templates,
and bridges that invent links are dropped rather than repaired.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .config import PipelineConfig
from .contracts import ChartArtifact, Direction, MetadataReport, ScoredInsight, TopicOrder
from .gateway import Gateway, GatewayError
from .prompts import load_template
from .textscan import count_sentences, effect_token, mentioned_columns, tokenize, topic_keywords

log = logging.getLogger(__name__)

STAGE_RANKER = "presenter.ranker"
STAGE_INTRODUCTOR = "presenter.introductor"
STAGE_COMPOSER = "presenter.composer"
STAGE_TRANSITOR = "presenter.transitor"
STAGE_SUMMARIZER = "presenter.summarizer"


@dataclass
class SectionDraft:
    """One chart's narrative material, ready for assembly."""

    direction_id: int
    topic: str
    chart_type: str
    variables: list[str]
    body: str
    figure_source: str  # run-dir-relative path of the rendered chart
    transition: str = ""
    effect_tokens: list[str] = field(default_factory=list)
    top_insights: list[str] = field(default_factory=list)


@dataclass
class PresenterResult:
    order: TopicOrder
    introduction: str
    drafts: list[SectionDraft]
    summary: str


def rank_topics(
    artifacts: list[ChartArtifact], gateway: Gateway, cfg: PipelineConfig
) -> TopicOrder:
    """Model-chosen narrative order, validated as a permutation; id order otherwise."""
    if not artifacts:
        raise ValueError("rank_topics requires at least one artifact")
    ids = [a.direction.id for a in artifacts]
    if len(ids) == 1:
        return TopicOrder(ordered_direction_ids=ids, rationale="single topic")
    system = load_template("ranker")
    listing = "\n".join(
        f"- id {a.direction.id}: {a.direction.topic} ({a.direction.chart_type} over "
        f"{', '.join(a.direction.variables)})"
        for a in artifacts
    )
    user = f"Order these topics into a coherent narrative.\n{listing}"
    try:
        payload = gateway.complete_structured(
            STAGE_RANKER,
            system,
            user,
            "topic-order",
            temperature=cfg.temperature_judge,
            max_tokens=512,
        )
    except GatewayError as exc:
        log.warning("ranker unavailable, falling back to generation order: %s", exc)
        return TopicOrder(ordered_direction_ids=sorted(ids), rationale="generation order")
    if sorted(payload["order"]) != sorted(ids):
        log.warning("ranker returned a non-permutation %s, using generation order", payload["order"])
        return TopicOrder(ordered_direction_ids=sorted(ids), rationale="generation order")
    return TopicOrder(ordered_direction_ids=payload["order"], rationale=payload["rationale"])


_ROWS_FACT = re.compile(r"(\d[\d,]*)\s+rows?\b")
_COLS_FACT = re.compile(r"(\d[\d,]*)\s+columns?\b")


def _count_claims_ok(text: str, row_count: int, column_count: int) -> bool:
    """Every stated row/column count must equal the profile's values."""
    for match in _ROWS_FACT.finditer(text):
        if int(match.group(1).replace(",", "")) != row_count:
            return False
    for match in _COLS_FACT.finditer(text):
        if int(match.group(1).replace(",", "")) != column_count:
            return False
    return True


def template_introduction(report: MetadataReport, ordered_topics: list[str]) -> str:
    profile = report.profile
    lines = [
        f"This report analyzes a dataset of {profile.row_count} rows and "
        f"{len(profile.column_names)} columns "
        f"({', '.join(profile.column_names)}).",
        "",
        "It examines, in order:",
    ]
    for i, topic in enumerate(ordered_topics, start=1):
        lines.append(f"{i}. {topic}")
    return "\n".join(lines)


def write_introduction(
    order: TopicOrder,
    report: MetadataReport,
    topics_by_id: dict[int, str],
    gateway: Gateway,
    cfg: PipelineConfig,
) -> str:
    """Grounded overview plus per-topic teasers in ranked order."""
    profile = report.profile
    ordered_topics = [topics_by_id[i] for i in order.ordered_direction_ids]
    system = load_template("introductor")
    facts = (
        f"The dataset has exactly {profile.row_count} rows and "
        f"{len(profile.column_names)} columns: {', '.join(profile.column_names)}."
    )
    user = (
        "Draft the report introduction.\n"
        f"Dataset facts (use these numbers verbatim): {facts}\n"
        "Upcoming topics in order:\n"
        + "\n".join(f"{i}. {t}" for i, t in enumerate(ordered_topics, start=1))
    )
    for round_no in range(2):
        try:
            response = gateway.complete(
                STAGE_INTRODUCTOR,
                system,
                user if round_no == 0 else user + "\n\nYour previous draft misstated the "
                "dataset size. Use the given row and column counts exactly.",
                temperature=cfg.temperature_generate,
                max_tokens=cfg.max_tokens,
            )
        except GatewayError as exc:
            log.warning("introductor unavailable: %s", exc)
            break
        text = response.text.strip()
        if _count_claims_ok(text, profile.row_count, len(profile.column_names)):
            return text
    log.warning("introduction grounding failed, using template")
    return template_introduction(report, ordered_topics)


def template_section(insights: list[ScoredInsight]) -> str:
    lines = []
    for si in insights:
        lines.append(f"Claim: {si.candidate.observation}")
        lines.append(f"Evidence: {si.candidate.reason}")
        lines.append(f"Implication: {si.candidate.so_what}")
        lines.append("")
    return "\n".join(lines).strip()


def compose_section(
    artifact: ChartArtifact,
    insights: list[ScoredInsight],
    report: MetadataReport,
    ordinal: int,
    gateway: Gateway,
    cfg: PipelineConfig,
) -> str:
    """Section prose weaving exactly the given insights, citing the figure."""
    direction = artifact.direction
    citation = f"Figure {ordinal}"
    tokens = [t for t in (effect_token(si.candidate.observation) for si in insights) if t]
    system = load_template("composer")
    user = (
        f"Write the section for the topic: {direction.topic}\n"
        f"Cite the chart as {citation!r} (exact token).\n"
        f"Chart: {direction.chart_type} over {', '.join(direction.variables)}\n"
        "Weave in exactly these insights, keeping their magnitudes verbatim:\n"
        + "\n".join(f"- {si.candidate.raw_text}" for si in insights)
    )
    for round_no in range(2):
        try:
            response = gateway.complete(
                STAGE_COMPOSER,
                system,
                user if round_no == 0 else user + "\n\nYour previous draft dropped the "
                "figure citation or an insight magnitude. Keep them all verbatim.",
                temperature=cfg.temperature_generate,
                max_tokens=cfg.max_tokens,
            )
        except GatewayError as exc:
            log.warning("composer unavailable: %s", exc)
            break
        body = response.text.strip()
        grounded = citation in body and all(t in body for t in tokens)
        if grounded:
            return body
    log.warning("section grounding failed for direction %d, using template", direction.id)
    return f"{citation} shows {direction.topic}.\n\n" + template_section(insights)


def write_transition(
    current_topic: str,
    current_variables: list[str],
    next_direction: Direction,
    profile_columns: list[str],
    gateway: Gateway,
    cfg: PipelineConfig,
) -> str:
    """At most two bridge sentences; dropped entirely on any invented link."""
    system = load_template("transitor")
    user = (
        "Write a bridge between these adjacent report sections.\n"
        f"Current: {current_topic} (variables: {', '.join(current_variables)})\n"
        f"Next: {next_direction.topic} (variables: {', '.join(next_direction.variables)})"
    )
    try:
        response = gateway.complete(
            STAGE_TRANSITOR,
            system,
            user,
            temperature=cfg.temperature_generate,
            max_tokens=256,
        )
    except GatewayError as exc:
        log.info("transitor unavailable, sections will abut: %s", exc)
        return ""
    bridge = response.text.strip()
    if count_sentences(bridge) > 2:
        log.info("bridge dropped: more than two sentences")
        return ""
    allowed = set(current_variables) | set(next_direction.variables)
    stray = mentioned_columns(bridge, profile_columns) - allowed
    if stray:
        log.info("bridge dropped: references columns %s outside both sections", sorted(stray))
        return ""
    return bridge


def template_summary(sections: list[SectionDraft]) -> str:
    lines = ["Key findings:"]
    for draft in sections:
        top = draft.top_insights[0] if draft.top_insights else draft.topic
        lines.append(f"- {draft.topic}: {top}")
    return "\n".join(lines)


def summarize(
    introduction: str, sections: list[SectionDraft], gateway: Gateway, cfg: PipelineConfig
) -> str:
    """Closing summary that must mention every section's topic."""
    if not sections:
        raise ValueError("summarize requires at least one section")
    system = load_template("summarizer")
    user = (
        "Summarize the report.\n"
        "Sections and their leading insights:\n"
        + "\n".join(
            f"- {d.topic}: {d.top_insights[0] if d.top_insights else ''}" for d in sections
        )
    )

    def covers_all(text: str) -> bool:
        tokens = {t.lower() for t in tokenize(text)}
        return all(
            (topic_keywords(d.topic) & tokens) or not topic_keywords(d.topic)
            for d in sections
        )

    for round_no in range(2):
        try:
            response = gateway.complete(
                STAGE_SUMMARIZER,
                system,
                user if round_no == 0 else user + "\n\nYour previous summary skipped at "
                "least one topic. Mention every section's topic.",
                temperature=cfg.temperature_generate,
                max_tokens=cfg.max_tokens,
            )
        except GatewayError as exc:
            log.warning("summarizer unavailable: %s", exc)
            break
        text = response.text.strip()
        if covers_all(text):
            return text
    log.warning("summary coverage failed, using template")
    return template_summary(sections)


def present(
    artifacts: list[ChartArtifact],
    selected_by_id: dict[int, list[ScoredInsight]],
    report: MetadataReport,
    gateway: Gateway,
    cfg: PipelineConfig,
) -> PresenterResult:
    """Rank, introduce, compose, bridge, and summarize the gated charts."""
    order = rank_topics(artifacts, gateway, cfg)
    by_id = {a.direction.id: a for a in artifacts}
    topics_by_id = {a.direction.id: a.direction.topic for a in artifacts}
    introduction = write_introduction(order, report, topics_by_id, gateway, cfg)

    drafts: list[SectionDraft] = []
    for ordinal, direction_id in enumerate(order.ordered_direction_ids, start=1):
        artifact = by_id[direction_id]
        insights = selected_by_id[direction_id]
        body = compose_section(artifact, insights, report, ordinal, gateway, cfg)
        drafts.append(
            SectionDraft(
                direction_id=direction_id,
                topic=artifact.direction.topic,
                chart_type=artifact.direction.chart_type,
                variables=list(artifact.direction.variables),
                body=body,
                figure_source=artifact.outcome.figure_path or "",
                effect_tokens=[
                    t
                    for t in (effect_token(si.candidate.observation) for si in insights)
                    if t
                ],
                top_insights=[si.candidate.raw_text for si in insights],
            )
        )
    for i in range(len(drafts) - 1):
        next_artifact = by_id[drafts[i + 1].direction_id]
        drafts[i].transition = write_transition(
            drafts[i].topic,
            drafts[i].variables,
            next_artifact.direction,
            report.profile.column_names,
            gateway,
            cfg,
        )
    summary = summarize(introduction, drafts, gateway, cfg)
    return PresenterResult(order=order, introduction=introduction, drafts=drafts, summary=summary)
