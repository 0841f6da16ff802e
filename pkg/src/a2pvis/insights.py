"""Insight candidates and rubric scoring for quality-gated charts.

Each gated chart gets 5-7 three-sentence candidates; each candidate is scored
on four 1-5 criteria at temperature 0; the total is always recomputed locally
and the top 3 are kept under a deterministic tie-break chain.
"""

from __future__ import annotations

import logging
from dataclasses import asdict

from .config import PipelineConfig
from .contracts import ChartArtifact, InsightCandidate, MetadataReport, RubricScore, ScoredInsight
from .gateway import Gateway
from .prompts import load_template
from .textscan import split_sentences

log = logging.getLogger(__name__)

STAGE_GENERATOR = "insight.generator"
STAGE_EVALUATOR = "insight.evaluator"


class NoValidCandidates(Exception):
    pass


class TripleRejected(ValueError):
    def __init__(self, sentence_count: int):
        self.sentence_count = sentence_count
        super().__init__(f"sentence_count={sentence_count}")


def parse_triple(raw_text: str, chart_direction_id: int = 0) -> InsightCandidate:
    """Accept exactly three sentences, mapped to observation / reason / so-what."""
    sentences = split_sentences(raw_text.strip())
    if len(sentences) != 3:
        raise TripleRejected(len(sentences))
    return InsightCandidate(
        chart_direction_id=chart_direction_id,
        observation=sentences[0],
        reason=sentences[1],
        so_what=sentences[2],
        raw_text=" ".join(sentences),
    )


def _candidate_prompt(artifact: ChartArtifact, report: MetadataReport, cfg: PipelineConfig) -> str:
    d = artifact.direction
    return (
        f"Produce {cfg.candidate_min}-{cfg.candidate_max} candidate insights for this chart.\n"
        f"Topic: {d.topic}\nChart type: {d.chart_type}\nVariables: {', '.join(d.variables)}\n\n"
        f"Dataset context:\n{report.narrative}"
    )


def generate_candidates(
    artifact: ChartArtifact, report: MetadataReport, gateway: Gateway, cfg: PipelineConfig
) -> list[InsightCandidate]:
    """5-7 parsed candidates per gated chart, topping up once if too few parse."""
    system = load_template("insight_generator")
    user = _candidate_prompt(artifact, report, cfg)
    texts = gateway.complete_structured(
        STAGE_GENERATOR,
        system,
        user,
        "insight-list",
        temperature=cfg.temperature_generate,
        max_tokens=cfg.max_tokens,
    )
    candidates = _parse_all(texts, artifact.direction.id)
    if len(candidates) < cfg.candidate_min:
        missing = cfg.candidate_max - len(candidates)
        topup_user = (
            user
            + f"\n\nOnly {len(candidates)} earlier candidates were exactly three sentences. "
            f"Produce {missing} more candidates, each exactly three sentences."
        )
        texts = gateway.complete_structured(
            STAGE_GENERATOR,
            system,
            topup_user,
            "insight-list",
            temperature=cfg.temperature_generate,
            max_tokens=cfg.max_tokens,
        )
        candidates.extend(_parse_all(texts, artifact.direction.id))
    if not candidates:
        raise NoValidCandidates(
            f"direction {artifact.direction.id}: no three-sentence candidates after two rounds"
        )
    return candidates[: cfg.candidate_max]


def _parse_all(texts: list[str], direction_id: int) -> list[InsightCandidate]:
    out = []
    for text in texts:
        try:
            out.append(parse_triple(text, direction_id))
        except TripleRejected as exc:
            log.debug("candidate rejected (%s): %.60s", exc, text)
    return out


def score_candidate(
    candidate: InsightCandidate, artifact: ChartArtifact, gateway: Gateway, cfg: PipelineConfig
) -> RubricScore:
    """Four criterion integers from the evaluator; the total is never trusted."""
    system = load_template("insight_evaluator")
    user = (
        "Score this insight.\n"
        f"Chart topic: {artifact.direction.topic} ({artifact.direction.chart_type} over "
        f"{', '.join(artifact.direction.variables)})\n\n"
        f"Insight:\n{candidate.raw_text}"
    )
    criteria = gateway.complete_structured(
        STAGE_EVALUATOR,
        system,
        user,
        "rubric-score",
        temperature=cfg.temperature_judge,
        max_tokens=512,
    )
    return RubricScore.from_criteria(
        criteria["correctness_factuality"],
        criteria["specificity_traceability"],
        criteria["insightfulness_depth"],
        criteria["so_what_quality"],
    )


def select_top(
    scored: list[tuple[InsightCandidate, RubricScore]], k: int = 3
) -> list[ScoredInsight]:
    """Top-k by total, ties broken by correctness, then specificity, then input order."""
    if not scored:
        raise ValueError("empty_input: nothing to select from")
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(
        enumerate(scored),
        key=lambda item: (
            -item[1][1].total,
            -item[1][1].correctness_factuality,
            -item[1][1].specificity_traceability,
            item[0],
        ),
    )
    return [
        ScoredInsight(candidate=cand, score=score, rank=rank)
        for rank, (_, (cand, score)) in enumerate(ordered[:k], start=1)
    ]


def analyze_chart(
    artifact: ChartArtifact, report: MetadataReport, gateway: Gateway, cfg: PipelineConfig
) -> tuple[list[ScoredInsight], dict]:
    """Selected top-k plus the full per-chart record for persistence."""
    candidates = generate_candidates(artifact, report, gateway, cfg)
    scored = [(c, score_candidate(c, artifact, gateway, cfg)) for c in candidates]
    selected = select_top(scored, cfg.insight_top_k)
    record = {
        "direction_id": artifact.direction.id,
        "candidates": [asdict(c) for c in candidates],
        "scores": [asdict(s) for _, s in scored],
        "selected": [asdict(s) for s in selected],
    }
    return selected, record
