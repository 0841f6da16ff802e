"""Triple parsing, candidate generation, scoring, and top-k selection."""

import json
import random

import pytest

from a2pvis.contracts import InsightCandidate, RubricScore
from a2pvis.insights import (
    NoValidCandidates,
    TripleRejected,
    generate_candidates,
    parse_triple,
    score_candidate,
    select_top,
)

from conftest import make_artifact, make_gateway

GEN_TAG = "insight.generator"
EVAL_TAG = "insight.evaluator"


# Independent selection oracle: repeated linear-scan extraction with an
# explicit pairwise comparator, no sort() and no key tuples.
def _beats(a, b):
    (ia, (_, sa)) = a
    (ib, (_, sb)) = b
    if sa.total != sb.total:
        return sa.total > sb.total
    if sa.correctness_factuality != sb.correctness_factuality:
        return sa.correctness_factuality > sb.correctness_factuality
    if sa.specificity_traceability != sb.specificity_traceability:
        return sa.specificity_traceability > sb.specificity_traceability
    return ia < ib


def brute_force_top(scored, k):
    remaining = list(enumerate(scored))
    out = []
    while remaining and len(out) < k:
        best = remaining[0]
        for item in remaining[1:]:
            if _beats(item, best):
                best = item
        remaining.remove(best)
        out.append(best[1])
    return out


def triple(text, direction_id=1):
    return parse_triple(text, direction_id)


def canned_candidate(i=0, direction_id=1):
    return triple(
        f"Metric {i} rises ~{10 + i}% over the window. "
        "This likely reflects seasonal demand. "
        "Plan capacity ahead of the peak.",
        direction_id,
    )


# -- parse_triple ---------------------------------------------------------------


def test_parse_triple_happy_path_with_protected_tokens():
    candidate = triple(
        "Sales rise ~40% from Jan to Jun (Fig. 2). "
        "This likely reflects seasonal demand. "
        "Stock inventory ahead of Q2."
    )
    assert candidate.observation == "Sales rise ~40% from Jan to Jun (Fig. 2)."
    assert candidate.reason == "This likely reflects seasonal demand."
    assert candidate.so_what == "Stock inventory ahead of Q2."


def test_parse_triple_two_sentences_rejected():
    with pytest.raises(TripleRejected) as err:
        triple("Sales rose. That is all.")
    assert err.value.sentence_count == 2


def test_parse_triple_four_sentences_rejected():
    with pytest.raises(TripleRejected) as err:
        triple("One. Two. Three. Four.")
    assert err.value.sentence_count == 4


def test_parse_triple_decimals_not_split():
    candidate = triple(
        "Revenue is 3.5 vs. 2.1 units. Pricing may explain this. Revisit the discount policy."
    )
    assert candidate.observation == "Revenue is 3.5 vs. 2.1 units."


# -- generate_candidates ----------------------------------------------------------


def insight_list(texts):
    return json.dumps(texts)


def six_good_texts():
    return [
        f"Metric {i} rises ~{10 + i}% over the window. "
        "This likely reflects seasonal demand. "
        "Plan capacity ahead of the peak."
        for i in range(6)
    ]


def test_generate_candidates_six_valid(tmp_path, metadata_report, cfg):
    artifact = make_artifact(tmp_path)
    gw = make_gateway({(GEN_TAG, 0): insight_list(six_good_texts())}, tmp_path)
    out = generate_candidates(artifact, metadata_report, gw, cfg)
    assert len(out) == 6
    assert all(c.chart_direction_id == 1 for c in out)


def test_generate_candidates_topup_round(tmp_path, metadata_report, cfg):
    texts = six_good_texts()
    texts[4] = "Too short. Only two sentences."
    texts[5] = "One. Two. Three. Four."
    extra = [
        "Extra candidate gains ~5% reach. This may come from the promo. Repeat the promo next month."
    ]
    gw = make_gateway(
        {(GEN_TAG, 0): insight_list(texts), (GEN_TAG, 1): insight_list(extra)},
        tmp_path,
    )
    out = generate_candidates(make_artifact(tmp_path), metadata_report, gw, cfg)
    assert len(out) == 5  # 4 survivors + 1 topped up
    calls = (tmp_path / "transcript.jsonl").read_text().splitlines()
    assert len([l for l in calls if json.loads(l)["stage_tag"] == GEN_TAG]) == 2


def test_generate_candidates_caps_at_seven(tmp_path, metadata_report, cfg):
    texts = [
        f"Value {i} doubles in the sample. This could be a reporting change. Audit entry {i} next."
        for i in range(9)
    ]
    gw = make_gateway({(GEN_TAG, 0): insight_list(texts)})
    out = generate_candidates(make_artifact(tmp_path), metadata_report, gw, cfg)
    assert len(out) == 7


def test_generate_candidates_exhaustion(tmp_path, metadata_report, cfg):
    junk = insight_list(["Not a triple at all"])
    gw = make_gateway({(GEN_TAG, 0): junk, (GEN_TAG, 1): junk})
    with pytest.raises(NoValidCandidates):
        generate_candidates(make_artifact(tmp_path), metadata_report, gw, cfg)


# -- score_candidate ---------------------------------------------------------------


def rubric_json(c, s, i, w, extra=None):
    payload = {
        "correctness_factuality": c,
        "specificity_traceability": s,
        "insightfulness_depth": i,
        "so_what_quality": w,
    }
    if extra:
        payload.update(extra)
    return json.dumps(payload)


def test_score_candidate_totals_locally(tmp_path, metadata_report, cfg):
    gw = make_gateway({(EVAL_TAG, 0): rubric_json(4, 5, 3, 4)})
    score = score_candidate(canned_candidate(), make_artifact(tmp_path), gw, cfg)
    assert score.total == 16


def test_score_candidate_max(tmp_path, cfg):
    gw = make_gateway({(EVAL_TAG, 0): rubric_json(5, 5, 5, 5)})
    score = score_candidate(canned_candidate(), make_artifact(tmp_path), gw, cfg)
    assert score.total == 20


def test_score_candidate_ignores_model_total(tmp_path, cfg):
    gw = make_gateway({(EVAL_TAG, 0): rubric_json(4, 4, 4, 4, extra={"total": 19})})
    score = score_candidate(canned_candidate(), make_artifact(tmp_path), gw, cfg)
    assert score.total == 16


def test_score_candidate_out_of_range_triggers_reprompt(tmp_path, cfg):
    gw = make_gateway(
        {(EVAL_TAG, 0): rubric_json(7, 4, 4, 4), (EVAL_TAG, 1): rubric_json(4, 4, 4, 4)},
        tmp_path,
    )
    score = score_candidate(canned_candidate(), make_artifact(tmp_path), gw, cfg)
    assert score.correctness_factuality == 4
    lines = (tmp_path / "transcript.jsonl").read_text().splitlines()
    assert len(lines) == 2


# -- select_top ------------------------------------------------------------------


def scored_with_totals():
    # totals [16, 12, 18, 16, 9, 14]; the two 16s differ in correctness
    specs = [
        (5, 5, 3, 3),  # 16, correctness 5
        (3, 3, 3, 3),  # 12
        (5, 5, 4, 4),  # 18
        (4, 4, 4, 4),  # 16, correctness 4
        (2, 2, 2, 3),  # 9
        (4, 4, 3, 3),  # 14
    ]
    return [
        (canned_candidate(i), RubricScore.from_criteria(*spec))
        for i, spec in enumerate(specs)
    ]


def test_select_top_matches_documented_example():
    scored = scored_with_totals()
    out = select_top(scored, k=3)
    assert [si.score.total for si in out] == [18, 16, 16]
    assert out == [
        type(out[0])(candidate=c, score=s, rank=r)
        for r, (c, s) in enumerate(brute_force_top(scored, 3), start=1)
    ]
    # tie on 16 broken by correctness: candidate 0 (corr 5) before candidate 3
    assert out[1].candidate == scored[0][0]
    assert out[2].candidate == scored[3][0]


def test_select_top_clamps_and_ranks():
    scored = scored_with_totals()[:2]
    out = select_top(scored, k=3)
    assert [si.rank for si in out] == [1, 2]


def test_select_top_all_equal_preserves_input_order():
    scored = [
        (canned_candidate(i), RubricScore.from_criteria(3, 3, 3, 3)) for i in range(4)
    ]
    out = select_top(scored, k=3)
    assert [si.candidate for si in out] == [c for c, _ in scored[:3]]


def test_select_top_empty_input():
    with pytest.raises(ValueError, match="empty_input"):
        select_top([], k=3)


def test_select_top_against_oracle_200_randomized_sets():
    rng = random.Random(20240809)
    for _ in range(200):
        n = rng.randint(1, 9)
        scored = [
            (
                canned_candidate(i),
                RubricScore.from_criteria(
                    rng.randint(1, 5), rng.randint(1, 5), rng.randint(1, 5), rng.randint(1, 5)
                ),
            )
            for i in range(n)
        ]
        expected = brute_force_top(scored, 3)
        got = select_top(scored, k=3)
        assert [(si.candidate, si.score) for si in got] == expected
        assert [si.rank for si in got] == list(range(1, len(expected) + 1))
        for si in got:
            assert si.score.total == (
                si.score.correctness_factuality
                + si.score.specificity_traceability
                + si.score.insightfulness_depth
                + si.score.so_what_quality
            )
            for name in RubricScore.CRITERIA:
                assert 1 <= getattr(si.score, name) <= 5
