"""Direction filtering, script contracts, the repair loop, and the chart gate."""

import json

import pytest
from PIL import Image

from a2pvis.contracts import Direction, ExecutionOutcome, GeneratedScript
from a2pvis.executors import FakeExecutor
from a2pvis.visualizer import (
    NoValidDirections,
    ScriptContractViolation,
    TIMEOUT_NOTICE,
    execute_script,
    generate_directions,
    generate_script,
    judge_chart,
    rectify,
    run_visualization_loop,
)

from conftest import make_gateway

DIR_TAG = "visualizer.direction_generator"
SCRIPT_TAG = "visualizer.script_generator"
RECT_TAG = "visualizer.rectifier"
JUDGE_TAG = "visualizer.chart_judger"


def directions_payload(items):
    return json.dumps(items)


def good_script(path="charts/1.png", variables=("date", "sales")):
    vars_line = ", ".join(f'"{v}"' for v in variables)
    return (
        "```python\nimport matplotlib\nmatplotlib.use('Agg')\n"
        f"cols = [{vars_line}]\n"
        f"fig.savefig('{path}')\n```"
    )


def transcript_entries(tmp_path):
    text = (tmp_path / "transcript.jsonl").read_text()
    return [json.loads(line) for line in text.splitlines()]


# -- generate_directions -------------------------------------------------------


def test_generate_directions_filters_and_keeps_valid(metadata_report, cfg, tmp_path):
    items = [
        {"topic": "sales over time", "chart_type": "line", "variables": ["date", "sales"]},
        {"topic": "sales by city", "chart_type": "bar", "variables": ["city", "sales"]},
        {"topic": "bogus", "chart_type": "bar", "variables": ["revenue"]},  # unknown column
        {"topic": "distribution", "chart_type": "histogram", "variables": ["sales"]},
        {"topic": "sales spread", "chart_type": "box", "variables": ["city", "sales"]},
        {"topic": "pairwise", "chart_type": "scatter", "variables": ["sales", "date"]},
    ]
    gw = make_gateway({(DIR_TAG, 0): directions_payload(items)}, tmp_path)
    out = generate_directions(metadata_report, gw, cfg)
    assert [d.topic for d in out] == [
        "sales over time", "sales by city", "distribution", "sales spread", "pairwise",
    ]
    assert [d.id for d in out] == [1, 2, 3, 4, 5]


def test_generate_directions_dedups_same_type_and_variable_set(metadata_report, cfg):
    items = [
        {"topic": "first", "chart_type": "scatter", "variables": ["date", "sales"]},
        {"topic": "second", "chart_type": "scatter", "variables": ["sales", "date"]},
    ]
    gw = make_gateway({(DIR_TAG, 0): directions_payload(items)})
    out = generate_directions(metadata_report, gw, cfg)
    assert len(out) == 1
    assert out[0].topic == "first"


def test_generate_directions_semantic_reprompt_then_success(metadata_report, cfg, tmp_path):
    bad = [{"topic": "t", "chart_type": "pie3d", "variables": ["nope"]}]
    good = [{"topic": "t", "chart_type": "line", "variables": ["date", "sales"]}]
    gw = make_gateway(
        {(DIR_TAG, 0): directions_payload(bad), (DIR_TAG, 1): directions_payload(good)},
        tmp_path,
    )
    out = generate_directions(metadata_report, gw, cfg)
    assert len(out) == 1
    entries = transcript_entries(tmp_path)
    assert "rejected" in entries[1]["request"]["user_prompt"]


def test_generate_directions_exhaustion(metadata_report, cfg):
    bad = [{"topic": "t", "chart_type": "pie3d", "variables": ["nope"]}]
    gw = make_gateway({(DIR_TAG, i): directions_payload(bad) for i in range(2)})
    with pytest.raises(NoValidDirections):
        generate_directions(metadata_report, gw, cfg)


def test_generate_directions_caps_at_n(metadata_report, cfg):
    items = [
        {"topic": f"t{i}", "chart_type": "bar", "variables": ["city", "sales"][: 1 + i % 2]}
        for i in range(2)
    ] + [
        {"topic": "a", "chart_type": "line", "variables": ["date", "sales"]},
        {"topic": "b", "chart_type": "histogram", "variables": ["sales"]},
        {"topic": "c", "chart_type": "scatter", "variables": ["date", "sales"]},
    ]
    gw = make_gateway({(DIR_TAG, 0): directions_payload(items)})
    out = generate_directions(metadata_report, gw, cfg, n=3)
    assert len(out) == 3


# -- generate_script -----------------------------------------------------------


def test_generate_script_happy_path(profile, cfg, tmp_path):
    d = Direction(id=1, topic="sales over time", chart_type="line", variables=["date", "sales"])
    gw = make_gateway({(SCRIPT_TAG, 0): good_script()}, tmp_path)
    script = generate_script(d, profile, gw, cfg, "data.csv")
    assert script.attempt == 0
    assert script.source.count("charts/1.png") == 1
    assert "date" in script.source and "sales" in script.source


def test_generate_script_reprompt_recovers(profile, cfg, tmp_path):
    d = Direction(id=1, topic="t", chart_type="line", variables=["date", "sales"])
    gw = make_gateway(
        {(SCRIPT_TAG, 0): "```python\nprint('no path, no vars')\n```",
         (SCRIPT_TAG, 1): good_script()},
        tmp_path,
    )
    script = generate_script(d, profile, gw, cfg, "data.csv")
    assert script.attempt == 0
    entries = transcript_entries(tmp_path)
    assert len(entries) == 2
    assert "rejected" in entries[1]["request"]["user_prompt"]


def test_generate_script_contract_violation_after_retry(profile, cfg):
    d = Direction(id=1, topic="t", chart_type="line", variables=["date", "sales"])
    bad = "```python\nnothing relevant\n```"
    gw = make_gateway({(SCRIPT_TAG, 0): bad, (SCRIPT_TAG, 1): bad})
    with pytest.raises(ScriptContractViolation):
        generate_script(d, profile, gw, cfg, "data.csv")


# -- execute_script --------------------------------------------------------------


def make_script(direction_id=1, attempt=0):
    path = f"charts/{direction_id}.png"
    return GeneratedScript(
        direction_id=direction_id, dialect="python-matplotlib",
        source=f"savefig('{path}')", output_figure_path=path, attempt=attempt,
    )


def test_execute_success_writes_figure_and_outcome(tmp_path):
    executor = FakeExecutor(tmp_path)
    outcome = execute_script(make_script(), executor, tmp_path)
    assert outcome.status == "success"
    figure = tmp_path / "charts/1.png"
    assert figure.stat().st_size > 0
    persisted = json.loads((tmp_path / "outcomes/1_0.json").read_text())
    assert persisted["status"] == "success"


def test_execute_error_has_trace(tmp_path):
    executor = FakeExecutor(tmp_path, plans={1: ["error"]})
    outcome = execute_script(make_script(), executor, tmp_path)
    assert outcome.status == "error"
    assert "ZeroDivisionError" in outcome.error_trace


def test_execute_timeout(tmp_path):
    executor = FakeExecutor(tmp_path, plans={1: ["timeout"]}, timeout_s=2)
    outcome = execute_script(make_script(), executor, tmp_path)
    assert outcome.status == "timeout"
    assert outcome.wall_time_ms >= 2000


# -- rectify ---------------------------------------------------------------------


def error_outcome(trace="NameError: name 'pdd' is not defined", attempt=0):
    return ExecutionOutcome(direction_id=1, attempt=attempt, status="error",
                            error_trace=trace, figure_path=None, wall_time_ms=3)


def test_rectify_increments_attempt_and_quotes_trace(cfg, tmp_path):
    script = make_script()
    gw = make_gateway({(RECT_TAG, 0): good_script()}, tmp_path)
    repaired = rectify(script, error_outcome(), gw, cfg, ["date", "sales"])
    assert repaired.attempt == 1
    prompt = transcript_entries(tmp_path)[0]["request"]["user_prompt"]
    assert "NameError: name 'pdd' is not defined" in prompt
    assert script.source in prompt


def test_rectify_timeout_uses_notice_not_trace(cfg, tmp_path):
    timeout = ExecutionOutcome(direction_id=1, attempt=0, status="timeout",
                               error_trace=None, figure_path=None, wall_time_ms=30001)
    gw = make_gateway({(RECT_TAG, 0): good_script()}, tmp_path)
    rectify(make_script(), timeout, gw, cfg, ["date", "sales"])
    prompt = transcript_entries(tmp_path)[0]["request"]["user_prompt"]
    assert TIMEOUT_NOTICE in prompt


def test_rectify_contract_recheck_fails_fast(cfg):
    gw = make_gateway({(RECT_TAG, 0): "```python\ndropped the path\n```"})
    with pytest.raises(ScriptContractViolation):
        rectify(make_script(), error_outcome(), gw, cfg, ["date", "sales"])


# -- judge_chart -------------------------------------------------------------------


def success_outcome(direction_id=1, attempt=0):
    return ExecutionOutcome(direction_id=direction_id, attempt=attempt, status="success",
                            error_trace=None, figure_path=f"charts/{direction_id}.png",
                            wall_time_ms=9)


def make_direction(direction_id=1):
    return Direction(id=direction_id, topic="sales over time", chart_type="line",
                     variables=["date", "sales"])


def judger_pass_entry(i=0):
    return {(JUDGE_TAG, i): json.dumps({"verdict": "pass", "reason": "clear trend"})}


def test_judge_zero_byte_figure_fails_without_gateway_call(cfg, tmp_path):
    (tmp_path / "charts").mkdir(parents=True)
    (tmp_path / "charts/1.png").write_bytes(b"")
    gw = make_gateway(judger_pass_entry(), tmp_path)
    verdict, reason = judge_chart(success_outcome(), make_direction(), gw, cfg, tmp_path)
    assert (verdict, reason) == ("fail", "empty_figure")
    assert not (tmp_path / "transcript.jsonl").exists()


def test_judge_missing_figure(cfg, tmp_path):
    gw = make_gateway({})
    verdict, reason = judge_chart(success_outcome(), make_direction(), gw, cfg, tmp_path)
    assert (verdict, reason) == ("fail", "missing_figure")


def test_judge_small_figure(cfg, tmp_path):
    path = tmp_path / "charts/1.png"
    path.parent.mkdir(parents=True)
    Image.new("RGB", (2, 2)).save(path)  # well under 1 KiB
    verdict, reason = judge_chart(success_outcome(), make_direction(), make_gateway({}), cfg, tmp_path)
    assert (verdict, reason) == ("fail", "small_figure")


def test_judge_undecodable_figure(cfg, tmp_path):
    path = tmp_path / "charts/1.png"
    path.parent.mkdir(parents=True)
    path.write_bytes(b"not an image " * 100)
    verdict, reason = judge_chart(success_outcome(), make_direction(), make_gateway({}), cfg, tmp_path)
    assert (verdict, reason) == ("fail", "invalid_image")


def test_judge_constant_white_image_is_blank(cfg, tmp_path):
    path = tmp_path / "charts/1.png"
    path.parent.mkdir(parents=True)
    Image.new("RGB", (640, 480), (255, 255, 255)).save(path, compress_level=0)
    assert path.stat().st_size >= 1024
    verdict, reason = judge_chart(success_outcome(), make_direction(), make_gateway({}), cfg, tmp_path)
    assert (verdict, reason) == ("fail", "blank_chart")


def test_judge_valid_image_with_replay_pass(cfg, tmp_path):
    FakeExecutor(tmp_path).run(make_script())
    gw = make_gateway(judger_pass_entry(), tmp_path)
    verdict, reason = judge_chart(success_outcome(), make_direction(), gw, cfg, tmp_path)
    assert verdict == "pass"
    assert reason == "clear trend"


def test_judge_unreachable_gateway_fails_conservatively(cfg, tmp_path):
    FakeExecutor(tmp_path).run(make_script())
    verdict, reason = judge_chart(success_outcome(), make_direction(), make_gateway({}), cfg, tmp_path)
    assert (verdict, reason) == ("fail", "judger_unavailable")


# -- run_visualization_loop ----------------------------------------------------------


def loop_directions():
    return [
        Direction(id=1, topic="trend", chart_type="line", variables=["date", "sales"]),
        Direction(id=2, topic="by city", chart_type="bar", variables=["city", "sales"]),
        Direction(id=3, topic="spread", chart_type="histogram", variables=["sales"]),
    ]


def test_loop_mixed_outcomes(profile, cfg, tmp_path):
    # d1 succeeds; d2 fails once then succeeds; d3 fails three times.
    entries = {}
    for i, d in enumerate(loop_directions()):
        entries[(SCRIPT_TAG, i)] = good_script(f"charts/{d.id}.png", d.variables)
    entries[(RECT_TAG, 0)] = good_script("charts/2.png", ["city", "sales"])
    entries[(RECT_TAG, 1)] = good_script("charts/3.png", ["sales"])
    entries[(RECT_TAG, 2)] = good_script("charts/3.png", ["sales"])
    entries.update(judger_pass_entry(0))
    entries.update(judger_pass_entry(1))
    gw = make_gateway(entries, tmp_path)
    executor = FakeExecutor(
        tmp_path,
        plans={2: ["error", "success"], 3: ["error", "error", "error"]},
    )
    artifacts, failures = run_visualization_loop(
        loop_directions(), profile, executor, gw, cfg, tmp_path, "data.csv"
    )
    assert [a.direction.id for a in artifacts] == [1, 2]
    assert artifacts[0].outcome.attempt == 0
    assert artifacts[1].outcome.attempt == 1
    assert set(failures) == {3}
    assert failures[3] == "execution_error_after_3_attempts"
    rect_calls = [e for e in transcript_entries(tmp_path) if e["stage_tag"] == RECT_TAG]
    assert len(rect_calls) == 3  # one for d2, two for d3


def test_loop_budget_one_means_no_rectify(profile, cfg, tmp_path):
    cfg.max_attempts = 1
    entries = {(SCRIPT_TAG, 0): good_script("charts/1.png", ["date", "sales"])}
    gw = make_gateway(entries, tmp_path)
    executor = FakeExecutor(tmp_path, plans={1: ["error"]})
    artifacts, failures = run_visualization_loop(
        loop_directions()[:1], profile, executor, gw, cfg, tmp_path, "data.csv"
    )
    assert artifacts == []
    assert failures[1] == "execution_error_after_1_attempts"
    assert all(e["stage_tag"] != RECT_TAG for e in transcript_entries(tmp_path))


def test_loop_empty_directions(profile, cfg, tmp_path):
    gw = make_gateway({}, tmp_path)
    artifacts, failures = run_visualization_loop(
        [], profile, FakeExecutor(tmp_path), gw, cfg, tmp_path, "data.csv"
    )
    assert artifacts == [] and failures == {}


def test_loop_judger_fail_is_recorded_not_returned(profile, cfg, tmp_path):
    entries = {
        (SCRIPT_TAG, 0): good_script("charts/1.png", ["date", "sales"]),
        (JUDGE_TAG, 0): json.dumps({"verdict": "fail", "reason": "degenerate axis"}),
    }
    gw = make_gateway(entries, tmp_path)
    artifacts, failures = run_visualization_loop(
        loop_directions()[:1], profile, FakeExecutor(tmp_path), gw, cfg, tmp_path, "data.csv"
    )
    assert artifacts == []
    assert failures[1] == "judger_fail: degenerate axis"
    judgement = json.loads((tmp_path / "judger/1.json").read_text())
    assert judgement == {"verdict": "fail", "reason": "degenerate axis"}


def test_loop_persists_scripts_per_attempt(profile, cfg, tmp_path):
    entries = {
        (SCRIPT_TAG, 0): good_script("charts/1.png", ["date", "sales"]),
        (RECT_TAG, 0): good_script("charts/1.png", ["date", "sales"]),
        (JUDGE_TAG, 0): json.dumps({"verdict": "pass", "reason": "ok"}),
    }
    gw = make_gateway(entries, tmp_path)
    executor = FakeExecutor(tmp_path, plans={1: ["error", "success"]})
    artifacts, _ = run_visualization_loop(
        loop_directions()[:1], profile, executor, gw, cfg, tmp_path, "data.csv"
    )
    assert (tmp_path / "scripts/1_0.src").is_file()
    assert (tmp_path / "scripts/1_1.src").is_file()
    assert (tmp_path / "outcomes/1_0.json").is_file()
    assert (tmp_path / "outcomes/1_1.json").is_file()
    assert artifacts[0].script.attempt == 1
