"""Extraction and validation of structured payloads from chat responses.

Model replies are prose-tolerant: the first well-formed JSON object or array
found in the text (fenced or inline) is the payload. Validators normalize the
payload or raise SchemaViolation with a message suitable for a re-prompt.
"""

from __future__ import annotations

import json
import re
from typing import Any, Callable


class SchemaViolation(ValueError):
    """Payload missing or failing its registered schema."""


_FENCE = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.DOTALL)


def extract_payload(text: str) -> Any:
    """First well-formed JSON object/array in the text, fences and prose tolerated."""
    for block in _FENCE.findall(text):
        candidate = block.strip()
        try:
            value = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(value, (dict, list)):
            return value
    decoder = json.JSONDecoder()
    for idx, ch in enumerate(text):
        if ch not in "{[":
            continue
        try:
            value, _ = decoder.raw_decode(text[idx:])
        except json.JSONDecodeError:
            continue
        if isinstance(value, (dict, list)):
            return value
    raise SchemaViolation("no JSON object or array found in response")


def _as_str(value: Any, what: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise SchemaViolation(f"{what} must be a non-empty string")
    return value.strip()


def _validate_direction_list(payload: Any) -> list[dict[str, Any]]:
    if not isinstance(payload, list) or not payload:
        raise SchemaViolation("expected a non-empty JSON array of direction objects")
    out = []
    for i, item in enumerate(payload):
        if not isinstance(item, dict):
            raise SchemaViolation(f"direction {i} must be an object")
        topic = _as_str(item.get("topic"), f"direction {i} topic")
        chart_type = _as_str(item.get("chart_type"), f"direction {i} chart_type")
        variables = item.get("variables")
        if (
            not isinstance(variables, list)
            or not variables
            or not all(isinstance(v, str) and v for v in variables)
        ):
            raise SchemaViolation(f"direction {i} variables must be a non-empty list of strings")
        out.append({"topic": topic, "chart_type": chart_type, "variables": list(variables)})
    return out


def _validate_rubric_score(payload: Any) -> dict[str, int]:
    criteria = (
        "correctness_factuality",
        "specificity_traceability",
        "insightfulness_depth",
        "so_what_quality",
    )
    if not isinstance(payload, dict):
        raise SchemaViolation("expected a JSON object with the four criterion scores")
    out = {}
    for name in criteria:
        value = payload.get(name)
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaViolation(f"{name} must be an integer")
        if not 1 <= value <= 5:
            raise SchemaViolation(f"{name} must be in the range 1-5, got {value}")
        out[name] = value
    return out


def _validate_topic_order(payload: Any) -> dict[str, Any]:
    if not isinstance(payload, dict):
        raise SchemaViolation("expected a JSON object with 'order' and 'rationale'")
    order = payload.get("order")
    if (
        not isinstance(order, list)
        or not order
        or not all(isinstance(i, int) and not isinstance(i, bool) for i in order)
    ):
        raise SchemaViolation("'order' must be a non-empty list of integers")
    rationale = payload.get("rationale", "")
    if not isinstance(rationale, str):
        raise SchemaViolation("'rationale' must be a string")
    return {"order": list(order), "rationale": rationale}


def _validate_judger_verdict(payload: Any) -> dict[str, str]:
    if not isinstance(payload, dict):
        raise SchemaViolation("expected a JSON object with 'verdict' and 'reason'")
    verdict = payload.get("verdict")
    if verdict not in ("pass", "fail"):
        raise SchemaViolation("'verdict' must be 'pass' or 'fail'")
    reason = payload.get("reason", "")
    if not isinstance(reason, str):
        raise SchemaViolation("'reason' must be a string")
    return {"verdict": verdict, "reason": reason}


def _validate_insight_list(payload: Any) -> list[str]:
    if not isinstance(payload, list) or not payload:
        raise SchemaViolation("expected a non-empty JSON array of insight strings")
    out = []
    for i, item in enumerate(payload):
        out.append(_as_str(item, f"insight {i}"))
    return out


SCHEMAS: dict[str, Callable[[Any], Any]] = {
    "direction-list": _validate_direction_list,
    "rubric-score": _validate_rubric_score,
    "topic-order": _validate_topic_order,
    "judger-verdict": _validate_judger_verdict,
    "insight-list": _validate_insight_list,
}


def validate_payload(schema_id: str, payload: Any) -> Any:
    if schema_id not in SCHEMAS:
        raise KeyError(f"unregistered schema: {schema_id}")
    return SCHEMAS[schema_id](payload)
