"""Single entry point for all model calls.

Speaks an OpenAI-compatible chat-completion protocol over HTTP, or replays a
recorded transcript for offline runs. Every call is appended to the run
transcript (one JSON line per call), and sequence indices are allocated
atomically per stage tag so replay keys are stable across prompt rewordings.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import requests

from .schemas import SchemaViolation, extract_payload, validate_payload

log = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class TransportFailure(GatewayError):
    pass


class AuthFailure(GatewayError):
    pass


class ReplayMiss(GatewayError):
    pass


class StructuredOutputError(GatewayError):
    """No schema-valid payload after the re-prompt budget."""


@dataclass(frozen=True)
class PromptRequest:
    stage_tag: str
    sequence_index: int
    system_prompt: str
    user_prompt: str
    expects_structured: bool
    schema_id: str | None
    temperature: float
    max_tokens: int
    # Optional figure attachment for judge calls against image-capable models.
    image_data_url: str | None = None


@dataclass(frozen=True)
class ModelResponse:
    text: str
    backend: str  # "live" | "replay"
    latency_ms: int


class LiveBackend:
    """One HTTP round trip per call, with bounded retries on transport failure."""

    name = "live"

    def __init__(
        self,
        base_url: str,
        api_key: str,
        model: str,
        retries: int = 2,
        timeout_s: float = 60.0,
        retry_backoff_s: float = 0.5,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.retries = retries
        self.timeout_s = timeout_s
        self.retry_backoff_s = retry_backoff_s
        self.session = session or requests.Session()

    def send(self, request: PromptRequest) -> str:
        user_content: Any = request.user_prompt
        if request.image_data_url:
            user_content = [
                {"type": "text", "text": request.user_prompt},
                {"type": "image_url", "image_url": {"url": request.image_data_url}},
            ]
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": user_content},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt and self.retry_backoff_s:
                time.sleep(self.retry_backoff_s * attempt)
            try:
                resp = self.session.post(
                    f"{self.base_url}/chat/completions",
                    json=body,
                    headers={"Authorization": f"Bearer {self.api_key}"},
                    timeout=self.timeout_s,
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code in (401, 403):
                raise AuthFailure(f"authentication rejected ({resp.status_code})")
            if resp.status_code != 200:
                last_error = TransportFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
                continue
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError) as exc:
                last_error = TransportFailure(f"malformed completion payload: {exc}")
                continue
            if not isinstance(text, str) or not text.strip():
                last_error = TransportFailure("empty completion text")
                continue
            return text
        raise TransportFailure(
            f"{request.stage_tag}#{request.sequence_index}: transport failed after "
            f"{self.retries + 1} attempts: {last_error}"
        )


class ReplayBackend:
    """Answers calls from a recorded transcript keyed by (stage_tag, sequence_index)."""

    name = "replay"

    def __init__(self, responses: dict[tuple[str, int], str]):
        self.responses = responses

    @classmethod
    def from_transcript(cls, path: str | Path) -> "ReplayBackend":
        responses: dict[tuple[str, int], str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                key = (entry["stage_tag"], entry["sequence_index"])
                responses[key] = entry["response"]["text"]
        return cls(responses)

    def send(self, request: PromptRequest) -> str:
        key = (request.stage_tag, request.sequence_index)
        if key not in self.responses:
            raise ReplayMiss(f"no transcript entry for {key[0]}#{key[1]}")
        text = self.responses[key]
        if not text.strip():
            raise ReplayMiss(f"empty transcript entry for {key[0]}#{key[1]}")
        return text


class Gateway:
    """Allocates call indices, dispatches to the backend, records the transcript.

    Safe for concurrent calls: index allocation and transcript appends are
    serialized through locks.
    """

    def __init__(
        self,
        backend: LiveBackend | ReplayBackend,
        transcript_path: str | Path | None = None,
        reprompt_limit: int = 2,
    ):
        self.backend = backend
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.reprompt_limit = reprompt_limit
        self._counters: dict[str, int] = {}
        self._alloc_lock = threading.Lock()
        self._write_lock = threading.Lock()

    def _next_index(self, stage_tag: str) -> int:
        with self._alloc_lock:
            index = self._counters.get(stage_tag, 0)
            self._counters[stage_tag] = index + 1
            return index

    def _record(self, request: PromptRequest, response: ModelResponse) -> None:
        if self.transcript_path is None:
            return
        entry = {
            "stage_tag": request.stage_tag,
            "sequence_index": request.sequence_index,
            "request": {
                k: v for k, v in asdict(request).items() if k not in ("stage_tag", "sequence_index")
            },
            "response": asdict(response),
            "recorded_at": datetime.now(timezone.utc).isoformat(),
        }
        line = json.dumps(entry, sort_keys=True, ensure_ascii=False)
        with self._write_lock:
            with open(self.transcript_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def complete(
        self,
        stage_tag: str,
        system_prompt: str,
        user_prompt: str,
        *,
        temperature: float,
        max_tokens: int,
        expects_structured: bool = False,
        schema_id: str | None = None,
        image_data_url: str | None = None,
    ) -> ModelResponse:
        request = PromptRequest(
            stage_tag=stage_tag,
            sequence_index=self._next_index(stage_tag),
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            expects_structured=expects_structured,
            schema_id=schema_id,
            temperature=temperature,
            max_tokens=max_tokens,
            image_data_url=image_data_url,
        )
        started = time.monotonic()
        text = self.backend.send(request)
        latency_ms = int((time.monotonic() - started) * 1000)
        response = ModelResponse(text=text, backend=self.backend.name, latency_ms=latency_ms)
        self._record(request, response)
        return response

    def complete_structured(
        self,
        stage_tag: str,
        system_prompt: str,
        user_prompt: str,
        schema_id: str,
        *,
        temperature: float,
        max_tokens: int,
        image_data_url: str | None = None,
    ) -> Any:
        """Parsed, schema-valid payload, re-prompting up to the configured limit."""
        prompt = user_prompt
        last_error: SchemaViolation | None = None
        for round_no in range(self.reprompt_limit + 1):
            response = self.complete(
                stage_tag,
                system_prompt,
                prompt,
                temperature=temperature,
                max_tokens=max_tokens,
                expects_structured=True,
                schema_id=schema_id,
                image_data_url=image_data_url,
            )
            try:
                return validate_payload(schema_id, extract_payload(response.text))
            except SchemaViolation as exc:
                last_error = exc
                log.debug("%s round %d rejected: %s", stage_tag, round_no, exc)
                prompt = (
                    user_prompt
                    + "\n\nYour previous reply was rejected: "
                    + str(exc)
                    + "\nRespond again with only a valid JSON payload."
                )
        raise StructuredOutputError(
            f"{stage_tag}: no valid {schema_id} payload after "
            f"{self.reprompt_limit + 1} rounds: {last_error}"
        )
