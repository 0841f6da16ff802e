"""Script executors behind one interface.

FakeExecutor simulates execution in-process (tests and offline runs);
SubprocessExecutor drives the out-of-process sandbox runner. Both resolve the
script's figure path against the run directory and derive status from figure
existence, never from exit codes alone.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import time
from pathlib import Path
from typing import Protocol

from PIL import Image

from .contracts import ExecutionOutcome, GeneratedScript


class ExecutorUnavailable(Exception):
    """The executor itself cannot run; distinct from a script failure."""


class Executor(Protocol):
    def run(self, script: GeneratedScript) -> ExecutionOutcome: ...


def write_fake_figure(path: Path, seed: int) -> None:
    """Deterministic non-constant PNG, comfortably above the 1 KiB gate."""
    width, height = 200, 150
    img = Image.new("RGB", (width, height))
    px = img.load()
    for y in range(height):
        for x in range(width):
            px[x, y] = (
                (x * 7 + seed * 13) % 256,
                (y * 5 + seed * 29) % 256,
                (x + y + seed) % 256,
            )
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG", compress_level=0)


_FAKE_TRACE = (
    "Traceback (most recent call last):\n"
    '  File "script.py", line 12, in <module>\n'
    "    ratio = total / count\n"
    "ZeroDivisionError: division by zero"
)


class FakeExecutor:
    """In-process executor scripted per direction.

    plans maps direction_id to a sequence of step behaviors ("success",
    "error", "timeout"), consumed one per execution; directions without a
    plan (or past the end of one) succeed. Successes write a real figure.
    """

    def __init__(
        self,
        run_dir: str | Path,
        plans: dict[int, list[str]] | None = None,
        timeout_s: float = 30.0,
    ):
        self.run_dir = Path(run_dir)
        self.plans = {k: list(v) for k, v in (plans or {}).items()}
        self.timeout_s = timeout_s
        self._calls: dict[int, int] = {}

    def _step(self, direction_id: int) -> str:
        idx = self._calls.get(direction_id, 0)
        self._calls[direction_id] = idx + 1
        plan = self.plans.get(direction_id, [])
        return plan[idx] if idx < len(plan) else "success"

    def run(self, script: GeneratedScript) -> ExecutionOutcome:
        step = self._step(script.direction_id)
        if step == "success":
            figure = self.run_dir / script.output_figure_path
            write_fake_figure(figure, seed=script.direction_id)
            return ExecutionOutcome(
                direction_id=script.direction_id,
                attempt=script.attempt,
                status="success",
                error_trace=None,
                figure_path=script.output_figure_path,
                wall_time_ms=5,
            )
        if step == "error":
            return ExecutionOutcome(
                direction_id=script.direction_id,
                attempt=script.attempt,
                status="error",
                error_trace=_FAKE_TRACE,
                figure_path=None,
                wall_time_ms=5,
            )
        if step == "timeout":
            return ExecutionOutcome(
                direction_id=script.direction_id,
                attempt=script.attempt,
                status="timeout",
                error_trace=None,
                figure_path=None,
                wall_time_ms=int(self.timeout_s * 1000) + 1,
            )
        raise ValueError(f"unknown fake step {step!r}")


class SubprocessExecutor:
    """Runs scripts through the sandbox runner CLI, one child per invocation."""

    def __init__(self, run_dir: str | Path, runner_command: str, timeout_s: float = 30.0):
        self.run_dir = Path(run_dir)
        self.runner_command = runner_command
        self.timeout_s = timeout_s

    def run(self, script: GeneratedScript) -> ExecutionOutcome:
        exec_dir = self.run_dir / "exec" / f"{script.direction_id}_{script.attempt}"
        exec_dir.mkdir(parents=True, exist_ok=True)
        script_path = exec_dir / "script.py"
        script_path.write_text(script.source, encoding="utf-8")
        request_path = exec_dir / "request.json"
        request = {
            "script_path": str(script_path),
            "workdir": str(self.run_dir),
            "timeout_s": self.timeout_s,
            "expected_figure_path": script.output_figure_path,
        }
        request_path.write_text(
            json.dumps(request, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )
        argv = shlex.split(self.runner_command) + ["--request", str(request_path)]
        started = time.monotonic()
        try:
            proc = subprocess.run(
                argv,
                capture_output=True,
                text=True,
                timeout=self.timeout_s + 30,
            )
        except FileNotFoundError as exc:
            raise ExecutorUnavailable(f"runner not found: {argv[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise ExecutorUnavailable(f"runner did not return: {exc}") from exc
        if proc.returncode != 0:
            raise ExecutorUnavailable(
                f"runner exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        lines = [line for line in proc.stdout.splitlines() if line.strip()]
        if not lines:
            raise ExecutorUnavailable("runner produced no result line")
        try:
            result = json.loads(lines[-1])
        except json.JSONDecodeError as exc:
            raise ExecutorUnavailable(f"unparsable runner result: {exc}") from exc
        wall_ms = result.get("wall_time_ms", int((time.monotonic() - started) * 1000))
        status = result.get("status")
        return ExecutionOutcome(
            direction_id=script.direction_id,
            attempt=script.attempt,
            status=status,
            error_trace=result.get("error_trace"),
            figure_path=script.output_figure_path if status == "success" else None,
            wall_time_ms=wall_ms,
        )
