"""System prompt templates, loaded from a versioned directory inside the package."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

TEMPLATE_VERSION = "v1"

_TEMPLATE_DIR = Path(__file__).parent / "templates"


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    path = _TEMPLATE_DIR / version / f"{name}.txt"
    return path.read_text(encoding="utf-8").strip()
