"""Deterministic text checks shared by the insight and narrative stages.

Everything here is token-level on purpose: the pipeline never trusts model
prose, it scans it. Sentence splitting protects decimal numbers and a fixed
abbreviation list; column-name and effect-size scans are exact-token matches.
"""

from __future__ import annotations

import re

# Tokens that end with a period without ending a sentence. Matched
# case-insensitively against the word immediately before the period.
PROTECTED_ABBREVIATIONS = frozenset(
    {"vs", "approx", "fig", "figs", "e.g", "i.e", "etc", "cf", "no", "ca"}
)

_TERMINAL = re.compile(r"[.!?]")


def _is_protected(text: str, idx: int) -> bool:
    """True if the terminal character at idx must not split the text."""
    ch = text[idx]
    if ch != ".":
        return False
    # Decimal point: digit on both sides.
    if 0 < idx < len(text) - 1 and text[idx - 1].isdigit() and text[idx + 1].isdigit():
        return True
    # Abbreviation: the word running up to the period is on the protected list.
    start = idx
    while start > 0 and (text[start - 1].isalpha() or text[start - 1] == "."):
        start -= 1
    word = text[start:idx].lower().lstrip(".")
    return word in PROTECTED_ABBREVIATIONS


def split_sentences(text: str) -> list[str]:
    """Split on terminal punctuation followed by whitespace or end of text.

    Decimal points and known abbreviations (vs., approx., Fig., ...) never
    split. Returned sentences are stripped and non-empty.
    """
    sentences: list[str] = []
    start = 0
    for match in _TERMINAL.finditer(text):
        idx = match.start()
        at_end = idx == len(text) - 1
        followed_by_space = not at_end and text[idx + 1].isspace()
        if not (at_end or followed_by_space):
            continue
        if _is_protected(text, idx):
            continue
        piece = text[start : idx + 1].strip()
        if piece:
            sentences.append(piece)
        start = idx + 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def count_sentences(text: str) -> int:
    return len(split_sentences(text))


_WORD = re.compile(r"[A-Za-z0-9_]+")

STOPWORDS = frozenset(
    """a an and are as at be by for from has have in is it of on or over per
    the to under vs with""".split()
)


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text)


def mentioned_columns(text: str, columns: list[str]) -> set[str]:
    """Columns from the given vocabulary that appear as exact tokens in text.

    Matching is exact and case-sensitive: the schema contract treats column
    names as opaque identifiers.
    """
    tokens = set(tokenize(text))
    return {c for c in columns if c in tokens}


def topic_keywords(topic: str) -> set[str]:
    """Content words of a topic string, lowercased, stopwords removed."""
    return {t.lower() for t in tokenize(topic) if t.lower() not in STOPWORDS}


_NUMERIC_TOKEN = re.compile(r"~?\$?\d[\d,]*(?:\.\d+)?%?x?")

EFFECT_WORDS = frozenset(
    {"doubles", "doubled", "halves", "halved", "triples", "tripled", "quadruples", "quadrupled"}
)


def effect_token(text: str) -> str | None:
    """The most distinctive magnitude token of an observation sentence.

    Prefers the first numeric-ish token (``~40%``, ``3.5``, ``2x``); falls
    back to a multiplicative effect word (``doubles``); None if neither is
    present, in which case grounding checks skip this observation.
    """
    match = _NUMERIC_TOKEN.search(text)
    if match:
        return match.group(0)
    for token in tokenize(text):
        if token.lower() in EFFECT_WORDS:
            return token
    return None
