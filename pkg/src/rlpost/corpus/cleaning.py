"""Rule-based text filters: degenerate repetition, leftover CJK, prefix duplicates, wording fixes."""

from __future__ import annotations

import re
import string
from typing import Iterable, TypeVar

T = TypeVar("T")

REPETITION_THRESHOLD = 15
DEDUP_PREFIX_CHARS = 50

# CJK Unified Ideographs and extensions A-H.
CJK_RANGES = (
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0x20000, 0x2A6DF),
    (0x2A700, 0x2B73F),
    (0x2B740, 0x2B81F),
    (0x2B820, 0x2CEAF),
    (0x2CEB0, 0x2EBEF),
    (0x30000, 0x3134F),
    (0x31350, 0x323AF),
)
_CJK_RE = re.compile("[" + "".join(f"{chr(lo)}-{chr(hi)}" for lo, hi in CJK_RANGES) + "]")

# lowercase term -> lowercase replacement
REFERENCE_SUBSTITUTIONS: dict[str, str] = {
    "description": "image",
    "descriptions": "images",
    "mention": "image",
    "mentioned": "shown",
}


def _content_token(raw: str) -> str | None:
    tok = raw.strip(string.punctuation).lower()
    if len(tok) >= 2 and tok.isalpha():
        return tok
    return None


def detect_repetition(text: str, threshold: int = REPETITION_THRESHOLD) -> tuple[bool, str | None]:
    """Flag text where one content token occurs more than ``threshold`` times in a row.

    Content tokens are whitespace-delimited, alphabetic (after stripping
    surrounding punctuation) and at least two letters long; comparison is
    case-insensitive.
    """
    if threshold < 2:
        raise ValueError("threshold must be >= 2")
    prev, run = None, 0
    for raw in text.split():
        tok = _content_token(raw)
        if tok is not None and tok == prev:
            run += 1
        else:
            prev, run = tok, 1
        if tok is not None and run > threshold:
            return True, tok
    return False, None


def detect_residual_nonlatin(text: str) -> tuple[bool, str | None]:
    m = _CJK_RE.search(text)
    return (True, m.group(0)) if m else (False, None)


def dedup_by_prefix(records: Iterable[T], n: int = DEDUP_PREFIX_CHARS, key=lambda r: r.text) -> list[T]:
    """Keep the first record of every group sharing the same first ``n`` characters."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen: set[str] = set()
    kept = []
    for rec in records:
        prefix = key(rec)[:n]
        if prefix not in seen:
            seen.add(prefix)
            kept.append(rec)
    return kept


def _match_case(src: str, repl: str) -> str:
    return repl[:1].upper() + repl[1:] if src[:1].isupper() else repl


def replace_reference_terms(text: str, substitutions: dict[str, str] | None = None) -> str:
    table = {k.lower(): v for k, v in (substitutions or REFERENCE_SUBSTITUTIONS).items()}
    if not table:
        return text
    # longest first so "mentioned" wins over "mention"
    alternation = "|".join(re.escape(t) for t in sorted(table, key=len, reverse=True))
    pattern = re.compile(rf"\b({alternation})\b", re.IGNORECASE)
    return pattern.sub(lambda m: _match_case(m.group(0), table[m.group(0).lower()]), text)
