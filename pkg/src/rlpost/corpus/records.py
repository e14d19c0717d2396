"""Caption records and their line-oriented file encoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Iterator

from ..errors import ParseError
from ..jsonl import dump_record, iter_lines, parse_line


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    text: str
    stratum: str = ""
    embedding: tuple[float, ...] | None = None
    # extra fields are carried through untouched (e.g. "cluster", "panel")
    extra: tuple[tuple[str, Any], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"id": self.id, "text": self.text, "stratum": self.stratum}
        if self.embedding is not None:
            d["embedding"] = list(self.embedding)
        d.update(dict(self.extra))
        return d

    def with_extra(self, **kw) -> "CaptionRecord":
        merged = {**dict(self.extra), **kw}
        return CaptionRecord(self.id, self.text, self.stratum, self.embedding, tuple(sorted(merged.items())))


_CORE = {"id", "text", "stratum", "embedding"}


def record_from_dict(d: dict[str, Any], lineno: int | None = None) -> CaptionRecord:
    if not isinstance(d.get("id"), str) or not isinstance(d.get("text"), str):
        raise ParseError("record needs string 'id' and 'text' fields", lineno)
    emb = d.get("embedding")
    if emb is not None:
        if not isinstance(emb, list) or not all(isinstance(x, (int, float)) for x in emb):
            raise ParseError("embedding must be a list of numbers", lineno)
        emb = tuple(float(x) for x in emb)
    extra = tuple(sorted((k, v) for k, v in d.items() if k not in _CORE))
    return CaptionRecord(d["id"], d["text"], str(d.get("stratum", "")), emb, extra)


def dump_caption(rec: CaptionRecord) -> str:
    return dump_record(rec.to_dict())


def parse_captions(lines: Iterable[str], strict: bool = False, errors: list | None = None) -> Iterator[CaptionRecord]:
    """Parse caption records; malformed lines are skipped (and noted in ``errors``) unless ``strict``."""
    for lineno, line in iter_lines(lines):
        try:
            yield record_from_dict(parse_line(line, lineno), lineno)
        except (ParseError, ValueError) as e:
            if strict:
                raise
            if errors is not None:
                errors.append(e)


def check_unique_ids(records: list[CaptionRecord]) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise ParseError(f"duplicate record id {r.id!r}")
        seen.add(r.id)
