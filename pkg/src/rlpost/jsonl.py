"""Line-oriented JSON record files with a required format version."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import ParseError, VersionError

FORMAT_VERSION = 1


def dump_record(record: dict[str, Any]) -> str:
    return json.dumps({"version": FORMAT_VERSION, **record}, sort_keys=True, ensure_ascii=False)


def write_records(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(dump_record(rec) + "\n")
            n += 1
    return n


def parse_line(line: str, lineno: int) -> dict[str, Any]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed record: {e.msg}", lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", lineno)
    version = rec.pop("version", None)
    if version is None:
        raise ParseError("record has no version field", lineno)
    if version != FORMAT_VERSION:
        raise VersionError(f"line {lineno}: unsupported record version {version!r}")
    return rec


def iter_lines(lines: Iterable[str]) -> Iterator[tuple[int, str]]:
    for lineno, line in enumerate(lines, start=1):
        if line.strip():
            yield lineno, line


def read_records(path: str | Path) -> list[tuple[int, dict[str, Any]]]:
    """Parse every record in ``path``; returns ``(line number, record)`` pairs."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    if text and not text.endswith("\n"):
        # a writer always terminates records; a missing newline means truncation
        last = text.count("\n") + 1
        raise ParseError("truncated final record", last)
    return [(n, parse_line(line, n)) for n, line in iter_lines(text.splitlines())]
