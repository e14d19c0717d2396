"""Split composite figure captions into per-panel captions.

Panel labels are recognised in one of a fixed set of styles and must run in
alphabetic order from the first letter (``(a) (b) (c)``, ``A. B. C.`` ...).
Text before the first label is shared and is prepended to every panel.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field

# name -> (regex with a ``letter`` group, alphabet)
LABEL_STYLES: dict[str, tuple[str, str]] = {
    "A.": (r"(?<!\S)(?P<letter>[A-Z])[.,:](?=\s|$)", string.ascii_uppercase),
    "(a)": (r"(?<!\S)\((?P<letter>[a-z])\)(?=\s|$)", string.ascii_lowercase),
    "a)": (r"(?<!\S)(?P<letter>[a-z])\)(?=\s|$)", string.ascii_lowercase),
    "(A)": (r"(?<!\S)\((?P<letter>[A-Z])\)(?=\s|$)", string.ascii_uppercase),
}
DEFAULT_STYLES = ("A.", "(a)", "a)", "(A)")
_COMPILED = {name: re.compile(pat) for name, (pat, _) in LABEL_STYLES.items()}


@dataclass
class PanelSplit:
    shared_prefix: str
    panels: list[tuple[str, str]]
    style: str | None = None
    # label marker text as it appeared in the caption, e.g. "(a)" or "B:"
    markers: list[str] = field(default_factory=list)
    segments: list[str] = field(default_factory=list)

    @property
    def is_whole(self) -> bool:
        return self.style is None

    def reconstruct(self) -> str:
        """Rebuild the caption text with normalised whitespace."""
        if self.is_whole:
            return normalize_space(self.panels[0][1])
        parts = [self.shared_prefix] if self.shared_prefix else []
        for marker, seg in zip(self.markers, self.segments):
            parts.append(f"{marker} {seg}" if seg else marker)
        return normalize_space(" ".join(parts))


def normalize_space(text: str) -> str:
    return " ".join(text.split())


def _whole(text: str) -> PanelSplit:
    return PanelSplit("", [("", text.strip())])


def _try_style(text: str, style: str) -> PanelSplit | None:
    alphabet = LABEL_STYLES[style][1]
    matches = list(_COMPILED[style].finditer(text))
    if len(matches) < 2:
        return None
    if [m.group("letter") for m in matches] != list(alphabet[:len(matches)]):
        return None
    prefix = normalize_space(text[:matches[0].start()])
    panels, markers, segments = [], [], []
    for m, nxt in zip(matches, matches[1:] + [None]):
        seg = normalize_space(text[m.end():nxt.start() if nxt else len(text)])
        sub = f"{prefix} {seg}".strip() if prefix else seg
        panels.append((m.group("letter"), sub))
        markers.append(m.group(0))
        segments.append(seg)
    return PanelSplit(prefix, panels, style, markers, segments)


def parse_multipanel_caption(text: str, styles=DEFAULT_STYLES) -> PanelSplit:
    """Split ``text`` with the first style (in ``styles`` order) whose labels form a clean a, b, c... run.

    Falls back to a single unlabeled panel holding the whole caption.
    """
    for style in styles:
        if style not in LABEL_STYLES:
            raise ValueError(f"unsupported label style {style!r}; choose from {list(LABEL_STYLES)}")
        split = _try_style(text, style)
        if split is not None:
            return split
    return _whole(text)
