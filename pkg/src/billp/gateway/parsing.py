"""Extract values and item titles from free-form model output."""

from __future__ import annotations

import re

_VALUE_MARKER = re.compile(r"VALUE:\s*([-+]?\d+(?:\.\d+)?)", re.IGNORECASE)
_NUMBER = re.compile(r"(?<![\w.])[-+]?\d+(?:\.\d+)?(?!\w)")
_ACTION_MARKER = re.compile(r"(?:ACTION|Recommend)\s*:", re.IGNORECASE)
_STRIP = " \t\r\n\"'`“”‘’[](){}<>*"


class ParseError(ValueError):
    pass


def parse_value(text: str, v_max: float) -> float:
    """First number after ``VALUE:``, else the last standalone number; clamped to [0, v_max]."""
    m = _VALUE_MARKER.search(text)
    if m:
        raw = m.group(1)
    else:
        nums = _NUMBER.findall(text)
        if not nums:
            raise ParseError(f"no number in {text[:80]!r}")
        raw = nums[-1]
    return min(max(float(raw), 0.0), float(v_max))


def parse_action(text: str) -> str:
    """Span after the first ``ACTION:``/``Recommend:`` marker (to end of line), or the whole text."""
    m = _ACTION_MARKER.search(text)
    span = text[m.end() :].split("\n", 1)[0] if m else text
    out, prev = span, None
    while out != prev:  # quotes and brackets may be interleaved with any unicode whitespace
        prev, out = out, out.strip().strip(_STRIP)
    if not out:
        raise ParseError("empty action")
    return out
