"""Prompt templates for the four LLM roles and slot rendering."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping, NamedTuple, Sequence

TEMPLATE_IDS = ("planner", "reflector", "actor", "critic")
_SLOT = re.compile(r"\{([a-z_]+)\}")


class PromptRenderError(Exception):
    pass


class HistoryStep(NamedTuple):
    thought: str
    action: str  # item title
    reward: float


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    few_shot: str = ""

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_SLOT.findall(self.body)))


@lru_cache(maxsize=None)
def load_template(template_id: str) -> PromptTemplate:
    """Packaged template and its few-shot examples."""
    if template_id not in TEMPLATE_IDS:
        raise PromptRenderError(f"unknown template {template_id!r}")
    root = resources.files("billp.gateway") / "assets"
    body = (root / f"{template_id}.txt").read_text(encoding="utf-8")
    few = (root / f"{template_id}_few_shot.txt").read_text(encoding="utf-8").strip()
    return PromptTemplate(template_id, body, few)


def format_reflections(reflections: Sequence[str]) -> str:
    if not reflections:
        return "Reflection: none"
    return "Reflection:\n" + "\n".join(f"{k}. {r.strip()}" for k, r in enumerate(reflections, 1))


def format_history(steps: Sequence[HistoryStep]) -> str:
    """Interleaved Thought/Action/Observation blocks; empty thoughts are left out."""
    if not steps:
        return "(no interactions yet)"
    lines = []
    for n, step in enumerate(steps, 1):
        if step.thought:
            lines.append(f"Thought {n}: {step.thought.strip()}")
        lines.append(f"Action {n}: {step.action}")
        lines.append(f"Observation {n}: The user accepted it with reward {step.reward:.2f}.")
    return "\n".join(lines)


def format_list(values: Sequence[str], empty: str = "none") -> str:
    return "\n".join(f"- {v}" for v in values) if values else empty


def _format_slot(name: str, value) -> str:
    if isinstance(value, str):
        return value
    if name == "reflections":
        return format_reflections(value)
    if name == "history":
        return format_history(value)
    if isinstance(value, (list, tuple)):
        return format_list(value)
    return str(value)


def render_prompt(template: PromptTemplate, slots: Mapping[str, object]) -> str:
    """Fill every ``{slot}`` in the body. ``few_shot`` defaults to the template's own examples."""
    values = dict(slots)
    values.setdefault("few_shot", template.few_shot)
    missing = [s for s in template.slots if s not in values]
    if missing:
        raise PromptRenderError(f"{template.template_id}: unbound slot(s) {missing}")
    return _SLOT.sub(lambda m: _format_slot(m.group(1), values[m.group(1)]), template.body)
