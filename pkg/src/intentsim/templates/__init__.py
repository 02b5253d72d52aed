"""Prompt template assets: loading, slot rendering, payload sections.

Templates are shipped as markdown files keyed by stage name and versioned in
``TEMPLATE_VERSIONS``. Slots use ``{{name}}`` markers so literal braces in
JSON/YAML examples inside the prompts survive rendering. Structured payload
sections (hierarchies, messages, goal status) are wrapped in sentinel blocks
so machine consumers (the offline backend, audits) can recover them exactly.
"""

from __future__ import annotations

import re
from importlib import resources

TEMPLATE_VERSIONS: dict[str, int] = {
    "intent-synthesis": 1,
    "intent-abstraction": 1,
    "hierarchy-organization": 1,
    "initial-request": 1,
    "response-evaluation": 1,
    "user-response": 1,
    "judge-satisfaction": 1,
    "judge-interactivity": 1,
    "behavior-annotation": 1,
    "assistant-collaborative": 1,
    "assistant-interactive": 1,
}

_SLOT_RE = re.compile(r"\{\{([a-z_]+)\}\}")
_SECTION_RE_CACHE: dict[str, re.Pattern[str]] = {}


def load(name: str) -> str:
    if name not in TEMPLATE_VERSIONS:
        raise KeyError(f"unknown template {name!r}")
    return resources.files("intentsim.templates").joinpath(f"{name}.md").read_text(encoding="utf-8")


def render(name: str, **slots: str) -> str:
    """Fill ``{{slot}}`` markers; unknown or leftover slots are errors."""
    text = load(name)
    for key, value in slots.items():
        marker = "{{" + key + "}}"
        if marker not in text:
            raise KeyError(f"template {name!r} has no slot {key!r}")
        text = text.replace(marker, value)
    leftover = _SLOT_RE.search(text)
    if leftover:
        raise KeyError(f"template {name!r} slot {leftover.group(1)!r} was not filled")
    return text


def section(name: str, body: str) -> str:
    """Sentinel-delimited payload block."""
    return f"<<<{name}\n{body}\n{name}>>>"


def extract_section(text: str, name: str) -> str | None:
    pattern = _SECTION_RE_CACHE.get(name)
    if pattern is None:
        pattern = re.compile(rf"<<<{name}\n(.*?)\n{name}>>>", re.DOTALL)
        _SECTION_RE_CACHE[name] = pattern
    match = pattern.search(text)
    return match.group(1) if match else None
