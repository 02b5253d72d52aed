"""Template asset tests: every registered template loads, slot rendering is
strict, and payload sections round-trip."""

from __future__ import annotations

import pytest

from intentsim import templates


def test_every_registered_template_loads_nonempty():
    for name in templates.TEMPLATE_VERSIONS:
        text = templates.load(name)
        assert len(text) > 200, name


def test_unknown_template_rejected():
    with pytest.raises(KeyError):
        templates.load("no-such-stage")


def test_render_without_slots_passes_through():
    assert templates.render("judge-satisfaction") == templates.load("judge-satisfaction")


def test_render_rejects_unknown_slot():
    with pytest.raises(KeyError, match="no slot"):
        templates.render("user-response", bogus="x")


def test_evaluator_template_names_its_sections():
    text = templates.load("response-evaluation")
    for section in ("CONVERSATION", "LAST_MESSAGE", "HIERARCHY"):
        assert section in text


def test_section_round_trip():
    body = "line one\nline two\n```yaml\nnested: fence\n```"
    wrapped = templates.section("GOAL_STATUS", body)
    assert templates.extract_section(wrapped, "GOAL_STATUS") == body
    assert templates.extract_section(wrapped, "OTHER") is None


def test_sections_do_not_bleed_into_each_other():
    text = "\n\n".join(
        [templates.section("A", "alpha"), templates.section("B", "beta")]
    )
    assert templates.extract_section(text, "A") == "alpha"
    assert templates.extract_section(text, "B") == "beta"
