from __future__ import annotations

import pytest

from normdebate.prompts import (
    OTHER_CHOICE_TEXT,
    OWN_CHOICE_TEXT,
    MissingPlaceholder,
    OptionOrder,
    PromptStage,
    UnknownStage,
    placeholders,
    render,
    render_choice_prompt,
    template_checksums,
)
from normdebate.strategies import Behavior, parse_choice

from .conftest import GOLDEN


def sentinels(stage: PromptStage) -> dict[str, str]:
    return {name: f"<{name.upper()}>" for name in placeholders(stage) if name != "choice_descriptions"}


def golden(name: str) -> str:
    text = (GOLDEN / f"{name}.txt").read_text(encoding="utf-8")
    assert text.endswith("\n")
    return text[:-1]


def rendered_goldens() -> dict[str, str]:
    """All 17 renderings that have a golden transcription."""
    out = {}
    for stage in PromptStage:
        b = sentinels(stage)
        if stage is PromptStage.SD_CHOICE:
            out[stage.value] = render_choice_prompt(b, OptionOrder.REFLECT_FIRST)
            out["SD_Choice__DebateFirst"] = render_choice_prompt(b, OptionOrder.DEBATE_FIRST)
        elif stage is PromptStage.SD_FINAL:
            out[stage.value] = render(
                stage, {**b, "your_choice": OWN_CHOICE_TEXT["Reflect"], "other_choice": OTHER_CHOICE_TEXT["Debate"]}
            )
            out["SD_Final__debate_reflect"] = render(
                stage, {**b, "your_choice": OWN_CHOICE_TEXT["Debate"], "other_choice": OTHER_CHOICE_TEXT["Reflect"]}
            )
        else:
            out[stage.value] = render(stage, b)
    return out


def test_seventeen_goldens_exist():
    assert len(list(GOLDEN.glob("*.txt"))) == 17
    assert set(rendered_goldens()) == {p.stem for p in GOLDEN.glob("*.txt")}


@pytest.mark.parametrize("name", sorted(p.stem for p in GOLDEN.glob("*.txt")))
def test_golden_byte_match(name):
    assert rendered_goldens()[name] == golden(name)


def test_choice_swap():
    b = sentinels(PromptStage.SD_CHOICE)
    first = render_choice_prompt(b, "ReflectFirst")
    second = render_choice_prompt(b, "DebateFirst")
    assert first != second
    assert len(first) == len(second)
    assert "(A) reflect on your response" in first
    assert "(A) respond to the discussant" in second
    # the same letter names opposite behaviours under the two orders
    assert parse_choice("(A)", "ReflectFirst").chosen is Behavior.REFLECT
    assert parse_choice("(A)", "DebateFirst").chosen is Behavior.DEBATE
    # everything outside the option sentence is identical
    head = first.split("You can choose")[0]
    assert second.startswith(head)
    assert first.endswith("Only respond your choice as (A) or (B).\nResponse:")
    assert second.endswith("Only respond your choice as (A) or (B).\nResponse:")


def test_single_no_rot_has_no_rule():
    assert "rule_of_thumb" not in placeholders(PromptStage.SINGLE_NO_ROT)
    assert "rule_of_thumb" in placeholders(PromptStage.SINGLE_WITH_ROT)


def test_missing_placeholder():
    with pytest.raises(MissingPlaceholder) as exc:
        render(PromptStage.SINGLE_WITH_ROT, {"country": "Peru", "story": "s"})
    assert exc.value.name == "rule_of_thumb"


def test_values_are_inserted_literally():
    text = render(
        PromptStage.SINGLE_WITH_ROT,
        {"country": "{story}", "rule_of_thumb": "use {braces} and \\1", "story": "S"},
    )
    assert "{story}" in text and "use {braces} and \\1" in text


def test_unknown_stage():
    with pytest.raises(UnknownStage):
        render("NoSuchStage", {})


def test_lookup_by_member_name():
    assert render("single_with_rot", {"country": "c", "rule_of_thumb": "r", "story": "s"}) == render(
        PromptStage.SINGLE_WITH_ROT, {"country": "c", "rule_of_thumb": "r", "story": "s"}
    )


def test_checksums_cover_every_stage():
    sums = template_checksums()
    assert set(sums) == {s.value for s in PromptStage}
    assert all(len(v) == 64 for v in sums.values())
