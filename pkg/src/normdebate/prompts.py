"""Prompt templates for every protocol stage.

Templates live as plain-text files in ``normdebate/templates`` with
``{name}`` placeholders. Substitution is a single literal pass: bound values
are inserted verbatim, so braces inside a story never get re-interpreted.
"""

from __future__ import annotations

import hashlib
import re
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence


class PromptStage(str, Enum):
    SINGLE_NO_ROT = "SingleNoRot"
    SINGLE_WITH_ROT = "SingleWithRot"
    SR_INITIAL = "SR_Initial"
    SR_REFLECT = "SR_Reflect"
    SR_FINAL = "SR_Final"
    D_INITIAL = "D_Initial"
    D_FEEDBACK = "D_Feedback"
    D_FINAL = "D_Final"
    D_JUDGE = "D_Judge"
    SD_INITIAL = "SD_Initial"
    SD_CHOICE = "SD_Choice"
    SD_REFLECT_BRANCH = "SD_ReflectBranch"
    SD_DEBATE_BRANCH = "SD_DebateBranch"
    SD_FINAL = "SD_Final"
    SD_JUDGE = "SD_Judge"

    @property
    def expects_label(self) -> bool:
        return self in _LABEL_STAGES


_LABEL_STAGES = {
    PromptStage.SINGLE_NO_ROT,
    PromptStage.SINGLE_WITH_ROT,
    PromptStage.SR_INITIAL,
    PromptStage.SR_FINAL,
    PromptStage.D_INITIAL,
    PromptStage.D_FINAL,
    PromptStage.D_JUDGE,
    PromptStage.SD_INITIAL,
    PromptStage.SD_FINAL,
    PromptStage.SD_JUDGE,
}


class OptionOrder(str, Enum):
    REFLECT_FIRST = "ReflectFirst"
    DEBATE_FIRST = "DebateFirst"

    @classmethod
    def parse(cls, value: "str | OptionOrder") -> "OptionOrder":
        if isinstance(value, cls):
            return value
        key = re.sub(r"[\s_\-]+", "", str(value)).casefold()
        for member in cls:
            if member.value.casefold() == key:
                return member
        raise ValueError(f"unknown option order {value!r}")


class PromptError(Exception):
    pass


class MissingPlaceholder(PromptError):
    def __init__(self, name: str, stage: PromptStage):
        self.name = name
        self.stage = stage
        super().__init__(f"stage {stage.value} needs a binding for {{{name}}}")


class UnknownStage(PromptError):
    pass


PLACEHOLDER = re.compile(r"\{([a-z][a-z0-9_]*)\}")

# Option phrasing of the choice prompt; the sentence frame stays fixed and
# only which behaviour each letter names is swapped.
REFLECT_OPTION = ("reflect on your response", "reflect")
DEBATE_OPTION = ("respond to the discussant by providing any relevant feedback", "respond to the discussant")

# Framing phrases for the final Self-Reflect+Debate prompt.
OWN_CHOICE_TEXT = {"Reflect": "reflect on your response", "Debate": "provide feedback to the discussant"}
OTHER_CHOICE_TEXT = {"Reflect": "reflect on their response", "Debate": "provide feedback to you"}


def _coerce_stage(stage: "PromptStage | str") -> PromptStage:
    if isinstance(stage, PromptStage):
        return stage
    try:
        return PromptStage(stage)
    except ValueError:
        for member in PromptStage:
            if member.name.casefold() == str(stage).casefold():
                return member
        raise UnknownStage(f"unknown prompt stage {stage!r}") from None


@lru_cache(maxsize=None)
def template_text(stage: "PromptStage | str") -> str:
    stage = _coerce_stage(stage)
    path = resources.files("normdebate") / "templates" / f"{stage.value}.txt"
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UnknownStage(f"no template file for {stage.value}") from None
    return text[:-1] if text.endswith("\n") else text


def placeholders(stage: "PromptStage | str") -> list[str]:
    """Placeholder names used by a stage's template, in first-use order."""
    seen: dict[str, None] = {}
    for name in PLACEHOLDER.findall(template_text(stage)):
        seen.setdefault(name, None)
    return list(seen)


def render(stage: "PromptStage | str", bindings: Mapping[str, str]) -> str:
    stage = _coerce_stage(stage)
    text = template_text(stage)
    for name in placeholders(stage):
        if name not in bindings:
            raise MissingPlaceholder(name, stage)
    return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), text)


def choice_descriptions(option_order: "OptionOrder | str") -> str:
    first, second = (
        (REFLECT_OPTION, DEBATE_OPTION)
        if OptionOrder.parse(option_order) is OptionOrder.REFLECT_FIRST
        else (DEBATE_OPTION, REFLECT_OPTION)
    )
    return (
        f"You can choose to (A) {first[0]} or (B) {second[0]}. "
        f"Respond with your choice -- (A) {first[1]} or (B) {second[1]}."
    )


def render_choice_prompt(bindings: Mapping[str, str], option_order: "OptionOrder | str") -> str:
    return render(
        PromptStage.SD_CHOICE,
        {**bindings, "choice_descriptions": choice_descriptions(option_order)},
    )


def insert_after(text: str, anchor: str, block: str) -> str:
    """Insert ``block`` (plus newline) right after the first ``anchor`` line."""
    idx = text.find(anchor)
    if idx < 0:
        raise PromptError(f"anchor {anchor[:40]!r} not found in prompt")
    cut = idx + len(anchor)
    return text[:cut] + block + "\n" + text[cut:]


def debate_history_block(rounds: Sequence[tuple[str, str]]) -> str:
    """Earlier feedback rounds, oldest first, from one agent's point of view."""
    lines = []
    for own, other in rounds:
        lines.append(f"You: {own}")
        lines.append(f"Discussant: {other}")
    return "\n".join(lines)


def judge_history_block(rounds: Sequence[tuple[str, str]]) -> str:
    lines = []
    for m1, m2 in rounds:
        lines.append(f"Model1 feedback: {m1}")
        lines.append(f"Model2 feedback: {m2}")
    return "\n".join(lines)


def reflection_history_block(reflections: Sequence[str]) -> str:
    return "\n".join(f"Reflection {k}: {text}" for k, text in enumerate(reflections, start=1))


def template_checksums() -> dict[str, str]:
    return {
        stage.value: hashlib.sha256(template_text(stage).encode("utf-8")).hexdigest()
        for stage in PromptStage
    }
