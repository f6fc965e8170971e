"""Protocol engines: single model, self-reflection, debate, self-reflect+debate.

Every engine returns a :class:`Trace` holding the ordered turns it issued and
the decisions parsed from them. Turns inside one trace are strictly
sequential; engines keep no state between scenarios.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

from .client import ClientError, RequestContext, user_message
from .dataset import CulturalGroup, ScenarioRecord, TernaryLabel
from .prompts import (
    OTHER_CHOICE_TEXT,
    OWN_CHOICE_TEXT,
    OptionOrder,
    PromptStage,
    debate_history_block,
    insert_after,
    judge_history_block,
    reflection_history_block,
    render,
    render_choice_prompt,
)

TRACE_SCHEMA = 1


class Strategy(str, Enum):
    LABEL_ONLY = "LabelOnly"
    SINGLE = "Single"
    SINGLE_NO_ROT = "SingleNoRot"
    SELF_REFLECTION = "SelfReflection"
    DEBATE_ONLY = "DebateOnly"
    SELF_REFLECT_DEBATE = "SelfReflectDebate"

    @property
    def is_multi_agent(self) -> bool:
        return self in (Strategy.DEBATE_ONLY, Strategy.SELF_REFLECT_DEBATE)


class Behavior(str, Enum):
    REFLECT = "Reflect"
    DEBATE = "Debate"


# --------------------------------------------------------------------------
# Parsing

_LABEL_TOKEN = re.compile(r"\b(neither|yes|no)\b", re.IGNORECASE)
_LABELS = {"yes": TernaryLabel.YES, "no": TernaryLabel.NO, "neither": TernaryLabel.NEITHER}


def parse_label(text: str) -> TernaryLabel:
    """First standalone yes/no/neither word, case-insensitive.

    Word boundaries keep "not"/"none"/"nobody" from lexing as "No", and
    "Neither" is its own token so it is never read as "No".
    """
    m = _LABEL_TOKEN.search(text)
    return _LABELS[m.group(1).lower()] if m else TernaryLabel.UNPARSEABLE


_PAREN_LETTER = re.compile(r"\(\s*([AB])\s*\)")
_BARE_LETTER = re.compile(r"^[\s*\"'\[]*([AB])(?=\s*$|[.):,\]*\n])")


@dataclass(frozen=True)
class ChoiceOutcome:
    chosen: Behavior
    raw_text: str
    option_order: OptionOrder
    defaulted: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "chosen": self.chosen.value,
            "raw_text": self.raw_text,
            "option_order": self.option_order.value,
            "defaulted": self.defaulted,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChoiceOutcome":
        return cls(Behavior(d["chosen"]), d["raw_text"], OptionOrder(d["option_order"]), bool(d.get("defaulted")))


def letter_behavior(letter: str, option_order: OptionOrder) -> Behavior:
    reflect_letter = "A" if option_order is OptionOrder.REFLECT_FIRST else "B"
    return Behavior.REFLECT if letter == reflect_letter else Behavior.DEBATE


def parse_choice(text: str, option_order: "OptionOrder | str") -> ChoiceOutcome:
    """Map "(A)"/"(B)" (or a bare leading A/B) to the behaviour that letter names.

    Text with no recognisable letter defaults to Debate and is flagged.
    """
    order = OptionOrder.parse(option_order)
    m = _PAREN_LETTER.search(text) or _BARE_LETTER.search(text)
    if m is None:
        return ChoiceOutcome(Behavior.DEBATE, text, order, defaulted=True)
    return ChoiceOutcome(letter_behavior(m.group(1), order), text, order)


# --------------------------------------------------------------------------
# Trace types


@dataclass(frozen=True)
class Decision:
    label: TernaryLabel
    raw_text: str
    stage: PromptStage | None
    endpoint_name: str

    @classmethod
    def parsed(cls, raw_text: str, stage: PromptStage | None, endpoint_name: str) -> "Decision":
        return cls(parse_label(raw_text), raw_text, stage, endpoint_name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label.value,
            "raw_text": self.raw_text,
            "stage": self.stage.value if self.stage else None,
            "endpoint": self.endpoint_name,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Decision":
        stage = d.get("stage")
        return cls(TernaryLabel(d["label"]), d["raw_text"], PromptStage(stage) if stage else None, d["endpoint"])


@dataclass(frozen=True)
class Turn:
    stage: PromptStage
    endpoint: str
    turn_index: int
    prompt: str
    response: str
    parsed: str | None = None
    attempts: int = 1
    latency: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage.value,
            "endpoint": self.endpoint,
            "turn_index": self.turn_index,
            "prompt": self.prompt,
            "response": self.response,
            "parsed": self.parsed,
            "attempts": self.attempts,
            "latency": self.latency,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Turn":
        return cls(
            PromptStage(d["stage"]), d["endpoint"], int(d["turn_index"]), d["prompt"], d["response"],
            d.get("parsed"), int(d.get("attempts", 1)), float(d.get("latency", 0.0)),
        )


@dataclass
class Trace:
    scenario_id: str
    strategy: Strategy
    gold: TernaryLabel
    country: str = ""
    group: CulturalGroup | None = None
    agents: list[str] = field(default_factory=list)
    turns: list[Turn] = field(default_factory=list)
    initial_decisions: dict[str, Decision] = field(default_factory=dict)
    # per agent, one text per debate round or reflection iteration
    feedbacks: dict[str, list[str]] = field(default_factory=dict)
    choices: dict[str, ChoiceOutcome] = field(default_factory=dict)
    final_decisions: dict[str, Decision] = field(default_factory=dict)
    adjudicated: Decision | None = None
    adjudication: str | None = None  # "agreed", "judge", "oracle" or "random"
    rounds: int = 1
    iterations: int = 1
    companion: "Trace | None" = None

    @property
    def disagreement(self) -> bool:
        labels = {d.label for d in self.final_decisions.values()}
        return len(labels) > 1

    @property
    def final_label(self) -> TernaryLabel:
        """The aggregated decision that accuracy is scored on."""
        if self.adjudicated is not None:
            return self.adjudicated.label
        if not self.final_decisions:
            raise ValueError(f"trace {self.scenario_id} has no final decision")
        return next(iter(self.final_decisions.values())).label

    @property
    def judge_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.stage in (PromptStage.D_JUDGE, PromptStage.SD_JUDGE)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": TRACE_SCHEMA,
            "scenario_id": self.scenario_id,
            "strategy": self.strategy.value,
            "gold": self.gold.value,
            "country": self.country,
            "group": self.group.value if self.group else None,
            "agents": list(self.agents),
            "rounds": self.rounds,
            "iterations": self.iterations,
            "turns": [t.to_dict() for t in self.turns],
            "initial_decisions": {k: v.to_dict() for k, v in self.initial_decisions.items()},
            "feedbacks": {k: list(v) for k, v in self.feedbacks.items()},
            "choices": {k: v.to_dict() for k, v in self.choices.items()},
            "final_decisions": {k: v.to_dict() for k, v in self.final_decisions.items()},
            "adjudicated": self.adjudicated.to_dict() if self.adjudicated else None,
            "adjudication": self.adjudication,
            "companion": self.companion.to_dict() if self.companion else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Trace":
        if d.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {d.get('schema')!r}")
        return cls(
            scenario_id=d["scenario_id"],
            strategy=Strategy(d["strategy"]),
            gold=TernaryLabel(d["gold"]),
            country=d.get("country", ""),
            group=CulturalGroup(d["group"]) if d.get("group") else None,
            agents=list(d.get("agents", [])),
            turns=[Turn.from_dict(t) for t in d.get("turns", [])],
            initial_decisions={k: Decision.from_dict(v) for k, v in d.get("initial_decisions", {}).items()},
            feedbacks={k: list(v) for k, v in d.get("feedbacks", {}).items()},
            choices={k: ChoiceOutcome.from_dict(v) for k, v in d.get("choices", {}).items()},
            final_decisions={k: Decision.from_dict(v) for k, v in d.get("final_decisions", {}).items()},
            adjudicated=Decision.from_dict(d["adjudicated"]) if d.get("adjudicated") else None,
            adjudication=d.get("adjudication"),
            rounds=int(d.get("rounds", 1)),
            iterations=int(d.get("iterations", 1)),
            companion=cls.from_dict(d["companion"]) if d.get("companion") else None,
        )


class ScenarioFailed(Exception):
    """A request inside a strategy run failed; carries the partial trace."""

    def __init__(self, trace: Trace, stage: PromptStage, endpoint: str, cause: Exception):
        self.trace = trace
        self.stage = stage
        self.endpoint = endpoint
        self.cause = cause
        super().__init__(f"scenario {trace.scenario_id}: {stage.value} on {endpoint} failed: {cause}")


# --------------------------------------------------------------------------
# Adjudication


@dataclass(frozen=True)
class AdjudicationPolicy:
    kind: str  # "judge", "oracle" or "random"
    judge: Any = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("judge", "oracle", "random"):
            raise ValueError(f"unknown adjudication policy {self.kind!r}")
        if self.kind == "judge" and self.judge is None:
            raise ValueError("judge policy needs a judge endpoint")

    @classmethod
    def judge_model(cls, judge) -> "AdjudicationPolicy":
        return cls("judge", judge=judge)

    @classmethod
    def oracle(cls) -> "AdjudicationPolicy":
        return cls("oracle")

    @classmethod
    def random(cls, seed: int) -> "AdjudicationPolicy":
        return cls("random", seed=seed)


def oracle_select(pred1: TernaryLabel, pred2: TernaryLabel, gold: TernaryLabel) -> TernaryLabel:
    """Pick whichever prediction matches gold; if neither does, pred1 (wrong either way)."""
    if pred2 == gold and pred1 != gold:
        return pred2
    return pred1


def scenario_rng(seed: int, scenario_id: str) -> random.Random:
    # str seeds are hashed deterministically, independent of PYTHONHASHSEED
    return random.Random(f"{seed}:{scenario_id}")


class _Session:
    """Issues requests for one trace and records them in order."""

    def __init__(self, trace: Trace, scenario: ScenarioRecord):
        self.trace = trace
        self.scenario = scenario
        self._counters: dict[tuple[str, PromptStage], int] = {}

    def ask(self, client, stage: PromptStage, prompt: str, parse=None) -> str:
        key = (client.name, stage)
        index = self._counters.get(key, 0)
        self._counters[key] = index + 1
        ctx = RequestContext(self.scenario.id, stage, index, self.scenario.gold)
        try:
            result = client.complete(user_message(prompt), ctx)
        except (ClientError, ValueError) as exc:
            raise ScenarioFailed(self.trace, stage, client.name, exc) from exc
        parsed = parse(result.text) if parse else None
        self.trace.turns.append(
            Turn(stage, client.name, index, prompt, result.text, parsed, result.attempts, result.latency)
        )
        return result.text


def _base_bindings(scenario: ScenarioRecord) -> dict[str, str]:
    return {"country": scenario.country, "rule_of_thumb": scenario.rule_of_thumb, "story": scenario.story}


def _label_of(text: str) -> str:
    return parse_label(text).value


def _new_trace(scenario: ScenarioRecord, strategy: Strategy, agents: Sequence[str]) -> Trace:
    return Trace(
        scenario_id=scenario.id,
        strategy=strategy,
        gold=scenario.gold,
        country=scenario.country,
        group=scenario.group,
        agents=list(agents),
    )


def adjudicate(trace: Trace, policy: AdjudicationPolicy, scenario: ScenarioRecord | None = None) -> Decision:
    """Resolve two differing final decisions into one and record it on the trace."""
    if not trace.disagreement:
        raise ValueError("adjudicate called on agreeing final decisions")
    a1, a2 = trace.agents
    d1, d2 = trace.final_decisions[a1], trace.final_decisions[a2]
    if policy.kind == "oracle":
        label = oracle_select(d1.label, d2.label, trace.gold)
        decision = Decision(label, label.value, None, "oracle")
    elif policy.kind == "random":
        pick = scenario_rng(policy.seed, trace.scenario_id).choice((d1, d2))
        decision = Decision(pick.label, pick.label.value, None, "random")
    else:
        if scenario is None:
            raise ValueError("judge adjudication needs the scenario for the prompt")
        decision = _judge(trace, policy.judge, scenario)
    trace.adjudicated = decision
    trace.adjudication = policy.kind
    return decision


def _judge(trace: Trace, judge, scenario: ScenarioRecord) -> Decision:
    a1, a2 = trace.agents
    stage = PromptStage.SD_JUDGE if trace.strategy is Strategy.SELF_REFLECT_DEBATE else PromptStage.D_JUDGE
    f1, f2 = trace.feedbacks[a1], trace.feedbacks[a2]
    bindings = {
        **_base_bindings(scenario),
        "model1_response": trace.initial_decisions[a1].raw_text,
        "model2_response": trace.initial_decisions[a2].raw_text,
        "model1_feedback": f1[0],
        "model2_feedback": f2[0],
        "model1_decision": trace.final_decisions[a1].raw_text,
        "model2_decision": trace.final_decisions[a2].raw_text,
    }
    prompt = render(stage, bindings)
    if len(f1) > 1:
        prompt = insert_after(
            prompt, f"Model2 feedback: {f2[0]}\n", judge_history_block(list(zip(f1[1:], f2[1:])))
        )
    session = _Session(trace, scenario)
    text = session.ask(judge, stage, prompt, _label_of)
    return Decision.parsed(text, stage, judge.name)


def _finish(trace: Trace, policy: AdjudicationPolicy, scenario: ScenarioRecord) -> Trace:
    if trace.disagreement:
        adjudicate(trace, policy, scenario)
    else:
        trace.adjudication = "agreed"
    return trace


# --------------------------------------------------------------------------
# Engines


def run_label_only(scenario: ScenarioRecord, fixed: TernaryLabel) -> Trace:
    name = f"label-only:{fixed.value}"
    trace = _new_trace(scenario, Strategy.LABEL_ONLY, [name])
    decision = Decision(fixed, fixed.value, None, name)
    trace.initial_decisions[name] = decision
    trace.final_decisions[name] = decision
    return trace


def run_single(endpoint, scenario: ScenarioRecord, with_rot: bool = True) -> Trace:
    strategy = Strategy.SINGLE if with_rot else Strategy.SINGLE_NO_ROT
    stage = PromptStage.SINGLE_WITH_ROT if with_rot else PromptStage.SINGLE_NO_ROT
    trace = _new_trace(scenario, strategy, [endpoint.name])
    session = _Session(trace, scenario)
    bindings = _base_bindings(scenario)
    if not with_rot:
        del bindings["rule_of_thumb"]
    text = session.ask(endpoint, stage, render(stage, bindings), _label_of)
    decision = Decision.parsed(text, stage, endpoint.name)
    trace.initial_decisions[endpoint.name] = decision
    trace.final_decisions[endpoint.name] = decision
    return trace


def run_self_reflection(endpoint, scenario: ScenarioRecord, iterations: int = 1) -> Trace:
    """Initial answer, then ``iterations`` rounds of reflect -> re-decide.

    From the second iteration on, the latest answer is what gets reflected on
    and every earlier reflection is listed as "Reflection k:" lines.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    name = endpoint.name
    trace = _new_trace(scenario, Strategy.SELF_REFLECTION, [name])
    trace.iterations = iterations
    session = _Session(trace, scenario)
    base = _base_bindings(scenario)

    text = session.ask(endpoint, PromptStage.SR_INITIAL, render(PromptStage.SR_INITIAL, base), _label_of)
    trace.initial_decisions[name] = Decision.parsed(text, PromptStage.SR_INITIAL, name)
    response = text
    reflections: list[str] = []
    for _ in range(iterations):
        anchor = f"Your response: {response}\n"
        prompt = render(PromptStage.SR_REFLECT, {**base, "response": response})
        if reflections:
            prompt = insert_after(prompt, anchor, reflection_history_block(reflections))
        reflection = session.ask(endpoint, PromptStage.SR_REFLECT, prompt)

        prompt = render(PromptStage.SR_FINAL, {**base, "response": response, "reflection": reflection})
        if reflections:
            prompt = insert_after(prompt, anchor, reflection_history_block(reflections))
        response = session.ask(endpoint, PromptStage.SR_FINAL, prompt, _label_of)
        reflections.append(reflection)

    trace.feedbacks[name] = reflections
    trace.final_decisions[name] = Decision.parsed(response, PromptStage.SR_FINAL, name)
    return trace


def _check_pair(m1, m2) -> None:
    if m1.name == m2.name:
        raise ValueError(f"debaters must be distinct endpoints, got {m1.name!r} twice")


def run_debate(m1, m2, scenario: ScenarioRecord, rounds: int = 1, policy: AdjudicationPolicy | None = None) -> Trace:
    """Debate-Only: independent answers, ``rounds`` feedback exchanges, final answers."""
    _check_pair(m1, m2)
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    policy = policy or AdjudicationPolicy.oracle()
    agents = (m1, m2)
    trace = _new_trace(scenario, Strategy.DEBATE_ONLY, [m1.name, m2.name])
    trace.rounds = rounds
    session = _Session(trace, scenario)
    base = _base_bindings(scenario)

    initial = {}
    for agent in agents:
        initial[agent.name] = session.ask(
            agent, PromptStage.D_INITIAL, render(PromptStage.D_INITIAL, base), _label_of
        )
        trace.initial_decisions[agent.name] = Decision.parsed(initial[agent.name], PromptStage.D_INITIAL, agent.name)

    feedback: dict[str, list[str]] = {m1.name: [], m2.name: []}
    for _ in range(rounds):
        this_round = {}
        for agent, other in ((m1, m2), (m2, m1)):
            b = {**base, "your_response": initial[agent.name], "other_response": initial[other.name]}
            prompt = render(PromptStage.D_FEEDBACK, b)
            history = list(zip(feedback[agent.name], feedback[other.name]))
            if history:
                prompt = insert_after(prompt, f"Discussant: {b['other_response']}\n", debate_history_block(history))
            this_round[agent.name] = session.ask(agent, PromptStage.D_FEEDBACK, prompt)
        for agent in agents:
            feedback[agent.name].append(this_round[agent.name])
    trace.feedbacks = feedback

    for agent, other in ((m1, m2), (m2, m1)):
        b = {
            **base,
            "your_response": initial[agent.name],
            "other_response": initial[other.name],
            "your_feedback": feedback[agent.name][-1],
            "other_feedback": feedback[other.name][-1],
        }
        prompt = render(PromptStage.D_FINAL, b)
        history = list(zip(feedback[agent.name][:-1], feedback[other.name][:-1]))
        if history:
            prompt = insert_after(prompt, f"Discussant: {b['other_response']}\n", debate_history_block(history))
        text = session.ask(agent, PromptStage.D_FINAL, prompt, _label_of)
        trace.final_decisions[agent.name] = Decision.parsed(text, PromptStage.D_FINAL, agent.name)

    return _finish(trace, policy, scenario)


def run_selfreflect_debate(
    m1,
    m2,
    scenario: ScenarioRecord,
    policy: AdjudicationPolicy | None = None,
    option_orders: tuple["OptionOrder | str", "OptionOrder | str"] = (OptionOrder.REFLECT_FIRST, OptionOrder.REFLECT_FIRST),
) -> Trace:
    """Self-Reflect+Debate: each agent picks (A)/(B), runs that branch, then re-decides."""
    _check_pair(m1, m2)
    policy = policy or AdjudicationPolicy.oracle()
    orders = {m1.name: OptionOrder.parse(option_orders[0]), m2.name: OptionOrder.parse(option_orders[1])}
    agents = (m1, m2)
    trace = _new_trace(scenario, Strategy.SELF_REFLECT_DEBATE, [m1.name, m2.name])
    session = _Session(trace, scenario)
    base = _base_bindings(scenario)

    initial = {}
    for agent in agents:
        initial[agent.name] = session.ask(
            agent, PromptStage.SD_INITIAL, render(PromptStage.SD_INITIAL, base), _label_of
        )
        trace.initial_decisions[agent.name] = Decision.parsed(initial[agent.name], PromptStage.SD_INITIAL, agent.name)

    for agent, other in ((m1, m2), (m2, m1)):
        order = orders[agent.name]
        prompt = render_choice_prompt(
            {**base, "your_response": initial[agent.name], "other_response": initial[other.name]}, order
        )
        text = session.ask(agent, PromptStage.SD_CHOICE, prompt, lambda t, o=order: parse_choice(t, o).chosen.value)
        trace.choices[agent.name] = parse_choice(text, order)

    texts = {}
    for agent, other in ((m1, m2), (m2, m1)):
        if trace.choices[agent.name].chosen is Behavior.REFLECT:
            stage = PromptStage.SD_REFLECT_BRANCH
            prompt = render(stage, {**base, "your_response": initial[agent.name]})
        else:
            stage = PromptStage.SD_DEBATE_BRANCH
            prompt = render(
                stage, {**base, "your_response": initial[agent.name], "other_response": initial[other.name]}
            )
        texts[agent.name] = session.ask(agent, stage, prompt)
    trace.feedbacks = {name: [text] for name, text in texts.items()}

    for agent, other in ((m1, m2), (m2, m1)):
        prompt = render(
            PromptStage.SD_FINAL,
            {
                **base,
                "your_choice": OWN_CHOICE_TEXT[trace.choices[agent.name].chosen.value],
                "other_choice": OTHER_CHOICE_TEXT[trace.choices[other.name].chosen.value],
                "your_response": initial[agent.name],
                "other_response": initial[other.name],
                "your_feedback": texts[agent.name],
                "other_feedback": texts[other.name],
            },
        )
        text = session.ask(agent, PromptStage.SD_FINAL, prompt, _label_of)
        trace.final_decisions[agent.name] = Decision.parsed(text, PromptStage.SD_FINAL, agent.name)

    return _finish(trace, policy, scenario)


def expected_completions(strategy: Strategy, *, rounds: int = 1, iterations: int = 1, judged: bool = False) -> int:
    """Closed-form request count for one scenario (before companion runs)."""
    if strategy is Strategy.LABEL_ONLY:
        return 0
    if strategy in (Strategy.SINGLE, Strategy.SINGLE_NO_ROT):
        return 1
    if strategy is Strategy.SELF_REFLECTION:
        return 1 + 2 * iterations
    if strategy is Strategy.DEBATE_ONLY:
        return 2 + 2 * rounds + 2 + int(judged)
    return 2 + 2 + 2 + 2 + int(judged)
