"""Accuracy, cultural-group parity and decision-dynamics metrics over prediction logs."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from .dataset import TernaryLabel
from .strategies import Behavior, Strategy, Trace, oracle_select


class MetricsError(Exception):
    pass


class EmptyLog(MetricsError):
    pass


class UnknownAgent(MetricsError):
    pass


class ZeroAccuracyBaseline(MetricsError):
    pass


class MissingPhase(MetricsError):
    pass


class MissingCompanionRun(MetricsError):
    pass


@dataclass(frozen=True)
class LogEntry:
    scenario_id: str
    gold: TernaryLabel
    initial: tuple[TernaryLabel, ...]
    final: tuple[TernaryLabel, ...]
    adjudicated: TernaryLabel
    strategy: Strategy = Strategy.DEBATE_ONLY
    agents: tuple[str, ...] = ()
    group: str | None = None
    country: str = ""
    run: str = ""
    judged: bool = False

    @classmethod
    def from_trace(cls, trace: Trace, run: str = "") -> "LogEntry":
        agents = tuple(trace.agents)
        return cls(
            scenario_id=trace.scenario_id,
            gold=trace.gold,
            initial=tuple(trace.initial_decisions[a].label for a in agents if a in trace.initial_decisions),
            final=tuple(trace.final_decisions[a].label for a in agents if a in trace.final_decisions),
            adjudicated=trace.final_label,
            strategy=trace.strategy,
            agents=agents,
            group=trace.group.value if trace.group else None,
            country=trace.country,
            run=run,
            judged=bool(trace.judge_turns),
        )

    @property
    def correct(self) -> bool:
        return self.adjudicated == self.gold


class PredictionLog:
    """Ordered prediction entries; (run, scenario_id) is unique."""

    def __init__(self, entries: Iterable[LogEntry] = ()):
        self.entries: list[LogEntry] = list(entries)
        keys = Counter((e.run, e.scenario_id) for e in self.entries)
        dupes = [k for k, n in keys.items() if n > 1]
        if dupes:
            raise MetricsError(f"duplicate log entries: {dupes[:3]}")

    @classmethod
    def from_traces(cls, traces: Iterable[Trace], run: str = "") -> "PredictionLog":
        return cls(LogEntry.from_trace(t, run) for t in traces)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __add__(self, other: "PredictionLog") -> "PredictionLog":
        return PredictionLog(self.entries + other.entries)

    def filter(self, pred: Callable[[LogEntry], bool]) -> "PredictionLog":
        return PredictionLog(e for e in self.entries if pred(e))


def _agent_label(entry: LogEntry, agent: int | str) -> TernaryLabel:
    if isinstance(agent, int):
        if not 0 <= agent < len(entry.final):
            raise UnknownAgent(f"entry {entry.scenario_id} has no agent #{agent}")
        return entry.final[agent]
    try:
        return entry.final[entry.agents.index(agent)]
    except ValueError:
        raise UnknownAgent(f"agent {agent!r} not in entry {entry.scenario_id}") from None


def accuracy(log: PredictionLog | Sequence[LogEntry], agent: int | str | None = None) -> float:
    """Fraction correct for the adjudicated label, or for one agent's final label.

    ``agent`` is a name or a position (0/1); positions are what make sense
    for logs pooled over several model pairs.
    """
    entries = list(log)
    if not entries:
        raise EmptyLog("accuracy of an empty log")
    if agent is None:
        hits = sum(e.adjudicated == e.gold for e in entries)
    else:
        hits = sum(_agent_label(e, agent) == e.gold for e in entries)
    return hits / len(entries)


def oracle_accuracy(triples: Iterable[tuple[TernaryLabel, TernaryLabel, TernaryLabel]]) -> float:
    """Accuracy of oracle selection over (pred1, pred2, gold) triples."""
    triples = list(triples)
    if not triples:
        raise EmptyLog("oracle accuracy of an empty log")
    return sum(oracle_select(p1, p2, g) == g for p1, p2, g in triples) / len(triples)


def paired_oracle_accuracy(log1: PredictionLog, log2: PredictionLog) -> float:
    """Oracle selection across two single-model logs, matched on scenario id."""
    second = {e.scenario_id: e for e in log2}
    missing = [e.scenario_id for e in log1 if e.scenario_id not in second]
    if missing or len(second) != len(log1):
        raise MetricsError("oracle selection needs both logs to cover the same scenarios")
    return oracle_accuracy((e.adjudicated, second[e.scenario_id].adjudicated, e.gold) for e in log1)


# --------------------------------------------------------------------------
# Parity


@dataclass
class ParityReport:
    baseline: str
    per_group: dict[str, tuple[float, float]]  # group -> (accuracy, parity)
    tie_broken: bool = False
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def average(self) -> float:
        return sum(p for _, p in self.per_group.values()) / len(self.per_group)

    def parity(self, group: str) -> float:
        return self.per_group[group][1]


def group_accuracies(
    log: PredictionLog, grouping: Mapping[str, str] | None = None, agent: int | str | None = None
) -> tuple[dict[str, float], dict[str, int]]:
    buckets: dict[str, list[LogEntry]] = defaultdict(list)
    for e in log:
        group = grouping[e.scenario_id] if grouping is not None else e.group
        if group is None:
            raise MetricsError(f"scenario {e.scenario_id} has no cultural group")
        buckets[group].append(e)
    accs = {g: accuracy(entries, agent) for g, entries in sorted(buckets.items())}
    return accs, {g: len(v) for g, v in sorted(buckets.items())}


def parity(
    log: PredictionLog,
    grouping: Mapping[str, str] | None = None,
    baseline: str = "auto-max",
    agent: int | str | None = None,
) -> ParityReport:
    """Parity(g) = Acc_g / Acc_b, with b the best group unless fixed."""
    if not len(log):
        raise EmptyLog("parity of an empty log")
    accs, counts = group_accuracies(log, grouping, agent)
    tie = False
    if baseline == "auto-max":
        best = max(accs.values())
        tied = sorted(g for g, a in accs.items() if a == best)
        tie = len(tied) > 1
        base = tied[0]
    else:
        if baseline not in accs:
            raise MetricsError(f"baseline group {baseline!r} has no entries")
        base = baseline
    if accs[base] == 0:
        raise ZeroAccuracyBaseline(f"baseline group {base!r} has zero accuracy")
    per_group = {g: (a, 1.0 if g == base else a / accs[base]) for g, a in accs.items()}
    return ParityReport(base, per_group, tie, counts)


# --------------------------------------------------------------------------
# Decision dynamics


class State(str, Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    MIXED = "Mixed"


PHASES = ("initial", "final", "judge")


@dataclass(frozen=True)
class DynamicsRecord:
    initial_state: State
    final_state: State
    judge_state: State


def phase_state(labels: Sequence[TernaryLabel], gold: TernaryLabel) -> State:
    """Mixed whenever the agents' labels differ, otherwise the shared correctness."""
    if not labels:
        raise MissingPhase("no decisions for this phase")
    if len(set(labels)) > 1:
        return State.MIXED
    return State.CORRECT if labels[0] == gold else State.INCORRECT


def classify(entry: LogEntry) -> DynamicsRecord:
    if not entry.initial or not entry.final:
        raise MissingPhase(f"entry {entry.scenario_id} lacks initial or final decisions")
    return DynamicsRecord(
        phase_state(entry.initial, entry.gold),
        phase_state(entry.final, entry.gold),
        State.CORRECT if entry.adjudicated == entry.gold else State.INCORRECT,
    )


@dataclass
class FlowMatrix:
    triples: Counter = field(default_factory=Counter)  # (initial, final, judge) -> count

    @property
    def total(self) -> int:
        return sum(self.triples.values())

    def marginal(self, phase: str) -> dict[State, int]:
        idx = PHASES.index(phase)
        out: Counter = Counter()
        for key, n in self.triples.items():
            out[key[idx]] += n
        return {s: out.get(s, 0) for s in State}

    def links(self) -> list[tuple[str, State, str, State, int]]:
        """Transitions between consecutive phases, in a fixed order."""
        rows = []
        for a, b in ((0, 1), (1, 2)):
            pair: Counter = Counter()
            for key, n in self.triples.items():
                pair[(key[a], key[b])] += n
            for s in State:
                for t in State:
                    if pair.get((s, t)):
                        rows.append((PHASES[a], s, PHASES[b], t, pair[(s, t)]))
        return rows

    def nodes(self) -> list[tuple[str, State, int]]:
        """(phase, state, count) triples; the judge phase has no Mixed state."""
        return [
            (phase, s, n)
            for phase in PHASES
            for s, n in self.marginal(phase).items()
            if not (phase == "judge" and s is State.MIXED)
        ]


def classify_dynamics(log: PredictionLog) -> tuple[list[DynamicsRecord], FlowMatrix]:
    records = [classify(e) for e in log]
    flow = FlowMatrix(Counter((r.initial_state, r.final_state, r.judge_state) for r in records))
    return records, flow


def accuracy_decomposition(log: PredictionLog) -> dict[str, float]:
    """Split adjudicated accuracy into agreed-correct and judge-resolved parts.

    Agreed-but-wrong finals can never be rescued, so those two parts sum to
    the adjudicated accuracy.
    """
    records, _ = classify_dynamics(log)
    n = len(records)
    if n == 0:
        raise EmptyLog("decomposition of an empty log")
    initial_correct = sum(r.initial_state is State.CORRECT for r in records) / n
    final_correct = sum(r.final_state is State.CORRECT for r in records) / n
    mixed_resolved = sum(r.final_state is State.MIXED and r.judge_state is State.CORRECT for r in records) / n
    return {
        "initial_correct": initial_correct,
        "final_correct": final_correct,
        "mixed_resolved_correct": mixed_resolved,
        "adjudicated": final_correct + mixed_resolved,
    }


# --------------------------------------------------------------------------
# Breakdowns


@dataclass
class BucketRow:
    bucket: str
    n: int
    accuracy: float
    shares: dict[str, dict[State, float]]


def _bucket_key(entry: LogEntry, by: str) -> str:
    if by == "gold_label":
        return entry.gold.value
    if by == "group":
        return entry.group or ""
    if by == "country":
        return entry.country
    raise ValueError(f"unknown breakdown {by!r}")


def breakdowns(log: PredictionLog, by: str) -> list[BucketRow]:
    buckets: dict[str, list[LogEntry]] = defaultdict(list)
    for e in log:
        buckets[_bucket_key(e, by)].append(e)
    rows = []
    for key in sorted(buckets):
        entries = buckets[key]
        _, flow = classify_dynamics(PredictionLog(entries))
        n = len(entries)
        shares = {phase: {s: c / n for s, c in flow.marginal(phase).items()} for phase in PHASES}
        rows.append(BucketRow(key, n, accuracy(entries), shares))
    return rows


# --------------------------------------------------------------------------
# Self-Reflect+Debate choices


@dataclass
class ChoiceCounts:
    agent: str
    reflect: float
    debate: float
    per_run: list[tuple[int, int]]  # (reflect, debate) per option-order run


def choice_counts(traces: Iterable[Trace]) -> list[ChoiceCounts]:
    """Per-agent reflect/debate counts averaged over the two option-order runs."""
    runs: dict[str, list[Counter]] = {}
    n = 0
    for trace in traces:
        if trace.strategy is not Strategy.SELF_REFLECT_DEBATE:
            continue
        if trace.companion is None:
            raise MissingCompanionRun(f"scenario {trace.scenario_id} has only one option-order run")
        n += 1
        for run_index, run in enumerate((trace, trace.companion)):
            for agent, outcome in run.choices.items():
                slots = runs.setdefault(agent, [Counter(), Counter()])
                slots[run_index][outcome.chosen] += 1
    out = []
    for agent in sorted(runs):
        per_run = [(c[Behavior.REFLECT], c[Behavior.DEBATE]) for c in runs[agent]]
        for r, d in per_run:
            if r + d != n:
                raise MissingCompanionRun(f"agent {agent} is missing choices in some runs")
        reflect = sum(r for r, _ in per_run) / 2
        debate = sum(d for _, d in per_run) / 2
        out.append(ChoiceCounts(agent, reflect, debate, per_run))
    return out


def pct(x: float) -> str:
    return f"{100 * x:.1f}"
