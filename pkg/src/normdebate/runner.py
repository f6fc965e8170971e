"""Run configuration, scheduling, JSONL transcripts, resume and reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import random
import threading
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import yaml

from . import metrics
from .client import ModelEndpoint
from .dataset import ScenarioRecord, TernaryLabel, _norm, load_dataset
from .prompts import OptionOrder, template_checksums
from .strategies import (
    AdjudicationPolicy,
    ScenarioFailed,
    Strategy,
    Trace,
    run_debate,
    run_label_only,
    run_self_reflection,
    run_selfreflect_debate,
    run_single,
)

logger = logging.getLogger(__name__)

TRANSCRIPT = "transcript.jsonl"
MANIFEST = "manifest.json"
FAILURES = "failures.jsonl"
REPORT_DIR = "report"

# Temperature used for both option-order runs of Self-Reflect+Debate.
REPLICATE_TEMPERATURE = 0.8


class ConfigError(ValueError):
    pass


class CorruptTranscript(Exception):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"transcript line {line}: {message}")


class InjectedCrash(RuntimeError):
    """Raised by the crash-injection hook to simulate a killed process."""


# --------------------------------------------------------------------------
# Configuration


def _strategy(value: str | Strategy) -> Strategy:
    if isinstance(value, Strategy):
        return value
    key = _norm(str(value)).replace(" ", "")
    for s in Strategy:
        if s.value.casefold() == key or s.name.replace("_", "").casefold() == key:
            return s
    raise ConfigError(f"unknown strategy {value!r}; choose from {[s.value for s in Strategy]}")


@dataclass
class RunConfig:
    """One experiment: which scenarios, which protocol, which endpoints.

    ``endpoints`` holds the raw per-endpoint mappings from the config file
    (see :meth:`ModelEndpoint.from_dict`) so the snapshot in the manifest is
    exactly what was asked for.
    """

    dataset: str
    out: str
    strategy: Strategy = Strategy.SINGLE
    group_map: str | None = None
    agents: list[str] = field(default_factory=list)
    judge: str | None = None
    endpoints: dict[str, dict[str, Any]] = field(default_factory=dict)
    policy: str = "judge"
    rounds: int = 1
    iterations: int = 1
    fixed_label: str | None = None
    option_orders: list[str] = field(default_factory=lambda: ["ReflectFirst", "ReflectFirst"])
    replicate_orders: bool = True
    seed: int = 0
    concurrency: int = 4
    countries: list[str] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)
    sample: int | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str | Path | None = None) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        flt = d.pop("filter", None) or {}
        for key in ("countries", "ids", "sample"):
            if key in flt:
                d.setdefault(key, flt[key])
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key in ("dataset", "out"):
            if key not in d:
                raise ConfigError(f"config needs '{key}'")
        if base_dir is not None:
            for key in ("dataset", "group_map", "out"):
                if d.get(key) and not os.path.isabs(d[key]):
                    d[key] = os.path.normpath(Path(base_dir) / d[key])
        d["strategy"] = _strategy(d.get("strategy", Strategy.SINGLE))
        d["endpoints"] = {str(k): dict(v or {}) for k, v in (d.get("endpoints") or {}).items()}
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(data, Mapping):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(data, base_dir=path.parent)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        changes = {k: v for k, v in overrides.items() if v is not None}
        if "strategy" in changes:
            changes["strategy"] = _strategy(changes["strategy"])
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["strategy"] = self.strategy.value
        return d

    def identity(self) -> dict[str, Any]:
        """Fields that must match for a resume to be allowed."""
        d = self.to_dict()
        for key in ("out", "concurrency"):
            d.pop(key)
        return d

    # ---------------------------------------------------------------

    def validate(self) -> dict[str, ModelEndpoint]:
        """Check parameter combinations and resolve endpoints; raises ConfigError."""
        s = self.strategy
        if self.policy not in ("judge", "oracle", "random"):
            raise ConfigError(f"unknown policy {self.policy!r}; choose judge, oracle or random")
        if self.rounds < 1 or self.iterations < 1:
            raise ConfigError("rounds and iterations must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.sample is not None and self.sample < 1:
            raise ConfigError("sample must be a positive integer")
        try:
            resolved = {name: ModelEndpoint.from_dict(name, d) for name, d in self.endpoints.items()}
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"bad endpoint: {exc}") from None

        needed = {
            Strategy.LABEL_ONLY: 0,
            Strategy.SINGLE: 1,
            Strategy.SINGLE_NO_ROT: 1,
            Strategy.SELF_REFLECTION: 1,
            Strategy.DEBATE_ONLY: 2,
            Strategy.SELF_REFLECT_DEBATE: 2,
        }[s]
        if len(self.agents) != needed:
            raise ConfigError(f"{s.value} needs {needed} agent endpoint(s), got {len(self.agents)}")
        if needed == 2 and self.agents[0] == self.agents[1]:
            raise ConfigError("debate strategies need two distinct agent endpoints")
        for name in self.agents:
            if name not in resolved:
                raise ConfigError(f"agent {name!r} has no endpoint definition")
        if s is Strategy.LABEL_ONLY:
            try:
                TernaryLabel.from_gold(self.fixed_label or "")
            except ValueError:
                raise ConfigError("LabelOnly needs fixed_label: Yes, No or Neither") from None
        if s.is_multi_agent and self.policy == "judge":
            if not self.judge:
                raise ConfigError("the judge policy needs a judge endpoint")
            if self.judge not in resolved:
                raise ConfigError(f"judge {self.judge!r} has no endpoint definition")
        if s is Strategy.SELF_REFLECT_DEBATE:
            if len(self.option_orders) != 2:
                raise ConfigError("option_orders needs one entry per agent")
            try:
                [OptionOrder.parse(o) for o in self.option_orders]
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return resolved


# --------------------------------------------------------------------------
# Scenario selection


def select_scenarios(records: list[ScenarioRecord], config: RunConfig) -> list[ScenarioRecord]:
    """Apply country/id filters, then a seeded sample; dataset order is kept."""
    chosen = records
    if config.countries:
        wanted = {_norm(c) for c in config.countries}
        chosen = [r for r in chosen if _norm(r.country) in wanted]
    if config.ids:
        wanted_ids = set(map(str, config.ids))
        chosen = [r for r in chosen if r.id in wanted_ids]
    if config.sample is not None and config.sample < len(chosen):
        keep = set(random.Random(config.seed).sample(range(len(chosen)), config.sample))
        chosen = [r for i, r in enumerate(chosen) if i in keep]
    return chosen


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Transcript I/O


def trace_line(trace: Trace) -> str:
    return json.dumps(trace.to_dict(), ensure_ascii=False, sort_keys=True) + "\n"


def read_transcript(path: str | Path, repair_tail: bool = False) -> list[Trace]:
    """Parse a JSONL transcript.

    With ``repair_tail`` an unterminated or unparsable last line (the mark of
    an interrupted write) is cut off the file; anywhere else it is an error.
    """
    path = Path(path)
    if not path.exists():
        return []
    raw = path.read_bytes()
    lines = raw.split(b"\n")
    complete, tail = lines[:-1], lines[-1]
    traces: list[Trace] = []
    offset = 0
    for lineno, line in enumerate(complete, start=1):
        try:
            traces.append(Trace.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            if repair_tail and lineno == len(complete) and not tail:
                _truncate(path, offset)
                logger.warning("dropped damaged final transcript line %d", lineno)
                return traces
            raise CorruptTranscript(lineno, str(exc)) from None
        offset += len(line) + 1
    if tail:
        if not repair_tail:
            raise CorruptTranscript(len(complete) + 1, "unterminated line")
        _truncate(path, offset)
        logger.warning("dropped partial final transcript line %d", len(complete) + 1)
    return traces


def _truncate(path: Path, size: int) -> None:
    with open(path, "r+b") as fh:
        fh.truncate(size)


class TranscriptWriter:
    """Single serialized appender; every line is flushed and fsynced."""

    def __init__(self, path: Path, crash_after: int | None = None):
        self.path = path
        self._lock = threading.Lock()
        self._fh = open(path, "a", encoding="utf-8")
        self._crash_after = crash_after
        self.written = 0

    def append(self, trace: Trace) -> None:
        line = trace_line(trace)
        with self._lock:
            if self._crash_after is not None and self.written >= self._crash_after:
                # simulate dying halfway through a write
                self._fh.write(line[: len(line) // 2])
                self._fh.flush()
                raise InjectedCrash(f"injected crash after {self.written} traces")
            self._fh.write(line)
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self.written += 1

    def close(self) -> None:
        self._fh.close()


def _write_json_atomic(path: Path, data: Any) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# Execution


@dataclass
class RunManifest:
    config: dict[str, Any]
    template_checksums: dict[str, str]
    dataset_checksum: str
    started: str
    finished: str | None = None
    status: dict[str, str] = field(default_factory=dict)  # scenario id -> done/failed/pending
    errors: dict[str, str] = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        out = {"done": 0, "failed": 0, "pending": 0}
        for s in self.status.values():
            out[s] += 1
        return out

    def to_dict(self) -> dict[str, Any]:
        return {**dataclasses.asdict(self), "counts": self.counts()}

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d.pop("counts", None)
        return cls(**d)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _with_temperature(endpoint: ModelEndpoint, temperature: float) -> ModelEndpoint:
    return dataclasses.replace(endpoint, params=dataclasses.replace(endpoint.params, temperature=temperature))


def make_scenario_fn(config: RunConfig, endpoints: Mapping[str, ModelEndpoint]) -> tuple[Callable[[ScenarioRecord], Trace], list]:
    """Build the per-scenario protocol function and the clients it uses."""
    s = config.strategy
    if s is Strategy.SELF_REFLECT_DEBATE and config.replicate_orders:
        endpoints = {k: _with_temperature(v, REPLICATE_TEMPERATURE) for k, v in endpoints.items()}
    clients = {name: ep.connect() for name, ep in endpoints.items()}
    agents = [clients[a] for a in config.agents]

    policy = None
    if s.is_multi_agent:
        if config.policy == "judge":
            policy = AdjudicationPolicy.judge_model(clients[config.judge])
        elif config.policy == "oracle":
            policy = AdjudicationPolicy.oracle()
        else:
            policy = AdjudicationPolicy.random(config.seed)

    if s is Strategy.LABEL_ONLY:
        fixed = TernaryLabel.from_gold(config.fixed_label)
        fn = lambda sc: run_label_only(sc, fixed)  # noqa: E731
    elif s in (Strategy.SINGLE, Strategy.SINGLE_NO_ROT):
        fn = lambda sc: run_single(agents[0], sc, with_rot=s is Strategy.SINGLE)  # noqa: E731
    elif s is Strategy.SELF_REFLECTION:
        fn = lambda sc: run_self_reflection(agents[0], sc, config.iterations)  # noqa: E731
    elif s is Strategy.DEBATE_ONLY:
        fn = lambda sc: run_debate(agents[0], agents[1], sc, config.rounds, policy)  # noqa: E731
    else:
        orders = tuple(OptionOrder.parse(o) for o in config.option_orders)

        def fn(sc: ScenarioRecord) -> Trace:
            if not config.replicate_orders:
                return run_selfreflect_debate(agents[0], agents[1], sc, policy, orders)
            main = run_selfreflect_debate(
                agents[0], agents[1], sc, policy, (OptionOrder.REFLECT_FIRST, OptionOrder.REFLECT_FIRST)
            )
            main.companion = run_selfreflect_debate(
                agents[0], agents[1], sc, policy, (OptionOrder.DEBATE_FIRST, OptionOrder.DEBATE_FIRST)
            )
            return main

    return fn, list(clients.values())


def execute_run(config: RunConfig, crash_after: int | None = None) -> RunManifest:
    """Run (or resume) every selected scenario and write transcripts and reports.

    ``crash_after`` is a test hook: after that many traces are persisted the
    next write is cut in half and :class:`InjectedCrash` propagates.
    """
    endpoints = config.validate()
    records = load_dataset(config.dataset, config.group_map)
    scenarios = select_scenarios(records, config)
    if not scenarios:
        raise ConfigError("the scenario filter selects no scenarios")

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    transcript_path = out / TRANSCRIPT
    manifest_path = out / MANIFEST

    previous = None
    if manifest_path.exists():
        previous = RunManifest.load(manifest_path)
        if previous.config.get("identity") != config.identity():
            raise ConfigError(f"{out} holds a run with a different configuration")
    done = {t.scenario_id for t in read_transcript(transcript_path, repair_tail=True)}

    selected_ids = [sc.id for sc in scenarios]
    manifest = RunManifest(
        config={"identity": config.identity(), "out": config.out, "concurrency": config.concurrency},
        template_checksums=template_checksums(),
        dataset_checksum=file_sha256(config.dataset),
        started=previous.started if previous else _now(),
        status={sid: ("done" if sid in done else "pending") for sid in selected_ids},
    )
    _write_json_atomic(manifest_path, manifest.to_dict())

    todo = [sc for sc in scenarios if sc.id not in done]
    logger.info("%d scenarios selected, %d already done, %d to run", len(scenarios), len(done), len(todo))
    fn, clients = make_scenario_fn(config, endpoints)
    writer = TranscriptWriter(transcript_path, crash_after)
    failures_path = out / FAILURES
    fail_lock = threading.Lock()

    def work(sc: ScenarioRecord) -> None:
        try:
            trace = fn(sc)
        except ScenarioFailed as exc:
            logger.error("%s", exc)
            with fail_lock:
                manifest.status[sc.id] = "failed"
                manifest.errors[sc.id] = str(exc)
                with open(failures_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"scenario_id": sc.id, "error": str(exc),
                                         "partial": exc.trace.to_dict()}, sort_keys=True) + "\n")
            return
        writer.append(trace)
        with fail_lock:
            manifest.status[sc.id] = "done"
            manifest.errors.pop(sc.id, None)

    try:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = [pool.submit(work, sc) for sc in todo]
            wait(futures, return_when=FIRST_EXCEPTION)
            for f in futures:
                if f.done() and f.exception() is not None:
                    for g in futures:
                        g.cancel()
                    raise f.exception()
    finally:
        writer.close()
        for c in clients:
            close = getattr(c, "close", None)
            if close:
                close()
        _write_json_atomic(manifest_path, manifest.to_dict())

    if all(v == "done" for v in manifest.status.values()):
        _canonicalize(transcript_path, selected_ids)
    manifest.finished = _now()
    _write_json_atomic(manifest_path, manifest.to_dict())
    if any(v == "done" for v in manifest.status.values()):
        report(out)
    return manifest


def _canonicalize(path: Path, order: list[str]) -> None:
    """Rewrite a complete transcript in selection order, so repeats are byte-identical."""
    rank = {sid: i for i, sid in enumerate(order)}
    traces = read_transcript(path)
    traces.sort(key=lambda t: rank.get(t.scenario_id, len(rank)))
    tmp = path.with_suffix(".jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.writelines(trace_line(t) for t in traces)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# Reports


def tsv_table(header: Iterable[str], rows: Iterable[Iterable[Any]]) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(str(c) for c in row) for row in rows]
    return "\n".join(lines) + "\n"


def fmt3(x: float) -> str:
    return f"{x:.3f}"


def build_reports(traces: list[Trace]) -> dict[str, str]:
    """All report tables as TSV text, keyed by file name."""
    traces = sorted(traces, key=lambda t: t.scenario_id)
    log = metrics.PredictionLog.from_traces(traces)
    if not len(log):
        raise metrics.EmptyLog("transcript holds no traces")
    out: dict[str, str] = {}

    rows = [("n", len(log)), ("adjudicated_accuracy_pct", metrics.pct(metrics.accuracy(log)))]
    agents = traces[0].agents
    if all(t.agents == agents for t in traces):
        for i, name in enumerate(agents):
            rows.append((f"agent_accuracy_pct:{name}", metrics.pct(metrics.accuracy(log, i))))
        if len(agents) == 2:
            triples = [(e.final[0], e.final[1], e.gold) for e in log]
            rows.append(("oracle_accuracy_pct", metrics.pct(metrics.oracle_accuracy(triples))))
    rows.append(("judge_calls", sum(e.judged for e in log)))
    out["accuracy.tsv"] = tsv_table(("metric", "value"), rows)

    try:
        rep = metrics.parity(log)
        prow = [
            (g, rep.counts[g], metrics.pct(acc), fmt3(par), "baseline" if g == rep.baseline else "")
            for g, (acc, par) in rep.per_group.items()
        ]
        prow.append(("average", len(log), "", fmt3(rep.average), "tie" if rep.tie_broken else ""))
        out["parity.tsv"] = tsv_table(("group", "n", "accuracy_pct", "parity", "note"), prow)
    except metrics.ZeroAccuracyBaseline as exc:
        out["parity.tsv"] = tsv_table(("group", "n", "accuracy_pct", "parity", "note"), [("undefined", len(log), "", "", str(exc))])

    _, flow = metrics.classify_dynamics(log)
    out["dynamics.tsv"] = tsv_table(
        ("phase", "state", "count", "pct"),
        ((p, s.value, n, metrics.pct(n / flow.total)) for p, s, n in flow.nodes()),
    )
    out["sankey_links.tsv"] = tsv_table(
        ("source_phase", "source_state", "target_phase", "target_state", "count"),
        ((a, s.value, b, t.value, n) for a, s, b, t, n in flow.links()),
    )
    for by in ("gold_label", "group", "country"):
        brow = []
        for r in metrics.breakdowns(log, by):
            brow.append(
                (r.bucket, r.n, metrics.pct(r.accuracy))
                + tuple(metrics.pct(r.shares[p][s]) for p in metrics.PHASES for s in metrics.State)
            )
        header = ("bucket", "n", "accuracy_pct") + tuple(
            f"{p}_{s.value.lower()}_pct" for p in metrics.PHASES for s in metrics.State
        )
        out[f"breakdown_{by}.tsv"] = tsv_table(header, brow)

    sd = [t for t in traces if t.strategy is Strategy.SELF_REFLECT_DEBATE]
    if sd and all(t.companion is not None for t in sd):
        crow = [
            (c.agent, f"{c.reflect:.1f}", f"{c.debate:.1f}", c.per_run[0][0], c.per_run[0][1], c.per_run[1][0], c.per_run[1][1])
            for c in metrics.choice_counts(sd)
        ]
        out["choices.tsv"] = tsv_table(
            ("agent", "reflect_avg", "debate_avg", "reflect_run1", "debate_run1", "reflect_run2", "debate_run2"), crow
        )
    return out


def report(run_dir: str | Path) -> dict[str, str]:
    """Recompute every table from the transcript alone and write them under ``report/``."""
    run_dir = Path(run_dir)
    path = run_dir / TRANSCRIPT
    if not path.exists():
        raise metrics.EmptyLog(f"no transcript at {path}")
    tables = build_reports(read_transcript(path))
    rdir = run_dir / REPORT_DIR
    rdir.mkdir(exist_ok=True)
    for name, text in tables.items():
        (rdir / name).write_text(text, encoding="utf-8")
    return tables
