from __future__ import annotations

import json
from collections import Counter

import pytest

from normdebate import metrics, runner
from normdebate.runner import ConfigError, CorruptTranscript, InjectedCrash, RunConfig, execute_run, read_transcript

from .conftest import MINI


def debate_config(out, **kw) -> RunConfig:
    base = dict(
        dataset=str(MINI),
        out=str(out),
        strategy="DebateOnly",
        agents=["m1", "m2"],
        judge="j",
        policy="judge",
        seed=3,
        concurrency=4,
        sample=20,
        endpoints={
            "m1": {"mock": {"default_behavior": "noisy-gold", "accuracy": 0.6, "seed": 1}},
            "m2": {"mock": {"default_behavior": "noisy-gold", "accuracy": 0.5, "seed": 2}},
            "j": {"mock": {"default_behavior": "noisy-gold", "accuracy": 0.7, "seed": 3}},
        },
    )
    base.update(kw)
    return RunConfig.from_dict(base)


def files(run_dir):
    return {p.relative_to(run_dir).as_posix(): p.read_bytes() for p in sorted(run_dir.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_mock_run_20_scenarios(tmp_path):
    manifest = execute_run(debate_config(tmp_path / "r"))
    assert manifest.counts() == {"done": 20, "failed": 0, "pending": 0}
    traces = read_transcript(tmp_path / "r" / "transcript.jsonl")
    assert len(traces) == 20 == len({t.scenario_id for t in traces})
    saved = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert saved["counts"]["done"] == 20 and saved["finished"]
    assert set(saved["template_checksums"]) and len(saved["dataset_checksum"]) == 64
    # replay: report from transcripts matches metrics from the in-memory traces
    log = metrics.PredictionLog.from_traces(traces)
    acc = dict(line.split("\t") for line in (tmp_path / "r" / "report" / "accuracy.tsv").read_text().splitlines()[1:])
    assert acc["adjudicated_accuracy_pct"] == metrics.pct(metrics.accuracy(log))
    assert int(acc["judge_calls"]) == sum(bool(t.judge_turns) for t in traces)


def test_repeat_runs_are_byte_identical(tmp_path):
    execute_run(debate_config(tmp_path / "a", concurrency=1))
    execute_run(debate_config(tmp_path / "b", concurrency=6))
    fa, fb = files(tmp_path / "a"), files(tmp_path / "b")
    assert fa.keys() == fb.keys() and fa == fb


def test_seed_only_changes_random_adjudication(tmp_path):
    execute_run(debate_config(tmp_path / "a", policy="random", seed=1, sample=None))
    execute_run(debate_config(tmp_path / "b", policy="random", seed=2, sample=None))
    ta = {t.scenario_id: t for t in read_transcript(tmp_path / "a" / "transcript.jsonl")}
    tb = {t.scenario_id: t for t in read_transcript(tmp_path / "b" / "transcript.jsonl")}
    assert ta.keys() == tb.keys()
    differ = 0
    for sid in ta:
        assert ta[sid].turns == tb[sid].turns
        assert ta[sid].final_decisions == tb[sid].final_decisions
        if ta[sid].final_label != tb[sid].final_label:
            differ += 1
            assert ta[sid].adjudication == "random"
    assert differ > 0


@pytest.mark.parametrize("concurrency", [1, 4])
def test_crash_and_resume(tmp_path, concurrency):
    cfg = debate_config(tmp_path / "r", concurrency=concurrency)
    with pytest.raises(InjectedCrash):
        execute_run(cfg, crash_after=10)
    path = tmp_path / "r" / "transcript.jsonl"
    assert not path.read_bytes().endswith(b"\n")  # torn final write
    manifest = runner.RunManifest.load(tmp_path / "r" / "manifest.json")
    assert manifest.counts()["done"] == 10 and manifest.finished is None

    before = {t.scenario_id for t in read_transcript(path, repair_tail=True)}
    assert len(before) == 10
    manifest = execute_run(cfg)
    after = [t.scenario_id for t in read_transcript(path)]
    assert len(after) == 20 and len(set(after)) == 20
    assert manifest.counts() == {"done": 20, "failed": 0, "pending": 0}
    # the resumed run ends byte-identical to an uninterrupted one
    execute_run(debate_config(tmp_path / "clean", concurrency=concurrency))
    assert path.read_bytes() == (tmp_path / "clean" / "transcript.jsonl").read_bytes()


def test_resume_of_finished_run_is_noop(tmp_path):
    cfg = debate_config(tmp_path / "r")
    execute_run(cfg)
    before = (tmp_path / "r" / "transcript.jsonl").read_bytes()
    execute_run(cfg.with_overrides(concurrency=2))
    assert (tmp_path / "r" / "transcript.jsonl").read_bytes() == before


def test_resume_with_other_config_refused(tmp_path):
    execute_run(debate_config(tmp_path / "r"))
    with pytest.raises(ConfigError):
        execute_run(debate_config(tmp_path / "r", rounds=2))


def test_failures_are_recorded_not_fatal(tmp_path):
    cfg = debate_config(
        tmp_path / "r",
        sample=5,
        endpoints={
            "m1": {"mock": {}},
            "m2": {"base_url": "http://127.0.0.1:9/v1", "retry_limit": 0, "timeout": 2},
            "j": {"mock": {}},
        },
    )
    manifest = execute_run(cfg)
    assert manifest.counts() == {"done": 0, "failed": 5, "pending": 0}
    lines = (tmp_path / "r" / "failures.jsonl").read_text().splitlines()
    assert len(lines) == 5 and all("D_Initial" in json.loads(x)["error"] for x in lines)
    assert not (tmp_path / "r" / "report").exists()


@pytest.mark.parametrize(
    "change,message",
    [
        ({"judge": None}, "judge"),
        ({"agents": ["m1"]}, "needs 2"),
        ({"agents": ["m1", "m1"]}, "distinct"),
        ({"agents": ["m1", "ghost"]}, "ghost"),
        ({"policy": "vote"}, "policy"),
        ({"rounds": 0}, "rounds"),
        ({"concurrency": 0}, "concurrency"),
        ({"strategy": "LabelOnly", "agents": []}, "fixed_label"),
        ({"strategy": "SelfReflectDebate", "option_orders": ["Sideways", "ReflectFirst"]}, "option order"),
    ],
)
def test_config_validation(tmp_path, change, message):
    cfg = debate_config(tmp_path / "r", **change)
    with pytest.raises(ConfigError, match=message):
        execute_run(cfg)
    assert not (tmp_path / "r").exists()


def test_config_file_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"dataset": "d", "out": "o", "colour": 1})
    with pytest.raises(ConfigError, match="out"):
        RunConfig.from_dict({"dataset": "d"})
    with pytest.raises(ConfigError, match="strategy"):
        RunConfig.from_dict({"dataset": "d", "out": "o", "strategy": "Chess"})
    path = tmp_path / "c.yaml"
    path.write_text("dataset: data.csv\nout: runs/x\nstrategy: self-reflection\nfilter: {sample: 3}\n")
    cfg = RunConfig.load(path)
    assert cfg.dataset == str(tmp_path / "data.csv") and cfg.sample == 3
    assert cfg.strategy.value == "SelfReflection"
    path.write_text("- a list\n")
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test_selection(mini_records):
    cfg = RunConfig(dataset="d", out="o", countries=["egypt", "India"])
    assert Counter(r.country for r in runner.select_scenarios(mini_records, cfg)) == {"Egypt": 2, "India": 2}
    cfg = RunConfig(dataset="d", out="o", ids=["3", "5"])
    assert [r.id for r in runner.select_scenarios(mini_records, cfg)] == ["3", "5"]
    a = runner.select_scenarios(mini_records, RunConfig(dataset="d", out="o", sample=7, seed=1))
    b = runner.select_scenarios(mini_records, RunConfig(dataset="d", out="o", sample=7, seed=1))
    c = runner.select_scenarios(mini_records, RunConfig(dataset="d", out="o", sample=7, seed=2))
    assert a == b and len(a) == 7 and a != c
    assert [int(r.id) for r in a] == sorted(int(r.id) for r in a)


def test_empty_selection(tmp_path):
    with pytest.raises(ConfigError, match="no scenarios"):
        execute_run(debate_config(tmp_path / "r", countries=["Narnia"]))


def test_replicated_selfreflect_debate(tmp_path):
    cfg = debate_config(
        tmp_path / "r",
        strategy="SelfReflectDebate",
        endpoints={
            "m1": {"mock": {"default_choice": "A"}},
            "m2": {"mock": {"default_choice": "reflect"}},
            "j": {"mock": {}},
        },
    )
    execute_run(cfg)
    traces = read_transcript(tmp_path / "r" / "transcript.jsonl")
    assert all(t.companion is not None for t in traces)
    assert {c.option_order.value for t in traces for c in t.choices.values()} == {"ReflectFirst"}
    assert {c.option_order.value for t in traces for c in t.companion.choices.values()} == {"DebateFirst"}
    table = (tmp_path / "r" / "report" / "choices.tsv").read_text().splitlines()
    assert table[1].split("\t")[:3] == ["m1", "10.0", "10.0"]
    assert table[2].split("\t")[:3] == ["m2", "20.0", "0.0"]


def test_replicated_runs_use_raised_temperature():
    cfg = RunConfig.from_dict(
        {
            "dataset": "d",
            "out": "o",
            "strategy": "SelfReflectDebate",
            "agents": ["a", "b"],
            "policy": "oracle",
            "endpoints": {"a": {"base_url": "http://h/v1"}, "b": {"base_url": "http://h/v1", "temperature": 0.1}},
        }
    )
    _, clients = runner.make_scenario_fn(cfg, cfg.validate())
    assert [c.params.temperature for c in clients] == [runner.REPLICATE_TEMPERATURE] * 2
    single = cfg.with_overrides(replicate_orders=False)
    _, clients = runner.make_scenario_fn(single, single.validate())
    assert [c.params.temperature for c in clients] == [0.0, 0.1]


def test_label_only_run(tmp_path):
    cfg = RunConfig.from_dict({"dataset": str(MINI), "out": str(tmp_path / "r"), "strategy": "LabelOnly", "fixed_label": "Neither"})
    execute_run(cfg)
    acc = (tmp_path / "r" / "report" / "accuracy.tsv").read_text()
    assert "adjudicated_accuracy_pct\t25.0" in acc


def test_report_errors(tmp_path):
    run_dir = tmp_path / "r"
    run_dir.mkdir()
    with pytest.raises(metrics.EmptyLog):
        runner.report(run_dir)
    (run_dir / "transcript.jsonl").write_text("")
    with pytest.raises(metrics.EmptyLog):
        runner.report(run_dir)
    execute_run(debate_config(tmp_path / "ok", sample=3))
    lines = (tmp_path / "ok" / "transcript.jsonl").read_text().splitlines()
    (run_dir / "transcript.jsonl").write_text(lines[0] + "\n{broken\n" + lines[2] + "\n")
    with pytest.raises(CorruptTranscript) as exc:
        runner.report(run_dir)
    assert exc.value.line == 2


def test_report_is_a_function_of_the_transcript(tmp_path):
    execute_run(debate_config(tmp_path / "r"))
    first = runner.report(tmp_path / "r")
    assert runner.report(tmp_path / "r") == first
    traces = read_transcript(tmp_path / "r" / "transcript.jsonl")
    # brute-force recount of the dynamics table
    rows = [line.split("\t") for line in first["dynamics.tsv"].splitlines()[1:]]
    final_mixed = sum(len({d.label for d in t.final_decisions.values()}) > 1 for t in traces)
    assert ["final", "Mixed", str(final_mixed)] == rows[5][:3]
    judge_correct = sum(t.final_label == t.gold for t in traces)
    assert ["judge", "Correct", str(judge_correct)] == rows[6][:3]
    group_rows = [line.split("\t") for line in first["breakdown_group.tsv"].splitlines()[1:]]
    assert sum(int(r[1]) for r in group_rows) == len(traces)
