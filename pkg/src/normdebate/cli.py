"""Command-line entry point: run, report, stats, render-prompt, validate-config."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import metrics, prompts, runner
from .dataset import DatasetError, TernaryLabel, compute_stats, label_only_baseline, load_dataset

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _load_config(args: argparse.Namespace) -> runner.RunConfig:
    cfg = runner.RunConfig.load(args.config)
    return cfg.with_overrides(
        strategy=args.strategy,
        rounds=args.rounds,
        iterations=args.iterations,
        policy=args.policy,
        seed=args.seed,
        concurrency=args.concurrency,
        out=args.out,
        countries=args.filter_country or None,
        sample=args.sample,
    )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    manifest = runner.execute_run(cfg)
    counts = manifest.counts()
    print(f"done={counts['done']} failed={counts['failed']} pending={counts['pending']} out={cfg.out}")
    report = Path(cfg.out) / runner.REPORT_DIR / "accuracy.tsv"
    if report.exists():
        sys.stdout.write(report.read_text(encoding="utf-8"))
    return EXIT_OK if counts["failed"] == 0 and counts["pending"] == 0 else EXIT_PARTIAL


def cmd_report(args: argparse.Namespace) -> int:
    tables = runner.report(args.run_dir)
    names = [args.table] if args.table else sorted(tables)
    for name in names:
        if name not in tables:
            print(f"no table {name!r}; have {', '.join(sorted(tables))}", file=sys.stderr)
            return EXIT_ERROR
        if len(names) > 1:
            print(f"# {name}")
        sys.stdout.write(tables[name])
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    records = load_dataset(args.dataset, args.group_map)
    stats = compute_stats(records)
    print("kind\tkey\tcount")
    for kind, key, count in stats.rows():
        print(f"{kind}\t{key}\t{count}")
    for label in TernaryLabel.gold_labels():
        print(f"label_only_pct\t{label.value}-Only\t{metrics.pct(label_only_baseline(records, label))}")
    return EXIT_OK


def _parse_set(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        out[key] = value
    return out


def cmd_render_prompt(args: argparse.Namespace) -> int:
    bindings: dict[str, str] = {}
    if args.dataset:
        records = {r.id: r for r in load_dataset(args.dataset, args.group_map)}
        if args.id not in records:
            print(f"no scenario with id {args.id!r}", file=sys.stderr)
            return EXIT_ERROR
        r = records[args.id]
        bindings.update(country=r.country, rule_of_thumb=r.rule_of_thumb, story=r.story)
    bindings.update(_parse_set(args.set))
    stage = prompts.PromptStage(args.stage)
    if stage is prompts.PromptStage.SD_CHOICE:
        text = prompts.render_choice_prompt(bindings, args.option_order)
    else:
        text = prompts.render(stage, bindings)
    print(text)
    return EXIT_OK


def cmd_validate_config(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    endpoints = cfg.validate()
    print(f"ok: strategy={cfg.strategy.value} agents={','.join(cfg.agents) or '-'} "
          f"endpoints={','.join(sorted(endpoints)) or '-'} policy={cfg.policy}")
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML or JSON run configuration")
    p.add_argument("--strategy", help="override the configured strategy")
    p.add_argument("--rounds", type=int, help="debate rounds R")
    p.add_argument("--iterations", type=int, help="self-reflection iterations N")
    p.add_argument("--policy", choices=("judge", "oracle", "random"))
    p.add_argument("--seed", type=int)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--out", help="run directory")
    p.add_argument("--filter-country", action="append", metavar="COUNTRY", help="repeatable")
    p.add_argument("--sample", type=int, help="seeded random sample size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="normdebate", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute or resume a run")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-config", help="check a config without sending requests")
    _add_run_flags(p)
    p.set_defaults(func=cmd_validate_config)

    p = sub.add_parser("report", help="recompute report tables from a run's transcript")
    p.add_argument("run_dir")
    p.add_argument("--table", help="print only this table, e.g. parity.tsv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("stats", help="dataset counts and label-only baselines")
    p.add_argument("dataset")
    p.add_argument("--group-map")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("render-prompt", help="print the prompt for one stage")
    p.add_argument("stage", choices=[s.value for s in prompts.PromptStage])
    p.add_argument("--dataset")
    p.add_argument("--group-map")
    p.add_argument("--id", help="scenario id, with --dataset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--option-order", default="ReflectFirst", choices=[o.value for o in prompts.OptionOrder])
    p.set_defaults(func=cmd_render_prompt)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except runner.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        DatasetError,
        metrics.MetricsError,
        runner.CorruptTranscript,
        prompts.PromptError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
