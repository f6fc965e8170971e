"""Run a strategy over every pair of models and pool the results.

The grid file lists models and shared settings:

    dataset: /data/normad_eti.csv
    out: runs/grid
    strategy: DebateOnly          # or SelfReflectDebate
    policy: judge
    judge: {base_url: ..., model: ...}
    models:
      llama3: {base_url: ..., model: ...}
      qwen2: {base_url: ..., model: ...}
      ...

Each pair gets its own run directory (resumable); pooled accuracy, parity and
dynamics tables are written to ``<out>/pooled``.
"""

from __future__ import annotations

import argparse
import itertools
import logging
from pathlib import Path

import yaml

from normdebate import metrics, runner


def pair_configs(grid: dict, base_dir: Path) -> list[runner.RunConfig]:
    models = grid.pop("models")
    judge = grid.pop("judge", None)
    out = Path(grid.pop("out"))
    configs = []
    for a, b in itertools.combinations(sorted(models), 2):
        endpoints = {a: models[a], b: models[b]}
        d = dict(grid, agents=[a, b], out=str(out / f"{a}+{b}"), endpoints=endpoints)
        if judge is not None:
            endpoints["judge"] = judge
            d["judge"] = "judge"
        configs.append(runner.RunConfig.from_dict(d, base_dir=base_dir))
    return configs


def pooled_tables(run_dirs: list[Path]) -> dict[str, str]:
    log = metrics.PredictionLog()
    for d in run_dirs:
        traces = runner.read_transcript(d / runner.TRANSCRIPT)
        log = log + metrics.PredictionLog.from_traces(traces, run=d.name)
    rep = metrics.parity(log, baseline="English-speaking")
    parity = runner.tsv_table(
        ("group", "n", "accuracy_pct", "parity"),
        [(g, rep.counts[g], metrics.pct(a), f"{p:.3f}") for g, (a, p) in rep.per_group.items()]
        + [("average", len(log), metrics.pct(metrics.accuracy(log)), f"{rep.average:.3f}")],
    )
    _, flow = metrics.classify_dynamics(log)
    dynamics = runner.tsv_table(("phase", "state", "count"), ((p, s.value, n) for p, s, n in flow.nodes()))
    return {"parity.tsv": parity, "dynamics.tsv": dynamics}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("grid")
    ap.add_argument("--dry-run", action="store_true", help="only validate the pair configs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    grid_path = Path(args.grid)
    grid = yaml.safe_load(grid_path.read_text())
    configs = pair_configs(grid, grid_path.parent)
    for cfg in configs:
        cfg.validate()
    print(f"{len(configs)} pairs")
    if args.dry_run:
        return
    done_dirs = []
    for cfg in configs:
        manifest = runner.execute_run(cfg)
        print(f"{Path(cfg.out).name}: {manifest.counts()}")
        done_dirs.append(Path(cfg.out))
    pooled = Path(configs[0].out).parent / "pooled"
    pooled.mkdir(exist_ok=True)
    for name, text in pooled_tables(done_dirs).items():
        (pooled / name).write_text(text)
        print(f"# {name}\n{text}")


if __name__ == "__main__":
    main()
