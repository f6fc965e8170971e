"""Oracle model selection over two single-model runs of the same scenarios."""

import argparse
from pathlib import Path

from normdebate import metrics, runner

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("run_a")
ap.add_argument("run_b")
args = ap.parse_args()

logs = [
    metrics.PredictionLog.from_traces(runner.read_transcript(Path(d) / runner.TRANSCRIPT))
    for d in (args.run_a, args.run_b)
]
print(f"accuracy A\t{metrics.pct(metrics.accuracy(logs[0]))}")
print(f"accuracy B\t{metrics.pct(metrics.accuracy(logs[1]))}")
print(f"oracle\t{metrics.pct(metrics.paired_oracle_accuracy(*logs))}")
