"""Print the Yes-/No-/Neither-Only accuracies of a dataset file."""

import argparse

from normdebate.dataset import TernaryLabel, label_only_baseline, load_dataset

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("dataset")
args = ap.parse_args()

records = load_dataset(args.dataset)
print(f"n={len(records)}")
for label in TernaryLabel.gold_labels():
    print(f"{label.value}-Only\t{100 * label_only_baseline(records, label):.1f}")
