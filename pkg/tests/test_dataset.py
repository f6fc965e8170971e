from __future__ import annotations

import csv
from collections import Counter

import pytest

from normdebate.dataset import (
    CulturalGroup,
    DatasetError,
    EmptyDataset,
    GroupMap,
    MissingColumn,
    TernaryLabel,
    UnknownLabel,
    UnmappedCountry,
    bundled_stats,
    compute_stats,
    label_only_baseline,
    load_dataset,
)


def write_rows(path, header, rows, delimiter=","):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(header)
        w.writerows(rows)
    return path


def test_mini_fixture_loads(mini_records):
    assert len(mini_records) == 24
    assert [r.id for r in mini_records] == [str(i) for i in range(24)]
    assert Counter(r.gold for r in mini_records) == {
        TernaryLabel.YES: 10, TernaryLabel.NO: 8, TernaryLabel.NEITHER: 6,
    }
    assert {r.group for r in mini_records} == set(CulturalGroup)


def test_column_order_and_id_column(tmp_path):
    path = write_rows(
        tmp_path / "d.tsv",
        ["gold_label", "story", "id", "rot", "country"],
        [["neither", "A story.", "x1", "A rule.", "united kingdom"]],
        delimiter="\t",
    )
    (rec,) = load_dataset(path)
    assert rec.id == "x1" and rec.gold is TernaryLabel.NEITHER
    assert rec.group is CulturalGroup.ENGLISH_SPEAKING
    assert rec.country == "united kingdom"


def test_missing_column(tmp_path):
    path = write_rows(tmp_path / "d.csv", ["country", "story", "label"], [["Egypt", "s", "Yes"]])
    with pytest.raises(MissingColumn) as exc:
        load_dataset(path)
    assert exc.value.row == 1 and "rule_of_thumb" in str(exc.value)


def test_unknown_label_reports_file_line(tmp_path):
    rows = [["Egypt", "r", "s", "Yes"], ["Egypt", "r", "s", "Yes."]]
    path = write_rows(tmp_path / "d.csv", ["country", "rule_of_thumb", "story", "label"], rows)
    with pytest.raises(UnknownLabel) as exc:
        load_dataset(path)
    assert exc.value.row == 3


def test_unmapped_country(tmp_path):
    path = write_rows(tmp_path / "d.csv", ["country", "rule_of_thumb", "story", "label"], [["Atlantis", "r", "s", "No"]])
    with pytest.raises(UnmappedCountry) as exc:
        load_dataset(path)
    assert exc.value.row == 2


def test_duplicate_ids_rejected(tmp_path):
    rows = [["a", "Egypt", "r", "s", "Yes"], ["a", "Egypt", "r", "s", "No"]]
    path = write_rows(tmp_path / "d.csv", ["id", "country", "rule_of_thumb", "story", "label"], rows)
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(path)


def test_empty_file(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("")
    with pytest.raises(MissingColumn):
        load_dataset(path)


def test_gold_parsing_is_exact():
    assert TernaryLabel.from_gold(" NEITHER ") is TernaryLabel.NEITHER
    for bad in ("Yes.", "y", "Unparseable", ""):
        with pytest.raises(ValueError):
            TernaryLabel.from_gold(bad)


def test_bundled_group_map_partition():
    gm = GroupMap.load()
    assert gm.groups() == set(CulturalGroup)
    assert gm.get("South Korea") is CulturalGroup.CONFUCIAN
    assert gm.get("south_korea") is CulturalGroup.CONFUCIAN
    assert gm.get("Korea") is CulturalGroup.CONFUCIAN
    assert "Narnia" not in gm


def test_group_map_conflict_rejected(tmp_path):
    path = tmp_path / "map.tsv"
    path.write_text("Egypt\tConfucian\negypt\tAfrican-Islamic\n")
    with pytest.raises(DatasetError, match="both"):
        GroupMap.load(path)


def test_bundled_reference_stats_are_consistent():
    stats = bundled_stats()
    gm = GroupMap.load()
    assert sum(stats["n_per_label"].values()) == stats["n_total"] == 2633
    assert sum(stats["n_per_country"].values()) == 2633
    assert len(stats["n_per_country"]) == 75
    by_group = Counter()
    for country, n in stats["n_per_country"].items():
        group = gm.get(country)
        assert group is not None, country
        by_group[group.value] += n
    assert dict(by_group) == stats["n_per_group"]


def test_stats_rows(mini_records):
    stats = compute_stats(mini_records)
    rows = stats.rows()
    assert rows[0] == ("total", "all", 24)
    assert sum(n for kind, _, n in rows if kind == "country") == 24
    assert sum(n for kind, _, n in rows if kind == "group") == 24


def test_label_only_baseline(mini_records):
    assert label_only_baseline(mini_records, TernaryLabel.YES) == pytest.approx(10 / 24)
    assert sum(label_only_baseline(mini_records, lab) for lab in TernaryLabel.gold_labels()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        label_only_baseline(mini_records, TernaryLabel.UNPARSEABLE)
    with pytest.raises(EmptyDataset):
        label_only_baseline([], TernaryLabel.NO)
