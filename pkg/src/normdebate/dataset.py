"""NormAd-eti loading, cultural-group binning and label-only baselines."""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class TernaryLabel(str, Enum):
    YES = "Yes"
    NO = "No"
    NEITHER = "Neither"
    UNPARSEABLE = "Unparseable"

    @classmethod
    def gold_labels(cls) -> tuple["TernaryLabel", ...]:
        return (cls.YES, cls.NO, cls.NEITHER)

    @classmethod
    def from_gold(cls, cell: str) -> "TernaryLabel":
        """Exact, case-insensitive match on the whole cell."""
        key = cell.strip().casefold()
        for label in cls.gold_labels():
            if label.value.casefold() == key:
                return label
        raise ValueError(cell)

    def to_text(self) -> str:
        return self.value


class CulturalGroup(str, Enum):
    AFRICAN_ISLAMIC = "African-Islamic"
    CATHOLIC_EUROPE = "Catholic Europe"
    CONFUCIAN = "Confucian"
    ENGLISH_SPEAKING = "English-speaking"
    LATIN_AMERICA = "Latin America"
    ORTHODOX_EUROPE = "Orthodox Europe"
    PROTESTANT_EUROPE = "Protestant Europe"
    WEST_SOUTH_ASIA = "West & South Asia"

    @classmethod
    def parse(cls, name: str) -> "CulturalGroup":
        key = _norm(name)
        for group in cls:
            if _norm(group.value) == key:
                return group
        raise ValueError(f"unknown cultural group {name!r}")


class DatasetError(Exception):
    """Raised for malformed dataset or group-map files."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class MissingColumn(DatasetError):
    pass


class UnknownLabel(DatasetError):
    pass


class UnmappedCountry(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


@dataclass(frozen=True)
class ScenarioRecord:
    id: str
    country: str
    rule_of_thumb: str
    story: str
    gold: TernaryLabel
    group: CulturalGroup


@dataclass
class DatasetStats:
    n_total: int = 0
    n_per_label: dict[str, int] = field(default_factory=dict)
    n_per_country: dict[str, int] = field(default_factory=dict)
    n_per_group: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, int]]:
        """Flatten into (kind, key, count) rows, one per label/country/group."""
        out = [("total", "all", self.n_total)]
        out += [("label", k, v) for k, v in self.n_per_label.items()]
        out += [("group", k, v) for k, v in sorted(self.n_per_group.items())]
        out += [("country", k, v) for k, v in sorted(self.n_per_country.items())]
        return out


def _norm(name: str) -> str:
    return re.sub(r"[\s_\-]+", " ", name).strip().casefold()


# Dataset files in the wild use a few header spellings; map them onto ours.
_HEADER_ALIASES = {
    "id": "id",
    "country": "country",
    "rule_of_thumb": "rule_of_thumb",
    "rot": "rule_of_thumb",
    "rule": "rule_of_thumb",
    "story": "story",
    "label": "label",
    "gold_label": "label",
    "gold": "label",
}
REQUIRED_COLUMNS = ("country", "rule_of_thumb", "story", "label")


def bundled_group_map_path() -> Path:
    return Path(str(resources.files("normdebate") / "data" / "group_map.tsv"))


def bundled_stats() -> dict:
    """Reference statistics for the full NormAd-eti release shipped with the package."""
    text = (resources.files("normdebate") / "data" / "normad_eti_stats.json").read_text("utf-8")
    return json.loads(text)


class GroupMap:
    """Country -> CulturalGroup lookup with spelling-insensitive keys."""

    def __init__(self, entries: Iterable[tuple[str, CulturalGroup]]):
        self._map: dict[str, CulturalGroup] = {}
        self.countries: dict[str, CulturalGroup] = {}
        for country, group in entries:
            key = _norm(country)
            if key in self._map and self._map[key] is not group:
                raise DatasetError(
                    f"country {country!r} mapped to both {self._map[key].value} and {group.value}"
                )
            self._map[key] = group
            self.countries.setdefault(country, group)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "GroupMap":
        path = Path(path) if path is not None else bundled_group_map_path()
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DatasetError(f"{path}:{lineno}: expected 'country<TAB>group'")
                try:
                    entries.append((parts[0].strip(), CulturalGroup.parse(parts[1])))
                except ValueError as exc:
                    raise DatasetError(f"{path}:{lineno}: {exc}") from None
        return cls(entries)

    def get(self, country: str) -> CulturalGroup | None:
        return self._map.get(_norm(country))

    def __contains__(self, country: str) -> bool:
        return _norm(country) in self._map

    def groups(self) -> set[CulturalGroup]:
        return set(self._map.values())


def _sniff_dialect(sample: str, path: Path) -> type[csv.Dialect] | csv.Dialect:
    if path.suffix.lower() in (".tsv", ".tab"):
        return csv.excel_tab
    if path.suffix.lower() == ".csv":
        return csv.excel
    try:
        return csv.Sniffer().sniff(sample, delimiters=",\t;|")
    except csv.Error:
        return csv.excel


def load_dataset(
    path: str | Path, group_map_path: str | Path | None = None
) -> list[ScenarioRecord]:
    """Load a delimited NormAd-eti file into records.

    Columns are addressed by header name, so order does not matter. When the
    file has no ``id`` column the 0-based data-row index is used. Row numbers
    in errors are 1-based file lines (the header is line 1).
    """
    path = Path(path)
    group_map = GroupMap.load(group_map_path)
    with open(path, encoding="utf-8-sig", newline="") as fh:
        sample = fh.read(8192)
        fh.seek(0)
        reader = csv.reader(fh, _sniff_dialect(sample, path))
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("file has no header row", row=1) from None
        columns: dict[str, int] = {}
        for i, name in enumerate(header):
            canonical = _HEADER_ALIASES.get(re.sub(r"[\s\-]+", "_", name.strip().casefold()))
            if canonical and canonical not in columns:
                columns[canonical] = i
        missing = [c for c in REQUIRED_COLUMNS if c not in columns]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}", row=1)

        records: list[ScenarioRecord] = []
        seen_ids: set[str] = set()
        for index, row in enumerate(reader):
            lineno = reader.line_num
            if not any(cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise MissingColumn(f"expected {len(header)} cells, got {len(row)}", row=lineno)
            cell = lambda col: row[columns[col]]  # noqa: E731
            try:
                gold = TernaryLabel.from_gold(cell("label"))
            except ValueError:
                raise UnknownLabel(f"gold label {cell('label')!r} not in Yes/No/Neither", row=lineno) from None
            country = cell("country").strip()
            group = group_map.get(country)
            if group is None:
                raise UnmappedCountry(f"country {country!r} is not in the group map", row=lineno)
            rid = cell("id").strip() if "id" in columns else str(index)
            if rid in seen_ids:
                raise DatasetError(f"duplicate id {rid!r}", row=lineno)
            seen_ids.add(rid)
            rot, story = cell("rule_of_thumb"), cell("story")
            if not rot.strip() or not story.strip():
                raise DatasetError("empty rule_of_thumb or story", row=lineno)
            records.append(ScenarioRecord(rid, country, rot, story, gold, group))
    return records


def compute_stats(records: Sequence[ScenarioRecord]) -> DatasetStats:
    labels = Counter(r.gold.value for r in records)
    return DatasetStats(
        n_total=len(records),
        n_per_label={lab.value: labels.get(lab.value, 0) for lab in TernaryLabel.gold_labels()},
        n_per_country=dict(sorted(Counter(r.country for r in records).items())),
        n_per_group=dict(sorted(Counter(r.group.value for r in records).items())),
    )


def label_only_baseline(records: Sequence[ScenarioRecord], fixed: TernaryLabel) -> float:
    """Accuracy of always answering ``fixed``."""
    if fixed not in TernaryLabel.gold_labels():
        raise ValueError(f"fixed label must be Yes, No or Neither, got {fixed}")
    if not records:
        raise EmptyDataset("label-only baseline needs at least one record")
    return sum(r.gold is fixed for r in records) / len(records)


def group_lookup(records: Sequence[ScenarioRecord]) -> Mapping[str, CulturalGroup]:
    return {r.id: r.group for r in records}
