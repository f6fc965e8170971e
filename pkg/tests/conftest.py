from __future__ import annotations

from pathlib import Path

import pytest

from normdebate.client import MockClient, MockSpec
from normdebate.dataset import CulturalGroup, ScenarioRecord, TernaryLabel, load_dataset

FIXTURES = Path(__file__).parent / "fixtures"
MINI = FIXTURES / "mini_eti.csv"
GOLDEN = FIXTURES / "golden"


@pytest.fixture
def mini_path() -> Path:
    return MINI


@pytest.fixture(scope="session")
def mini_records() -> list[ScenarioRecord]:
    return load_dataset(MINI)


def make_scenario(sid: str = "s0", gold: TernaryLabel = TernaryLabel.YES, country: str = "Egypt") -> ScenarioRecord:
    return ScenarioRecord(sid, country, "Rule text.", "Story text.", gold, CulturalGroup.AFRICAN_ISLAMIC)


def mock(name: str, **spec) -> MockClient:
    return MockClient(name, MockSpec(**spec))


class CountingClient:
    """Wraps a client and counts calls per stage."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.calls: list = []

    def complete(self, messages, context):
        self.calls.append(context)
        return self.inner.complete(messages, context)
