from pathlib import Path

import pytest

from usersim.corpus import load_fixture, parse_transcript

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"


def transcript(name: str, split=None):
    return parse_transcript((DATA / f"{name}.txt").read_text(encoding="utf-8"), id=name, split=split)


@pytest.fixture(scope="session")
def fixture_corpus():
    return load_fixture()


@pytest.fixture(scope="session")
def coffee(fixture_corpus):
    return fixture_corpus.get("coffee")


@pytest.fixture(scope="session")
def breakfast(fixture_corpus):
    return fixture_corpus.get("breakfast")


@pytest.fixture(scope="session")
def books(fixture_corpus):
    return fixture_corpus.get("books")


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
