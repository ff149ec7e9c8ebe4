"""Shared fixtures: the toxicology database, history scripts, mock gateway,
dictionary, and indexed knowledge store."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from sqlknow.extraction import run_offline
from sqlknow.fixture_db import build_toxicology_db
from sqlknow.gateway import HashingEmbedder, MockGateway
from sqlknow.knowledge import build_dictionary

REPO_ROOT = Path(__file__).resolve().parent.parent
CORPUS_QUERIES = REPO_ROOT / "corpus" / "queries"
CORPUS_GOLDEN = REPO_ROOT / "corpus" / "golden"
HISTORIES_DIR = REPO_ROOT / "fixtures" / "histories"


@pytest.fixture(scope="session")
def tox_db(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("db") / "toxicology.db"
    return str(build_toxicology_db(path))


@pytest.fixture(scope="session")
def histories() -> list[tuple[str, str]]:
    return [(p.stem, p.read_text()) for p in sorted(HISTORIES_DIR.glob("*.sql"))]


@pytest.fixture(scope="session")
def corpus() -> list[tuple[str, str]]:
    return [(p.stem, p.read_text()) for p in sorted(CORPUS_QUERIES.glob("*.sql"))]


@pytest.fixture(scope="session")
def goldens() -> dict[str, dict]:
    return {
        p.stem: json.loads(p.read_text())
        for p in sorted(CORPUS_GOLDEN.glob("*.json"))
    }


@pytest.fixture()
def gateway() -> MockGateway:
    return MockGateway()


@pytest.fixture()
def embedder() -> HashingEmbedder:
    return HashingEmbedder()


@pytest.fixture(scope="session")
def session_gateway() -> MockGateway:
    return MockGateway()


@pytest.fixture(scope="session")
def dictionary(tox_db, histories, session_gateway):
    return build_dictionary(tox_db, [sql for _, sql in histories], session_gateway)


@pytest.fixture(scope="session")
def store(tox_db, histories, dictionary, session_gateway):
    built, report = run_offline(
        tox_db, histories, dictionary, session_gateway,
        HashingEmbedder(), retry_backoff_s=0,
    )
    assert not report.skipped
    return built
