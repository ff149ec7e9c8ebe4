"""Canonical mock-backed demo scenario over the bundled toxicology fixture.

Builds the dictionary and knowledge store from the fixture history scripts,
then (optionally) replays the authoring session from the usage walkthrough:
generate the least-common-element query, inspect the LIMIT item's metadata,
modify it into a ranking predicate (final result flips from (1, 0) to
(4, 3)), and delete the known-carcinogenicity condition.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .authoring import (
    MODE_DELETE,
    MODE_MODIFY,
    TARGET_ITEM,
    AuthoringSession,
    RefinementEdit,
)
from .extraction import OfflineReport, run_offline
from .fixture_db import build_toxicology_db
from .gateway import HashingEmbedder, MockGateway
from .knowledge import DataDictionary, KnowledgeStore, build_dictionary

INSTRUCTION = (
    "Show me number of non-carcinogenic molecules and number of carcinogenic "
    "molecules with least common elements."
)
MODIFY_INSTRUCTION = "Consider multiple least common elements"


def history_scripts(histories_dir: str | Path) -> list[tuple[str, str]]:
    paths = sorted(Path(histories_dir).glob("*.sql"))
    return [(p.stem, p.read_text()) for p in paths]


@dataclass
class DemoWorkspace:
    db_path: str
    dictionary: DataDictionary
    store: KnowledgeStore
    gateway: MockGateway
    report: OfflineReport


def build_workspace(work_dir: str | Path, histories_dir: str | Path,
                    gateway: MockGateway | None = None) -> DemoWorkspace:
    """Fixture database + dictionary + indexed knowledge store, mock-backed."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    db_path = str(build_toxicology_db(work_dir / "toxicology.db"))
    gw = gateway or MockGateway()
    scripts = history_scripts(histories_dir)
    dictionary = build_dictionary(db_path, [sql for _, sql in scripts], gw)
    store, report = run_offline(
        db_path, scripts, dictionary, gw, HashingEmbedder(dim=gw.embed_dim),
        retry_backoff_s=0,
    )
    return DemoWorkspace(db_path=db_path, dictionary=dictionary, store=store,
                         gateway=gw, report=report)


def run_demo_session(workspace: DemoWorkspace,
                     session_id: str = "demo") -> AuthoringSession:
    """Replay the scripted authoring walkthrough; fully deterministic."""
    session = AuthoringSession(
        session_id, workspace.db_path, workspace.store,
        workspace.dictionary, workspace.gateway,
    )
    session.generate(INSTRUCTION)
    limit_item = next(
        i for i in session.current.items
        if i.kind.value == "Output" and i.title.startswith("Limit to 1")
    )
    session.resolve_item_metadata(limit_item.id)
    session.refine(
        RefinementEdit(mode=MODE_MODIFY, target=TARGET_ITEM,
                       target_id=limit_item.id, instruction=MODIFY_INSTRUCTION)
    )
    condition_item = next(
        i for i in session.current.items
        if i.kind.value == "Condition" and "known carcinogenicity" in i.description
    )
    session.refine(
        RefinementEdit(mode=MODE_DELETE, target=TARGET_ITEM,
                       target_id=condition_item.id)
    )
    return session
