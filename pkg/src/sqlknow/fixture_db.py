"""Build the bundled toxicology-style fixture database."""

from __future__ import annotations

import sqlite3
from importlib import resources
from pathlib import Path


def toxicology_ddl() -> str:
    return resources.files("sqlknow").joinpath("data/toxicology.sql").read_text()


def build_toxicology_db(path: str | Path) -> Path:
    """Create (or overwrite) the fixture database at *path*."""
    path = Path(path)
    if path.exists():
        path.unlink()
    conn = sqlite3.connect(path)
    try:
        conn.executescript(toxicology_ddl())
        conn.commit()
    finally:
        conn.close()
    return path
