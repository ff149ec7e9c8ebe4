"""Data dictionary and the embedded knowledge store.

The dictionary holds one NL description per database column (plus sample
values and aliases mined from past queries); the store holds script-level
and fragment-level knowledge records with their embeddings and answers
cosine-similarity queries by level. Store persistence is JSON lines, one
record per line; the dictionary is a single JSON document.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sqlite3
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmbeddingError, EmptyStoreError, LlmError
from .sqlcore import Clause, Fragment, KnowledgeKind, decompose, parse_script
from .sqlcore import astnodes as A

logger = logging.getLogger(__name__)

SCRIPT_LEVEL = "Script"
FRAGMENT_LEVEL = "Fragment"

DEFAULT_SCRIPT_K = 5
DEFAULT_FRAGMENT_K = 8

MAX_SAMPLE_VALUES = 10


# -- schema introspection ------------------------------------------------------


@dataclass(frozen=True)
class ColumnInfo:
    table: str
    column: str
    col_type: str


def read_schema(db_path: str) -> list[ColumnInfo]:
    conn = sqlite3.connect(f"file:{db_path}?mode=ro", uri=True)
    try:
        tables = [
            row[0]
            for row in conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' "
                "AND name NOT LIKE 'sqlite_%' ORDER BY name"
            )
        ]
        out: list[ColumnInfo] = []
        for table in tables:
            for row in conn.execute(f'PRAGMA table_info("{table}")'):
                out.append(ColumnInfo(table, row[1], row[2] or ""))
        return out
    finally:
        conn.close()


def read_samples(db_path: str, schema: list[ColumnInfo],
                 limit: int = MAX_SAMPLE_VALUES) -> dict[tuple[str, str], list]:
    conn = sqlite3.connect(f"file:{db_path}?mode=ro", uri=True)
    try:
        samples: dict[tuple[str, str], list] = {}
        for info in schema:
            rows = conn.execute(
                f'SELECT DISTINCT "{info.column}" FROM "{info.table}" '
                f'WHERE "{info.column}" IS NOT NULL LIMIT {limit}'
            ).fetchall()
            samples[(info.table, info.column)] = [r[0] for r in rows]
        return samples
    finally:
        conn.close()


def schema_fingerprint(schema: list[ColumnInfo]) -> str:
    digest = hashlib.sha256()
    for info in sorted(schema, key=lambda c: (c.table, c.column)):
        digest.update(f"{info.table}.{info.column}:{info.col_type};".encode())
    return digest.hexdigest()[:16]


def render_schema(schema: list[ColumnInfo]) -> str:
    """Compact schema text for prompts: one table per line."""
    by_table: dict[str, list[str]] = {}
    for info in schema:
        by_table.setdefault(info.table, []).append(f"{info.column} {info.col_type}".strip())
    return "\n".join(f"{t}({', '.join(cols)})" for t, cols in sorted(by_table.items()))


# -- data dictionary -------------------------------------------------------------


@dataclass
class ColumnDescription:
    table: str
    column: str
    description: str
    sample_values: list = field(default_factory=list)
    aliases: list[str] = field(default_factory=list)
    user_edited: bool = False

    def to_json(self) -> dict:
        return {
            "table": self.table,
            "column": self.column,
            "description": self.description,
            "sample_values": self.sample_values,
            "aliases": self.aliases,
            "user_edited": self.user_edited,
        }


@dataclass
class DataDictionary:
    columns: list[ColumnDescription]
    schema_fingerprint: str
    errors: list[dict] = field(default_factory=list)  # per-column LLM failures

    def lookup(self, table: str, column: str) -> ColumnDescription | None:
        for cd in self.columns:
            if cd.table.lower() == table.lower() and cd.column.lower() == column.lower():
                return cd
        return None

    def set_description(self, table: str, column: str, text: str) -> ColumnDescription:
        cd = self.lookup(table, column)
        if cd is None:
            raise KeyError(f"unknown column {table}.{column}")
        cd.description = text
        cd.user_edited = True
        return cd

    def render_for_prompt(self, columns: list[tuple[str, str]] | None = None) -> str:
        """One `table.column: description` line per column (optionally filtered)."""
        wanted = None
        if columns is not None:
            wanted = {(t.lower(), c.lower()) for t, c in columns}
        lines = []
        for cd in self.columns:
            if wanted is not None and (cd.table.lower(), cd.column.lower()) not in wanted:
                continue
            samples = ", ".join(str(v) for v in cd.sample_values[:5])
            line = f"{cd.table}.{cd.column}: {cd.description}"
            if samples:
                line += f" (values: {samples})"
            lines.append(line)
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "schema_fingerprint": self.schema_fingerprint,
            "columns": [cd.to_json() for cd in self.columns],
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, ensure_ascii=False, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "DataDictionary":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        columns = [ColumnDescription(**entry) for entry in data["columns"]]
        return cls(columns=columns, schema_fingerprint=data["schema_fingerprint"])


# -- alias mining -----------------------------------------------------------------


class AliasMap(dict):
    """(table, column) -> aliases, most frequent first. ``skipped`` lists
    (script index, reason) for inputs that failed to parse."""

    def __init__(self):
        super().__init__()
        self.skipped: list[tuple[int, str]] = []


def mine_aliases(scripts: list[str]) -> AliasMap:
    """Collect `AS alias` bindings on column references across *scripts*,
    resolved through table aliases and simple CTE passthroughs."""
    counts: dict[tuple[str, str], dict[str, int]] = {}
    result = AliasMap()
    for idx, sql in enumerate(scripts):
        try:
            units = decompose(parse_script(sql))
        except Exception as exc:
            result.skipped.append((idx, str(exc)))
            continue
        units_by_name = {u.name.lower(): u for u in units}
        for unit in units:
            for col in unit.select.core.columns:
                if col.alias is None or not isinstance(col.expr, A.ColumnRef):
                    continue
                resolved = _resolve_column(col.expr, unit, units_by_name, depth=0)
                if resolved is None:
                    continue
                bucket = counts.setdefault(resolved, {})
                bucket[col.alias] = bucket.get(col.alias, 0) + 1
    for key, bucket in counts.items():
        result[key] = [a for a, _ in sorted(bucket.items(), key=lambda kv: (-kv[1], kv[0]))]
    return result


def _from_sources(unit) -> list[tuple[str, str]]:
    """(binding name, table-or-cte name) pairs of the unit's FROM clause."""
    core = unit.select.core
    if core.from_clause is None:
        return []
    items = [core.from_clause.source] + [j.table for j in core.from_clause.joins]
    out = []
    for item in items:
        if isinstance(item, A.TableRef):
            out.append(((item.alias or item.name), item.name))
    return out


def _resolve_column(ref: A.ColumnRef, unit, units_by_name: dict, depth: int
                    ) -> tuple[str, str] | None:
    if depth > 5:
        return None
    sources = _from_sources(unit)
    if ref.table is not None:
        matches = [name for binding, name in sources if binding.lower() == ref.table.lower()]
    elif len(sources) == 1:
        matches = [sources[0][1]]
    else:
        return None  # unqualified column over a multi-table FROM: ambiguous
    if not matches:
        return None
    source = matches[0]
    cte = units_by_name.get(source.lower())
    if cte is None:
        return (source, ref.name)
    # trace through the CTE when the column is a plain passthrough
    for col in cte.select.core.columns:
        name = col.alias or (col.expr.name if isinstance(col.expr, A.ColumnRef) else None)
        if name is not None and name.lower() == ref.name.lower():
            if isinstance(col.expr, A.ColumnRef):
                return _resolve_column(col.expr, cte, units_by_name, depth + 1)
            return None
    return None


# -- dictionary construction -------------------------------------------------------


def suggest_descriptions(
    schema: list[ColumnInfo],
    samples: dict[tuple[str, str], list],
    aliases: dict[tuple[str, str], list[str]],
    llm,
) -> DataDictionary:
    """LLM-draft one description per column; failures leave a partial dictionary."""
    columns: list[ColumnDescription] = []
    errors: list[dict] = []
    for info in schema:
        key = (info.table, info.column)
        sample = samples.get(key, [])
        alias_list = aliases.get(key, [])
        try:
            description = llm.chat(
                "describe_column",
                {
                    "table": info.table,
                    "column": info.column,
                    "col_type": info.col_type or "ANY",
                    "sample_values": ", ".join(str(v) for v in sample),
                    "aliases": ", ".join(alias_list),
                },
            ).strip()
        except LlmError as exc:
            errors.append({"table": info.table, "column": info.column, "error": str(exc)})
            description = ""
        columns.append(
            ColumnDescription(
                table=info.table,
                column=info.column,
                description=description,
                sample_values=sample[:MAX_SAMPLE_VALUES],
                aliases=alias_list,
            )
        )
    return DataDictionary(
        columns=columns, schema_fingerprint=schema_fingerprint(schema), errors=errors
    )


def complete_description(partial_text: str, column: ColumnDescription, llm) -> str:
    """Finish a user's partial column description; the reply keeps the user's
    words as its prefix."""
    if not partial_text.strip():
        raise ValueError("partial description must be non-empty")
    completed = llm.chat(
        "complete_description",
        {
            "table": column.table,
            "column": column.column,
            "partial": partial_text,
            "sample_values": ", ".join(str(v) for v in column.sample_values),
        },
    ).strip()
    if not completed.startswith(partial_text.rstrip()):
        completed = partial_text.rstrip() + " " + completed
    return completed


def build_dictionary(db_path: str, scripts: list[str], llm) -> DataDictionary:
    """Convenience pipeline: schema + samples + mined aliases -> dictionary."""
    schema = read_schema(db_path)
    samples = read_samples(db_path, schema)
    aliases = mine_aliases(scripts)
    return suggest_descriptions(schema, samples, aliases, llm)


# -- knowledge store ------------------------------------------------------------------


@dataclass
class KnowledgeRecord:
    id: str
    level: str  # SCRIPT_LEVEL | FRAGMENT_LEVEL
    source_script_id: str
    description: str
    fragment: Fragment | None = None
    kind: KnowledgeKind | None = None
    sql_text: str = ""  # script-level records keep the source SQL for prompts
    embedding: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.level == FRAGMENT_LEVEL and (self.fragment is None or self.kind is None):
            raise ValueError("fragment-level records need a fragment and a kind")

    def to_json(self) -> dict:
        fragment = None
        if self.fragment is not None:
            fragment = {
                "id": self.fragment.id,
                "kind": self.fragment.kind.value,
                "subquery_id": self.fragment.subquery_id,
                "sql_text": self.fragment.sql_text,
                "span": list(self.fragment.span),
                "clause": self.fragment.clause.value,
                "locator": list(self.fragment.locator),
            }
        return {
            "id": self.id,
            "level": self.level,
            "source_script_id": self.source_script_id,
            "description": self.description,
            "fragment": fragment,
            "kind": self.kind.value if self.kind else None,
            "sql_text": self.sql_text,
            "embedding": [float(x) for x in self.embedding] if self.embedding is not None else None,
        }

    @classmethod
    def from_json(cls, data: dict) -> "KnowledgeRecord":
        fragment = None
        if data.get("fragment"):
            f = data["fragment"]
            fragment = Fragment(
                id=f["id"],
                kind=KnowledgeKind(f["kind"]),
                subquery_id=f["subquery_id"],
                sql_text=f["sql_text"],
                span=tuple(f["span"]),
                clause=Clause(f["clause"]),
                locator=tuple(f["locator"]),
            )
        embedding = None
        if data.get("embedding") is not None:
            embedding = np.array(data["embedding"], dtype=float)
        return cls(
            id=data["id"],
            level=data["level"],
            source_script_id=data["source_script_id"],
            description=data["description"],
            fragment=fragment,
            kind=KnowledgeKind(data["kind"]) if data.get("kind") else None,
            sql_text=data.get("sql_text", ""),
            embedding=embedding,
        )


def record_id(level: str, script_id: str, fragment_sql: str = "") -> str:
    digest = hashlib.sha1(f"{level}:{script_id}:{fragment_sql}".encode("utf-8")).hexdigest()
    return f"k{digest[:12]}"


class KnowledgeStore:
    """In-memory record set with embeddings; single-writer, snapshot reads."""

    def __init__(self, embedder, template_version: str = ""):
        self.embedder = embedder
        self.template_version = template_version
        self._records: dict[str, KnowledgeRecord] = {}
        self.dim: int | None = None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[KnowledgeRecord]:
        return sorted(self._records.values(), key=lambda r: r.id)

    def get(self, record_id_: str) -> KnowledgeRecord | None:
        return self._records.get(record_id_)

    def at_level(self, level: str) -> list[KnowledgeRecord]:
        return [r for r in self.records if r.level == level]

    def upsert(self, records: list[KnowledgeRecord]) -> None:
        fresh = [r for r in records if r.embedding is None]
        if fresh:
            vectors = self.embedder.embed([r.description for r in fresh])
            for record, vector in zip(fresh, vectors):
                record.embedding = vector
        for record in records:
            if record.embedding is None:
                continue
            if self.dim is None:
                self.dim = int(record.embedding.shape[0])
            elif record.embedding.shape[0] != self.dim:
                raise EmbeddingError(
                    f"mixed embedding dimensions: {record.embedding.shape[0]} != {self.dim}"
                )
            self._records[record.id] = record

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_json(), ensure_ascii=False, sort_keys=True))
                fh.write("\n")

    @classmethod
    def load(cls, path: str, embedder, template_version: str = "") -> "KnowledgeStore":
        store = cls(embedder, template_version)
        with open(path, encoding="utf-8") as fh:
            records = [KnowledgeRecord.from_json(json.loads(line)) for line in fh if line.strip()]
        store.upsert(records)
        return store


def index_knowledge(records: list[KnowledgeRecord], embedder,
                    store: KnowledgeStore | None = None) -> KnowledgeStore:
    """Embed and index *records*; idempotent (same ids replace in place)."""
    for record in records:
        if not record.description:
            raise ValueError(f"record {record.id} has an empty description")
    if store is None:
        store = KnowledgeStore(embedder)
    store.upsert(records)
    return store


def similar(store: KnowledgeStore, query_text: str, level: str, k: int
            ) -> list[tuple[KnowledgeRecord, float]]:
    """Top-k records at *level* by cosine similarity to *query_text*."""
    candidates = store.at_level(level)
    if not candidates:
        raise EmptyStoreError(f"no {level}-level records in the store")
    query = store.embedder.embed([query_text])[0]
    qnorm = float(np.linalg.norm(query))
    if qnorm > 0:
        query = query / qnorm
    matrix = np.stack([r.embedding for r in candidates])
    norms = np.linalg.norm(matrix, axis=1)
    norms[norms == 0] = 1.0
    scores = (matrix @ query) / norms
    ranked = sorted(
        zip(candidates, scores.tolist()), key=lambda pair: (-pair[1], pair[0].id)
    )
    return [(record, float(score)) for record, score in ranked[: max(k, 1)]]
