"""Offline stage: interpret historical scripts into indexed knowledge.

Each parseable script yields one script-level record plus one record per
extracted fragment; descriptions come from the LLM gateway and are embedded
into the knowledge store. Failures never abort the run: unparseable scripts
and exhausted LLM retries are reported per script.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .errors import LlmError, SqlKnowError
from .knowledge import (
    FRAGMENT_LEVEL,
    SCRIPT_LEVEL,
    DataDictionary,
    KnowledgeRecord,
    KnowledgeStore,
    record_id,
)
from .sqlcore import Fragment, SubqueryUnit, decompose, extract_fragments, parse_script
from .sqlcore import astnodes as A

logger = logging.getLogger(__name__)

LLM_RETRIES = 2


@dataclass
class OfflineReport:
    scripts: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    total_records: int = 0
    template_version: str = ""

    def to_json(self) -> dict:
        return {
            "scripts": self.scripts,
            "skipped": self.skipped,
            "total_records": self.total_records,
            "template_version": self.template_version,
        }


def referenced_columns(units: list[SubqueryUnit], node: A.Node | None = None
                       ) -> list[tuple[str, str]]:
    """Base-table (table, column) pairs referenced by the units (or by one
    subtree of them), resolved through FROM-clause aliases."""
    from .knowledge import _from_sources, _resolve_column

    units_by_name = {u.name.lower(): u for u in units}
    found: set[tuple[str, str]] = set()
    for unit in units:
        scope = node if node is not None else unit.select
        for n in A.walk(scope):
            if isinstance(n, A.ColumnRef):
                resolved = _resolve_column(n, unit, units_by_name, depth=0)
                if resolved is not None:
                    found.add(resolved)
        if node is not None:
            break
    return sorted(found)


def _chat_with_retry(llm, template_id: str, variables: dict[str, str],
                     retry_backoff_s: float = 0.5) -> str:
    last: LlmError | None = None
    for attempt in range(LLM_RETRIES + 1):
        try:
            return llm.chat(template_id, variables)
        except LlmError as exc:
            last = exc
            if attempt < LLM_RETRIES and retry_backoff_s > 0:
                time.sleep(retry_backoff_s * (2**attempt))
    raise last  # type: ignore[misc]


def describe_script(sql_text: str, dictionary: DataDictionary, llm,
                    retry_backoff_s: float = 0.5) -> str:
    """One-sentence task description of a whole script."""
    ast = parse_script(sql_text)
    units = decompose(ast)
    columns = referenced_columns(units)
    return _chat_with_retry(
        llm,
        "describe_script",
        {"sql": ast.source_text, "dictionary": dictionary.render_for_prompt(columns)},
        retry_backoff_s,
    ).strip()


def describe_fragment(fragment: Fragment, parent: SubqueryUnit,
                      dictionary: DataDictionary, llm,
                      all_units: list[SubqueryUnit] | None = None,
                      retry_backoff_s: float = 0.5) -> str:
    """NL description of one fragment, given its enclosing subquery."""
    units = all_units or [parent]
    columns = referenced_columns(units)
    return _chat_with_retry(
        llm,
        "describe_fragment",
        {
            "kind": fragment.kind.value,
            "fragment_sql": fragment.sql_text,
            "parent_sql": parent.sql_text,
            "dictionary": dictionary.render_for_prompt(columns),
        },
        retry_backoff_s,
    ).strip()


def extract_script_records(script_id: str, sql_text: str, dictionary: DataDictionary,
                           llm, retry_backoff_s: float = 0.5) -> list[KnowledgeRecord]:
    """Parse + decompose + describe one script into knowledge records."""
    ast = parse_script(sql_text)
    units = decompose(ast)
    records = [
        KnowledgeRecord(
            id=record_id(SCRIPT_LEVEL, script_id),
            level=SCRIPT_LEVEL,
            source_script_id=script_id,
            description=describe_script(sql_text, dictionary, llm, retry_backoff_s),
            sql_text=ast.source_text,
        )
    ]
    for unit in units:
        for fragment in extract_fragments(unit):
            description = describe_fragment(
                fragment, unit, dictionary, llm, all_units=units,
                retry_backoff_s=retry_backoff_s,
            )
            records.append(
                KnowledgeRecord(
                    id=record_id(FRAGMENT_LEVEL, script_id,
                                 f"{fragment.id}:{fragment.sql_text}"),
                    level=FRAGMENT_LEVEL,
                    source_script_id=script_id,
                    description=description,
                    fragment=fragment,
                    kind=fragment.kind,
                )
            )
    return records


def run_offline(
    db_path: str,
    scripts: list[str] | list[tuple[str, str]],
    dictionary: DataDictionary,
    llm,
    embedder,
    store: KnowledgeStore | None = None,
    retry_backoff_s: float = 0.5,
) -> tuple[KnowledgeStore, OfflineReport]:
    """Extract + describe + embed + index every parseable script."""
    named = [
        s if isinstance(s, tuple) else (f"s{i:03d}", s)
        for i, s in enumerate(scripts)
    ]
    if store is None:
        store = KnowledgeStore(embedder, template_version=llm.templates.fingerprint())
    report = OfflineReport(template_version=llm.templates.fingerprint())
    for script_id, sql_text in named:
        try:
            records = extract_script_records(
                script_id, sql_text, dictionary, llm, retry_backoff_s
            )
        except (SqlKnowError, ValueError) as exc:
            report.skipped.append({"script_id": script_id, "reason": str(exc)})
            logger.warning("skipping script %s: %s", script_id, exc)
            continue
        store.upsert(records)
        report.scripts.append(
            {
                "script_id": script_id,
                "fragment_count": sum(1 for r in records if r.level == FRAGMENT_LEVEL),
                "description": records[0].description,
            }
        )
    report.total_records = len(store)
    return store, report
