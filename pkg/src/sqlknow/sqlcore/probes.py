"""Executable probe queries that compute per-fragment review metadata.

Probe shape by kind:
- Calculation: the expression evaluated over the unit's FROM + WHERE +
  GROUP BY context, sampled.
- Condition: one statement computing (atomic_count, composite_count); WHERE
  atoms count rows of the FROM context, HAVING atoms count groups of the
  grouped relation.
- Relation: row count of the joined relation; an auxiliary zero-row SELECT
  enumerates its columns (column count is not computable in one statement).
- Dimension: DISTINCT values of the grouping expressions, sampled.
- Output: a sample of the unit's final output with its own ORDER/LIMIT kept.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..errors import UnresolvedDependencyError
from . import astnodes as A
from .decompose import SubqueryUnit
from .fragments import Fragment, KnowledgeKind, split_conjuncts

SAMPLE_ROWS = 20
DISTINCT_VALUES = 50


class ProbeExpectation(str, enum.Enum):
    SAMPLE_VALUES = "SampleValues"
    ATOMIC_AND_COMPOSITE_COUNTS = "AtomicAndCompositeCounts"
    ROW_COL_COUNTS = "RowColCounts"
    DISTINCT_VALUES = "DistinctValues"
    SAMPLE_RECORDS = "SampleRecords"


EXPECTATION_BY_KIND = {
    KnowledgeKind.CALCULATION: ProbeExpectation.SAMPLE_VALUES,
    KnowledgeKind.CONDITION: ProbeExpectation.ATOMIC_AND_COMPOSITE_COUNTS,
    KnowledgeKind.RELATION: ProbeExpectation.ROW_COL_COUNTS,
    KnowledgeKind.DIMENSION: ProbeExpectation.DISTINCT_VALUES,
    KnowledgeKind.OUTPUT: ProbeExpectation.SAMPLE_RECORDS,
}


@dataclass
class ProbeQuery:
    fragment_id: str
    sql_text: str
    kind: KnowledgeKind
    expects: ProbeExpectation
    subquery_id: str
    aux_sql: str | None = None


def build_probe(unit: SubqueryUnit, fragment: Fragment, graph_ctx) -> ProbeQuery:
    """Build the metadata probe for *fragment* of *unit*.

    *graph_ctx* must expose ``defines(name) -> bool`` for subquery names
    (a lineage DependencyGraph does); every CTE the unit references must be
    defined there.
    """
    for cte in sorted(unit.referenced_ctes):
        if not graph_ctx.defines(cte):
            raise UnresolvedDependencyError(
                f"unit {unit.name!r} references undefined CTE {cte!r}"
            )
    slot, core_index, position = fragment.locator
    core = unit.select.cores[core_index]
    from_ctx = core.from_clause.sql() if core.from_clause is not None else ""

    if fragment.kind == KnowledgeKind.CALCULATION:
        if slot == "select":
            column = core.columns[position].sql()
        else:
            column = unit.select.order_by[position].expr.sql()
        parts = [f"SELECT {column}"]
        if from_ctx:
            parts.append(from_ctx)
        if core.where is not None:
            parts.append(f"WHERE {core.where.sql()}")
        if core.group_by:
            parts.append("GROUP BY " + ", ".join(e.sql() for e in core.group_by))
        parts.append(f"LIMIT {SAMPLE_ROWS}")
        sql = " ".join(parts)
    elif fragment.kind == KnowledgeKind.CONDITION:
        if slot == "where":
            atom = split_conjuncts(core.where)[position].sql()
            full = core.where.sql()
            atomic = _count_where(from_ctx, atom)
            composite = _count_where(from_ctx, full)
        else:
            atom = split_conjuncts(core.having)[position].sql()
            full = core.having.sql()
            atomic = _count_groups(core, from_ctx, atom)
            composite = _count_groups(core, from_ctx, full)
        sql = f"SELECT ({atomic}) AS atomic_count, ({composite}) AS composite_count"
    elif fragment.kind == KnowledgeKind.RELATION:
        sql = f"SELECT COUNT(*) AS row_count {from_ctx}"
        aux = f"SELECT * {from_ctx} LIMIT 0"
        return ProbeQuery(fragment.id, sql, fragment.kind,
                          EXPECTATION_BY_KIND[fragment.kind], unit.id, aux_sql=aux)
    elif fragment.kind == KnowledgeKind.DIMENSION:
        dims = ", ".join(e.sql() for e in core.group_by)
        parts = [f"SELECT DISTINCT {dims}"]
        if from_ctx:
            parts.append(from_ctx)
        if core.where is not None:
            parts.append(f"WHERE {core.where.sql()}")
        parts.append(f"LIMIT {DISTINCT_VALUES}")
        sql = " ".join(parts)
    else:  # Output
        sql = f"SELECT * FROM ({unit.select.sql()}) LIMIT {SAMPLE_ROWS}"

    return ProbeQuery(fragment.id, sql, fragment.kind,
                      EXPECTATION_BY_KIND[fragment.kind], unit.id)


def _count_where(from_ctx: str, predicate: str) -> str:
    if from_ctx:
        return f"SELECT COUNT(*) {from_ctx} WHERE {predicate}"
    return f"SELECT COUNT(*) WHERE {predicate}"


def _count_groups(core: A.SelectCore, from_ctx: str, having: str) -> str:
    inner = ["SELECT 1 AS grp"]
    if from_ctx:
        inner.append(from_ctx)
    if core.where is not None:
        inner.append(f"WHERE {core.where.sql()}")
    if core.group_by:
        inner.append("GROUP BY " + ", ".join(e.sql() for e in core.group_by))
    inner.append(f"HAVING {having}")
    return f"SELECT COUNT(*) FROM ({' '.join(inner)})"
