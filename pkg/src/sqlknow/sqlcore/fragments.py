"""Typed code-fragment extraction from subquery units.

Five fragment kinds, by clause:
- Calculation: each top-level comma-separated SELECT expression and each
  ORDER BY expression (nested formulas stay intact).
- Condition: each atomic predicate from splitting WHERE/HAVING at top-level
  ANDs (OR subtrees stay whole, so every atom is a standalone row filter).
- Relation: the whole FROM/JOIN clause.
- Dimension: the whole GROUP BY clause.
- Output: one fragment covering ORDER BY/LIMIT/OFFSET/DISTINCT together.

Fragments are emitted in clause execution order: FROM/JOIN, WHERE,
GROUP BY, HAVING, SELECT, ORDER BY expressions, then the Output clause.
Spans index the owning unit's canonical sql_text; sql_text equals the span
slice except for Output fragments that combine DISTINCT with ORDER BY/LIMIT.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import astnodes as A
from .decompose import SubqueryUnit
from .script import span_text


class KnowledgeKind(str, enum.Enum):
    CALCULATION = "Calculation"
    CONDITION = "Condition"
    RELATION = "Relation"
    DIMENSION = "Dimension"
    OUTPUT = "Output"


class Clause(str, enum.Enum):
    SELECT = "Select"
    WHERE = "Where"
    HAVING = "Having"
    FROM_JOIN = "FromJoin"
    GROUP_BY = "GroupBy"
    ORDER_LIMIT_DISTINCT = "OrderByLimitDistinct"


@dataclass
class Fragment:
    id: str
    kind: KnowledgeKind
    subquery_id: str
    sql_text: str
    span: tuple[int, int]
    clause: Clause
    # (slot, core_index, position) locating the fragment for splicing
    locator: tuple[str, int, int]


def split_conjuncts(expr: A.Expr) -> list[A.Expr]:
    """Flatten top-level ANDs into atomic predicates."""
    if isinstance(expr, A.Binary) and expr.op == "AND":
        return split_conjuncts(expr.left) + split_conjuncts(expr.right)
    return [expr]


def extract_fragments(unit: SubqueryUnit) -> list[Fragment]:
    """Extract all typed fragments of *unit*, in clause execution order."""
    source = unit.sql_text
    out: list[Fragment] = []

    def emit(kind: KnowledgeKind, clause: Clause, span: tuple[int, int],
             slot: str, core_index: int, position: int, sql_text: str | None = None) -> None:
        out.append(
            Fragment(
                id=f"{unit.id}.f{len(out)}",
                kind=kind,
                subquery_id=unit.id,
                sql_text=sql_text if sql_text is not None else span_text(source, span),
                span=span,
                clause=clause,
                locator=(slot, core_index, position),
            )
        )

    for ci, core in enumerate(unit.select.cores):
        if core.from_clause is not None:
            emit(KnowledgeKind.RELATION, Clause.FROM_JOIN, core.from_clause.span,
                 "relation", ci, 0)
        if core.where is not None:
            for pos, atom in enumerate(split_conjuncts(core.where)):
                emit(KnowledgeKind.CONDITION, Clause.WHERE, atom.span, "where", ci, pos)
        if core.group_by:
            emit(KnowledgeKind.DIMENSION, Clause.GROUP_BY,
                 _clause_span(source, "GROUP BY", core.group_by[0].span,
                              core.group_by[-1].span), "dimension", ci, 0)
        if core.having is not None:
            for pos, atom in enumerate(split_conjuncts(core.having)):
                emit(KnowledgeKind.CONDITION, Clause.HAVING, atom.span, "having", ci, pos)
        for pos, col in enumerate(core.columns):
            emit(KnowledgeKind.CALCULATION, Clause.SELECT, col.span, "select", ci, pos)

    select = unit.select
    for pos, term in enumerate(select.order_by):
        emit(KnowledgeKind.CALCULATION, Clause.ORDER_LIMIT_DISTINCT,
             term.expr.span, "orderby", 0, pos)

    output = _output_fragment_parts(unit)
    if output is not None:
        span, sql_text = output
        emit(KnowledgeKind.OUTPUT, Clause.ORDER_LIMIT_DISTINCT, span, "output", 0, 0,
             sql_text=sql_text)
    return out


def _clause_span(source: str, keyword: str, first: tuple[int, int],
                 last: tuple[int, int]) -> tuple[int, int]:
    """Span of ``<keyword> e1, ..., eN`` given the first/last expression spans.

    The unit text is canonical (single spaces), so the keyword sits exactly
    ``len(keyword) + 1`` bytes before the first expression.
    """
    start = first[0] - len(keyword) - 1
    assert start >= 0 and span_text(source, (start, first[0])) == keyword + " ", (
        f"clause arithmetic broke for {keyword!r} in {source!r}"
    )
    return (start, last[1])


def _output_fragment_parts(unit: SubqueryUnit) -> tuple[tuple[int, int], str] | None:
    select = unit.select
    source = unit.sql_text
    distinct = select.core.distinct
    span: tuple[int, int] | None = None
    if select.order_by:
        tail = select.order_by[-1].span
        if select.offset is not None:
            tail = select.offset.span
        elif select.limit is not None:
            tail = select.limit.span
        span = _clause_span(source, "ORDER BY", select.order_by[0].expr.span, tail)
    elif select.limit is not None:
        tail = select.offset.span if select.offset is not None else select.limit.span
        span = _clause_span(source, "LIMIT", select.limit.span, tail)

    if span is None and not distinct:
        return None
    if span is None:
        # DISTINCT only: span covers the keyword right after "SELECT "
        start = select.core.span[0] + len("SELECT ")
        span = (start, start + len("DISTINCT"))
        assert span_text(source, span) == "DISTINCT"
        return span, "DISTINCT"
    text = span_text(source, span)
    if distinct:
        text = "DISTINCT " + text
    return span, text
