"""Rebuild a unit's SQL from its extracted fragments plus residual syntax.

This is the executable form of the fragment-cover property: the fragments
of a unit, stitched back into clause positions, must be semantically equal
to the original unit. ORDER BY expressions appear both as Calculation
fragments and inside the Output fragment; the Output fragment wins here.
"""

from __future__ import annotations

from ..errors import SqlSyntaxError
from .fragments import Clause, Fragment, KnowledgeKind
from .splice import parse_output_clause


def reassemble_unit(fragments: list[Fragment]) -> str:
    """Compose a SELECT statement from one unit's fragments.

    Only fragments of a single core are supported (compound selects are
    reassembled per core by the caller).
    """
    select_cols = [
        f.sql_text for f in fragments
        if f.kind == KnowledgeKind.CALCULATION and f.clause == Clause.SELECT
    ]
    where = [f.sql_text for f in fragments if f.clause == Clause.WHERE]
    having = [f.sql_text for f in fragments if f.clause == Clause.HAVING]
    relation = [f.sql_text for f in fragments if f.kind == KnowledgeKind.RELATION]
    dimension = [f.sql_text for f in fragments if f.kind == KnowledgeKind.DIMENSION]
    output = [f for f in fragments if f.kind == KnowledgeKind.OUTPUT]

    if not select_cols:
        raise SqlSyntaxError("no Calculation fragments to reassemble", 0)

    distinct_kw = ""
    tail = ""
    if output:
        distinct, order_by, limit, offset = parse_output_clause(output[0].sql_text)
        if distinct:
            distinct_kw = "DISTINCT "
        parts = []
        if order_by:
            parts.append("ORDER BY " + ", ".join(t.sql() for t in order_by))
        if limit is not None:
            parts.append(f"LIMIT {limit.sql()}")
        if offset is not None:
            parts.append(f"OFFSET {offset.sql()}")
        tail = " ".join(parts)

    pieces = [f"SELECT {distinct_kw}" + ", ".join(select_cols)]
    if relation:
        pieces.append(relation[0])
    if where:
        pieces.append("WHERE " + " AND ".join(where))
    if dimension:
        pieces.append(dimension[0])
    if having:
        pieces.append("HAVING " + " AND ".join(having))
    if tail:
        pieces.append(tail)
    return " ".join(pieces)
