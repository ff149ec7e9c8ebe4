"""Fragment-level editing: splice a replacement into a unit and re-validate.

A ``None`` replacement deletes the fragment. A textual replacement either
stays in the fragment's own clause (expression / result column / clause
body) or carries a leading clause keyword (``WHERE``, ``HAVING``,
``GROUP BY``, ``ORDER BY``, ``LIMIT``, ``DISTINCT``, ``FROM``), in which
case it is applied to that clause of the unit instead; predicates AND-merge
into an existing WHERE/HAVING. This is what lets an Output fragment like
``ORDER BY cnt LIMIT 1`` be rewritten into a ranking HAVING predicate.
"""

from __future__ import annotations

import copy
import functools

from ..errors import SpliceError, SqlSyntaxError
from . import astnodes as A
from .decompose import SubqueryUnit, _build_unit
from .fragments import extract_fragments
from .parser import Parser


def splice_fragment(
    unit: SubqueryUnit,
    fragment_id: str,
    replacement_sql: str | None,
    required_columns: set[str] | None = None,
) -> SubqueryUnit:
    """Return a new unit with *fragment_id* replaced (or deleted).

    *required_columns* are output columns the caller still needs downstream;
    losing one raises SpliceError so the caller can decide propagation.
    """
    fragments = {f.id: f for f in extract_fragments(unit)}
    if fragment_id not in fragments:
        raise SpliceError(f"unknown fragment {fragment_id!r} in unit {unit.name!r}")
    fragment = fragments[fragment_id]
    select = copy.deepcopy(unit.select)
    slot, core_index, position = fragment.locator
    core = select.cores[core_index]

    replacement = replacement_sql.strip() if replacement_sql else None
    try:
        clause_kw = _leading_clause(replacement) if replacement else None
        if replacement and clause_kw and (clause_kw != _slot_clause(slot)):
            _remove(select, core, slot, position)
            _apply_clause(select, core, clause_kw, replacement)
        elif replacement is None:
            _remove(select, core, slot, position)
        else:
            _replace_in_slot(select, core, slot, position, replacement)
    except SqlSyntaxError as exc:
        raise SpliceError(f"replacement does not parse: {exc}") from exc

    try:
        new_unit = _build_unit(
            unit.id, unit.name, select, unit.index,
            cte_names=set(n.lower() for n in unit.referenced_ctes) | {unit.name.lower()},
            synthetic=unit.synthetic, is_main=unit.is_main,
        )
    except SqlSyntaxError as exc:
        raise SpliceError(f"spliced unit does not re-parse: {exc}") from exc

    if required_columns:
        exported = {name.lower() for name, _ in new_unit.output_columns}
        if "*" not in exported:
            missing = sorted(
                c for c in required_columns if c.lower() not in exported
            )
            if missing:
                raise SpliceError(
                    f"edit drops columns referenced downstream: {', '.join(missing)}"
                )
    return new_unit


def _slot_clause(slot: str) -> str | None:
    return {
        "where": "WHERE",
        "having": "HAVING",
        "dimension": "GROUP BY",
        "relation": "FROM",
    }.get(slot)


def _leading_clause(text: str) -> str | None:
    upper = text.lstrip().upper()
    for kw in ("WHERE", "HAVING", "GROUP BY", "ORDER BY", "LIMIT", "DISTINCT", "FROM"):
        if upper.startswith(kw) and (len(upper) == len(kw) or not upper[len(kw)].isalnum()):
            return kw
    return None


def _remove(select: A.Select, core: A.SelectCore, slot: str, position: int) -> None:
    if slot == "select":
        if len(core.columns) == 1:
            raise SpliceError("cannot delete the only SELECT column")
        del core.columns[position]
    elif slot == "where":
        core.where = _drop_conjunct(core.where, position)
    elif slot == "having":
        core.having = _drop_conjunct(core.having, position)
    elif slot == "relation":
        core.from_clause = None
    elif slot == "dimension":
        core.group_by = []
    elif slot == "orderby":
        del select.order_by[position]
    elif slot == "output":
        select.order_by = []
        select.limit = None
        select.offset = None
        select.core.distinct = False
    else:  # pragma: no cover
        raise SpliceError(f"unknown fragment slot {slot!r}")


def _drop_conjunct(expr: A.Expr | None, position: int) -> A.Expr | None:
    from .fragments import split_conjuncts

    atoms = split_conjuncts(expr)
    del atoms[position]
    return _and_join(atoms)


def _and_join(atoms: list[A.Expr]) -> A.Expr | None:
    if not atoms:
        return None
    return functools.reduce(lambda a, b: A.Binary("AND", a, b), atoms)


def conjunction_sql(atoms: list[A.Expr]) -> str:
    """Render the AND of *atoms*; OR-rooted atoms get the parens they need."""
    joined = _and_join(atoms)
    return joined.sql() if joined is not None else ""


def _replace_in_slot(
    select: A.Select, core: A.SelectCore, slot: str, position: int, text: str
) -> None:
    from .fragments import split_conjuncts

    if slot == "select":
        cols = _parse_result_columns(text)
        core.columns[position : position + 1] = cols
    elif slot == "where":
        atoms = split_conjuncts(core.where)
        atoms[position] = _parse_expr(_strip_keyword(text, "WHERE"))
        core.where = _and_join(atoms)
    elif slot == "having":
        atoms = split_conjuncts(core.having)
        atoms[position] = _parse_expr(_strip_keyword(text, "HAVING"))
        core.having = _and_join(atoms)
    elif slot == "relation":
        core.from_clause = _parse_from(text)
    elif slot == "dimension":
        core.group_by = _parse_expr_list(_strip_keyword(text, "GROUP BY"))
    elif slot == "orderby":
        select.order_by[position].expr = _parse_expr(text)
    elif slot == "output":
        _apply_output(select, text)
    else:  # pragma: no cover
        raise SpliceError(f"unknown fragment slot {slot!r}")


def _apply_clause(select: A.Select, core: A.SelectCore, kw: str, text: str) -> None:
    """Apply a keyword-led clause replacement after the original was removed."""
    if kw == "WHERE":
        pred = _parse_expr(_strip_keyword(text, "WHERE"))
        core.where = _and_join(([core.where] if core.where is not None else []) + [pred])
    elif kw == "HAVING":
        pred = _parse_expr(_strip_keyword(text, "HAVING"))
        core.having = _and_join(([core.having] if core.having is not None else []) + [pred])
    elif kw == "GROUP BY":
        core.group_by = _parse_expr_list(_strip_keyword(text, "GROUP BY"))
    elif kw == "FROM":
        core.from_clause = _parse_from(text)
    else:  # ORDER BY / LIMIT / DISTINCT -> output clause shapes
        _apply_output(select, text)


def _apply_output(select: A.Select, text: str) -> None:
    distinct, order_by, limit, offset = _parse_output_clause(text)
    select.core.distinct = distinct
    select.order_by = order_by
    select.limit = limit
    select.offset = offset


def _strip_keyword(text: str, kw: str) -> str:
    stripped = text.lstrip()
    if stripped.upper().startswith(kw):
        return stripped[len(kw):]
    return text


# -- mini-parsers over clause snippets ---------------------------------------


def _finish(parser: Parser, value):
    tok = parser.peek()
    if tok.kind != "eof":
        raise SqlSyntaxError(f"trailing input {tok.text!r}", tok.start)
    return value


def _parse_expr(text: str) -> A.Expr:
    p = Parser(text)
    return _finish(p, p.parse_expr())


def _parse_expr_list(text: str) -> list[A.Expr]:
    p = Parser(text)
    exprs = [p.parse_expr()]
    while p.accept(","):
        exprs.append(p.parse_expr())
    return _finish(p, exprs)


def _parse_result_columns(text: str) -> list[A.ResultColumn]:
    p = Parser(text)
    cols = [p.parse_result_column()]
    while p.accept(","):
        cols.append(p.parse_result_column())
    return _finish(p, cols)


def _parse_from(text: str) -> A.FromClause:
    stripped = text.lstrip()
    if not stripped.upper().startswith("FROM"):
        stripped = "FROM " + stripped
    p = Parser(stripped)
    return _finish(p, p.parse_from())


def parse_output_clause(text: str):
    """Public alias used by fragment validity checks."""
    return _parse_output_clause(text)


def _parse_output_clause(text: str):
    p = Parser(text)
    distinct = p.accept("DISTINCT")
    order_by: list[A.OrderingTerm] = []
    limit = offset = None
    if p.accept("ORDER"):
        p.expect("BY")
        order_by.append(p.parse_ordering_term())
        while p.accept(","):
            order_by.append(p.parse_ordering_term())
    if p.accept("LIMIT"):
        limit = p.parse_expr()
        if p.accept("OFFSET"):
            offset = p.parse_expr()
        elif p.accept(","):
            offset = limit
            limit = p.parse_expr()
    return _finish(p, (distinct, order_by, limit, offset))
