"""Script decomposition into subquery units.

One unit per CTE plus one for the main query, in definition order. Derived
tables in FROM clauses are hoisted into synthetic CTEs (``__sub_1``, ...)
so every executable piece of the script is addressable by name.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from ..errors import DuplicateNameError
from . import astnodes as A
from .parser import parse
from .script import ScriptAst, parse_script

MAIN_NAME = "main"


@dataclass
class SubqueryUnit:
    id: str
    name: str
    select: A.Select = field(repr=False)
    sql_text: str
    referenced_tables: set[str]
    referenced_ctes: set[str]
    output_columns: list[tuple[str, str]]
    index: int  # definition order within the script
    synthetic: bool = False
    is_main: bool = False


def decompose(ast: ScriptAst) -> list[SubqueryUnit]:
    """Split a parsed script into one unit per CTE plus the main query."""
    script = copy.deepcopy(ast.root)
    seen: set[str] = set()
    for cte in script.ctes:
        key = cte.name.lower()
        if key in seen:
            raise DuplicateNameError(f"duplicate CTE name {cte.name!r}")
        seen.add(key)

    script = hoist_subqueries(script)
    cte_names = {c.name.lower() for c in script.ctes}
    main_name = MAIN_NAME if MAIN_NAME not in cte_names else "__main__"

    units: list[SubqueryUnit] = []
    synthetic_names = {c.name for c in script.ctes if c.name.startswith("__sub_")}
    for i, cte in enumerate(script.ctes):
        units.append(
            _build_unit(f"u{i}", cte.name, cte.select, i, cte_names,
                        synthetic=cte.name in synthetic_names)
        )
    units.append(
        _build_unit(f"u{len(script.ctes)}", main_name, script.body,
                    len(script.ctes), cte_names, is_main=True)
    )
    return units


def _build_unit(
    unit_id: str,
    name: str,
    select: A.Select,
    index: int,
    cte_names: set[str],
    synthetic: bool = False,
    is_main: bool = False,
) -> SubqueryUnit:
    sql_text = select.sql()
    anchored = parse(sql_text).body
    tables, ctes = collect_references(anchored, cte_names, self_name=name)
    return SubqueryUnit(
        id=unit_id,
        name=name,
        select=anchored,
        sql_text=sql_text,
        referenced_tables=tables,
        referenced_ctes=ctes,
        output_columns=infer_output_columns(anchored),
        index=index,
        synthetic=synthetic,
        is_main=is_main,
    )


# -- synthetic CTE hoisting ---------------------------------------------------


def hoist_subqueries(script: A.Script) -> A.Script:
    """Rewrite derived tables in FROM clauses into synthetic CTEs."""
    taken = {c.name.lower() for c in script.ctes}
    counter = [0]

    def next_name() -> str:
        counter[0] += 1
        while f"__sub_{counter[0]}" in taken:
            counter[0] += 1
        name = f"__sub_{counter[0]}"
        taken.add(name)
        return name

    new_ctes: list[A.Cte] = []

    def hoist_in_select(select: A.Select, sink: list[A.Cte]) -> None:
        for core in select.cores:
            fc = core.from_clause
            if fc is None:
                continue
            fc.source = replace_table(fc.source, sink)
            for join in fc.joins:
                join.table = replace_table(join.table, sink)

    def replace_table(table, sink: list[A.Cte]):
        if not isinstance(table, A.SubqueryTable):
            return table
        hoist_in_select(table.select, sink)  # depth-first: inner subqueries first
        name = next_name()
        sink.append(A.Cte(name=name, select=table.select))
        return A.TableRef(name=name, alias=table.alias, span=table.span)

    for cte in script.ctes:
        before: list[A.Cte] = []
        hoist_in_select(cte.select, before)
        new_ctes.extend(before)
        new_ctes.append(cte)
    tail: list[A.Cte] = []
    hoist_in_select(script.body, tail)
    new_ctes.extend(tail)

    if len(new_ctes) == len(script.ctes):
        return script
    return A.Script(recursive=script.recursive, ctes=new_ctes, body=script.body)


# -- reference collection -----------------------------------------------------


def collect_references(
    node: A.Node, cte_names: set[str], self_name: str | None = None
) -> tuple[set[str], set[str]]:
    """All table/CTE names read anywhere in *node*, classified by kind."""
    tables: set[str] = set()
    ctes: set[str] = set()
    for n in A.walk(node):
        if isinstance(n, A.TableRef):
            if n.name.lower() in cte_names:
                if self_name is None or n.name.lower() != self_name.lower():
                    ctes.add(n.name)
            else:
                tables.add(n.name)
    return tables, ctes


# -- output column inference ----------------------------------------------------


def infer_output_columns(select: A.Select) -> list[tuple[str, str]]:
    columns: list[tuple[str, str]] = []
    for col in select.core.columns:
        if isinstance(col.expr, A.Star):
            name = f"{col.expr.table}.*" if col.expr.table else "*"
            columns.append((name, "ANY"))
            continue
        if col.alias:
            name = col.alias
        elif isinstance(col.expr, A.ColumnRef):
            name = col.expr.name
        else:
            name = col.expr.sql()
        columns.append((name, infer_expr_type(col.expr)))
    return columns


_INT_FUNCS = {"COUNT", "LENGTH", "INSTR", "ROW_NUMBER", "RANK", "DENSE_RANK", "NTILE"}
_REAL_FUNCS = {"AVG", "JULIANDAY"}
_TEXT_FUNCS = {
    "SUBSTR", "SUBSTRING", "UPPER", "LOWER", "TRIM", "LTRIM", "RTRIM",
    "REPLACE", "GROUP_CONCAT", "STRFTIME", "HEX", "PRINTF", "FORMAT",
}


def infer_expr_type(expr: A.Expr) -> str:
    if isinstance(expr, A.Literal):
        if expr.kind == "number":
            return "REAL" if ("." in expr.text or "e" in expr.text.lower()) else "INTEGER"
        if expr.kind == "string":
            return "TEXT"
        if expr.kind in ("true", "false"):
            return "INTEGER"
        return "ANY"
    if isinstance(expr, A.FuncCall):
        if expr.name in _INT_FUNCS:
            return "INTEGER"
        if expr.name in _REAL_FUNCS:
            return "REAL"
        if expr.name in _TEXT_FUNCS:
            return "TEXT"
        if expr.name in ("SUM", "TOTAL", "MIN", "MAX", "ABS", "ROUND", "COALESCE", "IFNULL"):
            return "NUMERIC"
        return "ANY"
    if isinstance(expr, A.Cast):
        return expr.type_name
    if isinstance(expr, A.Binary):
        if expr.op == "||":
            return "TEXT"
        if expr.op in ("AND", "OR", "=", "!=", "<", "<=", ">", ">=", "IS", "IS NOT"):
            return "INTEGER"
        return "NUMERIC"
    if isinstance(expr, (A.Between, A.InList, A.InSelect, A.LikeOp, A.Exists)):
        return "INTEGER"
    if isinstance(expr, A.Case):
        if expr.whens:
            return infer_expr_type(expr.whens[0][1])
        return "ANY"
    if isinstance(expr, A.Unary):
        if expr.op == "NOT":
            return "INTEGER"
        return infer_expr_type(expr.operand)
    if isinstance(expr, A.Collate):
        return infer_expr_type(expr.expr)
    return "ANY"


def script_from_units(units: list[SubqueryUnit]) -> ScriptAst:
    """Reassemble a full script from decomposed units (inverse of decompose)."""
    ctes = [
        A.Cte(name=u.name, select=copy.deepcopy(u.select))
        for u in units
        if not u.is_main
    ]
    main = next(u for u in units if u.is_main)
    script = A.Script(recursive=False, ctes=ctes, body=copy.deepcopy(main.select))
    return parse_script(script.sql())
