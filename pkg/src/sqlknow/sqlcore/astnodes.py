"""AST node types for the SQLite SELECT dialect, with canonical rendering.

Design notes:
- Every node carries a ``span`` = (start, end) byte offsets into the source
  it was parsed from. Spans never participate in equality, so two parses of
  equivalent text compare structurally equal.
- ``sql()`` renders the canonical form: keywords uppercase, single spaces,
  ", " separators, parentheses inserted from operator precedence only.
  Rendering then re-parsing yields a structurally identical tree.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .tokens import KEYWORDS

Span = tuple[int, int]

_BARE_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")


def quote_ident(name: str) -> str:
    if _BARE_IDENT.match(name) and name.upper() not in KEYWORDS:
        return name
    return '"' + name.replace('"', '""') + '"'


def quote_string(value: str) -> str:
    return "'" + value.replace("'", "''") + "'"


# Operator precedence, higher binds tighter. Mirrors SQLite.
PREC_OR = 1
PREC_AND = 2
PREC_NOT = 3
PREC_EQUALITY = 4  # = != IS IN LIKE GLOB REGEXP MATCH BETWEEN
PREC_RELATIONAL = 5
PREC_BITWISE = 6
PREC_ADDITIVE = 7
PREC_MULTIPLICATIVE = 8
PREC_CONCAT = 9
PREC_COLLATE = 10
PREC_UNARY = 11
PREC_PRIMARY = 12

BINARY_PREC = {
    "OR": PREC_OR,
    "AND": PREC_AND,
    "=": PREC_EQUALITY,
    "!=": PREC_EQUALITY,
    "IS": PREC_EQUALITY,
    "IS NOT": PREC_EQUALITY,
    "<": PREC_RELATIONAL,
    "<=": PREC_RELATIONAL,
    ">": PREC_RELATIONAL,
    ">=": PREC_RELATIONAL,
    "&": PREC_BITWISE,
    "|": PREC_BITWISE,
    "<<": PREC_BITWISE,
    ">>": PREC_BITWISE,
    "+": PREC_ADDITIVE,
    "-": PREC_ADDITIVE,
    "*": PREC_MULTIPLICATIVE,
    "/": PREC_MULTIPLICATIVE,
    "%": PREC_MULTIPLICATIVE,
    "||": PREC_CONCAT,
}


@dataclass
class Node:
    span: Span | None = field(default=None, compare=False, repr=False, kw_only=True)


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------


@dataclass
class Expr(Node):
    prec: int = field(default=PREC_PRIMARY, init=False, compare=False, repr=False)

    def sql(self) -> str:  # pragma: no cover - overridden
        raise NotImplementedError


def _wrap(expr: Expr, min_prec: int) -> str:
    text = expr.sql()
    if expr.prec < min_prec:
        return f"({text})"
    return text


@dataclass
class Literal(Expr):
    kind: str  # 'number' | 'string' | 'null' | 'true' | 'false'
    text: str  # numbers keep their source lexeme; strings hold the raw value

    def sql(self) -> str:
        if self.kind == "string":
            return quote_string(self.text)
        if self.kind == "number":
            return self.text
        return self.kind.upper()


NULL = lambda: Literal("null", "NULL")  # noqa: E731


@dataclass
class ColumnRef(Expr):
    table: str | None
    name: str

    def sql(self) -> str:
        if self.table:
            return f"{quote_ident(self.table)}.{quote_ident(self.name)}"
        return quote_ident(self.name)


@dataclass
class Star(Expr):
    table: str | None = None

    def sql(self) -> str:
        return f"{quote_ident(self.table)}.*" if self.table else "*"


@dataclass
class FrameBound(Node):
    kind: str  # 'UNBOUNDED PRECEDING' | 'CURRENT ROW' | 'PRECEDING' | 'FOLLOWING'
    expr: Expr | None = None

    def sql(self) -> str:
        if self.expr is not None:
            return f"{self.expr.sql()} {self.kind}"
        return self.kind


@dataclass
class Frame(Node):
    unit: str  # 'ROWS' | 'RANGE' | 'GROUPS'
    start: FrameBound = None  # type: ignore[assignment]
    end: FrameBound | None = None

    def sql(self) -> str:
        if self.end is not None:
            return f"{self.unit} BETWEEN {self.start.sql()} AND {self.end.sql()}"
        return f"{self.unit} {self.start.sql()}"


@dataclass
class Window(Node):
    partition_by: list[Expr] = field(default_factory=list)
    order_by: list[OrderingTerm] = field(default_factory=list)
    frame: Frame | None = None

    def sql(self) -> str:
        parts = []
        if self.partition_by:
            parts.append("PARTITION BY " + ", ".join(e.sql() for e in self.partition_by))
        if self.order_by:
            parts.append("ORDER BY " + ", ".join(t.sql() for t in self.order_by))
        if self.frame is not None:
            parts.append(self.frame.sql())
        return "(" + " ".join(parts) + ")"


@dataclass
class FuncCall(Expr):
    name: str  # stored uppercase
    args: list[Expr] = field(default_factory=list)
    distinct: bool = False
    star: bool = False
    filter_where: Expr | None = None
    over: Window | None = None

    def sql(self) -> str:
        if self.star:
            inner = "*"
        else:
            inner = ("DISTINCT " if self.distinct else "") + ", ".join(
                a.sql() for a in self.args
            )
        text = f"{self.name}({inner})"
        if self.filter_where is not None:
            text += f" FILTER (WHERE {self.filter_where.sql()})"
        if self.over is not None:
            text += f" OVER {self.over.sql()}"
        return text


@dataclass
class Unary(Expr):
    op: str  # '-' | '+' | '~' | 'NOT'
    operand: Expr = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.prec = PREC_NOT if self.op == "NOT" else PREC_UNARY

    def sql(self) -> str:
        inner = _wrap(self.operand, self.prec)
        if self.op == "NOT":
            return f"NOT {inner}"
        if self.op == "-" and inner.startswith("-"):
            inner = f"({inner})"  # avoid '--' scanning as a comment
        return f"{self.op}{inner}"


@dataclass
class Binary(Expr):
    op: str
    left: Expr = None  # type: ignore[assignment]
    right: Expr = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.prec = BINARY_PREC[self.op]

    def sql(self) -> str:
        return f"{_wrap(self.left, self.prec)} {self.op} {_wrap(self.right, self.prec + 1)}"


@dataclass
class LikeOp(Expr):
    op: str  # 'LIKE' | 'GLOB' | 'REGEXP' | 'MATCH'
    negated: bool = False
    expr: Expr = None  # type: ignore[assignment]
    pattern: Expr = None  # type: ignore[assignment]
    escape: Expr | None = None

    def __post_init__(self) -> None:
        self.prec = PREC_EQUALITY

    def sql(self) -> str:
        neg = "NOT " if self.negated else ""
        text = f"{_wrap(self.expr, PREC_RELATIONAL)} {neg}{self.op} {_wrap(self.pattern, PREC_RELATIONAL)}"
        if self.escape is not None:
            text += f" ESCAPE {_wrap(self.escape, PREC_RELATIONAL)}"
        return text


@dataclass
class Between(Expr):
    expr: Expr
    low: Expr = None  # type: ignore[assignment]
    high: Expr = None  # type: ignore[assignment]
    negated: bool = False

    def __post_init__(self) -> None:
        self.prec = PREC_EQUALITY

    def sql(self) -> str:
        neg = "NOT " if self.negated else ""
        return (
            f"{_wrap(self.expr, PREC_RELATIONAL)} {neg}BETWEEN "
            f"{_wrap(self.low, PREC_RELATIONAL)} AND {_wrap(self.high, PREC_RELATIONAL)}"
        )


@dataclass
class InList(Expr):
    expr: Expr
    items: list[Expr] = field(default_factory=list)
    negated: bool = False

    def __post_init__(self) -> None:
        self.prec = PREC_EQUALITY

    def sql(self) -> str:
        neg = "NOT " if self.negated else ""
        inner = ", ".join(i.sql() for i in self.items)
        return f"{_wrap(self.expr, PREC_RELATIONAL)} {neg}IN ({inner})"


@dataclass
class InSelect(Expr):
    expr: Expr
    select: Select = None  # type: ignore[assignment]
    negated: bool = False

    def __post_init__(self) -> None:
        self.prec = PREC_EQUALITY

    def sql(self) -> str:
        neg = "NOT " if self.negated else ""
        return f"{_wrap(self.expr, PREC_RELATIONAL)} {neg}IN ({self.select.sql()})"


@dataclass
class Case(Expr):
    operand: Expr | None
    whens: list[tuple[Expr, Expr]] = field(default_factory=list)
    else_: Expr | None = None

    def sql(self) -> str:
        parts = ["CASE"]
        if self.operand is not None:
            parts.append(self.operand.sql())
        for cond, result in self.whens:
            parts.append(f"WHEN {cond.sql()} THEN {result.sql()}")
        if self.else_ is not None:
            parts.append(f"ELSE {self.else_.sql()}")
        parts.append("END")
        return " ".join(parts)


@dataclass
class Cast(Expr):
    expr: Expr
    type_name: str = ""

    def sql(self) -> str:
        return f"CAST({self.expr.sql()} AS {self.type_name})"


@dataclass
class Collate(Expr):
    expr: Expr
    collation: str = ""

    def __post_init__(self) -> None:
        self.prec = PREC_COLLATE

    def sql(self) -> str:
        return f"{_wrap(self.expr, PREC_COLLATE)} COLLATE {self.collation}"


@dataclass
class Exists(Expr):
    select: Select
    negated: bool = False

    def sql(self) -> str:
        neg = "NOT " if self.negated else ""
        return f"{neg}EXISTS ({self.select.sql()})"


@dataclass
class ScalarSubquery(Expr):
    select: Select

    def sql(self) -> str:
        return f"({self.select.sql()})"


# --------------------------------------------------------------------------
# Clauses
# --------------------------------------------------------------------------


@dataclass
class OrderingTerm(Node):
    expr: Expr = None  # type: ignore[assignment]
    desc: bool = False
    nulls: str | None = None  # 'FIRST' | 'LAST'

    def sql(self) -> str:
        text = self.expr.sql()
        if self.desc:
            text += " DESC"
        if self.nulls:
            text += f" NULLS {self.nulls}"
        return text


@dataclass
class ResultColumn(Node):
    expr: Expr = None  # type: ignore[assignment]
    alias: str | None = None

    def sql(self) -> str:
        if self.alias:
            return f"{self.expr.sql()} AS {quote_ident(self.alias)}"
        return self.expr.sql()


@dataclass
class TableRef(Node):
    name: str = ""
    alias: str | None = None

    def sql(self) -> str:
        text = quote_ident(self.name)
        if self.alias:
            text += f" AS {quote_ident(self.alias)}"
        return text


@dataclass
class SubqueryTable(Node):
    select: Select = None  # type: ignore[assignment]
    alias: str | None = None

    def sql(self) -> str:
        text = f"({self.select.sql()})"
        if self.alias:
            text += f" AS {quote_ident(self.alias)}"
        return text


TableLike = "TableRef | SubqueryTable"


@dataclass
class JoinPart(Node):
    kind: str = "INNER"  # 'INNER' | 'LEFT' | 'RIGHT' | 'FULL' | 'CROSS' | 'COMMA'
    natural: bool = False
    table: TableRef | SubqueryTable = None  # type: ignore[assignment]
    on: Expr | None = None
    using: list[str] = field(default_factory=list)

    def sql(self) -> str:
        if self.kind == "COMMA":
            return f", {self.table.sql()}"
        prefix = "NATURAL " if self.natural else ""
        text = f" {prefix}{self.kind} JOIN {self.table.sql()}"
        if self.on is not None:
            text += f" ON {self.on.sql()}"
        elif self.using:
            text += " USING (" + ", ".join(quote_ident(c) for c in self.using) + ")"
        return text


@dataclass
class FromClause(Node):
    source: TableRef | SubqueryTable = None  # type: ignore[assignment]
    joins: list[JoinPart] = field(default_factory=list)

    def sql(self) -> str:
        return "FROM " + self.source.sql() + "".join(j.sql() for j in self.joins)


@dataclass
class SelectCore(Node):
    distinct: bool = False
    columns: list[ResultColumn] = field(default_factory=list)
    from_clause: FromClause | None = None
    where: Expr | None = None
    group_by: list[Expr] = field(default_factory=list)
    having: Expr | None = None

    def sql(self) -> str:
        parts = ["SELECT"]
        if self.distinct:
            parts.append("DISTINCT")
        parts.append(", ".join(c.sql() for c in self.columns))
        if self.from_clause is not None:
            parts.append(self.from_clause.sql())
        if self.where is not None:
            parts.append(f"WHERE {self.where.sql()}")
        if self.group_by:
            parts.append("GROUP BY " + ", ".join(e.sql() for e in self.group_by))
        if self.having is not None:
            parts.append(f"HAVING {self.having.sql()}")
        return " ".join(parts)


@dataclass
class Select(Node):
    cores: list[SelectCore] = field(default_factory=list)
    ops: list[str] = field(default_factory=list)  # 'UNION'|'UNION ALL'|'INTERSECT'|'EXCEPT'
    order_by: list[OrderingTerm] = field(default_factory=list)
    limit: Expr | None = None
    offset: Expr | None = None

    def sql(self) -> str:
        parts = [self.cores[0].sql()]
        for op, core in zip(self.ops, self.cores[1:]):
            parts.append(op)
            parts.append(core.sql())
        if self.order_by:
            parts.append("ORDER BY " + ", ".join(t.sql() for t in self.order_by))
        if self.limit is not None:
            parts.append(f"LIMIT {self.limit.sql()}")
        if self.offset is not None:
            parts.append(f"OFFSET {self.offset.sql()}")
        return " ".join(parts)

    @property
    def core(self) -> SelectCore:
        """Primary (left-most) select core."""
        return self.cores[0]


@dataclass
class Cte(Node):
    name: str = ""
    columns: list[str] = field(default_factory=list)
    select: Select = None  # type: ignore[assignment]

    def sql(self) -> str:
        cols = ""
        if self.columns:
            cols = "(" + ", ".join(quote_ident(c) for c in self.columns) + ")"
        return f"{quote_ident(self.name)}{cols} AS ({self.select.sql()})"


@dataclass
class Script(Node):
    recursive: bool = False
    ctes: list[Cte] = field(default_factory=list)
    body: Select = None  # type: ignore[assignment]

    def sql(self) -> str:
        if not self.ctes:
            return self.body.sql()
        kw = "WITH RECURSIVE " if self.recursive else "WITH "
        return kw + ", ".join(c.sql() for c in self.ctes) + " " + self.body.sql()


# --------------------------------------------------------------------------
# Tree walking
# --------------------------------------------------------------------------

_CHILD_FIELDS_CACHE: dict[type, tuple[str, ...]] = {}


def iter_children(node: Node):
    """Yield every direct child Node (descends into lists and when-tuples)."""
    for name, value in vars(node).items():
        if name in ("span", "prec"):
            continue
        if isinstance(value, Node):
            yield value
        elif isinstance(value, list):
            for item in value:
                if isinstance(item, Node):
                    yield item
                elif isinstance(item, tuple):
                    for part in item:
                        if isinstance(part, Node):
                            yield part


def walk(node: Node):
    """Depth-first pre-order traversal."""
    yield node
    for child in iter_children(node):
        yield from walk(child)
