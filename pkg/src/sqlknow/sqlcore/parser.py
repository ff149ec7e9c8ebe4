"""Recursive-descent parser for the SQLite SELECT dialect.

Covers WITH/CTE prefixes, compound selects, joins, subqueries (FROM, IN,
EXISTS, scalar), window functions, CASE/CAST/COLLATE, and the SQLite
operator zoo. DML/DDL, bind parameters, and nested WITH are rejected.

Parse-time normalizations (canonical form): keywords uppercased,
``<>``/``==`` folded to ``!=``/``=``, ``ISNULL``/``NOTNULL`` folded to
``IS [NOT] NULL``, explicit ``ASC`` dropped, bare ``JOIN`` becomes
``INNER JOIN``, ``OUTER`` is dropped.
"""

from __future__ import annotations

from ..errors import SqlSyntaxError
from . import astnodes as A
from .tokens import Token, tokenize

_JOIN_KINDS = ("INNER", "LEFT", "RIGHT", "FULL", "CROSS")
_COMPOUND_OPS = ("UNION", "INTERSECT", "EXCEPT")


class Parser:
    def __init__(self, sql: str):
        self.sql = sql
        self.tokens = tokenize(sql)
        self.pos = 0

    # -- token plumbing ----------------------------------------------------

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok.kind in ("keyword", "op") and tok.text == text

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.advance()
            return True
        return False

    def expect(self, text: str) -> Token:
        if not self.at(text):
            tok = self.peek()
            raise SqlSyntaxError(
                f"unexpected {tok.text or 'end of input'!r}", tok.start, expected=text
            )
        return self.advance()

    def error(self, message: str, expected: str | None = None) -> SqlSyntaxError:
        tok = self.peek()
        return SqlSyntaxError(message, tok.start, expected=expected)

    def _prev_end(self) -> int:
        return self.tokens[self.pos - 1].end if self.pos > 0 else 0

    # -- entry points --------------------------------------------------------

    def parse_script(self) -> A.Script:
        start = self.peek().start
        recursive = False
        ctes: list[A.Cte] = []
        if self.accept("WITH"):
            recursive = self.accept("RECURSIVE")
            ctes.append(self.parse_cte())
            while self.accept(","):
                ctes.append(self.parse_cte())
        body = self.parse_select()
        self.accept(";")
        if self.peek().kind != "eof":
            raise self.error("trailing input after statement", expected="end of input")
        return A.Script(recursive=recursive, ctes=ctes, body=body, span=(start, self._prev_end()))

    def parse_cte(self) -> A.Cte:
        start = self.peek().start
        name = self.expect_ident("CTE name")
        columns: list[str] = []
        if self.accept("("):
            columns.append(self.expect_ident("column name"))
            while self.accept(","):
                columns.append(self.expect_ident("column name"))
            self.expect(")")
        self.expect("AS")
        self.expect("(")
        select = self.parse_select()
        self.expect(")")
        return A.Cte(name=name, columns=columns, select=select, span=(start, self._prev_end()))

    def expect_ident(self, what: str) -> str:
        tok = self.peek()
        if tok.kind != "ident":
            raise self.error(f"unexpected {tok.text or 'end of input'!r}", expected=what)
        self.advance()
        return tok.text

    # -- selects -------------------------------------------------------------

    def parse_select(self) -> A.Select:
        start = self.peek().start
        if self.at("WITH"):
            raise self.error("WITH is only supported at the top level of a script")
        cores = [self.parse_select_core()]
        ops: list[str] = []
        while self.peek().kind == "keyword" and self.peek().text in _COMPOUND_OPS:
            op = self.advance().text
            if op == "UNION" and self.accept("ALL"):
                op = "UNION ALL"
            ops.append(op)
            cores.append(self.parse_select_core())
        order_by: list[A.OrderingTerm] = []
        if self.accept("ORDER"):
            self.expect("BY")
            order_by.append(self.parse_ordering_term())
            while self.accept(","):
                order_by.append(self.parse_ordering_term())
        limit: A.Expr | None = None
        offset: A.Expr | None = None
        if self.accept("LIMIT"):
            limit = self.parse_expr()
            if self.accept("OFFSET"):
                offset = self.parse_expr()
            elif self.accept(","):
                # SQLite: LIMIT <offset>, <count>
                offset = limit
                limit = self.parse_expr()
        return A.Select(
            cores=cores, ops=ops, order_by=order_by, limit=limit, offset=offset,
            span=(start, self._prev_end()),
        )

    def parse_select_core(self) -> A.SelectCore:
        start = self.peek().start
        self.expect("SELECT")
        distinct = False
        if self.accept("DISTINCT"):
            distinct = True
        else:
            self.accept("ALL")
        columns = [self.parse_result_column()]
        while self.accept(","):
            columns.append(self.parse_result_column())
        from_clause = self.parse_from() if self.at("FROM") else None
        where = None
        if self.accept("WHERE"):
            where = self.parse_expr()
        group_by: list[A.Expr] = []
        having = None
        if self.accept("GROUP"):
            self.expect("BY")
            group_by.append(self.parse_expr())
            while self.accept(","):
                group_by.append(self.parse_expr())
        if self.accept("HAVING"):
            having = self.parse_expr()
        return A.SelectCore(
            distinct=distinct, columns=columns, from_clause=from_clause,
            where=where, group_by=group_by, having=having,
            span=(start, self._prev_end()),
        )

    def parse_result_column(self) -> A.ResultColumn:
        start = self.peek().start
        if self.at("*"):
            tok = self.advance()
            return A.ResultColumn(expr=A.Star(span=(tok.start, tok.end)), span=(tok.start, tok.end))
        expr = self.parse_expr()
        alias = None
        if self.accept("AS"):
            alias = self.expect_ident("alias")
        elif self.peek().kind == "ident":
            alias = self.advance().text
        return A.ResultColumn(expr=expr, alias=alias, span=(start, self._prev_end()))

    def parse_ordering_term(self) -> A.OrderingTerm:
        start = self.peek().start
        expr = self.parse_expr()
        desc = False
        if self.accept("DESC"):
            desc = True
        else:
            self.accept("ASC")
        nulls = None
        if self.accept("NULLS"):
            if self.accept("FIRST"):
                nulls = "FIRST"
            else:
                self.expect("LAST")
                nulls = "LAST"
        return A.OrderingTerm(expr=expr, desc=desc, nulls=nulls, span=(start, self._prev_end()))

    # -- FROM / joins ----------------------------------------------------------

    def parse_from(self) -> A.FromClause:
        start = self.peek().start
        self.expect("FROM")
        source = self.parse_table_or_subquery()
        joins: list[A.JoinPart] = []
        while True:
            jstart = self.peek().start
            if self.accept(","):
                table = self.parse_table_or_subquery()
                joins.append(A.JoinPart(kind="COMMA", table=table, span=(jstart, self._prev_end())))
                continue
            natural = self.accept("NATURAL")
            kind = None
            for k in _JOIN_KINDS:
                if self.at(k):
                    self.advance()
                    kind = k
                    break
            if kind in ("LEFT", "RIGHT", "FULL"):
                self.accept("OUTER")
            if not self.at("JOIN"):
                if kind is not None or natural:
                    raise self.error("dangling join qualifier", expected="JOIN")
                break
            self.advance()
            table = self.parse_table_or_subquery()
            on = None
            using: list[str] = []
            if self.accept("ON"):
                on = self.parse_expr()
            elif self.accept("USING"):
                self.expect("(")
                using.append(self.expect_ident("column name"))
                while self.accept(","):
                    using.append(self.expect_ident("column name"))
                self.expect(")")
            joins.append(
                A.JoinPart(
                    kind=kind or "INNER", natural=natural, table=table, on=on,
                    using=using, span=(jstart, self._prev_end()),
                )
            )
        return A.FromClause(source=source, joins=joins, span=(start, self._prev_end()))

    def parse_table_or_subquery(self) -> A.TableRef | A.SubqueryTable:
        start = self.peek().start
        if self.accept("("):
            if not self.at("SELECT"):
                raise self.error("expected a subquery", expected="SELECT")
            select = self.parse_select()
            self.expect(")")
            alias = self._maybe_alias()
            return A.SubqueryTable(select=select, alias=alias, span=(start, self._prev_end()))
        name = self.expect_ident("table name")
        alias = self._maybe_alias()
        return A.TableRef(name=name, alias=alias, span=(start, self._prev_end()))

    def _maybe_alias(self) -> str | None:
        if self.accept("AS"):
            return self.expect_ident("alias")
        if self.peek().kind == "ident":
            return self.advance().text
        return None

    # -- expressions ------------------------------------------------------------

    def parse_expr(self) -> A.Expr:
        return self._parse_or()

    def _spanned(self, expr: A.Expr, start: int) -> A.Expr:
        if expr.span is None or expr.span[0] > start or expr.span[1] < self._prev_end():
            expr.span = (start, self._prev_end())
        return expr

    def _parse_or(self) -> A.Expr:
        start = self.peek().start
        left = self._parse_and()
        while self.accept("OR"):
            right = self._parse_and()
            left = self._spanned(A.Binary("OR", left, right), start)
        return left

    def _parse_and(self) -> A.Expr:
        start = self.peek().start
        left = self._parse_not()
        while self.accept("AND"):
            right = self._parse_not()
            left = self._spanned(A.Binary("AND", left, right), start)
        return left

    def _parse_not(self) -> A.Expr:
        if self.at("NOT") and self.peek(1).upper not in (
            "IN", "LIKE", "GLOB", "REGEXP", "MATCH", "BETWEEN", "NULL",
        ):
            start = self.advance().start
            operand = self._parse_not()
            return self._spanned(A.Unary("NOT", operand), start)
        return self._parse_equality()

    def _parse_equality(self) -> A.Expr:
        start = self.peek().start
        left = self._parse_relational()
        while True:
            tok = self.peek()
            if tok.kind == "op" and tok.text in ("=", "==", "!=", "<>"):
                self.advance()
                op = "=" if tok.text in ("=", "==") else "!="
                right = self._parse_relational()
                left = self._spanned(A.Binary(op, left, right), start)
                continue
            if self.at("IS"):
                self.advance()
                negated = self.accept("NOT")
                if self.accept("NULL"):
                    right: A.Expr = A.Literal("null", "NULL")
                else:
                    right = self._parse_relational()
                left = self._spanned(A.Binary("IS NOT" if negated else "IS", left, right), start)
                continue
            if self.at("ISNULL"):
                self.advance()
                left = self._spanned(A.Binary("IS", left, A.Literal("null", "NULL")), start)
                continue
            if self.at("NOTNULL"):
                self.advance()
                left = self._spanned(A.Binary("IS NOT", left, A.Literal("null", "NULL")), start)
                continue
            negated = False
            if self.at("NOT"):
                self.advance()
                negated = True
            if self.accept("BETWEEN"):
                low = self._parse_relational()
                self.expect("AND")
                high = self._parse_relational()
                left = self._spanned(A.Between(left, low, high, negated=negated), start)
                continue
            if self.accept("IN"):
                left = self._parse_in_tail(left, negated, start)
                continue
            matched = False
            for like_op in ("LIKE", "GLOB", "REGEXP", "MATCH"):
                if self.accept(like_op):
                    pattern = self._parse_relational()
                    escape = None
                    if self.accept("ESCAPE"):
                        escape = self._parse_relational()
                    left = self._spanned(
                        A.LikeOp(like_op, negated=negated, expr=left, pattern=pattern, escape=escape),
                        start,
                    )
                    matched = True
                    break
            if matched:
                continue
            if negated:
                raise self.error("NOT must be followed by IN/LIKE/GLOB/REGEXP/MATCH/BETWEEN")
            return left

    def _parse_in_tail(self, left: A.Expr, negated: bool, start: int) -> A.Expr:
        self.expect("(")
        if self.at("SELECT"):
            select = self.parse_select()
            self.expect(")")
            return self._spanned(A.InSelect(left, select, negated=negated), start)
        items: list[A.Expr] = []
        if not self.at(")"):
            items.append(self.parse_expr())
            while self.accept(","):
                items.append(self.parse_expr())
        self.expect(")")
        return self._spanned(A.InList(left, items, negated=negated), start)

    def _parse_binary_tier(self, ops: tuple[str, ...], next_tier) -> A.Expr:
        start = self.peek().start
        left = next_tier()
        while self.peek().kind == "op" and self.peek().text in ops:
            op = self.advance().text
            right = next_tier()
            left = self._spanned(A.Binary(op, left, right), start)
        return left

    def _parse_relational(self) -> A.Expr:
        return self._parse_binary_tier(("<", "<=", ">", ">="), self._parse_bitwise)

    def _parse_bitwise(self) -> A.Expr:
        return self._parse_binary_tier(("&", "|", "<<", ">>"), self._parse_additive)

    def _parse_additive(self) -> A.Expr:
        return self._parse_binary_tier(("+", "-"), self._parse_multiplicative)

    def _parse_multiplicative(self) -> A.Expr:
        return self._parse_binary_tier(("*", "/", "%"), self._parse_concat)

    def _parse_concat(self) -> A.Expr:
        return self._parse_binary_tier(("||",), self._parse_collate)

    def _parse_collate(self) -> A.Expr:
        start = self.peek().start
        expr = self._parse_unary()
        while self.accept("COLLATE"):
            collation = self.expect_ident("collation name").upper()
            expr = self._spanned(A.Collate(expr, collation), start)
        return expr

    def _parse_unary(self) -> A.Expr:
        tok = self.peek()
        if tok.kind == "op" and tok.text in ("-", "+", "~"):
            self.advance()
            operand = self._parse_unary()
            return self._spanned(A.Unary(tok.text, operand), tok.start)
        return self._parse_primary()

    def _parse_primary(self) -> A.Expr:
        tok = self.peek()
        start = tok.start
        if tok.kind == "number":
            self.advance()
            return A.Literal("number", tok.text, span=(start, tok.end))
        if tok.kind == "string":
            self.advance()
            return A.Literal("string", tok.text, span=(start, tok.end))
        if self.accept("NULL"):
            return A.Literal("null", "NULL", span=(start, self._prev_end()))
        if self.accept("TRUE"):
            return A.Literal("true", "TRUE", span=(start, self._prev_end()))
        if self.accept("FALSE"):
            return A.Literal("false", "FALSE", span=(start, self._prev_end()))
        if self.accept("CASE"):
            return self._parse_case_tail(start)
        if self.accept("CAST"):
            self.expect("(")
            inner = self.parse_expr()
            self.expect("AS")
            type_name = self._parse_type_name()
            self.expect(")")
            return A.Cast(inner, type_name, span=(start, self._prev_end()))
        if self.accept("EXISTS"):
            self.expect("(")
            select = self.parse_select()
            self.expect(")")
            return A.Exists(select, span=(start, self._prev_end()))
        if self.accept("("):
            if self.at("SELECT"):
                select = self.parse_select()
                self.expect(")")
                return A.ScalarSubquery(select, span=(start, self._prev_end()))
            inner = self.parse_expr()
            self.expect(")")
            # widen the span so fragment slices keep the author's parens
            inner.span = (start, self._prev_end())
            return inner
        if tok.kind == "ident":
            self.advance()
            if self.at("("):
                return self._parse_call_tail(tok.text, start)
            if self.accept("."):
                if self.at("*"):
                    self.advance()
                    return A.Star(table=tok.text, span=(start, self._prev_end()))
                name = self.expect_ident("column name")
                return A.ColumnRef(tok.text, name, span=(start, self._prev_end()))
            return A.ColumnRef(None, tok.text, span=(start, tok.end))
        raise self.error(
            f"unexpected {tok.text or 'end of input'!r}", expected="expression"
        )

    def _parse_case_tail(self, start: int) -> A.Expr:
        operand = None
        if not self.at("WHEN"):
            operand = self.parse_expr()
        whens: list[tuple[A.Expr, A.Expr]] = []
        while self.accept("WHEN"):
            cond = self.parse_expr()
            self.expect("THEN")
            whens.append((cond, self.parse_expr()))
        if not whens:
            raise self.error("CASE requires at least one WHEN", expected="WHEN")
        else_ = None
        if self.accept("ELSE"):
            else_ = self.parse_expr()
        self.expect("END")
        return A.Case(operand, whens, else_, span=(start, self._prev_end()))

    def _parse_type_name(self) -> str:
        parts = [self.expect_ident("type name").upper()]
        while self.peek().kind == "ident":
            parts.append(self.advance().text.upper())
        name = " ".join(parts)
        if self.accept("("):
            nums = [self.advance().text]
            while self.accept(","):
                nums.append(self.advance().text)
            self.expect(")")
            name += "(" + ", ".join(nums) + ")"
        return name

    def _parse_call_tail(self, name: str, start: int) -> A.Expr:
        self.expect("(")
        distinct = False
        star = False
        args: list[A.Expr] = []
        if self.at("*"):
            self.advance()
            star = True
        elif not self.at(")"):
            distinct = self.accept("DISTINCT")
            args.append(self.parse_expr())
            while self.accept(","):
                args.append(self.parse_expr())
        self.expect(")")
        filter_where = None
        if self.accept("FILTER"):
            self.expect("(")
            self.expect("WHERE")
            filter_where = self.parse_expr()
            self.expect(")")
        over = None
        if self.accept("OVER"):
            over = self._parse_window()
        return A.FuncCall(
            name.upper(), args=args, distinct=distinct, star=star,
            filter_where=filter_where, over=over, span=(start, self._prev_end()),
        )

    def _parse_window(self) -> A.Window:
        start = self.peek().start
        self.expect("(")
        partition_by: list[A.Expr] = []
        order_by: list[A.OrderingTerm] = []
        frame = None
        if self.accept("PARTITION"):
            self.expect("BY")
            partition_by.append(self.parse_expr())
            while self.accept(","):
                partition_by.append(self.parse_expr())
        if self.accept("ORDER"):
            self.expect("BY")
            order_by.append(self.parse_ordering_term())
            while self.accept(","):
                order_by.append(self.parse_ordering_term())
        for unit in ("ROWS", "RANGE", "GROUPS"):
            if self.accept(unit):
                frame = self._parse_frame(unit)
                break
        self.expect(")")
        return A.Window(partition_by=partition_by, order_by=order_by, frame=frame,
                        span=(start, self._prev_end()))

    def _parse_frame(self, unit: str) -> A.Frame:
        if self.accept("BETWEEN"):
            lo = self._parse_frame_bound()
            self.expect("AND")
            hi = self._parse_frame_bound()
            return A.Frame(unit, lo, hi)
        return A.Frame(unit, self._parse_frame_bound())

    def _parse_frame_bound(self) -> A.FrameBound:
        if self.accept("UNBOUNDED"):
            if self.accept("PRECEDING"):
                return A.FrameBound("UNBOUNDED PRECEDING")
            self.expect("FOLLOWING")
            return A.FrameBound("UNBOUNDED FOLLOWING")
        if self.accept("CURRENT"):
            self.expect("ROW")
            return A.FrameBound("CURRENT ROW")
        expr = self.parse_expr()
        if self.accept("PRECEDING"):
            return A.FrameBound("PRECEDING", expr)
        self.expect("FOLLOWING")
        return A.FrameBound("FOLLOWING", expr)


def parse(sql: str) -> A.Script:
    """Parse one SELECT statement (with optional WITH prefix) into a Script."""
    if not sql or not sql.strip():
        raise SqlSyntaxError("empty statement", 0, expected="SELECT or WITH")
    return Parser(sql).parse_script()
