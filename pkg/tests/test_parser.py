"""Parser, renderer, and round-trip behavior."""

from __future__ import annotations

import pytest

from sqlknow.errors import SqlSyntaxError
from sqlknow.sqlcore import parse_script
from sqlknow.sqlcore import astnodes as A
from sqlknow.sqlcore.parser import parse

WALKTHROUGH = (
    "SELECT T1.element FROM atom AS T1 INNER JOIN molecule AS T2 "
    "ON T1.molecule_id = T2.molecule_id GROUP BY T1.element "
    "ORDER BY COUNT(DISTINCT T2.molecule_id) LIMIT 1"
)


class TestParseScript:
    def test_walkthrough_query_structure(self):
        ast = parse_script(WALKTHROUGH)
        select = ast.root.body
        core = select.core
        assert len(select.cores) == 1
        assert core.from_clause is not None
        assert len(core.from_clause.joins) == 1
        assert core.from_clause.joins[0].kind == "INNER"
        assert len(core.group_by) == 1
        assert len(select.order_by) == 1
        assert select.limit is not None

    def test_minimal_query(self):
        ast = parse_script("SELECT 1")
        core = ast.root.body.core
        assert len(core.columns) == 1
        assert core.from_clause is None

    def test_forced_parse_failure_offset(self):
        with pytest.raises(SqlSyntaxError) as err:
            parse_script("SELECT FROM")
        assert err.value.offset == 7
        assert err.value.expected == "expression"

    def test_empty_input(self):
        with pytest.raises(SqlSyntaxError):
            parse_script("   ")

    def test_whitespace_insensitive_equivalence(self):
        a = parse_script("select a,b from t where x=1")
        b = parse_script("SELECT  a , b\nFROM t\n WHERE x = 1")
        assert a.source_text == b.source_text
        assert a.root == b.root

    def test_spans_nest_within_source(self):
        ast = parse_script(WALKTHROUGH)
        n = len(ast.source_text)
        for node in A.walk(ast.root):
            if node.span is None:
                continue
            start, end = node.span
            assert 0 <= start < end <= n

    def test_parents_contain_children(self):
        ast = parse_script(WALKTHROUGH)

        def check(node):
            for child in A.iter_children(node):
                if node.span is not None and child.span is not None:
                    assert node.span[0] <= child.span[0]
                    assert child.span[1] <= node.span[1]
                check(child)

        check(ast.root)

    def test_dml_rejected(self):
        with pytest.raises(SqlSyntaxError):
            parse_script("INSERT INTO t VALUES (1)")

    def test_bind_parameters_rejected(self):
        with pytest.raises(SqlSyntaxError):
            parse_script("SELECT * FROM t WHERE x = ?")

    def test_nested_with_rejected(self):
        with pytest.raises(SqlSyntaxError):
            parse_script("SELECT * FROM (WITH a AS (SELECT 1) SELECT * FROM a)")


class TestNormalization:
    @pytest.mark.parametrize(
        ("raw", "canonical"),
        [
            ("SELECT a<>1, b==2 FROM t", "SELECT a != 1, b = 2 FROM t"),
            ("SELECT x FROM t WHERE y ISNULL", "SELECT x FROM t WHERE y IS NULL"),
            ("SELECT x FROM t WHERE y NOTNULL", "SELECT x FROM t WHERE y IS NOT NULL"),
            ("SELECT x FROM t ORDER BY x ASC", "SELECT x FROM t ORDER BY x"),
            ("SELECT x FROM a JOIN b ON a.i=b.i", "SELECT x FROM a INNER JOIN b ON a.i = b.i"),
            ("SELECT x FROM a LEFT OUTER JOIN b ON a.i=b.i",
             "SELECT x FROM a LEFT JOIN b ON a.i = b.i"),
            ("SELECT x FROM t LIMIT 2, 5", "SELECT x FROM t LIMIT 5 OFFSET 2"),
            ("select count(*) from t", "SELECT COUNT(*) FROM t"),
        ],
    )
    def test_canonical_form(self, raw, canonical):
        assert parse_script(raw).source_text == canonical

    def test_explicit_parens_preserved_by_precedence(self):
        ast = parse_script("SELECT x FROM t WHERE a > 1 AND (b < 2 OR c = 3)")
        assert "(b < 2 OR c = 3)" in ast.source_text

    def test_redundant_parens_dropped(self):
        assert parse_script("SELECT ((a)) FROM t").source_text == "SELECT a FROM t"

    def test_number_lexemes_kept(self):
        assert parse_script("SELECT 1.50, 0x1F FROM t").source_text == "SELECT 1.50, 0x1F FROM t"

    def test_string_escapes(self):
        assert parse_script("SELECT 'it''s' FROM t").source_text == "SELECT 'it''s' FROM t"

    def test_quoted_identifiers(self):
        ast = parse_script('SELECT "select", [weird col] FROM `my table`')
        assert ast.source_text == 'SELECT "select", "weird col" FROM "my table"'


class TestRoundTrip:
    def test_corpus_round_trip_identity(self, corpus):
        for name, sql in corpus:
            first = parse_script(sql)
            second = parse_script(first.source_text)
            assert first.source_text == second.source_text, name
            assert first.root == second.root, name

    @pytest.mark.parametrize(
        "sql",
        [
            "SELECT a - (b - c) FROM t",
            "SELECT -(-x), ~y, NOT NOT z FROM t",
            "SELECT a * (b + c) / d % e FROM t",
            "SELECT a || b || 'x' FROM t",
            "SELECT CASE WHEN a THEN 1 ELSE 0 END + 1 FROM t",
            "SELECT x FROM t WHERE NOT (a AND b) OR c",
            "SELECT CAST(x AS VARCHAR(10)) FROM t",
            "SELECT f(DISTINCT a, b) FILTER (WHERE c > 0) OVER (PARTITION BY d ORDER BY e DESC ROWS BETWEEN 1 PRECEDING AND CURRENT ROW) FROM t",
            "SELECT x FROM t WHERE a BETWEEN b + 1 AND c * 2",
            "SELECT x FROM t WHERE y LIKE '%a!%%' ESCAPE '!'",
            "SELECT x FROM t ORDER BY y DESC NULLS LAST LIMIT 3",
            "SELECT x COLLATE NOCASE FROM t",
            "SELECT x FROM a NATURAL LEFT JOIN b",
            "SELECT x FROM t WHERE v IN ()",
        ],
    )
    def test_tricky_expressions_round_trip(self, sql):
        first = parse_script(sql)
        second = parse_script(first.source_text)
        assert first.root == second.root
        assert first.source_text == second.source_text

    def test_unary_minus_never_forms_comment(self):
        ast = parse_script("SELECT - -1 FROM t")
        assert "--" not in ast.source_text
        again = parse_script(ast.source_text)
        assert again.root == ast.root


class TestComments:
    def test_line_and_block_comments_skipped(self):
        sql = "SELECT a -- trailing\nFROM t /* block\ncomment */ WHERE b = 1"
        assert parse_script(sql).source_text == "SELECT a FROM t WHERE b = 1"

    def test_unterminated_block_comment(self):
        with pytest.raises(SqlSyntaxError):
            parse("SELECT 1 /* oops")
