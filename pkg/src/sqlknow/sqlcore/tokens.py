"""Tokenizer for the SQLite SELECT dialect.

Produces tokens carrying character offsets into the source string; a
char-to-byte remap is applied after parsing so every public span is a
UTF-8 byte offset (char and byte offsets coincide for ASCII sources).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import SqlSyntaxError

KEYWORDS = frozenset(
    """
    SELECT FROM WHERE GROUP BY HAVING ORDER LIMIT OFFSET WITH RECURSIVE AS
    ON USING JOIN INNER LEFT RIGHT FULL OUTER CROSS NATURAL
    UNION ALL INTERSECT EXCEPT DISTINCT
    AND OR NOT IN LIKE GLOB REGEXP MATCH BETWEEN IS NULL ISNULL NOTNULL
    EXISTS CASE WHEN THEN ELSE END CAST COLLATE ESCAPE
    ASC DESC NULLS FIRST LAST TRUE FALSE
    FILTER OVER PARTITION ROWS RANGE GROUPS
    UNBOUNDED PRECEDING FOLLOWING CURRENT ROW VALUES
    """.split()
)

# Multi-char operators first so the scanner is longest-match.
_OPERATORS = ("<>", "<=", ">=", "==", "!=", "||", "<<", ">>")
_SINGLE = "(),.;+-*/%<>=&|~"

_IDENT_START = re.compile(r"[A-Za-z_]")
_IDENT_BODY = re.compile(r"[A-Za-z0-9_$]")
_NUMBER = re.compile(
    r"0[xX][0-9a-fA-F]+|(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"
)


@dataclass(frozen=True)
class Token:
    kind: str  # 'keyword' | 'ident' | 'string' | 'number' | 'op' | 'eof'
    text: str  # keywords uppercased; quoted identifiers unquoted
    start: int  # char offset of the first char
    end: int  # char offset one past the last char

    @property
    def upper(self) -> str:
        return self.text.upper()


def tokenize(sql: str) -> list[Token]:
    """Scan *sql* into tokens, skipping whitespace and comments."""
    tokens: list[Token] = []
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        if ch in " \t\r\n\f":
            i += 1
            continue
        if sql.startswith("--", i):
            j = sql.find("\n", i)
            i = n if j < 0 else j + 1
            continue
        if sql.startswith("/*", i):
            j = sql.find("*/", i + 2)
            if j < 0:
                raise SqlSyntaxError("unterminated block comment", i)
            i = j + 2
            continue
        if ch == "'":
            text, end = _scan_string(sql, i, "'")
            tokens.append(Token("string", text, i, end))
            i = end
            continue
        if ch == '"' or ch == "`":
            text, end = _scan_string(sql, i, ch)
            tokens.append(Token("ident", text, i, end))
            i = end
            continue
        if ch == "[":
            j = sql.find("]", i + 1)
            if j < 0:
                raise SqlSyntaxError("unterminated bracketed identifier", i)
            tokens.append(Token("ident", sql[i + 1 : j], i, j + 1))
            i = j + 1
            continue
        m = _NUMBER.match(sql, i)
        if m and (ch.isdigit() or (ch == "." and i + 1 < n and sql[i + 1].isdigit())):
            tokens.append(Token("number", m.group(), i, m.end()))
            i = m.end()
            continue
        if _IDENT_START.match(ch):
            j = i + 1
            while j < n and _IDENT_BODY.match(sql[j]):
                j += 1
            word = sql[i:j]
            kind = "keyword" if word.upper() in KEYWORDS else "ident"
            text = word.upper() if kind == "keyword" else word
            tokens.append(Token(kind, text, i, j))
            i = j
            continue
        two = sql[i : i + 2]
        if two in _OPERATORS:
            tokens.append(Token("op", two, i, i + 2))
            i += 2
            continue
        if ch in _SINGLE:
            tokens.append(Token("op", ch, i, i + 1))
            i += 1
            continue
        if ch in "?:@$":
            raise SqlSyntaxError("bind parameters are not supported", i)
        raise SqlSyntaxError(f"unexpected character {ch!r}", i)
    tokens.append(Token("eof", "", n, n))
    return tokens


def _scan_string(sql: str, start: int, quote: str) -> tuple[str, int]:
    """Scan a quoted region starting at *start*; doubling escapes the quote."""
    i = start + 1
    parts: list[str] = []
    n = len(sql)
    while i < n:
        j = sql.find(quote, i)
        if j < 0:
            break
        parts.append(sql[i:j])
        if j + 1 < n and sql[j + 1] == quote:
            parts.append(quote)
            i = j + 2
            continue
        return "".join(parts), j + 1
    raise SqlSyntaxError("unterminated string", start)


def char_to_byte_map(source: str) -> list[int]:
    """Prefix table mapping char offset -> UTF-8 byte offset (identity for ASCII)."""
    if source.isascii():
        return list(range(len(source) + 1))
    offsets = [0]
    total = 0
    for ch in source:
        total += len(ch.encode("utf-8"))
        offsets.append(total)
    return offsets
