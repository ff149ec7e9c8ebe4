"""Script-level parse API: normalized source plus a span-annotated AST."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import astnodes as A
from .parser import parse
from .tokens import char_to_byte_map


@dataclass
class ScriptAst:
    """A parsed script.

    ``source_text`` is the canonical rendering of the input (whitespace,
    keyword case, and operator spelling normalized); all node spans are
    UTF-8 byte offsets into it.
    """

    source_text: str
    root: A.Script = field(repr=False)

    def slice(self, span: tuple[int, int]) -> str:
        return span_text(self.source_text, span)


def span_text(source: str, span: tuple[int, int]) -> str:
    """Slice *source* by a byte-offset span."""
    if source.isascii():
        return source[span[0] : span[1]]
    return source.encode("utf-8")[span[0] : span[1]].decode("utf-8")


def _rebase_spans(node: A.Node, mapping: list[int]) -> None:
    for n in A.walk(node):
        if n.span is not None:
            n.span = (mapping[n.span[0]], mapping[n.span[1]])


def parse_script(sql_text: str) -> ScriptAst:
    """Parse *sql_text* and return its normalized, span-annotated AST.

    The raw text is parsed, rendered canonically, and re-parsed so that the
    returned spans index the canonical text. Whitespace-insensitive variants
    of one query therefore produce identical ScriptAst values.
    """
    raw = parse(sql_text)
    canonical = raw.sql()
    root = parse(canonical)
    if not canonical.isascii():
        _rebase_spans(root, char_to_byte_map(canonical))
    return ScriptAst(source_text=canonical, root=root)
