"""JSON-serializable report of a script's units and fragments.

This is the golden-file shape for the fragment corpus and the payload of the
``fragment`` CLI subcommand: byte-exact spans index each owning unit's
canonical sql_text.
"""

from __future__ import annotations

from .decompose import decompose
from .fragments import extract_fragments
from .script import parse_script


def script_report(sql_text: str) -> dict:
    ast = parse_script(sql_text)
    units = decompose(ast)
    return {
        "sql": ast.source_text,
        "units": [
            {
                "id": u.id,
                "name": u.name,
                "sql_text": u.sql_text,
                "referenced_tables": sorted(u.referenced_tables),
                "referenced_ctes": sorted(u.referenced_ctes),
                "output_columns": [{"name": n, "type": t} for n, t in u.output_columns],
            }
            for u in units
        ],
        "fragments": [
            {
                "id": f.id,
                "unit": f.subquery_id,
                "kind": f.kind.value,
                "clause": f.clause.value,
                "sql_text": f.sql_text,
                "span": list(f.span),
            }
            for u in units
            for f in extract_fragments(u)
        ],
    }
