"""SQLite script parsing, decomposition, fragment extraction, and splicing."""

from .astnodes import Script, Select
from .decompose import SubqueryUnit, decompose, script_from_units
from .fragments import Clause, Fragment, KnowledgeKind, extract_fragments, split_conjuncts
from .probes import ProbeExpectation, ProbeQuery, build_probe
from .reassemble import reassemble_unit
from .script import ScriptAst, parse_script, span_text
from .splice import conjunction_sql, splice_fragment

__all__ = [
    "Clause",
    "Fragment",
    "KnowledgeKind",
    "ProbeExpectation",
    "ProbeQuery",
    "Script",
    "ScriptAst",
    "Select",
    "SubqueryUnit",
    "build_probe",
    "conjunction_sql",
    "decompose",
    "extract_fragments",
    "parse_script",
    "reassemble_unit",
    "script_from_units",
    "span_text",
    "splice_fragment",
    "split_conjuncts",
]
