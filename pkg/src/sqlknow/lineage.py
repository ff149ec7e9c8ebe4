"""Subquery dependency graph and SQLite execution.

The graph covers subquery units plus base tables (node ids ``table:<name>``).
Edges point from a dependency to its reader. Execution materializes a unit's
transitive CTE closure as a WITH prefix and runs it against a read-only
connection; probes evaluate per the fragment-kind metadata contract.
"""

from __future__ import annotations

import sqlite3
from collections import Counter
from dataclasses import dataclass, field

from .errors import CycleError, ExecutionError
from .sqlcore import KnowledgeKind, ProbeExpectation, ProbeQuery, SubqueryUnit

DISPLAY_ROW_LIMIT = 200


@dataclass
class ResultTable:
    columns: list[tuple[str, str]]
    rows: list[tuple]
    truncated: bool = False
    total_row_count: int = 0

    def to_json(self) -> dict:
        return {
            "columns": [{"name": n, "type": t} for n, t in self.columns],
            "rows": [list(r) for r in self.rows],
            "truncated": self.truncated,
            "total_row_count": self.total_row_count,
        }


@dataclass
class FragmentMetadata:
    fragment_id: str
    kind: KnowledgeKind
    payload: dict

    def to_json(self) -> dict:
        return {
            "fragment_id": self.fragment_id,
            "kind": self.kind.value,
            "payload": self.payload,
        }


PAYLOAD_KEYS = {
    KnowledgeKind.CALCULATION: {"sample_values"},
    KnowledgeKind.CONDITION: {"atomic_count", "composite_count"},
    KnowledgeKind.RELATION: {"row_count", "col_count"},
    KnowledgeKind.DIMENSION: {"distinct_values"},
    KnowledgeKind.OUTPUT: {"sample_records"},
}


@dataclass
class DependencyGraph:
    units: dict[str, SubqueryUnit]  # by unit id
    edges: set[tuple[str, str]] = field(default_factory=set)  # (dep, reader)
    out_edges: dict[str, list[str]] = field(default_factory=dict)
    in_edges: dict[str, list[str]] = field(default_factory=dict)
    _by_name: dict[str, str] = field(default_factory=dict)
    _topo: list[str] = field(default_factory=list)

    @property
    def nodes(self) -> list[str]:
        tables = sorted(
            {f"table:{t}" for u in self.units.values() for t in u.referenced_tables}
        )
        return list(self.units) + tables

    def defines(self, name: str) -> bool:
        return name.lower() in self._by_name

    def resolve(self, ref: str) -> SubqueryUnit:
        """Accept a unit id or a subquery name."""
        if ref in self.units:
            return self.units[ref]
        unit_id = self._by_name.get(ref.lower())
        if unit_id is None:
            raise KeyError(f"unknown subquery {ref!r}")
        return self.units[unit_id]


def build_graph(units: list[SubqueryUnit]) -> DependencyGraph:
    """Resolve every unit's table/CTE references into a dependency graph."""
    graph = DependencyGraph(units={u.id: u for u in units})
    graph._by_name = {u.name.lower(): u.id for u in units}
    for unit in units:
        for table in unit.referenced_tables:
            graph.edges.add((f"table:{table}", unit.id))
        for cte in unit.referenced_ctes:
            dep_id = graph._by_name.get(cte.lower())
            if dep_id is not None:
                graph.edges.add((dep_id, unit.id))
    for a, b in sorted(graph.edges):
        graph.out_edges.setdefault(a, []).append(b)
        graph.in_edges.setdefault(b, []).append(a)
    graph._topo = _kahn_order(graph)
    return graph


def _kahn_order(graph: DependencyGraph) -> list[str]:
    """Topological order over subquery nodes, ties broken by definition order."""
    pending = {
        uid: sum(1 for dep in graph.in_edges.get(uid, []) if dep in graph.units)
        for uid in graph.units
    }
    order: list[str] = []
    while pending:
        ready = [uid for uid, deg in pending.items() if deg == 0]
        if not ready:
            cycle = _find_cycle(graph, set(pending))
            raise CycleError([graph.units[uid].name for uid in cycle])
        ready.sort(key=lambda uid: graph.units[uid].index)
        nxt = ready[0]
        order.append(nxt)
        del pending[nxt]
        for reader in graph.out_edges.get(nxt, []):
            if reader in pending:
                pending[reader] -= 1
    return order


def _find_cycle(graph: DependencyGraph, nodes: set[str]) -> list[str]:
    # walk out-edges until a node repeats
    start = min(nodes, key=lambda uid: graph.units[uid].index)
    path, seen = [start], {start}
    current = start
    while True:
        nexts = [n for n in graph.out_edges.get(current, []) if n in nodes]
        if not nexts:
            return path
        current = nexts[0]
        if current in seen:
            return path[path.index(current):] + [current]
        path.append(current)
        seen.add(current)


def topo_order(graph: DependencyGraph) -> list[str]:
    """Unit ids; every unit appears after all subqueries it reads."""
    return list(graph._topo)


def affected_downstream(graph: DependencyGraph, subquery_id: str) -> list[str]:
    """Transitive readers of a unit, in topological order, source excluded."""
    source = graph.resolve(subquery_id).id
    reached: set[str] = set()
    frontier = [source]
    while frontier:
        node = frontier.pop()
        for reader in graph.out_edges.get(node, []):
            if reader in graph.units and reader not in reached:
                reached.add(reader)
                frontier.append(reader)
    return [uid for uid in graph._topo if uid in reached]


def dependency_closure(graph: DependencyGraph, subquery_id: str) -> list[str]:
    """The unit's transitive subquery dependencies, topologically ordered."""
    source = graph.resolve(subquery_id).id
    reached: set[str] = set()
    frontier = [source]
    while frontier:
        node = frontier.pop()
        for dep in graph.in_edges.get(node, []):
            if dep in graph.units and dep not in reached:
                reached.add(dep)
                frontier.append(dep)
    return [uid for uid in graph._topo if uid in reached]


# -- execution ---------------------------------------------------------------


def _connect(db_path: str) -> sqlite3.Connection:
    conn = sqlite3.connect(f"file:{db_path}?mode=ro", uri=True)
    conn.row_factory = None
    return conn


def closure_sql(graph: DependencyGraph, subquery_id: str, body: str | None = None) -> str:
    """WITH-prefixed SQL executing *body* (default: the unit itself)."""
    unit = graph.resolve(subquery_id)
    deps = dependency_closure(graph, unit.id)
    target_sql = body if body is not None else unit.sql_text
    if not deps:
        return target_sql
    ctes = ", ".join(f"{graph.units[d].name} AS ({graph.units[d].sql_text})" for d in deps)
    return f"WITH {ctes} {target_sql}"


def _infer_column_types(description, rows: list[tuple]) -> list[tuple[str, str]]:
    columns: list[tuple[str, str]] = []
    for idx, desc in enumerate(description or []):
        ctype = ""
        for row in rows:
            value = row[idx]
            if value is None:
                continue
            if isinstance(value, bool) or isinstance(value, int):
                ctype = "INTEGER"
            elif isinstance(value, float):
                ctype = "REAL"
            elif isinstance(value, bytes):
                ctype = "BLOB"
            else:
                ctype = "TEXT"
            break
        columns.append((desc[0], ctype))
    return columns


def execute_sql(db_path: str, sql: str, unit_id: str,
                max_rows: int | None = DISPLAY_ROW_LIMIT) -> ResultTable:
    """Run one read-only SELECT and package the result."""
    conn = _connect(db_path)
    try:
        cur = conn.execute(sql)
        if max_rows is None:
            rows = cur.fetchall()
            truncated = False
            total = len(rows)
        else:
            rows = cur.fetchmany(max_rows + 1)
            truncated = len(rows) > max_rows
            if truncated:
                rows = rows[:max_rows]
                (total,) = conn.execute(
                    f"SELECT COUNT(*) FROM ({sql})"
                ).fetchone()
            else:
                total = len(rows)
        columns = _infer_column_types(cur.description, rows)
        return ResultTable(columns=columns, rows=rows, truncated=truncated,
                           total_row_count=total)
    except sqlite3.Error as exc:
        raise ExecutionError(unit_id, str(exc)) from exc
    finally:
        conn.close()


def execute_subquery(db_path: str, graph: DependencyGraph, subquery_id: str,
                     max_rows: int | None = DISPLAY_ROW_LIMIT) -> ResultTable:
    """Materialize the unit's dependency closure and execute it."""
    unit = graph.resolve(subquery_id)
    return execute_sql(db_path, closure_sql(graph, unit.id), unit.id, max_rows=max_rows)


def execute_probe(db_path: str, graph: DependencyGraph, probe: ProbeQuery) -> FragmentMetadata:
    """Execute a fragment probe and package its kind-specific metadata."""
    sql = closure_sql(graph, probe.subquery_id, body=probe.sql_text)
    result = execute_sql(db_path, sql, probe.subquery_id, max_rows=None)
    if probe.expects == ProbeExpectation.SAMPLE_VALUES:
        payload = {"sample_values": [row[0] for row in result.rows]}
    elif probe.expects == ProbeExpectation.ATOMIC_AND_COMPOSITE_COUNTS:
        atomic, composite = result.rows[0]
        payload = {"atomic_count": atomic, "composite_count": composite}
    elif probe.expects == ProbeExpectation.ROW_COL_COUNTS:
        aux_sql = closure_sql(graph, probe.subquery_id, body=probe.aux_sql)
        aux = execute_sql(db_path, aux_sql, probe.subquery_id, max_rows=None)
        payload = {"row_count": result.rows[0][0], "col_count": len(aux.columns)}
    elif probe.expects == ProbeExpectation.DISTINCT_VALUES:
        if len(result.columns) == 1:
            values = [row[0] for row in result.rows]
        else:
            values = [list(row) for row in result.rows]
        payload = {"distinct_values": values}
    else:  # SampleRecords
        payload = {
            "sample_records": {
                "columns": [n for n, _ in result.columns],
                "rows": [list(r) for r in result.rows],
            }
        }
    return FragmentMetadata(fragment_id=probe.fragment_id, kind=probe.kind, payload=payload)


# -- result comparison ----------------------------------------------------------


def _normalize_value(value):
    if isinstance(value, float):
        return round(value, 6)
    return value


def _normalize_rows(rows: list[tuple]) -> list[tuple]:
    return [tuple(_normalize_value(v) for v in row) for row in rows]


def compare_results(a: ResultTable, b: ResultTable, ordered: bool = False) -> bool:
    """Execution-accuracy comparison: ordered rows iff the query had ORDER BY,
    multiset-of-rows otherwise. Floats compare after rounding to 6 places."""
    rows_a, rows_b = _normalize_rows(a.rows), _normalize_rows(b.rows)
    if len(rows_a) != len(rows_b):
        return False
    if ordered:
        return rows_a == rows_b
    return Counter(rows_a) == Counter(rows_b)
