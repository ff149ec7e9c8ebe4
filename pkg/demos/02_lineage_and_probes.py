"""Dependency graphs, per-subquery execution, and fragment probes.

Subqueries execute by materializing their transitive CTE closure as a WITH
prefix against a read-only SQLite connection. Each fragment gets a probe
whose metadata matches its kind: sample values, atomic/composite filter
counts, joined row/column counts, distinct dimension values, or an output
sample.
"""

import tempfile
from pathlib import Path

from sqlknow.fixture_db import build_toxicology_db
from sqlknow.lineage import (
    affected_downstream,
    build_graph,
    execute_probe,
    execute_subquery,
    topo_order,
)
from sqlknow.sqlcore import build_probe, decompose, extract_fragments, parse_script

work = Path(tempfile.mkdtemp(prefix="sqlknow-demo-"))
db = str(build_toxicology_db(work / "toxicology.db"))

SCRIPT = """
WITH labeled AS (
    SELECT molecule_id, label FROM molecule WHERE label IN ('+', '-')
),
sizes AS (
    SELECT l.label, COUNT(a.atom_id) AS n_atoms
    FROM labeled AS l
    INNER JOIN atom AS a ON a.molecule_id = l.molecule_id
    GROUP BY l.molecule_id, l.label
)
SELECT label, AVG(n_atoms) AS avg_atoms FROM sizes GROUP BY label ORDER BY label
"""

units = decompose(parse_script(SCRIPT))
graph = build_graph(units)

print("execution order:", [graph.units[u].name for u in topo_order(graph)])
print("editing 'labeled' invalidates:",
      [graph.units[u].name for u in affected_downstream(graph, "u0")])

# intermediate and final results
for unit in units:
    table = execute_subquery(db, graph, unit.id)
    print(f"\n{unit.name}: {table.total_row_count} rows, "
          f"columns {[c for c, _ in table.columns]}")
    for row in table.rows[:3]:
        print("  ", row)

# probe every fragment of the aggregation unit
sizes = graph.resolve("sizes")
print("\nprobe metadata for 'sizes':")
for fragment in extract_fragments(sizes):
    probe = build_probe(sizes, fragment, graph)
    metadata = execute_probe(db, graph, probe)
    print(f"  [{fragment.kind.value:<11}] {fragment.sql_text}")
    print(f"      -> {metadata.payload}")
