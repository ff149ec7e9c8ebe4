"""Parsing a SQL script and extracting its typed knowledge fragments.

Every script becomes a normalized AST with byte spans, splits into subquery
units (one per CTE plus the main query), and each unit yields fragments of
the five knowledge kinds: Calculation, Condition, Relation, Dimension,
Output.
"""

from sqlknow.sqlcore import decompose, extract_fragments, parse_script

SCRIPT = """
WITH least_com_el AS (
    SELECT T1.element
    FROM atom AS T1
    INNER JOIN molecule AS T2 ON T1.molecule_id = T2.molecule_id
    WHERE T2.label IN ('+', '-')
    GROUP BY T1.element
    ORDER BY COUNT(DISTINCT T2.molecule_id), T1.element
    LIMIT 1
)
SELECT COUNT(*) AS n FROM least_com_el
"""

# Parsing normalizes whitespace, keyword case, and operator spelling; the
# returned spans index this canonical text.
ast = parse_script(SCRIPT)
print("canonical SQL:")
print(" ", ast.source_text, "\n")

# One unit per CTE plus the main query, with resolved references.
units = decompose(ast)
for unit in units:
    print(f"unit {unit.id} ({unit.name})")
    print(f"  reads tables: {sorted(unit.referenced_tables)}")
    print(f"  reads CTEs:   {sorted(unit.referenced_ctes)}")
    print(f"  outputs:      {unit.output_columns}")

# Fragments arrive in clause execution order; spans slice the unit's text.
print("\nfragments of least_com_el:")
for fragment in extract_fragments(units[0]):
    print(f"  [{fragment.kind.value:<11}] {fragment.sql_text}")
    sliced = units[0].sql_text[fragment.span[0]:fragment.span[1]]
    assert fragment.kind.value == "Output" or sliced == fragment.sql_text
