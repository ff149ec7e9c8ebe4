"""sqlknow: interactive NL-to-SQL authoring grounded in implicit knowledge
mined from a user's historical SQL scripts.

Subsystems:

- :mod:`sqlknow.sqlcore` - SQLite parsing, subquery decomposition, typed
  fragment extraction, probe construction, fragment splicing
- :mod:`sqlknow.lineage` - dependency graph, topological execution, probes
- :mod:`sqlknow.knowledge` - data dictionary, alias mining, embedded store
- :mod:`sqlknow.extraction` - offline knowledge extraction pipeline
- :mod:`sqlknow.authoring` - retrieval, generation, knowledge view, refinement
- :mod:`sqlknow.gateway` - LLM chat/embedding boundary (mock + live)
- :mod:`sqlknow.evalkit` - technical-evaluation harness
- :mod:`sqlknow.server` / :mod:`sqlknow.cli` - HTTP service and CLI
"""

__version__ = "0.1.0"
