"""The online stage: generate a query, review its knowledge, refine it.

Replays the walkthrough: the generated least-common-element pipeline keeps a
LIMIT 1 inherited from past scripts, so the final result is (1, 0). Reviewing
the Output item, modifying it into a ranking predicate, and re-running flips
the result to (4, 3); the diff shows the removed Output knowledge and the
added Condition knowledge.
"""

import tempfile
from pathlib import Path

from sqlknow.authoring import (
    MODE_DELETE,
    MODE_MODIFY,
    TARGET_ITEM,
    RefinementEdit,
    build_knowledge_view,
)
from sqlknow.lineage import execute_subquery
from sqlknow.scenario import (
    INSTRUCTION,
    MODIFY_INSTRUCTION,
    build_workspace,
    run_demo_session,
)

HISTORIES = Path(__file__).resolve().parent.parent / "fixtures" / "histories"

workspace = build_workspace(tempfile.mkdtemp(prefix="sqlknow-demo-"), HISTORIES)
from sqlknow.authoring import AuthoringSession

session = AuthoringSession("demo", workspace.db_path, workspace.store,
                           workspace.dictionary, workspace.gateway)

print("instruction:", INSTRUCTION, "\n")
gq = session.generate(INSTRUCTION)
print("generated units:", [u.name for u in gq.units])
print("final result:", execute_subquery(workspace.db_path, gq.graph, "main").rows)

print("\nknowledge view:")
for group, items in build_knowledge_view(gq).groups:
    print(f"  {group}")
    for item in items:
        print(f"    [{item.kind.value:<11}] {item.title}")

# inspect the suspicious Output item: its metadata shows a single record
limit_item = next(i for i in gq.items if i.title == "Limit to 1 result")
metadata = session.resolve_item_metadata(limit_item.id)
print("\nLIMIT item metadata:", metadata.payload)

# knowledge-level refinement with downstream propagation
gq2 = session.refine(RefinementEdit(mode=MODE_MODIFY, target=TARGET_ITEM,
                                    target_id=limit_item.id,
                                    instruction=MODIFY_INSTRUCTION))
print("\nafter modify:")
print("  removed:", [f"{i.kind.value}: {i.title}" for i in gq2.removed_items])
print("  added:  ", [f"{i.kind.value}: {i.title}" for i in gq2.items
                     if i.status == "Added"])
print("  final result:",
      execute_subquery(workspace.db_path, gq2.graph, "main").rows)

# deleting knowledge is a one-step edit
condition = next(i for i in gq2.items
                 if i.kind.value == "Condition" and "known carcinogenicity" in i.description)
gq3 = session.refine(RefinementEdit(mode=MODE_DELETE, target=TARGET_ITEM,
                                    target_id=condition.id))
print("\nafter deleting the known-carcinogenicity filter:",
      execute_subquery(workspace.db_path, gq3.graph, "main").rows)
print("generations:", [g.generation for g in session.generations])
