"""The technical-evaluation harness at desk scale.

Reconstruction accuracy rebuilds each historical script from its extracted
knowledge alone; retrieval metrics score retrieved knowledge items against
ground truth; the ablation compares Direct / RAG / Refine / Pipeline
generation. Reports mirror the published tables and can carry the reference
values side-by-side.
"""

import json
import tempfile
from pathlib import Path

from sqlknow.evalkit import (
    MODE_DIRECT,
    MODE_REFINE,
    EvalTask,
    assemble_report,
    reconstruction_accuracy,
    run_ablation,
)
from sqlknow.gateway import MockGateway
from sqlknow.scenario import build_workspace

HISTORIES = Path(__file__).resolve().parent.parent / "fixtures" / "histories"

workspace = build_workspace(tempfile.mkdtemp(prefix="sqlknow-demo-"), HISTORIES)
histories = [(p.stem, p.read_text()) for p in sorted(HISTORIES.glob("*.sql"))]

# an identity gateway reconstructs each script from complete information,
# which bounds reconstruction accuracy from above (here: 100%)
identity = MockGateway(overrides={
    "describe_script": lambda v: v["sql"],
    "describe_fragment": lambda v: v["fragment_sql"],
    "reconstruct_sql": lambda v: v["script_description"],
})
extraction = reconstruction_accuracy(
    workspace.db_path, histories, workspace.dictionary, identity,
    database_id="Toxicology (fixture)",
)
print("reconstruction:", {k: extraction[k] for k in
                          ("Database", "History", "Success", "Success Ratio")})

# the Refine ablation revises a wrong query toward the ground truth, at most
# five revision rounds per task
tasks = [
    EvalTask("t0", "Toxicology (fixture)", "count the molecules",
             "SELECT COUNT(*) FROM molecule",
             initial_sql="SELECT COUNT(*) FROM molecule"),
    EvalTask("t1", "Toxicology (fixture)", "count the atoms",
             "SELECT COUNT(*) FROM atom",
             initial_sql="SELECT COUNT(*) FROM bond"),
]
refine = run_ablation(tasks, MODE_REFINE, MockGateway(), workspace.db_path,
                      workspace.dictionary)
print("refine outcomes:", refine["outcomes"])

report = assemble_report(
    extraction_rows=[extraction],
    ablation_rows=[refine],
    include_paper_reference=True,
)
print("\nreport sections:", sorted(k for k in report if not k.endswith("_outcomes")))
print("published Toxicology Pipeline reference:",
      report["paper_reference"]["ablation"]["Toxicology"]["Pipeline"])
print(json.dumps(report["ablation"], indent=2))
