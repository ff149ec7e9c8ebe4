"""The offline stage: data dictionary + knowledge extraction + retrieval.

Historical scripts are mined for column aliases, every database column gets
an LLM-drafted description, and each script is decomposed into described,
embedded knowledge records. The deterministic mock gateway stands in for the
LLM here, so this demo is fully reproducible offline.
"""

import tempfile
from pathlib import Path

from sqlknow.extraction import run_offline
from sqlknow.fixture_db import build_toxicology_db
from sqlknow.gateway import HashingEmbedder, MockGateway
from sqlknow.knowledge import (
    FRAGMENT_LEVEL,
    SCRIPT_LEVEL,
    build_dictionary,
    mine_aliases,
    similar,
)

HISTORIES = Path(__file__).resolve().parent.parent / "fixtures" / "histories"

work = Path(tempfile.mkdtemp(prefix="sqlknow-demo-"))
db = str(build_toxicology_db(work / "toxicology.db"))
gateway = MockGateway()
scripts = [(p.stem, p.read_text()) for p in sorted(HISTORIES.glob("*.sql"))]

# column aliases in past queries carry the user's own vocabulary
aliases = mine_aliases([sql for _, sql in scripts])
print("mined aliases:", dict(aliases))

dictionary = build_dictionary(db, [sql for _, sql in scripts], gateway)
label = dictionary.lookup("molecule", "label")
print("molecule.label:", label.description)

# extract + describe + embed + index everything
store, report = run_offline(db, scripts, dictionary, gateway,
                            HashingEmbedder(), retry_backoff_s=0)
print(f"\nindexed {len(store)} records "
      f"({len(store.at_level(SCRIPT_LEVEL))} script-level, "
      f"{len(store.at_level(FRAGMENT_LEVEL))} fragment-level)")
for entry in report.scripts[:3]:
    print(f"  {entry['script_id']}: {entry['fragment_count']} fragments "
          f"- {entry['description']}")

# cosine retrieval over fragment descriptions
print("\ntop matches for 'non-bonding element':")
for record, score in similar(store, "non-bonding element", FRAGMENT_LEVEL, k=3):
    print(f"  {score:5.3f}  {record.description}")

store.save(str(work / "knowledge.jsonl"))
dictionary.save(str(work / "dictionary.json"))
print(f"\npersisted store + dictionary under {work}")
