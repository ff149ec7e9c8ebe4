"""Online stage: retrieval, SQL generation, knowledge view, refinement.

A session owns a sequence of generations. Each generation binds the parsed
script, its subquery units and dependency graph, and one knowledge item per
extracted fragment. Refinements splice the targeted fragment or subquery,
propagate renames to downstream readers, re-execute them in topological
order, and diff the item sets (Added/Removed) against the previous
generation. Item metadata resolves lazily through probes, cached and guarded
by the generation counter.
"""

from __future__ import annotations

import json
import re
import threading
from pathlib import Path
from dataclasses import dataclass, field

from .errors import (
    EmptyStoreError,
    ExecutionError,
    GenerationParseError,
    LlmError,
    RefusalError,
    SpliceError,
    SqlKnowError,
    StaleGenerationError,
)
from .knowledge import (
    FRAGMENT_LEVEL,
    SCRIPT_LEVEL,
    DataDictionary,
    KnowledgeRecord,
    KnowledgeStore,
    read_schema,
    render_schema,
    similar,
)
from .extraction import describe_fragment
from .lineage import (
    DependencyGraph,
    FragmentMetadata,
    affected_downstream,
    build_graph,
    execute_probe,
    execute_subquery,
    topo_order,
)
from .sqlcore import (
    Fragment,
    KnowledgeKind,
    ScriptAst,
    SubqueryUnit,
    build_probe,
    decompose,
    extract_fragments,
    parse_script,
    script_from_units,
    splice_fragment,
)
from .sqlcore import astnodes as A

DEFAULT_SCRIPT_K = 5
DEFAULT_FRAGMENT_K = 8
GENERATION_REPAIRS = 2
REFINE_REPAIRS = 2

STATUS_UNCHANGED = "Unchanged"
STATUS_ADDED = "Added"
STATUS_REMOVED = "Removed"

MODE_MODIFY = "Modify"
MODE_ADD = "Add"
MODE_DELETE = "Delete"

TARGET_ITEM = "Item"
TARGET_SUBQUERY = "Subquery"
TARGET_QUERY = "WholeQuery"


# -- data model -------------------------------------------------------------------


@dataclass
class HistoricalScriptRecord:
    script_id: str
    sql_text: str
    script_description: str
    fragment_records: list[KnowledgeRecord]


@dataclass
class RetrievalBundle:
    script_matches: list[tuple[HistoricalScriptRecord, float]]
    keywords: list[str]
    fragment_matches: dict[str, list[tuple[KnowledgeRecord, float]]]
    reranked: list[KnowledgeRecord]
    rerank_fallback: bool = False
    keyword_fallback: bool = False

    def knowledge_prompt(self) -> str:
        lines = []
        for script, score in self.script_matches:
            lines.append(f"-- past script ({script.script_description})")
            lines.append(script.sql_text)
        for record in self.reranked:
            frag = record.fragment.sql_text if record.fragment else ""
            kind = record.kind.value if record.kind else "Script"
            lines.append(f"-- {kind}: {record.description}")
            if frag:
                lines.append(f"--   code: {frag}")
        return "\n".join(lines) if lines else "(none)"


@dataclass
class KnowledgeItem:
    id: str
    subquery_id: str
    kind: KnowledgeKind
    title: str
    description: str
    fragment_id: str
    metadata: FragmentMetadata | None = None  # None = pending
    status: str = STATUS_UNCHANGED

    def to_json(self, include_metadata: bool = True) -> dict:
        metadata = self.metadata.to_json() if self.metadata else None
        return {
            "id": self.id,
            "subquery_id": self.subquery_id,
            "kind": self.kind.value,
            "title": self.title,
            "description": self.description,
            "fragment_id": self.fragment_id,
            "metadata": metadata if include_metadata else None,
            "status": self.status,
        }


@dataclass
class GeneratedQuery:
    sql_text: str
    ast: ScriptAst = field(repr=False)
    units: list[SubqueryUnit] = field(repr=False)
    graph: DependencyGraph = field(repr=False)
    items: list[KnowledgeItem]
    generation: int
    removed_items: list[KnowledgeItem] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def unit_of(self, fragment_id: str) -> SubqueryUnit:
        unit_id = fragment_id.split(".", 1)[0]
        return self.graph.units[unit_id]

    def item(self, item_id: str) -> KnowledgeItem | None:
        for item in self.items:
            if item.id == item_id:
                return item
        return None

    def fragments_of(self, unit: SubqueryUnit) -> list[Fragment]:
        return extract_fragments(unit)

    def summary_json(self, include_metadata: bool = True) -> dict:
        """JSON summary; the server passes include_metadata=False so item
        metadata always reads as pending and is polled per item instead."""
        return {
            "generation": self.generation,
            "sql_text": self.sql_text,
            "units": [
                {
                    "id": u.id,
                    "name": u.name,
                    "output_columns": [{"name": n, "type": t} for n, t in u.output_columns],
                    "synthetic": u.synthetic,
                    "is_main": u.is_main,
                }
                for u in self.units
            ],
            "items": [i.to_json(include_metadata) for i in self.items],
            "removed_items": [i.to_json(include_metadata) for i in self.removed_items],
            "warnings": self.warnings,
        }


@dataclass
class KnowledgeViewModel:
    groups: list[tuple[str, list[KnowledgeItem]]]

    def to_json(self, include_metadata: bool = True) -> dict:
        return {
            "groups": [
                {"subquery": name,
                 "items": [i.to_json(include_metadata) for i in items]}
                for name, items in self.groups
            ]
        }


@dataclass
class RefinementEdit:
    mode: str  # Modify | Add | Delete
    target: str  # Item | Subquery | WholeQuery
    target_id: str | None = None
    instruction: str | None = None

    def validate(self) -> None:
        if self.mode not in (MODE_MODIFY, MODE_ADD, MODE_DELETE):
            raise ValueError(f"unknown edit mode {self.mode!r}")
        if self.mode == MODE_DELETE and self.target != TARGET_ITEM:
            raise ValueError("Delete requires an Item target")
        if self.mode in (MODE_MODIFY, MODE_ADD) and not (self.instruction or "").strip():
            raise ValueError(f"{self.mode} requires a non-empty instruction")


# -- retrieval -----------------------------------------------------------------------


def _script_record(store: KnowledgeStore, record: KnowledgeRecord) -> HistoricalScriptRecord:
    fragments = [
        r for r in store.at_level(FRAGMENT_LEVEL)
        if r.source_script_id == record.source_script_id
    ]
    return HistoricalScriptRecord(
        script_id=record.source_script_id,
        sql_text=record.sql_text,
        script_description=record.description,
        fragment_records=fragments,
    )


def retrieve(instruction: str, store: KnowledgeStore, llm,
             script_k: int = DEFAULT_SCRIPT_K,
             fragment_k: int = DEFAULT_FRAGMENT_K) -> RetrievalBundle:
    """Match the instruction against script- and fragment-level knowledge,
    then LLM-rerank the candidate set (cosine order on LLM failure)."""
    if len(store) == 0:
        raise EmptyStoreError("knowledge store is empty")
    try:
        script_hits = similar(store, instruction, SCRIPT_LEVEL, k=script_k)
    except EmptyStoreError:
        script_hits = []
    script_matches = [(_script_record(store, r), s) for r, s in script_hits]

    keyword_fallback = False
    try:
        raw = llm.chat("extract_keywords", {"instruction": instruction})
        keywords = [line.strip() for line in raw.splitlines() if line.strip()]
    except LlmError:
        keywords = []
        keyword_fallback = True
    if not keywords:
        keywords = [instruction]
        keyword_fallback = True

    fragment_matches: dict[str, list[tuple[KnowledgeRecord, float]]] = {}
    for keyword in keywords:
        try:
            fragment_matches[keyword] = similar(store, keyword, FRAGMENT_LEVEL, k=fragment_k)
        except EmptyStoreError:
            fragment_matches[keyword] = []

    candidates: dict[str, tuple[KnowledgeRecord, float]] = {}
    for record, score in script_hits:
        candidates.setdefault(record.id, (record, score))
    for hits in fragment_matches.values():
        for record, score in hits:
            best = candidates.get(record.id)
            if best is None or score > best[1]:
                candidates[record.id] = (record, score)
    cosine_order = [
        record for record, _ in sorted(
            candidates.values(), key=lambda pair: (-pair[1], pair[0].id)
        )
    ]

    rerank_fallback = False
    reranked = cosine_order
    try:
        lines = "\n".join(
            f"{record.id} | {record.description}" for record in cosine_order
        )
        response = llm.chat(
            "rerank_knowledge", {"instruction": instruction, "candidates": lines}
        )
        chosen = []
        for token in response.split():
            token = token.strip()
            if token in candidates and candidates[token][0] not in chosen:
                chosen.append(candidates[token][0])
        if chosen:
            reranked = chosen
    except LlmError:
        rerank_fallback = True

    return RetrievalBundle(
        script_matches=script_matches,
        keywords=keywords,
        fragment_matches=fragment_matches,
        reranked=reranked,
        rerank_fallback=rerank_fallback,
        keyword_fallback=keyword_fallback,
    )


# -- generation -----------------------------------------------------------------------


_CODE_FENCE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$", re.M)


def _clean_sql(text: str) -> str:
    return _CODE_FENCE.sub("", text).strip()


def _llm_sql(llm, template_id: str, variables: dict[str, str],
             repairs: int = GENERATION_REPAIRS) -> ScriptAst:
    """Chat for SQL, re-prompting with the parse error up to *repairs* times."""
    raw = llm.chat(template_id, variables)
    sql = _clean_sql(raw)
    last_error: Exception | None = None
    for attempt in range(repairs + 1):
        try:
            ast = parse_script(sql)
            decompose(ast)  # surfaces duplicate CTE names early
            return ast
        except SqlKnowError as exc:
            last_error = exc
            if attempt == repairs:
                break
            raw = llm.chat(
                "repair_sql",
                {
                    "instruction": variables.get("instruction", ""),
                    "bad_sql": sql,
                    "error": str(exc),
                },
            )
            sql = _clean_sql(raw)
    raise GenerationParseError(
        f"LLM output failed to parse after {repairs} repair attempts: {last_error}",
        raw_text=raw,
    )


def derive_title(description: str, fallback: str = "Knowledge") -> str:
    """<=5-word display title cut from the description's leading clause."""
    head = re.split(r"[,;:()\n]", description, maxsplit=1)[0]
    words = head.split()
    title = " ".join(words[:5]).rstrip(".!? ")
    return title if title else fallback


def build_query(ast: ScriptAst, generation: int,
                descriptions: dict[str, str]) -> GeneratedQuery:
    """Assemble a GeneratedQuery from a parsed script; *descriptions* maps
    item keys (see item_key) to reusable description text."""
    units = decompose(ast)
    graph = build_graph(units)
    items: list[KnowledgeItem] = []
    units_by_id = {u.id: u for u in units}
    for unit_id in topo_order(graph):
        unit = units_by_id[unit_id]
        for fragment in extract_fragments(unit):
            key = item_key(unit.name, fragment)
            description = descriptions.get(key, "")
            items.append(
                KnowledgeItem(
                    id=fragment.id,
                    subquery_id=unit.id,
                    kind=fragment.kind,
                    title=derive_title(description, fallback=fragment.kind.value),
                    description=description,
                    fragment_id=fragment.id,
                    status=STATUS_UNCHANGED,
                )
            )
    return GeneratedQuery(
        sql_text=ast.source_text, ast=ast, units=units, graph=graph,
        items=items, generation=generation,
    )


def item_key(unit_name: str, fragment: Fragment) -> str:
    return f"{unit_name}|{fragment.kind.value}|{fragment.clause.value}|{fragment.sql_text}"


def _keyed_items(gq: GeneratedQuery) -> list[tuple[str, KnowledgeItem]]:
    """(key, item) pairs with duplicate keys disambiguated by occurrence."""
    units_by_id = {u.id: u for u in gq.units}
    fragments_by_unit = {
        uid: {f.id: f for f in extract_fragments(unit)}
        for uid, unit in units_by_id.items()
    }
    seen: dict[str, int] = {}
    out: list[tuple[str, KnowledgeItem]] = []
    for item in gq.items:
        unit = units_by_id[item.subquery_id]
        fragment = fragments_by_unit[item.subquery_id][item.fragment_id]
        base = item_key(unit.name, fragment)
        ordinal = seen.get(base, 0)
        seen[base] = ordinal + 1
        out.append((f"{base}#{ordinal}", item))
    return out


def _describe_new_items(gq: GeneratedQuery, dictionary: DataDictionary, llm,
                        reused: dict[str, str]) -> None:
    """Fill in missing item descriptions via the gateway, reusing *reused*."""
    units_by_id = {u.id: u for u in gq.units}
    for item in gq.items:
        if item.description:
            continue
        unit = units_by_id[item.subquery_id]
        fragment = next(
            f for f in extract_fragments(unit) if f.id == item.fragment_id
        )
        matched = reused.get(fragment.sql_text)
        if matched:
            item.description = matched
        else:
            item.description = describe_fragment(
                fragment, unit, dictionary, llm, all_units=gq.units
            )
        item.title = derive_title(item.description, fallback=item.kind.value)


def generate_sql_ast(instruction: str, bundle: RetrievalBundle,
                     dictionary: DataDictionary, llm, db_path: str) -> ScriptAst:
    """Knowledge-augmented generation down to a parsed script (no item model)."""
    schema = render_schema(read_schema(db_path))
    return _llm_sql(
        llm,
        "generate_sql",
        {
            "instruction": instruction,
            "schema": schema,
            "dictionary": dictionary.render_for_prompt(),
            "knowledge": bundle.knowledge_prompt(),
        },
    )


def generate(instruction: str, bundle: RetrievalBundle, dictionary: DataDictionary,
             llm, db_path: str, generation: int = 1) -> GeneratedQuery:
    """Generate a fresh query from the instruction plus retrieved knowledge."""
    ast = generate_sql_ast(instruction, bundle, dictionary, llm, db_path)
    gq = build_query(ast, generation, descriptions={})
    reused = {
        r.fragment.sql_text: r.description
        for r in bundle.reranked
        if r.fragment is not None
    }
    _describe_new_items(gq, dictionary, llm, reused)
    for item in gq.items:
        item.status = STATUS_ADDED if generation == 1 else item.status
    return gq


def generate_direct(instruction: str, dictionary: DataDictionary, llm,
                    db_path: str) -> ScriptAst:
    """Knowledge-free generation (ablation baseline)."""
    schema = render_schema(read_schema(db_path))
    return _llm_sql(
        llm,
        "generate_sql_direct",
        {
            "instruction": instruction,
            "schema": schema,
            "dictionary": dictionary.render_for_prompt(),
        },
    )


# -- knowledge view ---------------------------------------------------------------------


def build_knowledge_view(gq: GeneratedQuery) -> KnowledgeViewModel:
    """Two-level model: subquery groups in topological order, items in clause
    execution order; removed items trail their group."""
    groups: list[tuple[str, list[KnowledgeItem]]] = []
    for unit_id in topo_order(gq.graph):
        unit = gq.graph.units[unit_id]
        items = [i for i in gq.items if i.subquery_id == unit_id]
        removed = [i for i in gq.removed_items if i.subquery_id == unit_id]
        groups.append((unit.name, items + removed))
    return KnowledgeViewModel(groups=groups)


# -- refinement ----------------------------------------------------------------------------


def _dependency_signatures(gq: GeneratedQuery, unit: SubqueryUnit) -> str:
    lines = []
    for name in sorted(unit.referenced_ctes):
        dep = gq.graph.resolve(name)
        cols = ", ".join(n for n, _ in dep.output_columns)
        lines.append(f"{dep.name}: {cols}")
    return "\n".join(lines) if lines else "(none)"


def columns_required_from(reader: SubqueryUnit, provider: SubqueryUnit) -> set[str]:
    """Column names of *provider* that *reader* references."""
    from .knowledge import _from_sources

    bindings = {
        binding.lower(): source.lower()
        for binding, source in _from_sources(reader)
    }
    # subqueries inside expressions may also read the provider directly
    sources = set(bindings.values())
    required: set[str] = set()
    provider_name = provider.name.lower()
    for node in A.walk(reader.select):
        if isinstance(node, A.ColumnRef):
            if node.table is not None:
                if bindings.get(node.table.lower()) == provider_name:
                    required.add(node.name)
            elif len(sources) == 1 and provider_name in sources:
                required.add(node.name)
        elif isinstance(node, A.TableRef) and node.name.lower() == provider_name:
            # FROM <provider> nested in an expression subquery: collect the
            # columns its enclosing select projects
            pass
    # nested selects like (SELECT element FROM least_com_el) reference columns
    # without the outer bindings; walk them separately
    for node in A.walk(reader.select):
        if isinstance(node, (A.ScalarSubquery, A.InSelect, A.Exists)):
            inner = node.select
            inner_sources = [
                (item.alias or item.name).lower()
                for core in inner.cores
                if core.from_clause is not None
                for item in [core.from_clause.source]
                + [j.table for j in core.from_clause.joins]
                if isinstance(item, A.TableRef)
            ]
            inner_reads_provider = any(
                isinstance(item, A.TableRef) and item.name.lower() == provider_name
                for core in inner.cores
                if core.from_clause is not None
                for item in [core.from_clause.source]
                + [j.table for j in core.from_clause.joins]
            )
            if not inner_reads_provider:
                continue
            for ref in A.walk(inner):
                if isinstance(ref, A.ColumnRef):
                    if ref.table is None and len(inner_sources) == 1:
                        required.add(ref.name)
                    elif ref.table is not None and ref.table.lower() == provider_name:
                        required.add(ref.name)
    return required


def _rename_references(reader: SubqueryUnit, provider_name: str,
                       mapping: dict[str, str]) -> SubqueryUnit | None:
    """Rewrite reader's references to renamed provider columns; None if untouched."""
    from .knowledge import _from_sources
    import copy as _copy

    if not mapping:
        return None
    select = _copy.deepcopy(reader.select)
    bindings = {
        binding.lower(): source.lower() for binding, source in _from_sources(reader)
    }
    changed = False
    for node in A.walk(select):
        if isinstance(node, A.ColumnRef) and node.name.lower() in mapping:
            qualified = (
                node.table is not None
                and bindings.get(node.table.lower()) == provider_name.lower()
            )
            sole = node.table is None and list(bindings.values()) == [provider_name.lower()]
            if qualified or sole:
                node.name = mapping[node.name.lower()]
                changed = True
    if not changed:
        return None
    rebuilt = parse_script(select.sql()).root.body
    new_reader = SubqueryUnit(
        id=reader.id, name=reader.name, select=rebuilt, sql_text=rebuilt.sql(),
        referenced_tables=reader.referenced_tables, referenced_ctes=reader.referenced_ctes,
        output_columns=reader.output_columns, index=reader.index,
        synthetic=reader.synthetic, is_main=reader.is_main,
    )
    return new_reader


class AuthoringSession:
    """One user's authoring state: generations, edit history, metadata cache."""

    def __init__(self, session_id: str, db_path: str, store: KnowledgeStore,
                 dictionary: DataDictionary, llm):
        self.session_id = session_id
        self.db_path = db_path
        self.store = store
        self.dictionary = dictionary
        self.llm = llm
        self.generations: list[GeneratedQuery] = []
        self.instruction_history: list[dict] = []
        self._metadata_cache: dict[tuple[int, str], FragmentMetadata] = {}
        self._lock = threading.Lock()

    @property
    def current(self) -> GeneratedQuery:
        if not self.generations:
            raise SqlKnowError("session has no generations yet")
        return self.generations[-1]

    def generate(self, instruction: str) -> GeneratedQuery:
        with self._lock:
            bundle = retrieve(instruction, self.store, self.llm)
            generation = (self.generations[-1].generation + 1) if self.generations else 1
            gq = generate(instruction, bundle, self.dictionary, self.llm,
                          self.db_path, generation=generation)
            self.generations.append(gq)
            self.instruction_history.append(
                {"kind": "generate", "instruction": instruction,
                 "generation": gq.generation}
            )
            return gq

    def refine(self, edit: RefinementEdit) -> GeneratedQuery:
        with self._lock:
            gq = refine(self, edit, self.llm)
            self.generations.append(gq)
            self.instruction_history.append(
                {
                    "kind": "refine",
                    "mode": edit.mode,
                    "target": edit.target,
                    "target_id": edit.target_id,
                    "instruction": edit.instruction,
                    "generation": gq.generation,
                }
            )
            return gq

    def resolve_item_metadata(self, item_id: str,
                              generation: int | None = None) -> FragmentMetadata:
        return resolve_item_metadata(self, item_id, generation)

    # -- persistence -----------------------------------------------------------

    def snapshot(self) -> dict:
        # database recorded by name only so snapshots stay byte-identical
        # across machines and working directories
        return {
            "session_id": self.session_id,
            "database": Path(self.db_path).name,
            "instruction_history": self.instruction_history,
            "generations": [g.summary_json() for g in self.generations],
        }

    def snapshot_bytes(self) -> bytes:
        return (json.dumps(self.snapshot(), indent=2, sort_keys=True,
                           ensure_ascii=False) + "\n").encode("utf-8")

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.snapshot_bytes())

    @classmethod
    def load(cls, path: str, db_path: str, store: KnowledgeStore,
             dictionary: DataDictionary, llm) -> "AuthoringSession":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        session = cls(data["session_id"], db_path, store, dictionary, llm)
        session.instruction_history = data["instruction_history"]
        for gdata in data["generations"]:
            ast = parse_script(gdata["sql_text"])
            gq = build_query(ast, gdata["generation"], descriptions={})
            items_by_id = {i["id"]: i for i in gdata["items"]}
            for item in gq.items:
                saved = items_by_id.get(item.id)
                if saved:
                    item.description = saved["description"]
                    item.title = saved["title"]
                    item.status = saved["status"]
            gq.removed_items = [
                KnowledgeItem(
                    id=i["id"], subquery_id=i["subquery_id"],
                    kind=KnowledgeKind(i["kind"]), title=i["title"],
                    description=i["description"], fragment_id=i["fragment_id"],
                    status=i["status"],
                )
                for i in gdata.get("removed_items", [])
            ]
            gq.warnings = gdata.get("warnings", [])
            session.generations.append(gq)
        return session


def resolve_item_metadata(session: AuthoringSession, item_id: str,
                          generation: int | None = None) -> FragmentMetadata:
    """Compute (or fetch cached) probe metadata for one item of the current
    generation; requests against an older generation are rejected."""
    current = session.current
    if generation is not None and generation != current.generation:
        raise StaleGenerationError(
            f"generation {generation} is stale (current is {current.generation})"
        )
    item = current.item(item_id)
    if item is None:
        raise KeyError(f"unknown item {item_id!r}")
    cache_key = (current.generation, item.fragment_id)
    cached = session._metadata_cache.get(cache_key)
    if cached is not None:
        item.metadata = cached
        return cached
    unit = current.unit_of(item.fragment_id)
    fragment = next(
        f for f in extract_fragments(unit) if f.id == item.fragment_id
    )
    probe = build_probe(unit, fragment, current.graph)
    metadata = execute_probe(session.db_path, current.graph, probe)
    session._metadata_cache[cache_key] = metadata
    item.metadata = metadata
    return metadata


def _diff_items(old: GeneratedQuery, new: GeneratedQuery) -> None:
    """Mark Added/Removed/Unchanged between consecutive generations and carry
    over descriptions for unchanged items."""
    old_by_key = dict(_keyed_items(old))
    new_keys = set()
    for key, item in _keyed_items(new):
        new_keys.add(key)
        previous = old_by_key.get(key)
        if previous is not None:
            item.status = STATUS_UNCHANGED
            if not item.description:
                item.description = previous.description
                item.title = previous.title
        else:
            item.status = STATUS_ADDED
    removed = []
    for key, item in old_by_key.items():
        if key not in new_keys:
            removed.append(
                KnowledgeItem(
                    id=item.id, subquery_id=item.subquery_id, kind=item.kind,
                    title=item.title, description=item.description,
                    fragment_id=item.fragment_id, status=STATUS_REMOVED,
                )
            )
    new.removed_items = removed


def refine(session: AuthoringSession, edit: RefinementEdit, llm) -> GeneratedQuery:
    """Apply one knowledge-level edit and propagate it downstream."""
    edit.validate()
    current = session.current
    generation = current.generation + 1

    if edit.target == TARGET_QUERY:
        new_ast = _refine_whole_query(session, edit, llm, current)
        gq = build_query(new_ast, generation, descriptions={})
    else:
        unit, fragment = _resolve_target(current, edit)
        if edit.mode == MODE_DELETE:
            new_unit = _delete_fragment(current, unit, fragment)
        elif edit.mode == MODE_MODIFY and fragment is not None:
            new_unit = _modify_fragment(session, current, unit, fragment, edit, llm)
        elif edit.mode == MODE_MODIFY:
            new_unit = _modify_subquery(session, current, unit, edit, llm)
        else:  # Add to a subquery
            new_unit = _add_to_subquery(session, current, unit, edit, llm)
        gq = _propagate(session, current, unit, new_unit, generation)

    reused = {}
    _diff_items(current, gq)
    _describe_new_items(gq, session.dictionary, llm, reused)
    _execution_check(session, current, gq)
    return gq


def _resolve_target(current: GeneratedQuery, edit: RefinementEdit
                    ) -> tuple[SubqueryUnit, Fragment | None]:
    if edit.target == TARGET_ITEM:
        item = current.item(edit.target_id or "")
        if item is None:
            raise KeyError(f"unknown item {edit.target_id!r}")
        unit = current.unit_of(item.fragment_id)
        fragment = next(
            f for f in extract_fragments(unit) if f.id == item.fragment_id
        )
        return unit, fragment
    if edit.target == TARGET_SUBQUERY:
        unit = current.graph.resolve(edit.target_id or "")
        return unit, None
    raise KeyError(f"unknown target {edit.target!r}")


def _downstream_required_columns(current: GeneratedQuery, unit: SubqueryUnit) -> set[str]:
    required: set[str] = set()
    for reader_id in current.graph.out_edges.get(unit.id, []):
        if reader_id in current.graph.units:
            required |= columns_required_from(current.graph.units[reader_id], unit)
    return required


def _delete_fragment(current: GeneratedQuery, unit: SubqueryUnit,
                     fragment: Fragment | None) -> SubqueryUnit:
    if fragment is None:
        raise SqlKnowError("Delete requires an item target")
    required = _downstream_required_columns(current, unit)
    try:
        return splice_fragment(unit, fragment.id, None, required_columns=required)
    except SpliceError as exc:
        if "referenced downstream" in str(exc):
            raise RefusalError(str(exc)) from exc
        raise


def _modify_fragment(session: AuthoringSession, current: GeneratedQuery,
                     unit: SubqueryUnit, fragment: Fragment,
                     edit: RefinementEdit, llm) -> SubqueryUnit:
    # no required-columns guard here: renames are repaired during
    # propagation, which re-checks what downstream still cannot resolve
    instruction = edit.instruction or ""
    last_error: Exception | None = None
    for attempt in range(REFINE_REPAIRS + 1):
        prompt_instruction = instruction
        if last_error is not None:
            prompt_instruction = f"{instruction} (previous attempt failed: {last_error})"
        replacement = llm.chat(
            "refine_fragment",
            {
                "instruction": prompt_instruction,
                "kind": fragment.kind.value,
                "fragment_sql": fragment.sql_text,
                "unit_sql": unit.sql_text,
                "dependencies": _dependency_signatures(current, unit),
            },
        )
        try:
            return splice_fragment(unit, fragment.id, _clean_sql(replacement))
        except SpliceError as exc:
            last_error = exc
    raise last_error  # type: ignore[misc]


def _replacement_unit(unit: SubqueryUnit, new_select_sql: str) -> SubqueryUnit:
    ast = parse_script(new_select_sql)
    if ast.root.ctes:
        raise SpliceError("a subquery replacement cannot introduce its own WITH clause")
    select = ast.root.body
    return SubqueryUnit(
        id=unit.id, name=unit.name, select=select, sql_text=select.sql(),
        referenced_tables=set(), referenced_ctes=set(),
        output_columns=[], index=unit.index,
        synthetic=unit.synthetic, is_main=unit.is_main,
    )


def _modify_subquery(session: AuthoringSession, current: GeneratedQuery,
                     unit: SubqueryUnit, edit: RefinementEdit, llm) -> SubqueryUnit:
    last_error: Exception | None = None
    instruction = edit.instruction or ""
    for attempt in range(REFINE_REPAIRS + 1):
        prompt_instruction = instruction
        if last_error is not None:
            prompt_instruction = f"{instruction} (previous attempt failed: {last_error})"
        replacement = llm.chat(
            "refine_subquery",
            {
                "instruction": prompt_instruction,
                "name": unit.name,
                "unit_sql": unit.sql_text,
                "dependencies": _dependency_signatures(current, unit),
            },
        )
        try:
            return _replacement_unit(unit, _clean_sql(replacement))
        except (SpliceError, SqlKnowError) as exc:
            last_error = exc
    raise GenerationParseError(
        f"refinement failed after {REFINE_REPAIRS} repairs: {last_error}",
        raw_text="",
    )


def _add_to_subquery(session: AuthoringSession, current: GeneratedQuery,
                     unit: SubqueryUnit, edit: RefinementEdit, llm) -> SubqueryUnit:
    bundle = retrieve(edit.instruction or "", session.store, llm)
    last_error: Exception | None = None
    instruction = edit.instruction or ""
    for attempt in range(REFINE_REPAIRS + 1):
        prompt_instruction = instruction
        if last_error is not None:
            prompt_instruction = f"{instruction} (previous attempt failed: {last_error})"
        replacement = llm.chat(
            "add_knowledge",
            {
                "instruction": prompt_instruction,
                "scope": f"subquery {unit.name}",
                "target_sql": unit.sql_text,
                "knowledge": bundle.knowledge_prompt(),
            },
        )
        try:
            return _replacement_unit(unit, _clean_sql(replacement))
        except (SpliceError, SqlKnowError) as exc:
            last_error = exc
    raise GenerationParseError(
        f"add failed after {REFINE_REPAIRS} repairs: {last_error}", raw_text=""
    )


def _refine_whole_query(session: AuthoringSession, edit: RefinementEdit, llm,
                        current: GeneratedQuery) -> ScriptAst:
    if edit.mode == MODE_ADD:
        bundle = retrieve(edit.instruction or "", session.store, llm)
        return _llm_sql(
            llm,
            "add_knowledge",
            {
                "instruction": edit.instruction or "",
                "scope": "the whole query",
                "target_sql": current.sql_text,
                "knowledge": bundle.knowledge_prompt(),
            },
            repairs=REFINE_REPAIRS,
        )
    return _llm_sql(
        llm,
        "refine_query",
        {"instruction": edit.instruction or "", "sql": current.sql_text},
        repairs=REFINE_REPAIRS,
    )


def _propagate(session: AuthoringSession, current: GeneratedQuery,
               old_unit: SubqueryUnit, new_unit: SubqueryUnit,
               generation: int) -> GeneratedQuery:
    """Swap in the edited unit, update downstream references, rebuild."""
    # re-resolve the new unit against the script's CTE names
    from .sqlcore.decompose import _build_unit

    cte_names = {u.name.lower() for u in current.units if not u.is_main}
    refreshed = _build_unit(
        new_unit.id, new_unit.name, new_unit.select, new_unit.index,
        cte_names=cte_names, synthetic=new_unit.synthetic, is_main=new_unit.is_main,
    )

    old_names = [n for n, _ in old_unit.output_columns]
    new_names = [n for n, _ in refreshed.output_columns]
    required = _downstream_required_columns(current, old_unit)
    mapping: dict[str, str] = {}
    if required and old_names != new_names and len(old_names) == len(new_names):
        for old_name, new_name in zip(old_names, new_names):
            if old_name != new_name and old_name.lower() in {r.lower() for r in required}:
                mapping[old_name.lower()] = new_name

    units = []
    downstream = set(affected_downstream(current.graph, old_unit.id))
    for unit in current.units:
        if unit.id == old_unit.id:
            units.append(refreshed)
        elif unit.id in downstream and mapping:
            units.append(_rename_references(unit, old_unit.name, mapping) or unit)
        else:
            units.append(unit)

    exported = {n.lower() for n, _ in refreshed.output_columns}
    if "*" not in {n for n, _ in refreshed.output_columns}:
        still_missing = {
            c for c in required
            if c.lower() not in exported and c.lower() not in mapping
        }
        if still_missing:
            raise RefusalError(
                "edit drops columns referenced downstream: "
                + ", ".join(sorted(still_missing))
            )

    ast = script_from_units(units)
    return build_query(ast, generation, descriptions={})


def _execution_check(session: AuthoringSession, old: GeneratedQuery,
                     new: GeneratedQuery) -> None:
    """Re-execute edited units and their transitive readers, in topological
    order; newly-empty subqueries surface as warnings, not errors."""
    changed = {i.subquery_id for i in new.items if i.status != STATUS_UNCHANGED}
    to_run = set(changed)
    for unit_id in changed:
        to_run.update(affected_downstream(new.graph, unit_id))
    for unit_id in topo_order(new.graph):
        if unit_id not in to_run:
            continue
        result = execute_subquery(session.db_path, new.graph, unit_id, max_rows=1)
        if result.total_row_count == 0:
            name = new.graph.units[unit_id].name
            new.warnings.append(f"subquery {name!r} now returns no rows")
