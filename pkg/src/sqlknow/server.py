"""HTTP service exposing sessions, generation, knowledge inspection,
refinement, dictionary editing, and offline extraction.

Contract summary (JSON bodies; schemas shipped under ``schemas/``):

- ``POST /sessions`` {database_id} -> session handle
- ``POST /sessions/{id}/generate`` {instruction} -> generation summary
- ``GET  /sessions/{id}/graph`` -> dependency graph nodes + edges
- ``GET  /sessions/{id}/knowledge`` -> two-level knowledge view
- ``GET  /sessions/{id}/items/{item_id}/result?generation=g`` -> metadata,
  409 when *g* is stale
- ``GET  /sessions/{id}/subqueries/{sq_id}/result`` -> truncated ResultTable
- ``POST /sessions/{id}/refine`` {mode, target, target_id, instruction}
  -> new summary + Added/Removed diff
- ``GET|PUT /dictionary``; ``POST /dictionary/complete``
- ``POST /offline/extract`` {scripts_path} -> extraction report
- ``GET  /health``

Errors: 400 validation, 404 unknown ids, 409 stale generation,
502 LLM failure (with transcript id).
"""

from __future__ import annotations

import logging
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .authoring import AuthoringSession, RefinementEdit, build_knowledge_view
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
from .extraction import run_offline
from .gateway import HashingEmbedder
from .knowledge import (
    FRAGMENT_LEVEL,
    SCRIPT_LEVEL,
    DataDictionary,
    KnowledgeStore,
    complete_description,
)
from .lineage import execute_subquery

logger = logging.getLogger(__name__)

PROBE_WORKERS = 4


@dataclass
class AppState:
    db_path: str
    store: KnowledgeStore
    dictionary: DataDictionary
    gateway: object
    dictionary_path: str | None = None
    store_path: str | None = None
    snapshot_dir: str | None = None
    cors_origins: list[str] = field(default_factory=list)
    sessions: dict[str, AuthoringSession] = field(default_factory=dict)
    pool: ThreadPoolExecutor = field(
        default_factory=lambda: ThreadPoolExecutor(max_workers=PROBE_WORKERS)
    )

    def session(self, session_id: str) -> AuthoringSession:
        if session_id not in self.sessions:
            raise KeyError(f"unknown session {session_id!r}")
        return self.sessions[session_id]

    def persist_session(self, session: AuthoringSession) -> None:
        if self.snapshot_dir:
            Path(self.snapshot_dir).mkdir(parents=True, exist_ok=True)
            session.save(str(Path(self.snapshot_dir) / f"{session.session_id}.json"))

    def schedule_probes(self, session: AuthoringSession) -> None:
        generation = session.current.generation
        for item in session.current.items:
            self.pool.submit(_warm_probe, session, item.id, generation)


def _warm_probe(session: AuthoringSession, item_id: str, generation: int) -> None:
    try:
        session.resolve_item_metadata(item_id, generation=generation)
    except SqlKnowError:
        pass  # stale or failing probes resolve lazily on demand


def create_app(state: AppState) -> FastAPI:
    app = FastAPI(title="sqlknow", docs_url=None, redoc_url=None)
    if state.cors_origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=state.cors_origins,
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(SqlKnowError)
    async def _domain_error(request: Request, exc: SqlKnowError):
        if isinstance(exc, StaleGenerationError):
            status = 409
        elif isinstance(exc, LlmError):
            status = 502
        else:
            status = 400
        body = {"error": type(exc).__name__, "detail": str(exc)}
        if isinstance(exc, LlmError):
            body["transcript_id"] = len(getattr(state.gateway, "transcript", [])) - 1
        if isinstance(exc, GenerationParseError):
            body["raw_text"] = exc.raw_text
        return JSONResponse(status_code=status, content=body)

    @app.exception_handler(KeyError)
    async def _missing(request: Request, exc: KeyError):
        return JSONResponse(status_code=404,
                            content={"error": "NotFound", "detail": str(exc)})

    @app.exception_handler(ValueError)
    async def _invalid(request: Request, exc: ValueError):
        return JSONResponse(status_code=400,
                            content={"error": "Validation", "detail": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def _body_invalid(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"error": "Validation", "detail": str(exc)})

    # -- sessions ----------------------------------------------------------

    @app.post("/sessions")
    async def create_session(body: dict):
        database_id = (body or {}).get("database_id", "")
        if not database_id:
            raise ValueError("database_id is required")
        session_id = body.get("session_id") or uuid.uuid4().hex[:12]
        session = AuthoringSession(
            session_id, state.db_path, state.store, state.dictionary, state.gateway
        )
        state.sessions[session_id] = session
        return {
            "session_id": session_id,
            "database_id": database_id,
            "current_generation": 0,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }

    @app.post("/sessions/{session_id}/generate")
    async def generate(session_id: str, body: dict):
        session = state.session(session_id)
        instruction = (body or {}).get("instruction", "").strip()
        if not instruction:
            raise ValueError("instruction is required")
        gq = session.generate(instruction)
        state.persist_session(session)
        state.schedule_probes(session)
        return gq.summary_json(include_metadata=False)

    @app.get("/sessions/{session_id}/graph")
    async def graph(session_id: str):
        session = state.session(session_id)
        gq = session.current
        nodes = [
            {
                "id": u.id,
                "name": u.name,
                "kind": "subquery",
                "output_columns": [{"name": n, "type": t} for n, t in u.output_columns],
                "item_count": sum(1 for i in gq.items if i.subquery_id == u.id),
                "is_main": u.is_main,
            }
            for u in gq.units
        ]
        tables = sorted({t for u in gq.units for t in u.referenced_tables})
        nodes += [
            {"id": f"table:{t}", "name": t, "kind": "table",
             "output_columns": [], "item_count": 0, "is_main": False}
            for t in tables
        ]
        edges = [{"from": a, "to": b} for a, b in sorted(gq.graph.edges)]
        return {"generation": gq.generation, "nodes": nodes, "edges": edges}

    @app.get("/sessions/{session_id}/knowledge")
    async def knowledge(session_id: str):
        session = state.session(session_id)
        gq = session.current
        view = build_knowledge_view(gq).to_json(include_metadata=False)
        view["generation"] = gq.generation
        # expose fragment spans for client-side code highlighting
        spans = {}
        for unit in gq.units:
            for fragment in gq.fragments_of(unit):
                spans[fragment.id] = {
                    "unit_id": unit.id,
                    "unit_sql": unit.sql_text,
                    "span": list(fragment.span),
                    "sql_text": fragment.sql_text,
                }
        view["fragments"] = spans
        return view

    @app.get("/sessions/{session_id}/items/{item_id}/result")
    async def item_result(session_id: str, item_id: str, generation: int | None = None):
        session = state.session(session_id)
        metadata = session.resolve_item_metadata(item_id, generation=generation)
        return metadata.to_json()

    @app.get("/sessions/{session_id}/subqueries/{sq_id}/result")
    async def subquery_result(session_id: str, sq_id: str):
        session = state.session(session_id)
        gq = session.current
        unit = gq.graph.resolve(sq_id)  # KeyError -> 404
        result = execute_subquery(session.db_path, gq.graph, unit.id)
        body = result.to_json()
        body["subquery"] = unit.name
        body["generation"] = gq.generation
        return body

    @app.post("/sessions/{session_id}/refine")
    async def refine(session_id: str, body: dict):
        session = state.session(session_id)
        edit = RefinementEdit(
            mode=(body or {}).get("mode", ""),
            target=(body or {}).get("target", ""),
            target_id=(body or {}).get("target_id"),
            instruction=(body or {}).get("instruction"),
        )
        edit.validate()
        gq = session.refine(edit)
        state.persist_session(session)
        state.schedule_probes(session)
        summary = gq.summary_json(include_metadata=False)
        summary["diff"] = {
            "added": [i.to_json(False) for i in gq.items if i.status == "Added"],
            "removed": [i.to_json(False) for i in gq.removed_items],
        }
        return summary

    # -- dictionary -----------------------------------------------------------

    @app.get("/dictionary")
    async def get_dictionary():
        return state.dictionary.to_json()

    @app.put("/dictionary")
    async def put_dictionary(body: dict):
        edits = (body or {}).get("columns", [])
        if not isinstance(edits, list) or not edits:
            raise ValueError("columns list is required")
        for edit in edits:
            cd = state.dictionary.lookup(edit.get("table", ""), edit.get("column", ""))
            if cd is None:
                raise KeyError(f"unknown column {edit.get('table')}.{edit.get('column')}")
            if not edit.get("description", "").strip():
                raise ValueError("description must be non-empty")
            cd.description = edit["description"]
            cd.user_edited = True
        if state.dictionary_path:
            state.dictionary.save(state.dictionary_path)
        return state.dictionary.to_json()

    @app.post("/dictionary/complete")
    async def dictionary_complete(body: dict):
        table = (body or {}).get("table", "")
        column = (body or {}).get("column", "")
        partial = (body or {}).get("partial", "")
        cd = state.dictionary.lookup(table, column)
        if cd is None:
            raise KeyError(f"unknown column {table}.{column}")
        completion = complete_description(partial, cd, state.gateway)
        return {"table": table, "column": column, "completion": completion}

    # -- offline + health -----------------------------------------------------

    @app.post("/offline/extract")
    async def offline_extract(body: dict):
        scripts_path = Path((body or {}).get("scripts_path", ""))
        if not scripts_path.exists():
            raise ValueError(f"scripts_path {str(scripts_path)!r} does not exist")
        if scripts_path.is_dir():
            scripts = [(p.stem, p.read_text()) for p in sorted(scripts_path.glob("*.sql"))]
        else:
            scripts = [(scripts_path.stem, scripts_path.read_text())]
        embedder = getattr(state.gateway, "embedder", None) or HashingEmbedder()
        _, report = run_offline(
            state.db_path, scripts, state.dictionary, state.gateway, embedder,
            store=state.store, retry_backoff_s=0,
        )
        if state.store_path:
            state.store.save(state.store_path)
        return report.to_json()

    @app.get("/health")
    async def health():
        return {
            "status": "ok",
            "database": state.db_path,
            "provider": getattr(state.gateway, "provider", "unknown"),
            "store": {
                "records": len(state.store),
                "script_level": len(state.store.at_level(SCRIPT_LEVEL)),
                "fragment_level": len(state.store.at_level(FRAGMENT_LEVEL)),
            },
            "sessions": len(state.sessions),
        }

    return app
