"""Command-line entry points.

    sqlknow fragment QUERY.sql            debug dump of units + fragments
    sqlknow offline extract ...           build/refresh the knowledge store
    sqlknow eval recon|retrieval|ablation evaluation harness
    sqlknow serve ...                     HTTP service for the web UI

``--mock`` selects the deterministic gateway; otherwise the live endpoint is
read from SQLKNOW_LLM_URL / SQLKNOW_LLM_MODEL / SQLKNOW_LLM_KEY. A JSON (or
TOML, Python >= 3.11) config file can override port, CORS, and LLM settings.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .errors import SqlKnowError
from .gateway import HashingEmbedder, LiveConfig, LiveGateway, MockGateway


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError as exc:
            raise click.ClickException("TOML config needs Python >= 3.11; use JSON") from exc
        return tomllib.loads(text)
    return json.loads(text)


def _make_gateway(mock: bool, config: dict):
    if mock:
        return MockGateway()
    import os

    for key, value in (config.get("llm") or {}).items():
        os.environ.setdefault(f"SQLKNOW_{key.upper()}", str(value))
    live = LiveConfig.from_env()
    if live is None:
        raise click.ClickException(
            "no live endpoint configured: set SQLKNOW_LLM_URL and "
            "SQLKNOW_LLM_MODEL, or pass --mock"
        )
    return LiveGateway(live)


def _embedder_for(gateway):
    return getattr(gateway, "embedder", None) or HashingEmbedder()


def _read_scripts(scripts: str) -> list[tuple[str, str]]:
    path = Path(scripts)
    if not path.exists():
        raise click.ClickException(f"scripts path {scripts!r} does not exist")
    if path.is_dir():
        return [(p.stem, p.read_text()) for p in sorted(path.glob("*.sql"))]
    return [(path.stem, path.read_text())]


def _require_file(value: str, flag: str) -> str:
    if not value or not Path(value).exists():
        raise click.ClickException(f"{flag} must point to an existing file (got {value!r})")
    return value


def _write_json(data: dict, out: str | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out}")
    else:
        click.echo(text, nl=False)


@click.group()
def main() -> None:
    """Interactive NL-to-SQL authoring grounded in historical-script knowledge."""


# -- fragment debug dump ---------------------------------------------------------


@main.command()
@click.argument("sql_file", type=click.Path(exists=True))
@click.option("--out", default=None, help="write JSON here instead of stdout")
def fragment(sql_file: str, out: str | None) -> None:
    """Dump the subquery units and typed fragments of one SQL file."""
    from .sqlcore.dump import script_report

    try:
        payload = script_report(Path(sql_file).read_text())
    except SqlKnowError as exc:
        raise click.ClickException(str(exc))
    _write_json(payload, out)


# -- offline ---------------------------------------------------------------------


@main.group()
def offline() -> None:
    """Offline knowledge-extraction stage."""


@offline.command("extract")
@click.option("--db", required=True, type=click.Path(exists=True), help="SQLite database file")
@click.option("--scripts", required=True, help="historical scripts: a .sql file or a directory")
@click.option("--dict", "dict_path", required=True, help="dictionary JSON (built if missing)")
@click.option("--out", required=True, help="knowledge store output (JSONL)")
@click.option("--report", "report_path", default=None, help="extraction report JSON")
@click.option("--mock", is_flag=True, help="use the deterministic mock gateway")
@click.option("--config", default=None, help="JSON/TOML config file")
def offline_extract(db: str, scripts: str, dict_path: str, out: str,
                    report_path: str | None, mock: bool, config: str | None) -> None:
    """Parse histories, describe fragments, embed, and index them."""
    from .extraction import run_offline
    from .knowledge import DataDictionary, build_dictionary

    gateway = _make_gateway(mock, _load_config(config))
    named = _read_scripts(scripts)
    if Path(dict_path).exists():
        dictionary = DataDictionary.load(dict_path)
    else:
        dictionary = build_dictionary(db, [sql for _, sql in named], gateway)
        dictionary.save(dict_path)
        click.echo(f"wrote {dict_path}")
    store, report = run_offline(db, named, dictionary, gateway, _embedder_for(gateway))
    store.save(out)
    click.echo(f"wrote {out} ({len(store)} records)")
    if report_path:
        _write_json(report.to_json(), report_path)
    if report.skipped:
        click.echo(f"skipped {len(report.skipped)} scripts", err=True)


# -- eval -------------------------------------------------------------------------


@main.group("eval")
def eval_group() -> None:
    """Technical-evaluation harness (reports mirror the published tables)."""


@eval_group.command("recon")
@click.option("--db", required=True, type=click.Path(exists=True))
@click.option("--dict", "dict_path", required=True, type=click.Path(exists=True))
@click.option("--scripts", required=True)
@click.option("--out", default=None)
@click.option("--database-id", default="fixture")
@click.option("--mock", is_flag=True)
@click.option("--paper-reference", is_flag=True, help="include published reference values")
@click.option("--config", default=None)
def eval_recon(db: str, dict_path: str, scripts: str, out: str | None,
               database_id: str, mock: bool, paper_reference: bool,
               config: str | None) -> None:
    """SQL reconstruction accuracy from extracted knowledge alone."""
    from .evalkit import assemble_report, reconstruction_accuracy
    from .knowledge import DataDictionary

    gateway = _make_gateway(mock, _load_config(config))
    dictionary = DataDictionary.load(dict_path)
    row = reconstruction_accuracy(db, _read_scripts(scripts), dictionary, gateway,
                                  database_id=database_id)
    _write_json(assemble_report(extraction_rows=[row],
                                include_paper_reference=paper_reference), out)


@eval_group.command("retrieval")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--tasks", "tasks_path", required=True, type=click.Path(exists=True))
@click.option("--out", default=None)
@click.option("--mock", is_flag=True)
@click.option("--paper-reference", is_flag=True)
@click.option("--config", default=None)
def eval_retrieval(store_path: str, tasks_path: str, out: str | None,
                   mock: bool, paper_reference: bool, config: str | None) -> None:
    """Precision/recall/F1 of retrieved knowledge items."""
    from .evalkit import assemble_report, load_tasks, retrieval_metrics
    from .knowledge import KnowledgeStore

    gateway = _make_gateway(mock, _load_config(config))
    store = KnowledgeStore.load(store_path, _embedder_for(gateway))
    rows = retrieval_metrics(load_tasks(tasks_path), store, gateway)
    _write_json(assemble_report(retrieval_rows=rows,
                                include_paper_reference=paper_reference), out)


@eval_group.command("ablation")
@click.option("--db", required=True, type=click.Path(exists=True))
@click.option("--dict", "dict_path", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", default=None, type=click.Path(exists=True))
@click.option("--tasks", "tasks_path", required=True, type=click.Path(exists=True))
@click.option("--mode", required=True,
              type=click.Choice(["direct", "rag", "refine", "pipeline"], case_sensitive=False))
@click.option("--out", default=None)
@click.option("--mock", is_flag=True)
@click.option("--paper-reference", is_flag=True)
@click.option("--config", default=None)
def eval_ablation(db: str, dict_path: str, store_path: str | None, tasks_path: str,
                  mode: str, out: str | None, mock: bool, paper_reference: bool,
                  config: str | None) -> None:
    """Direct / RAG / Refine / Pipeline code-generation ablation."""
    from .evalkit import assemble_report, load_tasks, run_ablation
    from .knowledge import DataDictionary, KnowledgeStore

    gateway = _make_gateway(mock, _load_config(config))
    dictionary = DataDictionary.load(dict_path)
    store = None
    if store_path:
        store = KnowledgeStore.load(store_path, _embedder_for(gateway))
    mode_name = {"direct": "Direct", "rag": "RAG", "refine": "Refine",
                 "pipeline": "Pipeline"}[mode.lower()]
    row = run_ablation(load_tasks(tasks_path), mode_name, gateway, db, dictionary,
                       store=store)
    row["Database"] = load_tasks(tasks_path)[0].database_id if load_tasks(tasks_path) else "fixture"
    _write_json(assemble_report(ablation_rows=[row],
                                include_paper_reference=paper_reference), out)


# -- serve ------------------------------------------------------------------------


@main.command()
@click.option("--db", required=True, help="SQLite database file")
@click.option("--store", "store_path", default=None, help="knowledge store JSONL")
@click.option("--dict", "dict_path", default=None, help="dictionary JSON")
@click.option("--histories", default=None,
              help="history scripts dir (bootstraps store/dict when missing)")
@click.option("--port", default=8000, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--mock", is_flag=True)
@click.option("--snapshot-dir", default=None)
@click.option("--config", default=None)
def serve(db: str, store_path: str | None, dict_path: str | None,
          histories: str | None, port: int, host: str, mock: bool,
          snapshot_dir: str | None, config: str | None) -> None:
    """Run the HTTP service the web UI talks to."""
    import uvicorn

    from .knowledge import DataDictionary, KnowledgeStore, build_dictionary
    from .extraction import run_offline
    from .server import AppState, create_app

    if not Path(db).exists():
        raise click.UsageError(f"--db must point to an existing SQLite file (got {db!r})")
    cfg = _load_config(config)
    gateway = _make_gateway(mock, cfg)
    embedder = _embedder_for(gateway)

    if dict_path and Path(dict_path).exists():
        dictionary = DataDictionary.load(dict_path)
    elif histories:
        named = _read_scripts(histories)
        dictionary = build_dictionary(db, [sql for _, sql in named], gateway)
        if dict_path:
            dictionary.save(dict_path)
    else:
        raise click.ClickException("need --dict (existing) or --histories to build one")

    if store_path and Path(store_path).exists():
        store = KnowledgeStore.load(store_path, embedder)
    elif histories:
        store, _ = run_offline(db, _read_scripts(histories), dictionary, gateway, embedder)
        if store_path:
            store.save(store_path)
    else:
        raise click.ClickException("need --store (existing) or --histories to build one")

    state = AppState(
        db_path=db,
        store=store,
        dictionary=dictionary,
        gateway=gateway,
        dictionary_path=dict_path,
        store_path=store_path,
        snapshot_dir=snapshot_dir,
        cors_origins=cfg.get("cors_origins", ["http://localhost:5173", "http://127.0.0.1:5173"]),
    )
    app = create_app(state)
    port = int(cfg.get("port", port))
    uvicorn.run(app, host=cfg.get("host", host), port=port, log_level="warning")


if __name__ == "__main__":
    main()
