"""LLM boundary: prompt templates, chat + embedding calls, transcripts.

Two providers share one interface:

- ``MockGateway`` is pure and deterministic. Responses come from a fixture
  table keyed by ``(template_id, sha256(canonical JSON of variables))``;
  fixture entries may declare ``key_fields`` to hash only a subset of the
  variables (full-variable keys win over subset keys). Anything unmatched
  falls back to a per-template deterministic synthesizer, or to the
  documented echo format ``[mock:<template_id>:<digest12>]``.
- ``LiveGateway`` talks to an OpenAI-compatible HTTP endpoint configured via
  ``SQLKNOW_LLM_URL`` / ``SQLKNOW_LLM_MODEL`` / ``SQLKNOW_LLM_KEY`` (and the
  ``SQLKNOW_EMBED_*`` analogues), temperature 0, 60 s timeout, at most 4
  in-flight calls.

Mock embeddings are a token-hashing bag-of-words projection, unit-normalized.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from string import Template

import numpy as np

from .errors import EmbeddingError, LlmError, MissingVariableError

DEFAULT_MOCK_DIM = 256


# -- templates -----------------------------------------------------------------


class TemplateRegistry:
    """Prompt templates shipped as package files, ``$variable`` substitution."""

    def __init__(self) -> None:
        self._templates: dict[str, str] = {}
        root = resources.files("sqlknow").joinpath("templates")
        for entry in root.iterdir():
            if entry.name.endswith(".txt"):
                self._templates[entry.name[:-4]] = entry.read_text()

    def ids(self) -> list[str]:
        return sorted(self._templates)

    def render(self, template_id: str, variables: dict[str, str]) -> str:
        if template_id not in self._templates:
            raise LlmError(f"unknown template {template_id!r}")
        try:
            return Template(self._templates[template_id]).substitute(variables)
        except KeyError as exc:
            raise MissingVariableError(template_id, exc.args[0]) from exc

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for tid in self.ids():
            digest.update(tid.encode())
            digest.update(self._templates[tid].encode())
        return digest.hexdigest()[:12]


_REGISTRY: TemplateRegistry | None = None


def template_registry() -> TemplateRegistry:
    global _REGISTRY
    if _REGISTRY is None:
        _REGISTRY = TemplateRegistry()
    return _REGISTRY


# -- transcript ------------------------------------------------------------------


@dataclass
class ChatExchange:
    template_id: str
    variables: dict[str, str]
    rendered_prompt: str
    response_text: str
    latency_ms: int
    provider: str  # 'Live' | 'Mock'

    def to_json(self) -> dict:
        return {
            "template_id": self.template_id,
            "variables": self.variables,
            "rendered_prompt": self.rendered_prompt,
            "response_text": self.response_text,
            "latency_ms": self.latency_ms,
            "provider": self.provider,
        }


def variables_digest(variables: dict[str, str]) -> str:
    canonical = json.dumps(variables, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# -- mock embeddings ---------------------------------------------------------------


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Deterministic bag-of-words embedding: each token hashes to a signed
    bucket; vectors are L2-normalized. Stable across runs and platforms."""

    def __init__(self, dim: int = DEFAULT_MOCK_DIM):
        self.dim = dim

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        vectors = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            if not isinstance(text, str) or not text.strip():
                raise EmbeddingError(f"cannot embed empty text at index {i}")
            for token in _TOKEN_RE.findall(text.lower()):
                digest = hashlib.sha256(token.encode("utf-8")).digest()
                bucket = int.from_bytes(digest[:8], "big") % self.dim
                sign = 1.0 if digest[8] % 2 == 0 else -1.0
                vectors[i, bucket] += sign
            norm = float(np.linalg.norm(vectors[i]))
            if norm == 0.0:
                vectors[i, 0] = 1.0
            else:
                vectors[i] /= norm
        return vectors


# -- mock gateway ----------------------------------------------------------------


@dataclass
class MockFixture:
    template_id: str
    variables: dict[str, str]
    response: str
    key_fields: list[str] | None = None


def _load_packaged_fixtures() -> list[MockFixture]:
    raw = resources.files("sqlknow").joinpath("data/mock_fixtures.json").read_text()
    return [MockFixture(**entry) for entry in json.loads(raw)]


class MockGateway:
    """Deterministic, I/O-free gateway for tests and demos."""

    provider = "Mock"

    def __init__(
        self,
        fixtures: list[MockFixture] | None = None,
        overrides: dict[str, object] | None = None,
        dim: int = DEFAULT_MOCK_DIM,
        load_packaged: bool = True,
    ):
        self.templates = template_registry()
        self.embedder = HashingEmbedder(dim=dim)
        self.transcript: list[ChatExchange] = []
        self.overrides = dict(overrides or {})
        self._exact: dict[tuple[str, str], str] = {}
        self._subsets: dict[str, list[MockFixture]] = {}
        entries: list[MockFixture] = []
        if load_packaged:
            entries.extend(_load_packaged_fixtures())
        entries.extend(fixtures or [])
        for fx in entries:
            if fx.key_fields is None:
                self._exact[(fx.template_id, variables_digest(fx.variables))] = fx.response
            else:
                self._subsets.setdefault(fx.template_id, []).append(fx)

    @property
    def embed_dim(self) -> int:
        return self.embedder.dim

    def chat(self, template_id: str, variables: dict[str, str]) -> str:
        prompt = self.templates.render(template_id, variables)
        response = self._lookup(template_id, variables)
        self.transcript.append(
            ChatExchange(template_id, dict(variables), prompt, response, 0, self.provider)
        )
        return response

    def embed(self, texts: list[str]) -> np.ndarray:
        return self.embedder.embed(texts)

    # -- response resolution ------------------------------------------------

    def _lookup(self, template_id: str, variables: dict[str, str]) -> str:
        if template_id in self.overrides:
            return self.overrides[template_id](variables)  # type: ignore[operator]
        exact = self._exact.get((template_id, variables_digest(variables)))
        if exact is not None:
            return exact
        for fx in self._subsets.get(template_id, ()):
            subset = {k: variables.get(k, "") for k in fx.key_fields or ()}
            if variables_digest(subset) == variables_digest(
                {k: fx.variables.get(k, "") for k in fx.key_fields or ()}
            ):
                return fx.response
        synth = getattr(self, f"_synth_{template_id}", None)
        if synth is not None:
            return synth(variables)
        return f"[mock:{template_id}:{variables_digest(variables)[:12]}]"

    # -- per-template deterministic synthesizers ------------------------------

    def _synth_describe_column(self, v: dict[str, str]) -> str:
        column, table = v.get("column", "?"), v.get("table", "?")
        alias = (v.get("aliases") or "").split(",")[0].strip()
        samples = v.get("sample_values", "")
        text = f"The {column} of each {table} record"
        if alias:
            text += f", also called {alias}"
        if samples:
            text += f"; example values: {samples}"
        return text + "."

    def _synth_complete_description(self, v: dict[str, str]) -> str:
        partial = v.get("partial", "").rstrip()
        if partial.endswith((".", "!", "?")):
            return partial
        samples = v.get("sample_values", "")
        suffix = f"; observed values include {samples}" if samples else ""
        return f"{partial}{suffix}."

    def _synth_describe_script(self, v: dict[str, str]) -> str:
        sql = v.get("sql", "")
        tables = sorted(set(re.findall(r"\b(?:FROM|JOIN)\s+([A-Za-z_][A-Za-z0-9_]*)", sql, re.I)))
        tables = [t for t in tables if not t.startswith("__")]
        if tables:
            return f"Query over {', '.join(tables)}."
        return f"Query {variables_digest(v)[:8]}."

    def _synth_describe_fragment(self, v: dict[str, str]) -> str:
        kind = v.get("kind", "Fragment")
        return f"{kind} knowledge: {v.get('fragment_sql', '')}"

    def _synth_extract_keywords(self, v: dict[str, str]) -> str:
        instruction = v.get("instruction", "").strip().rstrip(".!?")
        parts = re.split(r"\s+with\s+|\s+and\s+|,|;", instruction, flags=re.I)
        keywords = []
        for part in parts:
            part = part.strip()
            part = re.sub(
                r"^(show me|show|list|find|get|give me|count|calculate|compute|what is|what are|the)\s+",
                "", part, flags=re.I,
            )
            part = re.sub(r"^(number|numbers|count)\s+of\s+", "", part, flags=re.I)
            if part:
                keywords.append(part)
        return "\n".join(keywords) if keywords else instruction

    def _synth_rerank_knowledge(self, v: dict[str, str]) -> str:
        # keep the caller's cosine order: echo the candidate ids as given
        ids = re.findall(r"^\s*([A-Za-z0-9_.:-]+)\s*\|", v.get("candidates", ""), re.M)
        return "\n".join(ids)

    def _synth_generate_sql(self, v: dict[str, str]) -> str:
        return "SELECT 1 AS placeholder"

    _synth_generate_sql_direct = _synth_generate_sql
    _synth_repair_sql = _synth_generate_sql

    def _synth_revision_instruction(self, v: dict[str, str]) -> str:
        return f"Align the query with the expected result ({variables_digest(v)[:8]})."

    def _synth_revise_sql(self, v: dict[str, str]) -> str:
        return v.get("wrong_sql", "SELECT 1")


# -- live gateway -------------------------------------------------------------------


@dataclass
class LiveConfig:
    url: str
    model: str
    key: str = ""
    embed_url: str = ""
    embed_model: str = ""
    embed_key: str = ""
    embed_dim: int = 0  # 0 = accept whatever the endpoint returns (fixed on first call)
    timeout_s: float = 60.0
    max_in_flight: int = 4

    @classmethod
    def from_env(cls) -> "LiveConfig | None":
        url = os.environ.get("SQLKNOW_LLM_URL", "")
        model = os.environ.get("SQLKNOW_LLM_MODEL", "")
        if not url or not model:
            return None
        return cls(
            url=url,
            model=model,
            key=os.environ.get("SQLKNOW_LLM_KEY", ""),
            embed_url=os.environ.get("SQLKNOW_EMBED_URL", url),
            embed_model=os.environ.get("SQLKNOW_EMBED_MODEL", model),
            embed_key=os.environ.get("SQLKNOW_EMBED_KEY", ""),
            embed_dim=int(os.environ.get("SQLKNOW_EMBED_DIM", "0")),
        )


class LiveGateway:
    """OpenAI-compatible chat/embeddings client."""

    provider = "Live"

    def __init__(self, config: LiveConfig, transport=None):
        import httpx

        self.config = config
        self.templates = template_registry()
        self.transcript: list[ChatExchange] = []
        self._lock = threading.Lock()
        self._slots = threading.Semaphore(config.max_in_flight)
        self._client = httpx.Client(timeout=config.timeout_s, transport=transport)
        self._dim = config.embed_dim or None

    @property
    def embed_dim(self) -> int:
        if self._dim is None:
            self.embed(["probe"])
        return int(self._dim or 0)

    def chat(self, template_id: str, variables: dict[str, str]) -> str:
        prompt = self.templates.render(template_id, variables)
        body = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        started = time.monotonic()
        data = self._post(f"{self.config.url.rstrip('/')}/chat/completions", body, self.config.key)
        try:
            response = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmError(f"malformed chat response: {data!r}") from exc
        exchange = ChatExchange(
            template_id, dict(variables), prompt, response,
            int((time.monotonic() - started) * 1000), self.provider,
        )
        with self._lock:
            self.transcript.append(exchange)
        return exchange.response_text

    def embed(self, texts: list[str]) -> np.ndarray:
        body = {"model": self.config.embed_model, "input": texts}
        url = f"{(self.config.embed_url or self.config.url).rstrip('/')}/embeddings"
        try:
            data = self._post(url, body, self.config.embed_key or self.config.key)
            vectors = np.array([item["embedding"] for item in data["data"]], dtype=float)
        except LlmError as exc:
            raise EmbeddingError(str(exc)) from exc
        except (KeyError, TypeError) as exc:
            raise EmbeddingError(f"malformed embeddings response") from exc
        if self._dim is None:
            self._dim = vectors.shape[1]
        elif vectors.shape[1] != self._dim:
            raise EmbeddingError(
                f"embedding dimension changed: {vectors.shape[1]} != {self._dim}"
            )
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return vectors / norms

    def _post(self, url: str, body: dict, key: str) -> dict:
        import httpx

        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        with self._slots:
            try:
                response = self._client.post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                raise LlmError(f"request to {url} failed: {exc}") from exc
        if response.status_code != 200:
            raise LlmError(f"{url} returned HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as exc:
            raise LlmError(f"{url} returned non-JSON body") from exc


def save_transcript(exchanges: list[ChatExchange], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for exchange in exchanges:
            fh.write(json.dumps(exchange.to_json(), ensure_ascii=False) + "\n")
