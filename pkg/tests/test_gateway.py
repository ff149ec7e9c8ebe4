"""Gateway behavior: mock determinism, fixtures, embeddings, live client."""

from __future__ import annotations

import json

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from sqlknow.errors import EmbeddingError, LlmError, MissingVariableError
from sqlknow.gateway import (
    HashingEmbedder,
    LiveConfig,
    LiveGateway,
    MockFixture,
    MockGateway,
    save_transcript,
    template_registry,
)

JOIN_FRAGMENT = (
    "FROM atom AS T1 INNER JOIN molecule AS T2 ON T1.molecule_id = T2.molecule_id"
)


class TestTemplates:
    def test_all_templates_load(self):
        registry = template_registry()
        assert {"describe_column", "generate_sql", "revise_sql"} <= set(registry.ids())

    def test_missing_variable_named(self, gateway):
        with pytest.raises(MissingVariableError) as err:
            gateway.chat("describe_column", {"table": "molecule"})
        assert err.value.name in ("column", "col_type", "sample_values", "aliases")

    def test_unknown_template(self, gateway):
        with pytest.raises(LlmError):
            gateway.chat("no_such_template", {})

    def test_fingerprint_stable(self):
        assert template_registry().fingerprint() == template_registry().fingerprint()


class TestMockChat:
    def test_same_inputs_byte_identical(self, gateway):
        variables = {"instruction": "count the molecules"}
        first = gateway.chat("extract_keywords", variables)
        second = gateway.chat("extract_keywords", variables)
        assert first == second

    def test_join_fragment_fixture(self, gateway):
        response = gateway.chat(
            "describe_fragment",
            {"kind": "Relation", "fragment_sql": JOIN_FRAGMENT,
             "parent_sql": "SELECT 1", "dictionary": ""},
        )
        assert response == (
            "Join atoms and molecules to filter molecules with known carcinogenicity."
        )

    def test_fallback_echo_format(self, gateway):
        response = gateway.chat("revision_instruction", {"wrong_sql": "SELECT 2",
                                                         "truth_sql": "SELECT 3"})
        assert response  # synthesizer path
        raw = MockGateway(load_packaged=False).chat(
            "reconstruct_sql",
            {"script_description": "x", "fragments": "", "schema": "", "dictionary": ""},
        )
        assert raw.startswith("[mock:reconstruct_sql:")

    def test_user_fixture_overrides_synthesizer(self):
        fixture = MockFixture(
            template_id="extract_keywords",
            variables={"instruction": "special"},
            response="only-this",
        )
        gw = MockGateway(fixtures=[fixture])
        assert gw.chat("extract_keywords", {"instruction": "special"}) == "only-this"

    def test_subset_key_fixture(self):
        fixture = MockFixture(
            template_id="describe_script",
            variables={"sql": "SELECT 9"},
            response="pinned",
            key_fields=["sql"],
        )
        gw = MockGateway(fixtures=[fixture])
        out = gw.chat("describe_script", {"sql": "SELECT 9", "dictionary": "anything"})
        assert out == "pinned"

    def test_keyword_synthesizer_splits_concepts(self, gateway):
        text = gateway.chat(
            "extract_keywords",
            {"instruction": "Show me number of non-carcinogenic molecules with non-bonding element"},
        )
        keywords = text.splitlines()
        assert "non-carcinogenic molecules" in keywords
        assert "non-bonding element" in keywords

    def test_transcript_records_exchanges(self, gateway):
        gateway.chat("extract_keywords", {"instruction": "hi"})
        exchange = gateway.transcript[-1]
        assert exchange.template_id == "extract_keywords"
        assert exchange.provider == "Mock"
        assert "hi" in exchange.rendered_prompt

    def test_transcript_round_trips_to_jsonl(self, gateway, tmp_path):
        gateway.chat("extract_keywords", {"instruction": "hi"})
        path = tmp_path / "transcript.jsonl"
        save_transcript(gateway.transcript, str(path))
        lines = [json.loads(x) for x in path.read_text().splitlines()]
        assert lines[0]["template_id"] == "extract_keywords"


class TestEmbeddings:
    def test_deterministic(self, embedder):
        a = embedder.embed(["non-bonding element"])
        b = embedder.embed(["non-bonding element"])
        assert np.array_equal(a, b)

    @given(st.lists(st.text(alphabet="abcdefg hij", min_size=1).filter(str.strip),
                    min_size=1, max_size=8))
    def test_unit_norm(self, texts):
        vectors = HashingEmbedder().embed(texts)
        norms = np.linalg.norm(vectors, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)

    def test_relatedness_ordering(self, embedder):
        v = embedder.embed(
            ["non-bonding element", "non-bonding elements", "average order value"]
        )
        assert float(v[0] @ v[1]) > float(v[0] @ v[2])

    def test_empty_text_rejected(self, embedder):
        with pytest.raises(EmbeddingError):
            embedder.embed(["ok", "   "])

    def test_dimension(self):
        assert HashingEmbedder(dim=64).embed(["x"]).shape == (1, 64)


def _mock_transport(handler):
    return httpx.MockTransport(handler)


class TestLiveGateway:
    def config(self):
        return LiveConfig(url="http://llm.test/v1", model="m1", key="k",
                          embed_model="e1", embed_dim=4)

    def test_chat_request_and_response(self):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["body"] = json.loads(request.content)
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json={
                "choices": [{"message": {"content": "SELECT 1"}}]
            })

        gw = LiveGateway(self.config(), transport=_mock_transport(handler))
        out = gw.chat("revise_sql", {"wrong_sql": "SELECT 0", "instruction": "fix"})
        assert out == "SELECT 1"
        assert seen["url"] == "http://llm.test/v1/chat/completions"
        assert seen["body"]["model"] == "m1"
        assert seen["body"]["temperature"] == 0
        assert seen["auth"] == "Bearer k"
        assert gw.transcript[-1].provider == "Live"

    def test_http_error_maps_to_llm_error(self):
        def handler(request):
            return httpx.Response(500, text="boom")

        gw = LiveGateway(self.config(), transport=_mock_transport(handler))
        with pytest.raises(LlmError):
            gw.chat("revise_sql", {"wrong_sql": "x", "instruction": "y"})

    def test_embeddings_normalized_and_dim_checked(self):
        def handler(request):
            body = json.loads(request.content)
            return httpx.Response(200, json={
                "data": [{"embedding": [2.0, 0.0, 0.0, 0.0]} for _ in body["input"]]
            })

        gw = LiveGateway(self.config(), transport=_mock_transport(handler))
        vectors = gw.embed(["a", "b"])
        assert vectors.shape == (2, 4)
        assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0)

    def test_embedding_dim_mismatch(self):
        def handler(request):
            return httpx.Response(200, json={"data": [{"embedding": [1.0, 0.0]}]})

        gw = LiveGateway(self.config(), transport=_mock_transport(handler))
        with pytest.raises(EmbeddingError):
            gw.embed(["a"])

    def test_env_config(self, monkeypatch):
        monkeypatch.delenv("SQLKNOW_LLM_URL", raising=False)
        assert LiveConfig.from_env() is None
        monkeypatch.setenv("SQLKNOW_LLM_URL", "http://x/v1")
        monkeypatch.setenv("SQLKNOW_LLM_MODEL", "m")
        monkeypatch.setenv("SQLKNOW_EMBED_DIM", "8")
        config = LiveConfig.from_env()
        assert config is not None
        assert config.embed_dim == 8
        assert config.embed_url == "http://x/v1"
