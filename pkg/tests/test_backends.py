"""Chat providers, embeddings, vector math, and the transcript log."""

from __future__ import annotations

import itertools
import math
import random

import pytest
import requests

from clinflow.backends import (
    ChatRequest,
    HashEmbedder,
    OpenAICompatProvider,
    RemoteEmbedder,
    ScriptedProvider,
    Turn,
    Vector,
    cosine,
    user_request,
)
from clinflow.errors import DimensionMismatch, ScriptMiss, TransportError
from conftest import make_gateway


def _req(text: str, tag: str = "t", **kwargs) -> ChatRequest:
    return user_request("system", text, tag, **kwargs)


class TestScriptedProvider:
    def test_registered_reply(self):
        provider = ScriptedProvider().register("referral_l1", "Internal Medicine")
        assert provider.chat(_req("anything", tag="referral_l1")).text == "Internal Medicine"

    def test_identical_requests_identical_responses(self):
        provider = ScriptedProvider().register("t", "stable")
        first = provider.chat(_req("same text"))
        second = provider.chat(_req("same text"))
        assert first == second

    def test_fingerprint_rule_beats_wildcard(self):
        request = _req("specific")
        provider = ScriptedProvider()
        provider.register("t", "generic")
        provider.register("t", "special", fingerprint=request.fingerprint())
        assert provider.chat(request).text == "special"
        assert provider.chat(_req("other")).text == "generic"

    def test_sequence_consumed_then_sticky(self):
        provider = ScriptedProvider().register("t", replies=["one", "two"])
        texts = [provider.chat(_req("x")).text for _ in range(4)]
        assert texts == ["one", "two", "two", "two"]

    def test_callable_script(self):
        provider = ScriptedProvider().register(
            "t", fn=lambda req: "yes" if "marker" in req.flat_text() else "no"
        )
        assert provider.chat(_req("with marker")).text == "yes"
        assert provider.chat(_req("without")).text == "no"

    def test_default_fallback_and_miss(self):
        provider = ScriptedProvider()
        with pytest.raises(ScriptMiss):
            provider.chat(_req("x"))
        provider.register_default("fallback")
        assert provider.chat(_req("x")).text == "fallback"

    def test_truncation_flag(self):
        provider = ScriptedProvider().register("t", "a b c d e f")
        response = provider.chat(_req("x", max_output_tokens=3))
        assert response.truncated
        assert response.text == "a b c"

    def test_no_network_calls(self):
        provider = ScriptedProvider().register("t", "reply")
        provider.chat(_req("x"))
        assert provider.network_calls == 0


class TestChatRequestValidation:
    def test_roles_must_alternate_starting_with_user(self):
        with pytest.raises(ValueError):
            ChatRequest(system_prompt="s", turns=(Turn("assistant", "a"),), tag="t")
        with pytest.raises(ValueError):
            ChatRequest(
                system_prompt="s",
                turns=(Turn("user", "u"), Turn("user", "u2")),
                tag="t",
            )
        ChatRequest(
            system_prompt="s",
            turns=(Turn("user", "u"), Turn("assistant", "a"), Turn("user", "u2")),
            tag="t",
        )

    def test_temperature_bounds(self):
        with pytest.raises(ValueError):
            _req("x", temperature=2.5)

    def test_empty_turns_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(system_prompt="s", turns=(), tag="t")


class TestCosine:
    def test_identity(self):
        vector = Vector((0.3, -0.2, 9.0))
        assert cosine(vector, vector) == 1.0

    def test_orthogonal(self):
        assert cosine(Vector((1.0, 0.0)), Vector((0.0, 1.0))) == 0.0

    def test_known_value(self):
        # sqrt(2)/2 for the 45-degree pair.
        assert cosine(Vector((1.0, 1.0)), Vector((1.0, 0.0))) == pytest.approx(
            0.70710678, abs=1e-8
        )

    def test_symmetry_and_scale_invariance(self):
        rng = random.Random(3)
        for _ in range(50):
            a = Vector(tuple(rng.uniform(-1, 1) for _ in range(8)))
            b = Vector(tuple(rng.uniform(-1, 1) for _ in range(8)))
            assert cosine(a, b) == cosine(b, a)
            k = rng.uniform(0.1, 10.0)
            scaled = Vector(tuple(k * v for v in a.values))
            assert cosine(scaled, b) == pytest.approx(cosine(a, b), abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            cosine(Vector((0.0, 0.0)), Vector((1.0, 0.0)))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine(Vector((1.0,)), Vector((1.0, 2.0)))

    def test_clamped_to_unit_interval(self):
        rng = random.Random(4)
        for _ in range(200):
            a = Vector(tuple(rng.uniform(-5, 5) for _ in range(4)))
            assert -1.0 <= cosine(a, a) <= 1.0


class TestHashEmbedder:
    def test_deterministic(self):
        embedder = HashEmbedder(dim=64)
        assert embedder.embed("fever and cough") == embedder.embed("fever and cough")

    def test_unit_norm(self):
        embedder = HashEmbedder(dim=64)
        for text in ("fever", "a b c d e", "numbers 123 and CAPS"):
            assert abs(embedder.embed(text).norm() - 1.0) <= 1e-9

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            HashEmbedder(dim=8).embed("   ")

    def test_fixture_texts_are_geometrically_separated(self, corpus):
        # Frozen regression bound computed once over the shipped fixture corpus.
        embedder = HashEmbedder(dim=256)
        texts = sorted({case.symptom_description for case in corpus})
        vectors = [embedder.embed(t) for t in texts]
        worst = max(
            cosine(a, b) for a, b in itertools.combinations(vectors, 2)
        )
        assert worst < 0.9

    def test_dim_positive(self):
        from clinflow.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            HashEmbedder(dim=0)


class TestRemoteProvider:
    def test_retries_then_transport_error(self):
        attempts = []

        def failing_transport(url, payload, headers, timeout):
            attempts.append(url)
            raise requests.ConnectionError("unreachable")

        provider = OpenAICompatProvider(
            "http://example.invalid/v1", "m", retries=2, transport=failing_transport,
            sleep=lambda _: None,
        )
        with pytest.raises(TransportError):
            provider.chat(_req("hello"))
        assert len(attempts) == 3
        assert provider.network_calls == 3

    def test_server_errors_retried_client_errors_not(self):
        codes = iter([500, 200])

        def flaky(url, payload, headers, timeout):
            status = next(codes)
            if status == 200:
                return 200, {
                    "choices": [{"message": {"content": "ok"}, "finish_reason": "stop"}],
                    "usage": {"prompt_tokens": 5, "completion_tokens": 1},
                }
            return status, {"error": "boom"}

        provider = OpenAICompatProvider(
            "http://example.invalid/v1", "m", retries=3, transport=flaky, sleep=lambda _: None
        )
        assert provider.chat(_req("x")).text == "ok"

        def denied(url, payload, headers, timeout):
            return 401, {"error": "no"}

        provider = OpenAICompatProvider(
            "http://example.invalid/v1", "m", retries=3, transport=denied, sleep=lambda _: None
        )
        with pytest.raises(TransportError):
            provider.chat(_req("x"))
        assert provider.network_calls == 1

    def test_parses_usage_and_truncation(self):
        def transport(url, payload, headers, timeout):
            assert url.endswith("/chat/completions")
            assert payload["temperature"] == 0.0
            return 200, {
                "choices": [{"message": {"content": "cut"}, "finish_reason": "length"}],
                "usage": {"prompt_tokens": 7, "completion_tokens": 9},
            }

        provider = OpenAICompatProvider("http://example.invalid/v1", "m", transport=transport)
        response = provider.chat(_req("x"))
        assert response.usage == (7, 9)
        assert response.truncated

    def test_remote_embedder_dim_mismatch(self):
        def transport(url, payload, headers, timeout):
            return 200, {"data": [{"embedding": [0.1, 0.2, 0.3]}]}

        embedder = RemoteEmbedder("http://example.invalid/v1", "e", dim=8, transport=transport)
        with pytest.raises(DimensionMismatch):
            embedder.embed("text")


class TestGatewayTranscript:
    def test_every_call_logged(self):
        gateway = make_gateway(ScriptedProvider().register("t", "r"))
        for i in range(4):
            gateway.chat(_req(f"text {i}"))
        gateway.embed("some text")
        assert gateway.transcript.count("chat") == 4
        assert gateway.transcript.count("embed") == 1
        assert gateway.transcript.count() == 5

    def test_error_calls_logged_too(self):
        gateway = make_gateway(ScriptedProvider())
        with pytest.raises(ScriptMiss):
            gateway.chat(_req("x"))
        assert gateway.transcript.count("chat") == 1
        assert "error" in gateway.transcript.entries[0]

    def test_role_override_routing(self):
        default = ScriptedProvider().register("t", "from default")
        patient = ScriptedProvider().register("t", "from patient")
        gateway = make_gateway(default, role_providers={"patient": patient})
        assert gateway.chat(_req("x"), role="general").text == "from default"
        assert gateway.chat(_req("x"), role="patient").text == "from patient"

    def test_entries_carry_request_hash_and_wall_time(self):
        gateway = make_gateway(ScriptedProvider().register("t", "r"))
        gateway.chat(_req("abc"), case_id="case-1")
        entry = gateway.transcript.entries[0]
        assert entry["case_id"] == "case-1"
        assert len(entry["request_hash"]) == 16
        assert entry["wall_time"] > 0

    def test_jsonl_mirror(self, tmp_path):
        from clinflow.backends import TranscriptLog, Gateway, HashEmbedder, TickClock

        path = tmp_path / "transcript.jsonl"
        gateway = Gateway(
            ScriptedProvider().register("t", "r"),
            embedder=HashEmbedder(8),
            transcript=TranscriptLog(path),
            clock=TickClock(),
        )
        gateway.chat(_req("x"))
        gateway.embed("y")
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2
