from __future__ import annotations

import json
import os
import threading

import numpy as np
import pytest

from es2emb.gateway import (
    ChatMessage,
    ChatRequest,
    ContentError,
    EndpointConfig,
    HttpGateway,
    PermanentGatewayError,
    ProtocolError,
    ResponseCache,
    StubGateway,
    TransportError,
    cache_key,
    cached_chat_complete,
    chat_complete,
    hidden_states_remote,
)
from es2emb.tinylm import LMConfig, TinyLM, tokenize
from tests.stub_servers import HiddenStateServer, ScriptedChatServer

FAST = dict(timeout=2.0, retries=3, backoff_base=0.01)


def make_request(content="hello", seed=None, temperature=0.7):
    return ChatRequest(
        model_id="m1",
        messages=(ChatMessage("system", "sys"), ChatMessage("user", content)),
        temperature=temperature,
        seed=seed,
        max_tokens=64,
    )


class TestChatComplete:
    def test_echoes_fixed_text(self):
        with ScriptedChatServer([("ok", "fixed reply")]) as server:
            text = chat_complete(make_request(), EndpointConfig(base_url=server.base_url, **FAST))
        assert text == "fixed reply"

    def test_retries_then_succeeds_with_attempt_count(self):
        with ScriptedChatServer([("status", 500), ("status", 503), ("ok", "late")]) as server:
            gateway = HttpGateway(EndpointConfig(base_url=server.base_url, **FAST))
            assert gateway.complete(make_request()) == "late"
            assert gateway.request_count == 3

    def test_4xx_is_permanent_single_attempt(self):
        with ScriptedChatServer([("status", 401)]) as server:
            gateway = HttpGateway(EndpointConfig(base_url=server.base_url, **FAST))
            with pytest.raises(PermanentGatewayError, match="401"):
                gateway.complete(make_request())
            assert server.calls == 1

    def test_exhausted_retries_report_attempts(self):
        with ScriptedChatServer([("status", 500)]) as server:
            gateway = HttpGateway(EndpointConfig(base_url=server.base_url, **FAST))
            with pytest.raises(TransportError) as info:
                gateway.complete(make_request())
        assert info.value.attempts == 3

    def test_dropped_connection_is_transient(self):
        with ScriptedChatServer([("drop",), ("ok", "recovered")]) as server:
            gateway = HttpGateway(EndpointConfig(base_url=server.base_url, **FAST))
            assert gateway.complete(make_request()) == "recovered"

    def test_empty_completion_is_content_error(self):
        with ScriptedChatServer([("empty",)]) as server:
            with pytest.raises(ContentError, match="empty"):
                chat_complete(make_request(), EndpointConfig(base_url=server.base_url, **FAST))

    def test_wire_body_shape(self):
        with ScriptedChatServer([("ok", "x")]) as server:
            chat_complete(make_request(seed=5), EndpointConfig(base_url=server.base_url, **FAST))
            body = server.bodies[0]
        assert body == {
            "model": "m1",
            "messages": [
                {"role": "system", "content": "sys"},
                {"role": "user", "content": "hello"},
            ],
            "temperature": 0.7,
            "seed": 5,
            "max_tokens": 64,
        }


class TestCacheKey:
    def test_equal_requests_equal_keys(self):
        assert cache_key(make_request(seed=1)) == cache_key(make_request(seed=1))

    def test_any_field_change_changes_key(self):
        base = make_request(seed=1)
        assert cache_key(base) != cache_key(make_request(seed=2))
        assert cache_key(base) != cache_key(make_request(content="other", seed=1))
        assert cache_key(base) != cache_key(make_request(seed=1, temperature=0.1))

    def test_wire_whitespace_is_insignificant(self):
        body = make_request(seed=3).body()
        pretty = json.dumps(body, indent=4)
        compact = json.dumps(body, separators=(",", ":"))
        def key_from(raw):
            decoded = json.loads(raw)
            request = ChatRequest(
                model_id=decoded["model"],
                messages=tuple(ChatMessage(m["role"], m["content"]) for m in decoded["messages"]),
                temperature=decoded["temperature"],
                seed=decoded["seed"],
                max_tokens=decoded["max_tokens"],
            )
            return cache_key(request)
        assert key_from(pretty) == key_from(compact)


class TestResponseCache:
    def test_second_call_hits_without_network(self, tmp_path):
        cache = ResponseCache(tmp_path)
        with ScriptedChatServer([("ok", "cached text")]) as server:
            gateway = HttpGateway(EndpointConfig(base_url=server.base_url, **FAST))
            text1, hit1 = cached_chat_complete(make_request(), cache, gateway)
            text2, hit2 = cached_chat_complete(make_request(), cache, gateway)
        assert (hit1, hit2) == (False, True)
        assert text1 == text2 == "cached text"
        assert gateway.request_count == 1

    def test_distinct_seeds_distinct_entries(self, tmp_path):
        cache = ResponseCache(tmp_path)
        stub = StubGateway()
        cached_chat_complete(make_request(seed=0), cache, stub)
        cached_chat_complete(make_request(seed=1), cache, stub)
        entries = list(tmp_path.rglob("*.json"))
        assert len(entries) == 2

    def test_corrupt_entry_treated_as_miss_and_rewritten(self, tmp_path, caplog):
        cache = ResponseCache(tmp_path)
        stub = StubGateway()
        digest = cache_key(make_request())
        cached_chat_complete(make_request(), cache, stub)
        path = tmp_path / digest[:2] / f"{digest}.json"
        path.write_text('{"digest": "tampered", "response": "bad"}', encoding="utf-8")
        with caplog.at_level("WARNING"):
            text, hit = cached_chat_complete(make_request(), cache, stub)
        assert not hit
        assert "mismatch" in caplog.text
        assert json.loads(path.read_text())["digest"] == digest

    def test_crash_between_fetch_and_persist_leaves_no_entry(self, tmp_path, monkeypatch):
        cache = ResponseCache(tmp_path)
        stub = StubGateway()
        real_link = os.link

        def exploding_link(src, dst, **kwargs):
            raise RuntimeError("crash injected")

        monkeypatch.setattr(os, "link", exploding_link)
        with pytest.raises(RuntimeError, match="crash injected"):
            cached_chat_complete(make_request(), cache, stub)
        monkeypatch.setattr(os, "link", real_link)
        digest = cache_key(make_request())
        assert cache.get(digest) is None
        assert not (tmp_path / digest[:2] / f"{digest}.json").exists()
        text, hit = cached_chat_complete(make_request(), cache, stub)
        assert not hit and text

    def test_concurrent_misses_single_entry_same_text(self, tmp_path):
        cache = ResponseCache(tmp_path)
        stub = StubGateway()
        request = make_request(content="race me")
        results: list[str] = []
        barrier = threading.Barrier(8)

        def worker():
            barrier.wait()
            text, _ = cached_chat_complete(request, cache, stub)
            results.append(text)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(set(results)) == 1
        assert len(list(tmp_path.rglob("*.json"))) == 1


class TestStubGateway:
    def test_echoes_appended_block_and_counts(self):
        stub = StubGateway()
        request = make_request(content="prompt text\n\nheader|x\n1, 2")
        text = stub.complete(request)
        assert text.endswith("header|x\n1, 2")
        assert "0" in text.split("\n")[0]
        assert stub.request_count == 1

    def test_distinct_seeds_distinct_texts(self):
        stub = StubGateway()
        texts = {
            stub.complete(make_request(content="p\n\nblock", seed=s)) for s in range(7)
        }
        assert len(texts) == 7


HS_CFG = LMConfig(n_layers=2, hidden_dim=8, n_heads=2, context_len=32, vocab_size=257, seed=5)


class TestHiddenStatesRemote:
    def test_fixture_echo(self):
        model = TinyLM(HS_CFG)
        with HiddenStateServer(model) as server:
            stack, tokens = hidden_states_remote(
                "abc", "tiny", EndpointConfig(base_url=server.base_url, **FAST)
            )
        expected = model.forward(tokenize("abc")).hidden
        assert tokens == 4
        assert stack.shape == expected.shape
        assert np.allclose(stack, expected, atol=1e-9)

    def test_ragged_layer_is_protocol_error(self):
        def mangle(payload):
            payload["layers"][1] = [row[:-1] for row in payload["layers"][1]]
            return payload

        with HiddenStateServer(TinyLM(HS_CFG), mangle) as server:
            with pytest.raises(ProtocolError, match="layer 1"):
                hidden_states_remote("abc", "tiny", EndpointConfig(base_url=server.base_url, **FAST))

    def test_zero_tokens_is_content_error(self):
        def mangle(payload):
            payload["tokens"] = 0
            payload["layers"] = [[] for _ in payload["layers"]]
            return payload

        with HiddenStateServer(TinyLM(HS_CFG), mangle) as server:
            with pytest.raises(ContentError, match="zero tokens"):
                hidden_states_remote("abc", "tiny", EndpointConfig(base_url=server.base_url, **FAST))


class TestRequestValidation:
    def test_needs_user_message(self):
        with pytest.raises(ValueError, match="user message"):
            ChatRequest("m", (ChatMessage("system", "s"),))

    def test_rejects_empty_content(self):
        with pytest.raises(ValueError, match="empty"):
            ChatMessage("user", "")
