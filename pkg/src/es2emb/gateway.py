"""HTTP client for a chat-completion server, with retries and a disk response cache.

Wire contracts:
  POST <base>/v1/chat/completions  body {model, messages, temperature, seed, max_tokens}
                                   reply {choices: [{message: {content}}]}
  POST <base>/v1/hidden_states     body {model, text}
                                   reply {tokens: T, dim: d, layers: [[[f32; d]; T]; L+1]}

Cache entries live at <cache_dir>/<first-2-hex>/<digest>.json and are written
atomically (temp file + link), so a crash between fetch and persist never
leaves a readable partial entry and concurrent writers have a single winner.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

log = logging.getLogger(__name__)


class GatewayError(RuntimeError):
    pass


class PermanentGatewayError(GatewayError):
    """4xx response; retrying cannot help."""


class TransportError(GatewayError):
    """Transient failures exhausted the retry budget."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class ContentError(GatewayError):
    """The server answered but the payload is unusable."""


class ProtocolError(GatewayError):
    """The server broke the hidden-states wire contract."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad role {self.role!r}")
        if not self.content:
            raise ValueError("empty message content")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.7
    seed: int | None = None
    max_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("need at least one user message")

    def body(self) -> dict:
        return {
            "model": self.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "seed": self.seed,
            "max_tokens": self.max_tokens,
        }


def cache_key(request: ChatRequest) -> str:
    """Digest of the canonical request encoding; whitespace of any wire form is irrelevant."""
    canonical = json.dumps(request.body(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://127.0.0.1:8000"
    model_id: str = "default"
    timeout: float = 30.0
    retries: int = 3
    backoff_base: float = 1.0
    backoff_jitter: float = 0.2
    temperature: float = 0.7
    max_tokens: int = 4096
    in_flight: int = 4


class HttpGateway:
    """Shareable chat client; counts every network request it makes."""

    def __init__(self, config: EndpointConfig):
        self.config = config
        self.request_count = 0
        self._jitter = random.Random(0x5EED)

    def _sleep_before_retry(self, attempt: int) -> None:
        base = self.config.backoff_base * (2 ** (attempt - 1))
        jitter = 1.0 + self.config.backoff_jitter * (2.0 * self._jitter.random() - 1.0)
        time.sleep(base * jitter)

    def _post(self, path: str, payload: dict, on_reply):
        url = self.config.base_url.rstrip("/") + path
        last_error = "no attempt made"
        attempts = 0
        for attempt in range(1, self.config.retries + 1):
            attempts = attempt
            self.request_count += 1
            try:
                reply = requests.post(url, json=payload, timeout=self.config.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = f"transport failure: {exc}"
            else:
                if 400 <= reply.status_code < 500:
                    raise PermanentGatewayError(f"HTTP {reply.status_code} from {url}")
                if reply.status_code == 200:
                    return on_reply(reply)
                last_error = f"HTTP {reply.status_code}"
            if attempt < self.config.retries:
                self._sleep_before_retry(attempt)
        raise TransportError(last_error, attempts)

    def complete(self, request: ChatRequest) -> str:
        def on_reply(reply) -> str:
            try:
                content = reply.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ContentError(f"malformed completion payload: {exc}") from None
            if not content:
                raise ContentError("empty completion")
            return content

        return self._post("/v1/chat/completions", request.body(), on_reply)

    def hidden_states(self, text: str, model_id: str) -> tuple[np.ndarray, int]:
        def on_reply(reply):
            try:
                payload = reply.json()
                tokens = int(payload["tokens"])
                dim = int(payload["dim"])
                layers = payload["layers"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ProtocolError(f"malformed hidden-states payload: {exc}") from None
            if tokens < 1:
                raise ContentError("hidden-states reply has zero tokens")
            mats = []
            for idx, layer in enumerate(layers):
                arr = np.asarray(layer, dtype=np.float64)
                if arr.shape != (tokens, dim):
                    raise ProtocolError(
                        f"layer {idx} has shape {arr.shape}, expected {(tokens, dim)}"
                    )
                mats.append(arr)
            if not mats:
                raise ProtocolError("hidden-states reply has no layers")
            return np.stack(mats), tokens

        return self._post("/v1/hidden_states", {"model": model_id, "text": text}, on_reply)


def chat_complete(request: ChatRequest, endpoint: EndpointConfig | HttpGateway) -> str:
    gateway = endpoint if isinstance(endpoint, HttpGateway) else HttpGateway(endpoint)
    return gateway.complete(request)


def hidden_states_remote(
    text: str, model_id: str, endpoint: EndpointConfig | HttpGateway
) -> tuple[np.ndarray, int]:
    """Fetch the (L+1, T, d) hidden-state stack for a text from a remote server."""
    gateway = endpoint if isinstance(endpoint, HttpGateway) else HttpGateway(endpoint)
    return gateway.hidden_states(text, model_id)


class ResponseCache:
    """Persistent completion cache keyed by the canonical request digest."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.json"

    def get(self, digest: str) -> str | None:
        path = self._path(digest)
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            stored = entry["digest"]
            text = entry["response"]
        except FileNotFoundError:
            return None
        except (ValueError, KeyError, TypeError):
            log.warning("[cache] corrupt entry %s; treating as miss", path)
            path.unlink(missing_ok=True)
            return None
        if stored != digest or not isinstance(text, str):
            log.warning("[cache] digest mismatch in %s; treating as miss", path)
            path.unlink(missing_ok=True)
            return None
        return text

    def put(self, digest: str, text: str) -> str:
        """Persist atomically; on a lost race returns the winning entry's text."""
        path = self._path(digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = {
            "digest": digest,
            "response": text,
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        tmp = path.parent / f".{digest}.{os.getpid()}.{id(entry):x}.tmp"
        tmp.write_text(json.dumps(entry, ensure_ascii=False), encoding="utf-8")
        try:
            os.link(tmp, path)
        except FileExistsError:
            existing = self.get(digest)
            if existing is not None:
                return existing
            os.replace(tmp, path)  # the racing entry was corrupt; replace it
            return text
        finally:
            tmp.unlink(missing_ok=True)
        return text


def cached_chat_complete(
    request: ChatRequest, cache: ResponseCache, gateway
) -> tuple[str, bool]:
    """(completion text, cache_hit). A hit makes no network call at all."""
    digest = cache_key(request)
    hit = cache.get(digest)
    if hit is not None:
        return hit, True
    text = gateway.complete(request)
    return cache.put(digest, text), False


_STUB_HEADERS = (
    "=== Rendition {seed} ===",
    "--- Transformed view {seed} ---",
    "## Restyled listing {seed}",
)


class StubGateway:
    """Deterministic offline stand-in for the chat server.

    Echoes the tail of the user message (the appended document) under a
    seed-dependent banner, so every source value survives verbatim and
    distinct seeds give distinct documents.
    """

    def __init__(self):
        self.request_count = 0

    def complete(self, request: ChatRequest) -> str:
        self.request_count += 1
        user = next(m for m in reversed(request.messages) if m.role == "user")
        content = user.content
        split = content.find("\n\n")
        block = content[split + 2 :] if split != -1 else content
        seed = request.seed if request.seed is not None else 0
        header = _STUB_HEADERS[seed % len(_STUB_HEADERS)].format(seed=seed)
        return f"{header}\n{block}"
