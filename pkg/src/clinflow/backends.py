"""Model backends: chat completion, text embedding, and vector math.

Two interchangeable chat providers share one interface: an HTTP provider
speaking the OpenAI-compatible wire format, and a scripted provider that
replays registered replies for fully offline, deterministic runs. Every
chat and embed call is appended to a transcript log before the response
is returned to the caller.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import requests

from .cases import ImageRef
from .errors import (
    BackendError,
    ConfigurationError,
    DimensionMismatch,
    ScriptMiss,
    StorageError,
    TransportError,
)

DEFAULT_MAX_OUTPUT_TOKENS = 1024
DEFAULT_RETRIES = 3
DEFAULT_EMBED_DIM = 256


# ---------------------------------------------------------------------------
# Vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vector:
    """Fixed-length real vector with finite components."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("vector must have at least one component")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("vector components must be finite")

    @property
    def dim(self) -> int:
        return len(self.values)

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.values))


def cosine(a: Vector, b: Vector) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding.

    The denominator is sqrt(dot(a,a) * dot(b,b)) so identical vectors score
    exactly 1.0."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"cosine over dims {a.dim} and {b.dim}")
    dot_aa = sum(x * x for x in a.values)
    dot_bb = sum(x * x for x in b.values)
    if dot_aa == 0.0 or dot_bb == 0.0:
        raise ValueError("cosine is undefined for a zero vector")
    dot = sum(x * y for x, y in zip(a.values, b.values))
    return max(-1.0, min(1.0, dot / math.sqrt(dot_aa * dot_bb)))


# ---------------------------------------------------------------------------
# Requests and responses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    images: tuple[ImageRef, ...] = ()


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion request; `tag` identifies the stage/agent for logs and scripts."""

    system_prompt: str
    turns: tuple[Turn, ...]
    tag: str
    temperature: float = 0.0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValueError("chat request needs at least one turn")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        for i, turn in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if turn.role != expected:
                raise ValueError(
                    f"turn {i} must have role {expected!r}, got {turn.role!r}"
                )

    def flat_text(self) -> str:
        parts = [f"[system]\n{self.system_prompt}"]
        for turn in self.turns:
            parts.append(f"[{turn.role}]\n{turn.text}")
            for img in turn.images:
                parts.append(f"[image: {img.uri} ({img.modality_tag})]")
        return "\n".join(parts)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.flat_text().encode("utf-8")).hexdigest()[:16]


def user_request(system_prompt: str, text: str, tag: str, images: Sequence[ImageRef] = (),
                 **kwargs) -> ChatRequest:
    return ChatRequest(
        system_prompt=system_prompt,
        turns=(Turn("user", text, tuple(images)),),
        tag=tag,
        **kwargs,
    )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: tuple[int, int]
    provider_id: str
    truncated: bool = False


def _word_count(text: str) -> int:
    return len(text.split())


# ---------------------------------------------------------------------------
# Chat providers
# ---------------------------------------------------------------------------

class ChatProvider:
    provider_id = "abstract"
    supports_images = False
    network_calls = 0

    def chat(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


ScriptFn = Callable[[ChatRequest], str]


class _Script:
    """A reply source: a sequence consumed in order (last reply sticks) or a callable."""

    def __init__(self, replies: Sequence[str] | None = None, fn: ScriptFn | None = None):
        if (replies is None) == (fn is None):
            raise ConfigurationError("script needs exactly one of replies or fn")
        self._replies = list(replies) if replies is not None else None
        self._fn = fn

    def next_reply(self, request: ChatRequest) -> str:
        if self._fn is not None:
            return self._fn(request)
        assert self._replies is not None
        if len(self._replies) > 1:
            return self._replies.pop(0)
        return self._replies[0]


class ScriptedProvider(ChatProvider):
    """Deterministic offline provider replaying registered replies.

    Lookup order: (tag, request fingerprint), then (tag, "*"), then the
    provider default. A miss raises ScriptMiss, which is a test failure
    signal rather than a recoverable condition.
    """

    provider_id = "scripted"
    supports_images = True

    def __init__(self, supports_images: bool = True):
        self.supports_images = supports_images
        self._rules: dict[tuple[str, str], _Script] = {}
        self._default: _Script | None = None
        self._lock = threading.Lock()

    def register(
        self,
        tag: str,
        reply: str | None = None,
        *,
        replies: Sequence[str] | None = None,
        fn: ScriptFn | None = None,
        fingerprint: str = "*",
    ) -> "ScriptedProvider":
        if reply is not None:
            replies = [reply]
        self._rules[(tag, fingerprint)] = _Script(replies=replies, fn=fn)
        return self

    def register_default(self, reply: str | None = None, fn: ScriptFn | None = None) -> None:
        self._default = _Script(replies=[reply] if reply is not None else None, fn=fn)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        path = Path(path)
        if not path.exists():
            raise StorageError(f"script file does not exist: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        provider = cls()
        if raw.get("default") is not None:
            provider.register_default(raw["default"])
        for rule in raw.get("rules", []):
            provider.register(
                rule["tag"],
                reply=rule.get("reply"),
                replies=rule.get("replies"),
                fingerprint=rule.get("fingerprint", "*"),
            )
        return provider

    def chat(self, request: ChatRequest) -> ChatResponse:
        fingerprint = request.fingerprint()
        with self._lock:
            script = (
                self._rules.get((request.tag, fingerprint))
                or self._rules.get((request.tag, "*"))
                or self._default
            )
            if script is None:
                raise ScriptMiss(request.tag, fingerprint)
            reply = script.next_reply(request)
        truncated = False
        words = reply.split()
        if len(words) > request.max_output_tokens:
            reply = " ".join(words[: request.max_output_tokens])
            truncated = True
        return ChatResponse(
            text=reply,
            usage=(_word_count(request.flat_text()), _word_count(reply)),
            provider_id=self.provider_id,
            truncated=truncated,
        )


_MIME_BY_SUFFIX = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg",
                   ".gif": "image/gif", ".webp": "image/webp"}


def _image_url(image: ImageRef) -> str:
    if re.match(r"^https?://", image.uri):
        return image.uri
    path = Path(image.uri)
    mime = _MIME_BY_SUFFIX.get(path.suffix.lower(), "application/octet-stream")
    if path.exists():
        payload = base64.b64encode(path.read_bytes()).decode("ascii")
    else:
        # Missing local files degrade to a caption-only placeholder payload.
        payload = base64.b64encode(image.uri.encode("utf-8")).decode("ascii")
    return f"data:{mime};base64,{payload}"


Transport = Callable[[str, dict, dict, float], tuple[int, dict]]


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float):
    response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    try:
        body = response.json()
    except ValueError:
        body = {}
    return response.status_code, body


class OpenAICompatProvider(ChatProvider):
    """Remote provider speaking the OpenAI-compatible chat completion format."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        retries: int = DEFAULT_RETRIES,
        backoff: float = 0.5,
        supports_images: bool = True,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.supports_images = supports_images
        self.provider_id = f"openai-compat:{model}"
        self.network_calls = 0
        self._transport = transport or _requests_transport
        self._sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _messages(self, request: ChatRequest) -> list[dict]:
        messages: list[dict] = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        for turn in request.turns:
            if turn.images:
                content: list[dict] = [{"type": "text", "text": turn.text}]
                for image in turn.images:
                    content.append(
                        {"type": "image_url", "image_url": {"url": _image_url(image)}}
                    )
                messages.append({"role": turn.role, "content": content})
            else:
                messages.append({"role": turn.role, "content": turn.text})
        return messages

    def _post_with_retries(self, url: str, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                self.network_calls += 1
                status, body = self._transport(url, payload, self._headers(), self.timeout)
                if status == 200:
                    return body
                last_error = BackendError(f"HTTP {status}: {json.dumps(body)[:200]}")
                if status not in (408, 409, 429) and status < 500:
                    break  # non-transient; do not retry
            except requests.RequestException as exc:
                last_error = exc
            if attempt < self.retries:
                self._sleep(self.backoff * (2**attempt))
        raise TransportError(f"request to {url} failed after {self.retries + 1} attempts: {last_error}")

    def chat(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": self._messages(request),
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        body = self._post_with_retries(f"{self.base_url}/chat/completions", payload)
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            finish = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat completion response: {exc}") from exc
        usage = body.get("usage", {})
        return ChatResponse(
            text=text,
            usage=(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
            provider_id=self.provider_id,
            truncated=finish == "length",
        )


# ---------------------------------------------------------------------------
# Embedding providers
# ---------------------------------------------------------------------------

class HashEmbedder:
    """Deterministic feature-hash embedding for offline retrieval geometry.

    Tokens are split on non-alphanumerics, hashed to a signed bucket, and the
    accumulated vector is L2-normalized. Not a semantic embedding; it exists
    so the case store has stable geometry without a model.
    """

    deterministic = True

    def __init__(self, dim: int = DEFAULT_EMBED_DIM):
        if dim <= 0:
            raise ConfigurationError("embedding dim must be positive")
        self.dim = dim
        self.fingerprint = f"feature-hash:{dim}"

    def embed(self, text: str) -> Vector:
        if not text.strip():
            raise ValueError("cannot embed empty text")
        values = [0.0] * self.dim
        tokens = [t for t in re.split(r"[^0-9a-z]+", text.casefold()) if t]
        for token in tokens:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "big") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            values[bucket] += sign
        norm = math.sqrt(sum(v * v for v in values))
        if norm == 0.0:
            # Signs cancelled exactly; fall back to a single whole-text bucket.
            digest = hashlib.sha256(text.casefold().encode("utf-8")).digest()
            values[int.from_bytes(digest[:4], "big") % self.dim] = 1.0
            norm = 1.0
        return Vector(tuple(v / norm for v in values))


class RemoteEmbedder:
    """Embedding via an OpenAI-compatible /embeddings endpoint."""

    deterministic = False

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        retries: int = DEFAULT_RETRIES,
        dim: int | None = None,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._http = OpenAICompatProvider(
            base_url, model, api_key_env, timeout, retries, transport=transport, sleep=sleep
        )
        self.dim = dim
        self.fingerprint = f"remote:{model}"

    @property
    def network_calls(self) -> int:
        return self._http.network_calls

    def embed(self, text: str) -> Vector:
        if not text.strip():
            raise ValueError("cannot embed empty text")
        body = self._http._post_with_retries(
            f"{self._http.base_url}/embeddings", {"model": self._http.model, "input": text}
        )
        try:
            values = tuple(float(v) for v in body["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed embeddings response: {exc}") from exc
        if self.dim is not None and len(values) != self.dim:
            raise DimensionMismatch(
                f"remote embedding dim {len(values)} does not match configured {self.dim}"
            )
        return Vector(values)


# ---------------------------------------------------------------------------
# Clocks and the transcript log
# ---------------------------------------------------------------------------

class WallClock:
    def now(self) -> float:
        return time.monotonic()


class TickClock:
    """Logical clock advancing one millisecond per reading; keeps exports byte-stable."""

    def __init__(self) -> None:
        self._t = 0.0
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            self._t = round(self._t + 0.001, 6)
            return self._t


class TranscriptLog:
    """Append-only audit log of every backend call, optionally mirrored to JSONL."""

    def __init__(self, path: str | Path | None = None):
        self._entries: list[dict] = []
        self._lock = threading.Lock()
        self._path = Path(path) if path else None
        if self._path:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._path.write_text("", encoding="utf-8")

    def append(self, entry: dict) -> None:
        with self._lock:
            self._entries.append(entry)
            if self._path:
                with self._path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")

    @property
    def entries(self) -> tuple[dict, ...]:
        with self._lock:
            return tuple(self._entries)

    def count(self, kind: str | None = None) -> int:
        return sum(1 for e in self.entries if kind is None or e["kind"] == kind)


class Gateway:
    """Single point through which all model interaction flows.

    Holds one default chat provider plus optional per-role overrides, an
    embedding provider, a transcript log, and the clock used for wall times.
    """

    def __init__(
        self,
        chat_provider: ChatProvider,
        embedder=None,
        role_providers: dict[str, ChatProvider] | None = None,
        transcript: TranscriptLog | None = None,
        clock=None,
    ):
        self._default = chat_provider
        self._role_providers = dict(role_providers or {})
        self.embedder = embedder
        self.transcript = transcript if transcript is not None else TranscriptLog()
        self.clock = clock if clock is not None else WallClock()

    def provider_for(self, role: str) -> ChatProvider:
        return self._role_providers.get(role, self._default)

    @property
    def network_calls(self) -> int:
        providers = {id(p): p for p in [self._default, *self._role_providers.values()]}
        total = sum(p.network_calls for p in providers.values())
        if self.embedder is not None and hasattr(self.embedder, "network_calls"):
            total += self.embedder.network_calls
        return total

    def chat(self, request: ChatRequest, role: str = "default", case_id: str = "") -> ChatResponse:
        provider = self.provider_for(role)
        started = self.clock.now()
        entry = {
            "kind": "chat",
            "tag": request.tag,
            "role": role,
            "case_id": case_id,
            "request_hash": request.fingerprint(),
            "request_text": request.flat_text(),
            "provider": provider.provider_id,
        }
        try:
            response = provider.chat(request)
        except Exception as exc:
            entry.update({"error": f"{type(exc).__name__}: {exc}", "wall_time": self.clock.now() - started})
            self.append_entry(entry)
            raise
        entry.update(
            {
                "response_text": response.text,
                "usage": list(response.usage),
                "truncated": response.truncated,
                "wall_time": round(self.clock.now() - started, 6),
            }
        )
        self.append_entry(entry)
        return response

    def embed(self, text: str, case_id: str = "") -> Vector:
        if self.embedder is None:
            raise ConfigurationError("no embedding provider configured")
        started = self.clock.now()
        vector = self.embedder.embed(text)
        self.append_entry(
            {
                "kind": "embed",
                "tag": "embed",
                "case_id": case_id,
                "request_hash": hashlib.sha256(text.encode("utf-8")).hexdigest()[:16],
                "request_text": text,
                "provider": self.embedder.fingerprint,
                "dim": vector.dim,
                "wall_time": round(self.clock.now() - started, 6),
            }
        )
        return vector

    def append_entry(self, entry: dict) -> None:
        self.transcript.append(entry)
