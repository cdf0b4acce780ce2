"""Single boundary for language-model and embedding calls.

Two chat backends share one contract: :class:`RemoteBackend` speaks the
messages-array chat-completions wire shape, :class:`ScriptedBackend` answers
from a tape and/or pattern rules. Every call made through an
:class:`OracleClient` lands in its :class:`CallLog`.
"""
from __future__ import annotations

import functools
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from . import kernels
from .errors import TapeExhausted, TransportFailure
from .text import EMBED_DIM, digest, shingles

ROLE_TAGS = ("executor", "extractor", "refactorer", "refiner", "credit", "bundle_verdict", "meta")
DETERMINISTIC_TAGS = ("executor", "bundle_verdict")


@dataclass(frozen=True)
class Message:
    speaker: str
    text: str


@dataclass(frozen=True)
class ChatRequest:
    role_tag: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"unknown role tag {self.role_tag!r}")
        if not self.messages:
            raise ValueError("empty message list")
        if self.role_tag in DETERMINISTIC_TAGS and self.temperature != 0.0:
            raise ValueError(f"{self.role_tag} calls must decode at temperature 0")

    @property
    def prompt(self) -> str:
        return "\n\n".join(m.text for m in self.messages)

    def digest(self) -> str:
        return digest(self.role_tag + "\x00" + self.prompt, 32)


def user_request(role_tag: str, prompt: str, *, system: str = "", temperature: float = 0.0,
                 max_output_tokens: int = 1024) -> ChatRequest:
    msgs = []
    if system:
        msgs.append(Message("system", system))
    msgs.append(Message("user", prompt))
    return ChatRequest(role_tag, tuple(msgs), temperature, max_output_tokens)


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


Rule = Callable[[ChatRequest], "str | None"]


class ScriptedBackend:
    """Deterministic backend: a response tape per role tag, then pattern rules.

    ``tape`` is either a mapping ``role_tag -> responses`` or one flat list
    shared by every role. With ``strict`` set, a call that finds neither a tape
    entry nor a matching rule raises :class:`TapeExhausted`.
    """

    def __init__(
        self,
        tape: Mapping[str, Sequence[str]] | Sequence[str] | None = None,
        rules: Iterable[Rule] = (),
        strict: bool = True,
    ) -> None:
        if tape is None:
            tape = {}
        if isinstance(tape, Mapping):
            self._tape = {k: list(v) for k, v in tape.items()}
            self._shared = None
        else:
            self._tape = {}
            self._shared = list(tape)
        self.rules = list(rules)
        self.strict = strict
        self._ordinals: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            key = "*" if self._shared is not None else request.role_tag
            n = self._ordinals[key]
            entries = self._shared if self._shared is not None else self._tape.get(key, [])
            if n < len(entries):
                self._ordinals[key] = n + 1
                return entries[n]
        for rule in self.rules:
            out = rule(request)
            if out is not None:
                return out
        if self.strict:
            raise TapeExhausted(f"no scripted response for {request.role_tag} call #{n}")
        return ""


class ReplayBackend:
    """Answers each request with the response recorded for the same prompt."""

    def __init__(self, records: Iterable["CallRecord"]) -> None:
        self._answers: dict[tuple[str, str], deque] = defaultdict(deque)
        for r in records:
            self._answers[(r.role_tag, r.request_digest)].append(r.response)
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            queue = self._answers.get((request.role_tag, request.digest()))
            if not queue:
                raise TapeExhausted(f"no recorded response for {request.role_tag} {request.digest()}")
            return queue.popleft() if len(queue) > 1 else queue[0]


_RETRYABLE = {408, 409, 425, 429, 500, 502, 503, 504}


class RemoteBackend:
    """Chat-completions client: ``{model, messages, temperature, max_tokens}`` in,
    first choice's message content out."""

    def __init__(
        self,
        url: str,
        model: str,
        api_key: str | None = None,
        retry_budget: int = 2,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
        timeout: float = 120.0,
    ) -> None:
        self.url = url
        self.model = model
        self.api_key = api_key
        self.retry_budget = retry_budget
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, retry_budget: int = 2) -> "RemoteBackend":
        try:
            url = os.environ["SKILLFORGE_ENDPOINT"]
            model = os.environ["SKILLFORGE_MODEL"]
        except KeyError as exc:
            raise TransportFailure(f"missing environment variable {exc.args[0]}") from None
        return cls(url, model, os.environ.get("SKILLFORGE_API_KEY"), retry_budget)

    def _headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json"}
        if self.api_key:
            h["Authorization"] = f"Bearer {self.api_key}"
        return h

    def _post(self, url: str, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.retry_budget + 1):
            if attempt and self.backoff:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code in _RETRYABLE:
                last = TransportFailure(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise TransportFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        raise TransportFailure(f"gave up after {self.retry_budget + 1} attempts: {last}")

    def complete(self, request: ChatRequest) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": m.speaker, "content": m.text} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        data = self._post(self.url, body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportFailure(f"malformed completion payload: {exc}") from None


class HashingEmbedder:
    """Signed feature hashing of word 3-grams, L2-normalised."""

    def __init__(self, dim: int = EMBED_DIM) -> None:
        self.dim = dim
        self.embed = functools.lru_cache(maxsize=16384)(self._embed)

    def _embed(self, text: str):
        return kernels.hashed_embedding(shingles(text), self.dim)


class RemoteEmbedder:
    """Embeddings endpoint (``{model, input}`` -> ``data[0].embedding``), unit-normalised."""

    def __init__(self, backend: RemoteBackend, url: str, dim: int = EMBED_DIM) -> None:
        self.backend = backend
        self.url = url
        self.dim = dim

    def embed(self, text: str):
        from array import array
        import math

        if not text.strip():
            return array("d", [0.0] * self.dim)
        data = self.backend._post(self.url, {"model": self.backend.model, "input": text})
        vec = [float(x) for x in data["data"][0]["embedding"]]
        norm = math.sqrt(sum(v * v for v in vec))
        return array("d", [v / norm for v in vec] if norm else vec)


@dataclass(frozen=True)
class CallRecord:
    scope: str
    role_tag: str
    request_digest: str
    prompt: str
    response: str

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "request_digest": self.request_digest,
            "response": self.response,
            "role_tag": self.role_tag,
            "scope": self.scope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CallRecord":
        return cls(d["scope"], d["role_tag"], d["request_digest"], d["prompt"], d["response"])


@dataclass
class CallLog:
    records: list[CallRecord] = field(default_factory=list)

    def append(self, record: CallRecord) -> None:
        self.records.append(record)

    def extend(self, other: "CallLog") -> None:
        self.records.extend(other.records)

    def by_role(self, role_tag: str) -> list[CallRecord]:
        return [r for r in self.records if r.role_tag == role_tag]

    def __len__(self) -> int:
        return len(self.records)


class OracleClient:
    """The only object the rest of the runtime talks to for model calls."""

    def __init__(self, backend: Backend, embedder=None, scope: str = "main",
                 log: CallLog | None = None) -> None:
        self.backend = backend
        self.embedder = embedder or HashingEmbedder()
        self.scope = scope
        self.log = log if log is not None else CallLog()

    def fork(self, scope: str) -> "OracleClient":
        """Same backend, private log; merge with ``log.extend`` at the barrier."""
        return OracleClient(self.backend, self.embedder, scope, CallLog())

    def chat(self, request: ChatRequest) -> str:
        response = self.backend.complete(request)
        self.log.append(CallRecord(self.scope, request.role_tag, request.digest(), request.prompt, response))
        return response

    def embed(self, text: str):
        return self.embedder.embed(text)
