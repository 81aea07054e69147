"""Chat-completion gateway: a live OpenAI-compatible client with bounded
exponential-backoff retries, and a scripted deterministic stand-in for tests."""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field

import httpx

from .core import ConfigError, RagmuxError, TokenCount, estimate_tokens

RETRIABLE_STATUSES = frozenset({408, 429, 500, 501, 502, 503, 504})

DEFAULT_BASE_URL = "https://api.openai.com/v1"
API_KEY_ENV = "LLM_API_KEY"
BASE_URL_ENV = "LLM_BASE_URL"


class GatewayError(RagmuxError):
    """Base class for chat-gateway failures."""


class ProtocolError(GatewayError):
    """Non-retriable HTTP status or malformed response body."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class TransientFailureError(GatewayError):
    """Retries exhausted on retriable failures; carries the last status seen."""

    def __init__(self, message: str, last_status: int | None):
        super().__init__(message)
        self.last_status = last_status


class ScriptError(GatewayError):
    """The scripted gateway was driven off its expected path."""


class TransportFailure(Exception):
    """Raised by a transport for timeouts and connection-level failures."""


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0

    def __post_init__(self):
        user_messages = [m for m in self.messages if m[0] == "user"]
        if len(user_messages) != 1 or len(self.messages) != 1:
            raise ValueError("requests are single-turn: exactly one user message")

    @classmethod
    def single(cls, model: str, content: str, temperature: float = 0.0) -> "ChatRequest":
        return cls(model=model, messages=(("user", content),), temperature=temperature)

    @property
    def content(self) -> str:
        return self.messages[0][1]


@dataclass(frozen=True)
class ChatResponse:
    content: str
    usage: TokenCount
    attempts_used: int = 1


class SystemClock:
    """Real time. Injectable so backoff tests can run in microseconds."""

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class VirtualClock:
    """Fake clock that records sleeps and advances instantly."""

    def __init__(self, start: float = 0.0):
        self.time = start
        self.sleeps: list[float] = []

    def now(self) -> float:
        return self.time

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.time += seconds


def _httpx_transport(url: str, headers: dict, payload: dict, timeout: float):
    try:
        response = httpx.post(url, headers=headers, json=payload, timeout=timeout)
    except httpx.TimeoutException as exc:
        raise TransportFailure(f"request timed out: {exc}") from exc
    except httpx.TransportError as exc:
        raise TransportFailure(f"transport failure: {exc}") from exc
    try:
        body = response.json()
    except json.JSONDecodeError:
        body = response.text
    return response.status_code, body


class HttpChatGateway:
    """Speaks POST {base_url}/chat/completions with the retry contract:
    retriable statuses and timeouts are retried up to max_retries times,
    sleeping 2^i seconds before the i-th retry."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        transport=None,
        clock=None,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or DEFAULT_BASE_URL).rstrip("/")
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise ConfigError(
                f"no API credential: set the {API_KEY_ENV} environment variable"
            )
        self.api_key = key
        self.timeout = timeout
        self.max_retries = max_retries
        self.transport = transport or _httpx_transport
        self.clock = clock or SystemClock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        url = f"{self.base_url}/chat/completions"
        headers = {
            "Authorization": f"Bearer {self.api_key}",
            "Content-Type": "application/json",
        }
        payload = {
            "model": request.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
        }
        last_status: int | None = None
        for attempt in range(1, self.max_retries + 2):
            try:
                status, body = self.transport(url, headers, payload, self.timeout)
            except TransportFailure:
                status, body = None, None  # timeout class: retriable
            if status == 200:
                return self._parse(request, body, attempt)
            if status is not None and status not in RETRIABLE_STATUSES:
                raise ProtocolError(f"chat endpoint returned HTTP {status}", status=status)
            last_status = status
            if attempt <= self.max_retries:
                self.clock.sleep(2**attempt)
        raise TransientFailureError(
            f"retries exhausted after {self.max_retries + 1} attempts"
            f" (last status: {last_status})",
            last_status=last_status,
        )

    def _parse(self, request: ChatRequest, body, attempts_used: int) -> ChatResponse:
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError(f"malformed chat completion body: {body!r}")
        usage = body.get("usage") if isinstance(body, dict) else None
        if isinstance(usage, dict) and "prompt_tokens" in usage:
            prompt = int(usage.get("prompt_tokens", 0))
            completion = int(usage.get("completion_tokens", 0))
            total = int(usage.get("total_tokens", prompt + completion))
            tokens = TokenCount(prompt, completion, total, estimated=False)
        else:
            tokens = _estimated_usage(request.content, content)
        return ChatResponse(content=content, usage=tokens, attempts_used=attempts_used)


def _estimated_usage(prompt: str, completion: str) -> TokenCount:
    p = estimate_tokens(prompt)
    c = estimate_tokens(completion)
    return TokenCount(p, c, p + c, estimated=True)


@dataclass(frozen=True)
class ScriptEntry:
    response: str
    expect: str | None = None


@dataclass
class Script:
    """Ordered canned responses, consumed strictly in order."""

    entries: list[ScriptEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_pairs(cls, pairs) -> "Script":
        entries = []
        for item in pairs:
            if isinstance(item, str):
                entries.append(ScriptEntry(response=item))
            else:
                expect, response = item
                entries.append(ScriptEntry(response=response, expect=expect))
        return cls(entries=entries)


def load_script(path: str) -> Script:
    """Load a script from JSON Lines of {"response": ..., "expect"?: ...}."""
    entries: list[ScriptEntry] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if "response" not in raw:
                raise ConfigError(f"{path}: line {lineno}: missing 'response'")
            entries.append(ScriptEntry(response=raw["response"], expect=raw.get("expect")))
    return Script(entries=entries)


class ScriptedGateway:
    """Deterministic gateway that replays a script. Guards fail loudly when a
    prompt does not contain the substring the entry expects."""

    def __init__(self, script: Script, clock: VirtualClock | None = None):
        self.script = script
        self.clock = clock or VirtualClock()
        self._cursor = 0
        self._lock = threading.Lock()

    @property
    def consumed(self) -> int:
        return self._cursor

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            if self._cursor >= len(self.script.entries):
                raise ScriptError(
                    f"script exhausted after {self._cursor} entries; next prompt began: "
                    f"{request.content[:120]!r}"
                )
            entry = self.script.entries[self._cursor]
            self._cursor += 1
        if entry.expect is not None and entry.expect not in request.content:
            raise ScriptError(
                f"script entry {self._cursor} expected substring {entry.expect!r} "
                f"in prompt, got: {request.content[:160]!r}"
            )
        return ChatResponse(
            content=entry.response,
            usage=_estimated_usage(request.content, entry.response),
            attempts_used=1,
        )


def scripted_complete(request: ChatRequest, script: Script) -> ChatResponse:
    """One-shot scripted completion against a shared script object."""
    gateway = getattr(script, "_gateway", None)
    if gateway is None:
        gateway = ScriptedGateway(script)
        script._gateway = gateway
    return gateway.complete(request)
