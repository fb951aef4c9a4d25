"""Client boundary to text and vision-language model services.

Every agent role talks to its model through a *backend*: any object with a
``complete(request) -> ChatResponse`` method. The HTTP backend speaks the
OpenAI-style chat-completions wire format; scripted backends serve canned
replies for tests and offline fixtures.
"""

from __future__ import annotations

import base64
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

import httpx

logger = logging.getLogger(__name__)

ROLES = ("planner", "reasoner", "grounder", "verifier", "judge")


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    pass


class BackendRefused(GatewayError):
    pass


class EmptyResponse(GatewayError):
    pass


class ScriptExhausted(GatewayError):
    pass


@dataclass
class Message:
    role: str
    text: str = ""
    images: list[bytes] = field(default_factory=list)


@dataclass
class ChatRequest:
    messages: list[Message]
    system_prompt: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 1024
    model_name: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for m in self.messages:
            if m.role not in ("user", "assistant"):
                raise ValueError(f"unsupported message role {m.role!r}")
            if m.images and m.role != "user":
                raise ValueError("images may only be attached to user messages")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    @property
    def image_count(self) -> int:
        return sum(len(m.images) for m in self.messages)

    def all_text(self) -> str:
        parts = [self.system_prompt or ""] + [m.text for m in self.messages]
        return "\n".join(parts)


@dataclass
class ChatResponse:
    text: str
    latency_ms: float = 0.0
    token_usage: dict | None = None


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def image_mime(data: bytes) -> str:
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return "image/png"
    if data.startswith(b"\xff\xd8"):
        return "image/jpeg"
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    return "application/octet-stream"


def to_wire(request: ChatRequest, model_name: str) -> dict:
    """Render a request as an OpenAI-style chat-completions payload."""
    messages = []
    if request.system_prompt is not None:
        messages.append({"role": "system", "content": request.system_prompt})
    for m in request.messages:
        if m.images:
            content = []
            if m.text:
                content.append({"type": "text", "text": m.text})
            for img in m.images:
                url = f"data:{image_mime(img)};base64,{base64.b64encode(img).decode('ascii')}"
                content.append({"type": "image_url", "image_url": {"url": url}})
            messages.append({"role": m.role, "content": content})
        else:
            messages.append({"role": m.role, "content": m.text})
    return {
        "model": request.model_name or model_name,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }


def _reply_text(body: dict) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise EmptyResponse(f"response has no message content: {exc}") from None
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    return content or ""


class OpenAIChatBackend:
    """HTTP backend for any chat-completions compatible endpoint.

    Transient failures (connection errors, HTTP 5xx, HTTP 429) are retried up
    to ``max_retries`` times with exponential backoff. Latency is timed around
    the successful HTTP round trip only.
    """

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 2,
        backoff_seconds: float = 0.5,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = endpoint.rstrip("/") + "/chat/completions"
        self.model_name = model_name
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._client.close()

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = to_wire(request, self.model_name)
        last_error = "no attempt made"
        throttled = False
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff_seconds * 2 ** (attempt - 1))
            started = time.perf_counter()
            try:
                resp = self._client.post(self.url, json=payload)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("attempt %d to %s failed: %s", attempt + 1, self.url, last_error)
                continue
            latency_ms = (time.perf_counter() - started) * 1000.0
            if resp.status_code in (401, 403):
                raise BackendRefused(f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}")
            if resp.status_code == 429 or resp.status_code >= 500:
                throttled = resp.status_code == 429
                last_error = f"HTTP {resp.status_code}"
                logger.warning("attempt %d to %s got %s", attempt + 1, self.url, last_error)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {self.url}: {resp.text[:200]}")
            try:
                body = resp.json()
            except ValueError:
                raise TransportError("endpoint returned non-JSON body") from None
            text = _reply_text(body)
            if not text.strip():
                raise EmptyResponse(f"empty completion from {self.url}")
            return ChatResponse(text=text, latency_ms=latency_ms, token_usage=body.get("usage"))
        if throttled:
            raise BackendRefused(f"rate limited by {self.url} after {self.max_retries + 1} attempts")
        raise TransportError(f"{self.url} failed after {self.max_retries + 1} attempts: {last_error}")


class ScriptedBackend:
    """Returns the n-th canned reply on the n-th call.

    A script item that is an exception instance is raised instead of returned.
    Every request is kept in ``requests`` for inspection.
    """

    def __init__(self, script: Iterable[str | BaseException]):
        self.script = list(script)
        if not self.script:
            raise ValueError("script must not be empty")
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.requests)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            n = len(self.requests)
            self.requests.append(request)
        if n >= len(self.script):
            raise ScriptExhausted(f"script of {len(self.script)} replies exhausted")
        item = self.script[n]
        if isinstance(item, BaseException):
            raise item
        if not item.strip():
            raise EmptyResponse("scripted reply is empty")
        return ChatResponse(text=item, latency_ms=0.0)


def scripted_backend(script: Iterable[str | BaseException]) -> ScriptedBackend:
    return ScriptedBackend(script)


class FunctionBackend:
    """Backend whose reply is computed from the request by ``fn``."""

    def __init__(self, fn: Callable[[ChatRequest], str], latency_ms: float = 0.0):
        self.fn = fn
        self.latency_ms = latency_ms
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
        text = self.fn(request)
        if not text or not text.strip():
            raise EmptyResponse("function backend produced an empty reply")
        return ChatResponse(text=text, latency_ms=self.latency_ms)


def lookup_backend(rules: list[tuple[str, str]], default: str | None = None) -> FunctionBackend:
    """Reply with the first rule whose regex matches the request text."""
    compiled = [(re.compile(pattern), reply) for pattern, reply in rules]

    def answer(request: ChatRequest) -> str:
        text = request.all_text()
        for pattern, reply in compiled:
            if pattern.search(text):
                return reply
        if default is None:
            raise GatewayError("no lookup rule matched the request")
        return default

    return FunctionBackend(answer)


def complete(backend: Backend, request: ChatRequest) -> ChatResponse:
    response = backend.complete(request)
    if response.latency_ms < 0:
        raise GatewayError("negative latency reported by backend")
    return response
