"""Uniform gateway to chat-completion backends.

Supports three modes: ``live`` (call the backend), ``record`` (call and append
to a cassette), ``replay`` (serve from the cassette, never touch the network).
Structured-output parsing with a single repair re-prompt lives here too, since
every prompt template in the framework demands a fenced YAML/JSON block.
"""

from __future__ import annotations

import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import yaml

from .canonical import digest, dumps, loads
from .errors import (
    AuthenticationError,
    GatewayError,
    ReplayMissError,
    RetryExhaustedError,
    StructuredParseError,
)

ROLES = ("system", "user", "assistant")
_FENCE_RE = re.compile(r"```[a-zA-Z]*\s*\n(.*?)```", re.DOTALL)


def estimate_tokens(text: str) -> int:
    """Character-based token estimate used when a backend reports no usage."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output: int = 2048
    tag: str = ""

    def __post_init__(self) -> None:
        if self.max_output <= 0:
            raise GatewayError("max_output must be positive")
        if not self.messages:
            raise GatewayError("request must carry at least one message")
        expected = "user"
        for role, _text in self.messages:
            if role not in ROLES or role == "system":
                raise GatewayError(f"unexpected role {role!r} in messages")
            if role != expected:
                raise GatewayError("roles must alternate user/assistant starting with user")
            expected = "assistant" if expected == "user" else "user"

    def content(self) -> dict:
        """Request content covered by the cassette digest (no credentials,
        nothing retry-dependent)."""
        return {
            "model": self.model,
            "system": self.system,
            "messages": [[r, t] for r, t in self.messages],
            "temperature": self.temperature,
            "max_output": self.max_output,
            "tag": self.tag,
        }

    def digest(self) -> str:
        return digest(self.content())


def make_request(
    model: str,
    system: str,
    messages: list[tuple[str, str]],
    temperature: float = 0.0,
    max_output: int = 2048,
    tag: str = "",
) -> ChatRequest:
    return ChatRequest(
        model=model,
        system=system,
        messages=tuple((r, t) for r, t in messages),
        temperature=temperature,
        max_output=max_output,
        tag=tag,
    )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    output_tokens: int | None
    latency: float
    backend: str

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or (self.output_tokens is not None and self.output_tokens < 0):
            raise GatewayError("token counts must be non-negative")

    def tokens_for_reward(self) -> tuple[int, bool]:
        """(output token count, estimated?) for the length penalty."""
        if self.output_tokens is not None:
            return self.output_tokens, False
        return estimate_tokens(self.text), True

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "latency": self.latency,
            "backend": self.backend,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ChatResponse":
        return cls(
            text=data["text"],
            prompt_tokens=int(data["prompt_tokens"]),
            output_tokens=None if data["output_tokens"] is None else int(data["output_tokens"]),
            latency=float(data["latency"]),
            backend=data["backend"],
        )


class TransientBackendError(GatewayError):
    """Retryable backend failure (rate limit, 5xx, connection trouble)."""


class Backend(Protocol):
    name: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


class MockBackend:
    """Deterministic backend for tests and offline fixtures.

    Either scripted (a queue of texts, consumed in order) or driven by a
    responder callable. Token counts are ceil(len/4) so rewards are stable.
    """

    name = "mock"

    def __init__(
        self,
        script: list[str] | None = None,
        responder: Callable[[ChatRequest], str] | None = None,
    ) -> None:
        if (script is None) == (responder is None):
            raise ValueError("provide exactly one of script or responder")
        self._script = list(script) if script is not None else None
        self._responder = responder
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self._script is not None:
            with self._lock:
                if not self._script:
                    raise GatewayError(f"mock script exhausted (tag={request.tag!r})")
                text = self._script.pop(0)
        else:
            assert self._responder is not None
            text = self._responder(request)
        prompt_chars = len(request.system) + sum(len(t) for _r, t in request.messages)
        return ChatResponse(
            text=text,
            prompt_tokens=estimate_tokens("x" * prompt_chars),
            output_tokens=estimate_tokens(text),
            latency=0.0,
            backend=self.name,
        )


class HttpBackend:
    """OpenAI-compatible chat-completions backend.

    Credentials come from the environment variable named in config and are
    never embedded in requests, so they cannot end up in cassettes.
    """

    name = "http"

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "",
        timeout: float = 120.0,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout

    def _api_key(self) -> str:
        if not self.api_key_env:
            return ""
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise AuthenticationError(
                f"credential environment variable {self.api_key_env} is not set"
            )
        return key

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        headers = {"Content-Type": "application/json"}
        key = self._api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.extend({"role": r, "content": t} for r, t in request.messages)
        payload = {
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }
        start = time.monotonic()
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"connection failure: {exc}") from exc
        latency = time.monotonic() - start
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"backend rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code != 200:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion body: {exc}") from exc
        usage = body.get("usage") or {}
        return ChatResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=usage.get("completion_tokens"),
            latency=latency,
            backend=self.name,
        )


# -- cassette -----------------------------------------------------------------


class Cassette:
    """Append-only record/replay store: one canonical-JSON record per line.

    Replay consumption is FIFO per digest (repeated identical requests get
    their recorded responses in order, then the last one again).
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, list[dict]] = {}
        self._cursor: dict[str, int] = {}
        if self.path.exists():
            for line_no, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    record = loads(line)
                except ValueError as exc:
                    raise GatewayError(f"corrupt cassette line {line_no}: {exc}") from exc
                self._records.setdefault(record["digest"], []).append(record)

    def __len__(self) -> int:
        return sum(len(v) for v in self._records.values())

    def append(self, request: ChatRequest, response: ChatResponse) -> None:
        record = {
            "digest": request.digest(),
            "request": request.content(),
            "response": response.to_json(),
        }
        with self._lock:
            self._records.setdefault(record["digest"], []).append(record)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(dumps(record) + "\n")

    def replay(self, request: ChatRequest) -> ChatResponse:
        key = request.digest()
        with self._lock:
            records = self._records.get(key)
            if not records:
                raise ReplayMissError(key)
            index = min(self._cursor.get(key, 0), len(records) - 1)
            self._cursor[key] = index + 1
            return ChatResponse.from_json(records[index]["response"])


# -- structured output ---------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Required fields of one prompt template's structured output."""

    name: str
    required: tuple[tuple[str, type | tuple[type, ...]], ...]

    def validate(self, value: Any) -> dict:
        if not isinstance(value, dict):
            raise StructuredParseError(f"{self.name}: expected a mapping, got {type(value).__name__}")
        for field_name, expected in self.required:
            if field_name not in value or value[field_name] is None:
                raise StructuredParseError(f"{self.name}: missing required field {field_name!r}")
            if not isinstance(value[field_name], expected):
                raise StructuredParseError(
                    f"{self.name}: field {field_name!r} has wrong type {type(value[field_name]).__name__}"
                )
        return value


SCHEMAS: dict[str, Schema] = {
    s.name: s
    for s in (
        Schema("intent-synthesis", (("artifact_topic", str), ("description", str), ("checklist", list))),
        Schema("intent-abstraction", (("results", list),)),
        Schema("hierarchy-organization", (("hierarchy", list),)),
        Schema("initial-request", (("initial_request", str), ("selected_criteria", list))),
        Schema(
            "response-evaluation",
            (("classification_label", str), ("evaluation_type", str), ("evaluations", list)),
        ),
        Schema("user-response", (("user_message", str),)),
        Schema("judge-satisfaction", (("evaluations", list),)),
        Schema("judge-interactivity", (("interactivity", (int, float)),)),
        Schema("behavior-annotation", (("labels", list),)),
    )
}


def extract_block(text: str) -> str:
    """First fenced block in a completion; falls back to the outermost braces
    for judges that answer in bare JSON."""
    match = _FENCE_RE.search(text)
    if match:
        return match.group(1)
    start, end = text.find("{"), text.rfind("}")
    if start != -1 and end > start:
        return text[start : end + 1]
    raise StructuredParseError("no fenced block or JSON object found in completion")


def parse_structured(text: str, schema: str) -> dict:
    """Extract and validate one structured block; raises StructuredParseError.

    The repair re-prompt loop lives in Gateway.complete_structured; this
    function is the pure parsing half.
    """
    if schema not in SCHEMAS:
        raise StructuredParseError(f"unknown schema {schema!r}")
    block = extract_block(text)
    try:
        value = yaml.safe_load(block)
    except yaml.YAMLError as exc:
        raise StructuredParseError(f"block is not valid YAML/JSON: {exc}") from exc
    return SCHEMAS[schema].validate(value)


_REPAIR_INSTRUCTION = (
    "Your previous reply could not be parsed: {error}\n"
    "Reply again with only a fenced code block in the requested format, "
    "with every required field present."
)


@dataclass
class StructuredCompletion:
    value: dict
    response: ChatResponse
    repaired: bool = False


class Gateway:
    """Chat gateway with retry, usage accounting, and cassette record/replay.

    Safe for concurrent use by multiple conversations; cassette writes are
    serialized internally.
    """

    def __init__(
        self,
        backend: Backend | None = None,
        mode: str = "live",
        cassette: Cassette | str | Path | None = None,
        retries: int = 3,
        backoff_base: float = 0.5,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        if mode not in ("live", "record", "replay"):
            raise GatewayError(f"unknown mode {mode!r}")
        if mode in ("record", "replay") and cassette is None:
            raise GatewayError(f"{mode} mode requires a cassette")
        if mode != "replay" and backend is None:
            raise GatewayError(f"{mode} mode requires a backend")
        self.backend = backend
        self.mode = mode
        self.cassette = cassette if isinstance(cassette, Cassette) or cassette is None else Cassette(cassette)
        self.retries = retries
        self.backoff_base = backoff_base
        self._sleep = sleeper
        self._usage_lock = threading.Lock()
        self.calls = 0
        self.prompt_tokens = 0
        self.output_tokens = 0

    def _record_usage(self, response: ChatResponse) -> None:
        with self._usage_lock:
            self.calls += 1
            self.prompt_tokens += response.prompt_tokens
            self.output_tokens += response.output_tokens or 0

    def _call_with_retry(self, request: ChatRequest) -> ChatResponse:
        assert self.backend is not None
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                return self.backend.complete(request)
            except TransientBackendError as exc:
                last = exc
                if attempt < self.retries:
                    self._sleep(self.backoff_base * (2**attempt))
        raise RetryExhaustedError(
            f"backend failed after {self.retries + 1} attempts: {last}"
        ) from last

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.mode == "replay":
            assert self.cassette is not None
            response = self.cassette.replay(request)
            self._record_usage(response)
            return response
        response = self._call_with_retry(request)
        if self.mode == "record":
            assert self.cassette is not None
            self.cassette.append(request, response)
        self._record_usage(response)
        return response

    def complete_structured(self, request: ChatRequest, schema: str) -> StructuredCompletion:
        """Complete and parse; on parse failure, re-prompt once with the error
        appended, then fail carrying both parse messages."""
        response = self.complete(request)
        try:
            return StructuredCompletion(parse_structured(response.text, schema), response)
        except StructuredParseError as first:
            repair = make_request(
                model=request.model,
                system=request.system,
                messages=[
                    *request.messages,
                    ("assistant", response.text),
                    ("user", _REPAIR_INSTRUCTION.format(error=first)),
                ],
                temperature=request.temperature,
                max_output=request.max_output,
                tag=request.tag,
            )
            second_response = self.complete(repair)
            try:
                return StructuredCompletion(
                    parse_structured(second_response.text, schema), second_response, repaired=True
                )
            except StructuredParseError as second:
                raise StructuredParseError(
                    f"structured parse failed after repair attempt: {second}",
                    attempts=[str(first), str(second)],
                ) from second
