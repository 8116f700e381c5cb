"""Chat-completion backend abstraction with retries, call accounting, and
structured-output extraction.

The HTTP backend speaks the common messages/choices chat schema. Every
pipeline stage goes through LlmGateway.complete so the CallLedger counts one
call per logical completion (retries are tracked as attempts on the exchange,
not as extra calls).
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import requests

from .errors import BackendError, JsonPayloadError, RetryExhaustedError, SchemaError

RETRYABLE_STATUSES = {408, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int | None = None
    kind: str = "generic"


@dataclass(frozen=True)
class LlmExchange:
    request: ChatRequest
    response: str
    attempt_count: int
    backend_id: str


class LlmBackend(Protocol):
    backend_id: str

    def complete(self, req: ChatRequest) -> str: ...


class CallLedger:
    """Thread-safe per-run counters: total calls and calls per step kind."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_kind: dict[str, int] = {}

    def record(self, kind: str) -> None:
        with self._lock:
            self._by_kind[kind] = self._by_kind.get(kind, 0) + 1

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._by_kind.values())

    def snapshot(self) -> dict:
        with self._lock:
            by_kind = dict(sorted(self._by_kind.items()))
        return {"total": sum(by_kind.values()), "by_kind": by_kind}

    def since(self, earlier: dict) -> dict:
        """Delta between the current state and an earlier snapshot()."""
        now = self.snapshot()
        before = earlier.get("by_kind", {})
        by_kind = {
            k: v - before.get(k, 0)
            for k, v in now["by_kind"].items()
            if v - before.get(k, 0) != 0
        }
        return {"total": now["total"] - earlier.get("total", 0), "by_kind": by_kind}


class HttpChatBackend:
    """messages/choices chat endpoint client.

    Auth token comes from the environment variable named by api_key_env;
    failures surface as BackendError with retryable set from the status code.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "LLM_API_KEY",
        timeout_s: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self._session = session or requests.Session()
        self.backend_id = f"http:{self.base_url}:{model}"

    def complete(self, req: ChatRequest) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
        }
        if req.max_tokens is not None:
            payload["max_tokens"] = req.max_tokens
        try:
            resp = self._session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise BackendError(f"chat request failed: {exc}", retryable=True) from exc
        if resp.status_code != 200:
            raise BackendError(
                f"chat endpoint returned {resp.status_code}: {resp.text[:200]}",
                retryable=resp.status_code in RETRYABLE_STATUSES,
                status=resp.status_code,
            )
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat response: {exc}", retryable=False) from exc


@dataclass
class LlmGateway:
    """Retry wrapper shared by all stages; owns the in-flight limit and ledger."""

    backend: LlmBackend
    ledger: CallLedger = field(default_factory=CallLedger)
    max_attempts: int = 3
    backoff_s: float = 1.0
    backoff_max_s: float = 30.0
    in_flight: int = 8
    sleep: Callable[[float], None] = time.sleep
    log_path: str | None = None

    def __post_init__(self):
        self._semaphore = threading.Semaphore(self.in_flight)
        self._log_lock = threading.Lock()

    def complete(
        self,
        prompt: str,
        kind: str = "generic",
        temperature: float = 0.0,
        max_tokens: int | None = None,
    ) -> LlmExchange:
        req = ChatRequest(prompt=prompt, temperature=temperature, max_tokens=max_tokens, kind=kind)
        self.ledger.record(kind)
        last_error: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._semaphore:
                    response = self.backend.complete(req)
            except BackendError as exc:
                last_error = exc
                if not exc.retryable:
                    raise
                if attempt < self.max_attempts:
                    self.sleep(min(self.backoff_s * (2 ** (attempt - 1)), self.backoff_max_s))
                continue
            exchange = LlmExchange(
                request=req, response=response, attempt_count=attempt, backend_id=self.backend.backend_id
            )
            self._log(exchange)
            return exchange
        raise RetryExhaustedError(
            f"backend failed after {self.max_attempts} attempts: {last_error}",
            last_error=last_error,
            attempts=self.max_attempts,
        )

    def _log(self, exchange: LlmExchange) -> None:
        if not self.log_path:
            return
        record = {
            "kind": exchange.request.kind,
            "temperature": exchange.request.temperature,
            "max_tokens": exchange.request.max_tokens,
            "prompt": exchange.request.prompt,
            "response": exchange.response,
            "attempt_count": exchange.attempt_count,
            "backend_id": exchange.backend_id,
        }
        with self._log_lock:
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")


def extract_json_payload(text: str, schema: dict[str, type] | None = None):
    """Parse the first well-formed JSON object in text.

    Tolerates surrounding prose and code fences. When a schema is given,
    every required key must exist and match its type; violations raise
    SchemaError naming the key. No object at all raises JsonPayloadError,
    which callers treat as a regenerate signal.
    """
    decoder = json.JSONDecoder()
    idx = text.find("{")
    obj = None
    while idx != -1:
        try:
            candidate, _ = decoder.raw_decode(text, idx)
        except ValueError:
            idx = text.find("{", idx + 1)
            continue
        if isinstance(candidate, dict):
            obj = candidate
            break
        idx = text.find("{", idx + 1)
    if obj is None:
        raise JsonPayloadError("no JSON object found in response; regenerate")
    if schema:
        for key, expected in schema.items():
            if key not in obj:
                raise SchemaError(f"missing required key: {key!r}", key=key)
            if not isinstance(obj[key], expected):
                raise SchemaError(
                    f"key {key!r} should be {expected.__name__}, got {type(obj[key]).__name__}",
                    key=key,
                )
    return obj
