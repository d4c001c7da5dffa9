"""Chat-completion backends behind one `complete(request)` interface.

HttpBackend speaks the OpenAI-compatible wire shape; ScriptedBackend and
record/replay sessions make the whole pipeline a pure function of its
fixtures, which is how the test harness runs without a network.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .errors import TransportError, UnscriptedPromptError

API_KEY_ENV = "KDR_API_KEY"
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


@dataclass
class ChatRequest:
    messages: list[dict]
    model_name: str = "scripted"
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self):
        if not any(m.get("role") == "user" for m in self.messages):
            raise ValueError("request needs at least one user message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0


def user_request(prompt: str, model_name: str = "scripted", temperature: float = 0.0,
                 max_output_tokens: int = 1024) -> ChatRequest:
    return ChatRequest(
        messages=[{"role": "user", "content": prompt}],
        model_name=model_name,
        temperature=temperature,
        max_output_tokens=max_output_tokens,
    )


def request_fingerprint(request: ChatRequest) -> str:
    """Stable hash over model and messages; the session-file key."""
    payload = json.dumps(
        {"model": request.model_name, "messages": request.messages},
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class HttpBackend:
    """OpenAI-compatible POST /v1/chat/completions client.

    Retries timeouts, 429s, and 5xx with exponential backoff (1s base,
    factor 2, at most `max_attempts` tries); other 4xx fail immediately.
    A semaphore caps in-flight requests.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        in_flight_cap: int = 4,
        timeout: float = 60.0,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        session: requests.Session | None = None,
        sleeper=time.sleep,
    ):
        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.session = session or requests.Session()
        self.sleeper = sleeper
        self._gate = threading.BoundedSemaphore(in_flight_cap)
        self.call_count = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model_name,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.perf_counter()
        last_error = "unknown"
        with self._gate:
            self.call_count += 1
            for attempt in range(1, self.max_attempts + 1):
                try:
                    resp = self.session.post(
                        self.url, json=body, headers=headers, timeout=self.timeout
                    )
                except (requests.Timeout, requests.ConnectionError) as exc:
                    last_error = f"{type(exc).__name__}: {exc}"
                else:
                    if resp.status_code == 200:
                        return self._parse(resp, started, attempt)
                    last_error = f"HTTP {resp.status_code}"
                    if resp.status_code not in RETRYABLE_STATUS:
                        raise TransportError(
                            f"chat completion failed ({last_error})", attempts=attempt
                        )
                if attempt < self.max_attempts:
                    self.sleeper(self.backoff_base * self.backoff_factor ** (attempt - 1))
        raise TransportError(
            f"chat completion failed after {self.max_attempts} attempts ({last_error})",
            attempts=self.max_attempts,
        )

    def _parse(self, resp, started: float, attempt: int) -> ChatResponse:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(
                f"malformed chat completion response ({exc})", attempts=attempt
            ) from exc
        usage = data.get("usage") or {}
        return ChatResponse(
            text=text if text is not None else "",
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency=time.perf_counter() - started,
        )


@dataclass
class ScriptedRule:
    """A canned response. Matches on an exact request fingerprint, a single
    substring of the prompt, or a set of substrings that must all occur.
    Rules are evaluated in declaration order; first match wins."""

    response_text: str
    substring: str | None = None
    substrings: tuple[str, ...] = ()
    fingerprint: str | None = None
    consumed_count: int = 0

    def matches(self, prompt: str, fp: str) -> bool:
        if self.fingerprint is not None:
            return fp == self.fingerprint
        needles = list(self.substrings)
        if self.substring is not None:
            needles.append(self.substring)
        return bool(needles) and all(n in prompt for n in needles)


class ScriptedBackend:
    """Deterministic backend serving declared rules; used by the test
    harness and fixture-driven runs."""

    def __init__(self, rules: list[ScriptedRule]):
        self.rules = list(rules)
        self.call_count = 0
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = "\n".join(str(m.get("content", "")) for m in request.messages)
        fp = request_fingerprint(request)
        with self._lock:
            self.call_count += 1
            self.requests.append(request)
            for rule in self.rules:
                if rule.matches(prompt, fp):
                    rule.consumed_count += 1
                    return ChatResponse(text=rule.response_text)
        raise UnscriptedPromptError(fp)


def load_scripted_rules(path: str | Path) -> list[ScriptedRule]:
    """Rules from JSONL: {response, substring? | substrings? | fingerprint?}."""
    rules = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            rules.append(
                ScriptedRule(
                    response_text=record["response"],
                    substring=record.get("substring"),
                    substrings=tuple(record.get("substrings", ())),
                    fingerprint=record.get("fingerprint"),
                )
            )
    return rules


class RecordReplayBackend:
    """Session wrapper. Record mode forwards to a live backend and appends
    (fingerprint, response) pairs to the session file; replay mode serves
    from the file and never touches the network."""

    def __init__(self, session_path: str | Path, mode: str, inner=None):
        if mode not in ("record", "replay"):
            raise ValueError(f"unknown record/replay mode: {mode}")
        if mode == "record" and inner is None:
            raise ValueError("record mode needs a live backend")
        self.session_path = Path(session_path)
        self.mode = mode
        self.inner = inner
        self.call_count = 0
        self._lock = threading.Lock()
        self._responses: dict[str, str] = {}
        if mode == "replay":
            self._responses = load_session(self.session_path)

    def complete(self, request: ChatRequest) -> ChatResponse:
        fp = request_fingerprint(request)
        with self._lock:
            self.call_count += 1
        if self.mode == "replay":
            if fp not in self._responses:
                raise UnscriptedPromptError(fp)
            return ChatResponse(text=self._responses[fp])
        response = self.inner.complete(request)
        with self._lock:
            with self.session_path.open("a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {"fingerprint": fp, "response_text": response.text},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
        return response


def record_replay(session_path: str | Path, mode: str = "replay", inner=None) -> RecordReplayBackend:
    return RecordReplayBackend(session_path, mode=mode, inner=inner)


def load_session(path: str | Path) -> dict[str, str]:
    """Session JSONL -> fingerprint->response map (first occurrence wins)."""
    responses: dict[str, str] = {}
    path = Path(path)
    if not path.exists():
        return responses
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            responses.setdefault(record["fingerprint"], record["response_text"])
    return responses
