"""Uniform access to chat-completion, reranker, and deterministic mock backends.

The gateway owns three cross-backend contracts: continuations never include
the prefill, returned text never contains a configured stop sequence, and
batched results align index-for-index with their requests.  Transport errors
retry with exponential backoff; refusals and empty outputs surface as
branch-level generation failures and are never retried.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

logger = logging.getLogger(__name__)

STOP_SEQUENCE_HIT = "stop_sequence_hit"
LENGTH = "length"
END_OF_MESSAGE = "end_of_message"


class GatewayError(Exception):
    """Base class for backend-facing failures."""


class TransportError(GatewayError):
    """Network-level failure; retryable."""


class GenerationFailure(GatewayError):
    """Refusal or empty output; a branch-level failure, never retried."""


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call with optional assistant prefill."""

    messages: tuple[tuple[str, str], ...]
    prefill: str | None = None
    stop_sequences: tuple[str, ...] = ()
    temperature: float = 0.7
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class RerankRequest:
    query: str
    documents: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.documents:
            raise ValueError("rerank request needs at least one document")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    stop_reason: str


def render_prompt(request: ChatRequest) -> str:
    """Canonical textual view of a request, used by mocks and raw completions.

    The sampling seed is part of the view, so scripted digests and replay
    fixtures distinguish repeated draws of the same prompt.
    """
    parts = [f"[{role}]\n{content}" for role, content in request.messages]
    if request.prefill is not None:
        parts.append(f"[prefill]\n{request.prefill}")
    if request.seed is not None:
        parts.append(f"[seed]\n{request.seed}")
    return "\n\n".join(parts)


class ChatBackend(Protocol):
    identifier: str

    def raw_complete(self, request: ChatRequest) -> CompletionResult: ...


class RerankBackend(Protocol):
    identifier: str

    def raw_rerank(self, request: RerankRequest) -> list[float]: ...


def _digest_unit(seed: int, *parts: str) -> float:
    """Deterministic pseudo-uniform value in [0, 1) from a stable hash."""
    payload = "\x1f".join((str(seed), *parts)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big") / 2**64


def _digest_tag(seed: int, *parts: str) -> str:
    payload = "\x1f".join((str(seed), *parts)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:8]


_PAIR_PATTERN = re.compile(
    r"Candidate A:\n(.*?)\n\nCandidate B:\n(.*?)\n\n", flags=re.DOTALL
)


@dataclass(frozen=True)
class MockRule:
    """Ordered pattern rule for the scripted chat mock.

    ``pattern`` is a regex searched over the rendered prompt.  Modes:
    ``literal`` replies with ``reply``; ``digest`` replies with a stable
    prompt-derived tag; ``judge_prefer_longer`` answers A/B pair prompts by
    candidate length; ``fail`` raises a scripted generation failure.
    """

    pattern: str
    reply: str = ""
    mode: str = "literal"
    stop_reason: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("literal", "digest", "judge_prefer_longer", "fail"):
            raise ValueError(f"unknown mock rule mode {self.mode!r}")


class MockChatBackend:
    """Deterministic scripted chat backend for offline pipelines and tests."""

    identifier = "mock"

    def __init__(
        self,
        rules: Sequence[MockRule] = (),
        seed: int = 0,
        record_path: str | Path | None = None,
    ) -> None:
        self.rules = list(rules)
        self.seed = seed
        self.record_path = Path(record_path) if record_path else None
        self._record_lock = threading.Lock()

    def raw_complete(self, request: ChatRequest) -> CompletionResult:
        prompt = render_prompt(request)
        result = self._reply(prompt)
        if self.record_path is not None:
            with self._record_lock, self.record_path.open("a", encoding="utf-8") as handle:
                entry = {"prompt": prompt, "text": result.text, "stop_reason": result.stop_reason}
                handle.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return result

    def _reply(self, prompt: str) -> CompletionResult:
        for rule in self.rules:
            if re.search(rule.pattern, prompt):
                if rule.mode == "fail":
                    raise GenerationFailure(rule.reply or "scripted generation failure")
                if rule.mode == "digest":
                    text = f"mock-{_digest_tag(self.seed, prompt)}"
                elif rule.mode == "judge_prefer_longer":
                    text = self._judge_longer(prompt)
                else:
                    text = rule.reply
                return CompletionResult(text=text, stop_reason=rule.stop_reason or END_OF_MESSAGE)
        return CompletionResult(
            text=f"mock-{_digest_tag(self.seed, prompt)}", stop_reason=END_OF_MESSAGE
        )

    def _judge_longer(self, prompt: str) -> str:
        match = _PAIR_PATTERN.search(prompt)
        if not match:
            return "A" if _digest_unit(self.seed, prompt) < 0.5 else "B"
        left, right = match.group(1), match.group(2)
        if len(left) == len(right):
            return "A"
        return "A" if len(left) > len(right) else "B"


class ReplayChatBackend:
    """Replays a fixture recorded by :class:`MockChatBackend`."""

    identifier = "replay"

    def __init__(self, entries: dict[str, CompletionResult]) -> None:
        self._entries = entries

    @classmethod
    def from_fixture(cls, path: str | Path) -> "ReplayChatBackend":
        entries: dict[str, CompletionResult] = {}
        with Path(path).open("r", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record = json.loads(line)
                entries[record["prompt"]] = CompletionResult(
                    text=record["text"], stop_reason=record["stop_reason"]
                )
        return cls(entries)

    def raw_complete(self, request: ChatRequest) -> CompletionResult:
        prompt = render_prompt(request)
        if prompt not in self._entries:
            raise GatewayError("no fixture entry for prompt")
        return self._entries[prompt]


@dataclass(frozen=True)
class MockRerankRule:
    pattern: str
    score: float
    query_pattern: str | None = None


class MockRerankBackend:
    """Deterministic scripted reranker with a digest-score fallback."""

    identifier = "mock-rerank"

    def __init__(self, rules: Sequence[MockRerankRule] = (), seed: int = 0) -> None:
        self.rules = list(rules)
        self.seed = seed

    def raw_rerank(self, request: RerankRequest) -> list[float]:
        scores = []
        for document in request.documents:
            scores.append(self._score(request.query, document))
        return scores

    def _score(self, query: str, document: str) -> float:
        for rule in self.rules:
            if rule.query_pattern and not re.search(rule.query_pattern, query):
                continue
            if re.search(rule.pattern, document):
                return rule.score
        return _digest_unit(self.seed, query, document)


def _default_post(url: str, json_payload: dict, headers: dict, timeout: float):
    import requests

    return requests.post(url, json=json_payload, headers=headers, timeout=timeout)


def _raise_for_transport(exc: Exception) -> None:
    import requests

    if isinstance(exc, (requests.ConnectionError, requests.Timeout)):
        raise TransportError(str(exc)) from exc
    raise


_IM_START = "<|im_start|>"
_IM_END = "<|im_end|>"


def render_raw_prompt(request: ChatRequest) -> str:
    """Chat-markup prompt for the raw-completion fallback."""
    parts = []
    for role, content in request.messages:
        parts.append(f"{_IM_START}{role}\n{content}{_IM_END}\n")
    parts.append(f"{_IM_START}assistant\n{request.prefill or ''}")
    return "".join(parts)


class HttpChatBackend:
    """OpenAI-compatible chat backend with assistant-prefill support.

    ``prefill_mode`` selects how the prefill reaches the server:
    ``continue_final`` appends a trailing assistant message and asks the server
    to continue it; ``raw_completion`` falls back to the completions endpoint
    with an explicit chat-markup prompt.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        prefill_mode: str = "continue_final",
        timeout: float = 120.0,
        post: Callable = _default_post,
    ) -> None:
        if prefill_mode not in ("continue_final", "raw_completion"):
            raise ValueError(f"unknown prefill mode {prefill_mode!r}")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.prefill_mode = prefill_mode
        self.timeout = timeout
        self._post = post
        self.identifier = f"openai-chat:{model}"

    def _headers(self) -> dict:
        import os

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def raw_complete(self, request: ChatRequest) -> CompletionResult:
        if self.prefill_mode == "raw_completion":
            return self._complete_raw(request)
        return self._complete_chat(request)

    def _complete_chat(self, request: ChatRequest) -> CompletionResult:
        messages = [{"role": role, "content": content} for role, content in request.messages]
        payload: dict = {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        if request.seed is not None:
            payload["seed"] = request.seed
        if request.prefill is not None:
            messages.append({"role": "assistant", "content": request.prefill})
            payload["continue_final_message"] = True
            payload["add_generation_prompt"] = False
        body = self._request(f"{self.base_url}/chat/completions", payload)
        choice = body["choices"][0]
        text = choice["message"]["content"] or ""
        return CompletionResult(text=text, stop_reason=self._map_reason(choice))

    def _complete_raw(self, request: ChatRequest) -> CompletionResult:
        payload: dict = {
            "model": self.model,
            "prompt": render_raw_prompt(request),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        if request.seed is not None:
            payload["seed"] = request.seed
        body = self._request(f"{self.base_url}/completions", payload)
        choice = body["choices"][0]
        return CompletionResult(text=choice["text"] or "", stop_reason=self._map_reason(choice))

    def _request(self, url: str, payload: dict) -> dict:
        try:
            response = self._post(url, json_payload=payload, headers=self._headers(), timeout=self.timeout)
        except Exception as exc:  # noqa: BLE001 - translated below
            _raise_for_transport(exc)
        status = getattr(response, "status_code", 200)
        if status >= 500:
            raise TransportError(f"server error {status} from {url}")
        if status >= 400:
            raise GatewayError(f"request rejected ({status}) by {url}: {getattr(response, 'text', '')[:200]}")
        return response.json()

    @staticmethod
    def _map_reason(choice: dict) -> str:
        reason = choice.get("finish_reason")
        if reason == "length":
            return LENGTH
        # OpenAI-style servers strip matched stop sequences, so a plain
        # "stop" is indistinguishable from a natural end of message here.
        return END_OF_MESSAGE


class HttpRerankBackend:
    """HTTP reranker speaking the common {query, documents} -> results schema."""

    def __init__(
        self,
        url: str,
        model: str | None = None,
        api_key_env: str = "RERANK_API_KEY",
        timeout: float = 120.0,
        post: Callable = _default_post,
    ) -> None:
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._post = post
        self.identifier = f"http-rerank:{model or url}"

    def raw_rerank(self, request: RerankRequest) -> list[float]:
        import os

        payload: dict = {"query": request.query, "documents": list(request.documents)}
        if self.model:
            payload["model"] = self.model
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            response = self._post(self.url, json_payload=payload, headers=headers, timeout=self.timeout)
        except Exception as exc:  # noqa: BLE001
            _raise_for_transport(exc)
        status = getattr(response, "status_code", 200)
        if status >= 500:
            raise TransportError(f"server error {status} from {self.url}")
        if status >= 400:
            raise GatewayError(f"request rejected ({status}) by {self.url}")
        body = response.json()
        scores = [0.0] * len(request.documents)
        for item in body["results"]:
            scores[item["index"]] = float(item["relevance_score"])
        for score in scores:
            if not math.isfinite(score):
                raise GatewayError("reranker returned a non-finite score")
        return scores


class ModelGateway:
    """Shared front door enforcing the completion and batching contracts."""

    def __init__(
        self,
        chat_backend: ChatBackend,
        rerank_backend: RerankBackend | None = None,
        max_in_flight: int = 8,
        retries: int = 3,
        backoff: float = 0.25,
    ) -> None:
        self.chat_backend = chat_backend
        self.rerank_backend = rerank_backend
        self.max_in_flight = max(1, max_in_flight)
        self.retries = max(1, retries)
        self.backoff = backoff

    @property
    def has_reranker(self) -> bool:
        return self.rerank_backend is not None

    def complete(self, request: ChatRequest) -> CompletionResult:
        result = self._with_retries(lambda: self.chat_backend.raw_complete(request))
        text = result.text
        stop_reason = result.stop_reason
        if request.prefill and text.startswith(request.prefill):
            text = text[len(request.prefill):]
        cut = min(
            (position for position in (text.find(stop) for stop in request.stop_sequences) if position >= 0),
            default=-1,
        )
        if cut >= 0:
            text = text[:cut]
            stop_reason = STOP_SEQUENCE_HIT
        if not text.strip():
            raise GenerationFailure("backend returned an empty completion")
        return CompletionResult(text=text, stop_reason=stop_reason)

    def rerank(self, request: RerankRequest) -> list[float]:
        if self.rerank_backend is None:
            raise GatewayError("no reranker backend configured")
        scores = self._with_retries(lambda: self.rerank_backend.raw_rerank(request))
        if len(scores) != len(request.documents):
            raise GatewayError(
                f"reranker returned {len(scores)} scores for {len(request.documents)} documents"
            )
        return scores

    def batch(self, requests: Sequence[ChatRequest]) -> list[CompletionResult | GatewayError]:
        """Order-preserving concurrent completion; failures returned in place."""
        if not requests:
            return []

        def attempt(request: ChatRequest) -> CompletionResult | GatewayError:
            try:
                return self.complete(request)
            except GatewayError as exc:
                return exc

        if len(requests) == 1:
            return [attempt(requests[0])]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(attempt, requests))

    def _with_retries(self, call):
        last: TransportError | None = None
        for attempt in range(self.retries):
            try:
                return call()
            except TransportError as exc:
                last = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise TransportError(f"transport failed after {self.retries} attempts: {last}") from last
