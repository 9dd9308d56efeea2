"""
Remote and mock providers: OpenAI-compatible embeddings and chat
completions, plus a fixture-driven mock language model.

Remote calls go through `call_with_retries`: transport errors, timeouts,
rate limits and 5xx responses are retried with exponential backoff, other
API errors fail immediately.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import backoff
import numpy as np
import openai

from ontomatch.errors import ConfigError, ContractError, ProviderError
from ontomatch.matcher import CompletionResult, DecisionMode

log = logging.getLogger(__name__)

_RETRYABLE = (
    openai.APIConnectionError,
    openai.APITimeoutError,
    openai.RateLimitError,
    openai.InternalServerError,
)


def call_with_retries(
    fn: Callable[[], Any],
    what: str,
    max_retries: int = 3,
    base_delay: float = 1.0,
) -> Any:
    """Run fn with up to max_retries retries on transient errors."""
    attempts = max_retries + 1

    def _log_retry(details):
        log.warning("%s: transient error (%s), retry %d/%d in %.2fs",
                    what, type(details["exception"]).__name__, details["tries"], max_retries, details["wait"])

    retrying = backoff.on_exception(
        backoff.expo,
        _RETRYABLE,
        max_tries=attempts,
        jitter=None,
        factor=base_delay,
        on_backoff=_log_retry,
        logger=None,
    )(fn)
    try:
        return retrying()
    except _RETRYABLE as e:
        log.error("%s failed after %d attempts: %r", what, attempts, e)
        raise ProviderError(f"{what} failed after {attempts} attempts: {e}") from e
    except openai.APIError as e:
        raise ProviderError(f"{what} rejected: {e}") from e


class RateLimiter:
    """Minimum spacing between calls, shared by all threads."""

    def __init__(self, requests_per_minute: float = 0, clock=time.monotonic, sleep=time.sleep):
        self.interval = 60.0 / requests_per_minute if requests_per_minute > 0 else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


def resolve_api_key(env_var: str, field: str) -> str:
    key = os.getenv(env_var, "").strip()
    if not key:
        raise ConfigError(field, f"Environment variable {env_var} is not set")
    return key


def _build_client(api_key: str, base_url: str | None, timeout: float) -> openai.OpenAI:
    # retries are handled by call_with_retries
    return openai.OpenAI(api_key=api_key, base_url=base_url or None, timeout=timeout, max_retries=0)


# ═════════════════════════════════════════════════════════════
# Embeddings
# ═════════════════════════════════════════════════════════════

class OpenAIEmbeddingProvider:
    cacheable = True

    def __init__(
        self,
        model: str,
        api_key: str = "",
        base_url: str | None = None,
        dimensionality: int | None = None,
        max_retries: int = 3,
        timeout: float = 30.0,
        client: Any = None,
        retry_delay: float = 1.0,
    ):
        self.model = model
        self.name = f"openai-embed:{model}"
        self.dimensionality = dimensionality
        self.max_retries = max_retries
        self.retry_delay = retry_delay
        self._client = client or _build_client(api_key, base_url, timeout)
        self._lock = threading.Lock()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        response = call_with_retries(
            lambda: self._client.embeddings.create(model=self.model, input=list(texts)),
            what=f"Embedding request ({self.model}, {len(texts)} texts)",
            max_retries=self.max_retries,
            base_delay=self.retry_delay,
        )
        rows = [item.embedding for item in sorted(response.data, key=lambda item: item.index)]
        widths = {len(row) for row in rows}
        if len(widths) > 1:
            raise ContractError(f"{self.name} returned mixed dimensions {sorted(widths)}")
        with self._lock:
            if self.dimensionality is None and widths:
                self.dimensionality = widths.pop()
        return np.asarray(rows, dtype=float)


# ═════════════════════════════════════════════════════════════
# Language models
# ═════════════════════════════════════════════════════════════

class OpenAIChatProvider:
    """Single-turn chat completion at temperature 0."""

    def __init__(
        self,
        model: str,
        api_key: str = "",
        base_url: str | None = None,
        logprobs: bool = True,
        max_tokens: int = 4,
        top_logprobs: int = 20,
        requests_per_minute: float = 0,
        max_retries: int = 3,
        timeout: float = 30.0,
        client: Any = None,
        retry_delay: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not 1 <= max_tokens <= 8:
            raise ConfigError("llm.max_tokens", f"max_tokens must be between 1 and 8, got {max_tokens}")
        self.model = model
        self.mode = DecisionMode.PROBABILITY if logprobs else DecisionMode.TEXT_PARSE
        self.name = f"openai-chat:{model}"
        self.max_tokens = max_tokens
        self.top_logprobs = top_logprobs
        self.max_retries = max_retries
        self.limiter = RateLimiter(requests_per_minute, sleep=sleep)
        self.retry_delay = retry_delay
        self._client = client or _build_client(api_key, base_url, timeout)

    def _request(self, prompt: str):
        self.limiter.wait()
        kwargs: dict[str, Any] = dict(
            model=self.model,
            messages=[{"role": "user", "content": prompt}],
            temperature=0,
            max_tokens=self.max_tokens,
        )
        if self.mode is DecisionMode.PROBABILITY:
            kwargs.update(logprobs=True, top_logprobs=self.top_logprobs)
        return self._client.chat.completions.create(**kwargs)

    def complete(self, prompt: str) -> CompletionResult:
        response = call_with_retries(
            lambda: self._request(prompt),
            what=f"Chat completion ({self.model})",
            max_retries=self.max_retries,
            base_delay=self.retry_delay,
        )
        choice = response.choices[0]
        text = choice.message.content or ""
        content = getattr(choice.logprobs, "content", None) if choice.logprobs else None
        if self.mode is DecisionMode.PROBABILITY and content:
            first = content[0]
            probabilities: dict[str, float] = {}
            for candidate in first.top_logprobs or [first]:
                # the same surface form can appear once per token id
                probabilities[candidate.token] = probabilities.get(candidate.token, 0.0) + math.exp(candidate.logprob)
            return CompletionResult(
                mode=DecisionMode.PROBABILITY,
                token_probabilities={t: min(p, 1.0) for t, p in probabilities.items()},
                text=text,
            )
        if self.mode is DecisionMode.PROBABILITY:
            log.warning("%s returned no logprobs; parsing the reply text instead", self.name)
        return CompletionResult(mode=DecisionMode.TEXT_PARSE, text=text)


class MockLlmProvider:
    """Fixture-driven language model for offline runs and tests.

    Fixture document:

        {"mode": "probability",
         "pairs": [{"source": "heart", "target": "heart organ",
                    "probabilities": {"yes": 0.9, "no": 0.1}}]}

    In "text" mode each pair carries "text" instead. The pair is recovered
    from the last First/Second concept block of the prompt; unlisted pairs
    answer {"no": 1.0} (or "no").
    """

    def __init__(self, pairs: Mapping[tuple[str, str], Any], mode: DecisionMode = DecisionMode.PROBABILITY,
                 name: str = "mock"):
        self.pairs = dict(pairs)
        self.mode = mode
        self.name = name
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_fixture(cls, path: str | Path) -> "MockLlmProvider":
        path = Path(path)
        try:
            raw = path.read_bytes()
            data = json.loads(raw.decode("utf-8"))
        except OSError as e:
            raise ConfigError("llm.fixture", f"Cannot read mock fixture {path}: {e.strerror or e}") from e
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ConfigError("llm.fixture", f"Invalid JSON in mock fixture {path.name}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("llm.fixture", f"Mock fixture {path.name} must be a JSON object")
        modes = {"probability": DecisionMode.PROBABILITY, "text": DecisionMode.TEXT_PARSE}
        mode = modes.get(data.get("mode", "probability"))
        if mode is None:
            raise ConfigError("llm.fixture", f"Unknown mock fixture mode {data.get('mode')!r}")
        value_key = "probabilities" if mode is DecisionMode.PROBABILITY else "text"
        pairs = {}
        for entry in data.get("pairs", []):
            try:
                pairs[(entry["source"], entry["target"])] = entry[value_key]
            except (KeyError, TypeError) as e:
                raise ConfigError("llm.fixture", f"Fixture entry {entry!r} lacks {e}") from e
        # fixture contents are part of the cache namespace
        digest = hashlib.sha256(raw).hexdigest()[:12]
        return cls(pairs, mode=mode, name=f"mock:{path.stem}:{digest}")

    @staticmethod
    def _pair_from_prompt(prompt: str) -> tuple[str, str]:
        lines = prompt.split("\n")

        def after_last(header: str) -> str:
            for index in range(len(lines) - 1, -1, -1):
                if lines[index] == header and index + 1 < len(lines):
                    return lines[index + 1]
            return ""

        return after_last("### First concept:"), after_last("### Second concept:")

    def complete(self, prompt: str) -> CompletionResult:
        with self._lock:
            self.calls += 1
        value = self.pairs.get(self._pair_from_prompt(prompt))
        if self.mode is DecisionMode.PROBABILITY:
            return CompletionResult(
                mode=self.mode,
                token_probabilities=dict(value) if value is not None else {"no": 1.0},
            )
        return CompletionResult(mode=self.mode, text=value if value is not None else "no")
