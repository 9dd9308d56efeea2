"""
Unit tests for the OpenAI-compatible providers and the mock language model.
Remote clients are replaced by in-process fakes — no network needed.
"""

import json
import math
import os
import sys
import tempfile
import unittest
from pathlib import Path
from types import SimpleNamespace

import httpx
import openai

# Add project root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ontomatch.errors import ConfigError, ContractError, ProviderError
from ontomatch.matcher import DecisionMode, render_prompt
from ontomatch.ontology import ConceptRepresentation, Variant
from ontomatch.providers import (
    MockLlmProvider, OpenAIChatProvider, OpenAIEmbeddingProvider, RateLimiter,
    call_with_retries, resolve_api_key,
)

REQUEST = httpx.Request("POST", "https://llm.test/v1/chat/completions")


def rate_limited():
    return openai.RateLimitError("slow down", response=httpx.Response(429, request=REQUEST), body=None)


def bad_request():
    return openai.BadRequestError("bad prompt", response=httpx.Response(400, request=REQUEST), body=None)


class Flaky:
    """Raises the queued errors in order, then returns value."""

    def __init__(self, errors, value="ok"):
        self.errors = list(errors)
        self.value = value
        self.calls = 0

    def __call__(self, **kwargs):
        self.calls += 1
        self.kwargs = kwargs
        if self.errors:
            raise self.errors.pop(0)
        return self.value


def chat_response(text, top=None):
    logprobs = None
    if top is not None:
        entries = [SimpleNamespace(token=t, logprob=math.log(p)) for t, p in top]
        logprobs = SimpleNamespace(content=[SimpleNamespace(token=top[0][0], logprob=math.log(top[0][1]),
                                                             top_logprobs=entries)])
    choice = SimpleNamespace(message=SimpleNamespace(content=text), logprobs=logprobs)
    return SimpleNamespace(choices=[choice])


def chat_client(create):
    return SimpleNamespace(chat=SimpleNamespace(completions=SimpleNamespace(create=create)))


def embedding_client(create):
    return SimpleNamespace(embeddings=SimpleNamespace(create=create))


# ── Tests ─────────────────────────────────────────────────────

class TestCallWithRetries(unittest.TestCase):

    def test_transient_errors_retried(self):
        fn = Flaky([rate_limited(), openai.APIConnectionError(request=REQUEST)])
        with self.assertLogs("ontomatch.providers", level="WARNING") as logs:
            result = call_with_retries(fn, "chat", max_retries=3, base_delay=0.01)
        self.assertEqual(result, "ok")
        self.assertEqual(fn.calls, 3)
        self.assertEqual(len(logs.records), 2)
        self.assertIn("retry 1/3 in 0.01s", logs.output[0])
        self.assertIn("retry 2/3 in 0.02s", logs.output[1])

    def test_gives_up(self):
        fn = Flaky([openai.APITimeoutError(request=REQUEST)] * 3)
        with self.assertRaises(ProviderError) as ctx, self.assertLogs("ontomatch.providers"):
            call_with_retries(fn, "chat", max_retries=2, base_delay=0)
        self.assertIn("3 attempts", str(ctx.exception))
        self.assertEqual(fn.calls, 3)

    def test_client_error_not_retried(self):
        fn = Flaky([bad_request()])
        with self.assertRaises(ProviderError) as ctx:
            call_with_retries(fn, "chat", base_delay=0)
        self.assertIn("rejected", str(ctx.exception))
        self.assertEqual(fn.calls, 1)


class TestRateLimiter(unittest.TestCase):

    def test_spacing(self):
        sleeps = []
        limiter = RateLimiter(60, clock=lambda: 100.0, sleep=sleeps.append)
        for _ in range(3):
            limiter.wait()
        self.assertEqual(sleeps, [1.0, 2.0])

    def test_unlimited(self):
        sleeps = []
        limiter = RateLimiter(0, sleep=sleeps.append)
        limiter.wait()
        self.assertEqual(sleeps, [])


class TestResolveApiKey(unittest.TestCase):

    def test_missing(self):
        os.environ.pop("ONTOMATCH_TEST_KEY", None)
        with self.assertRaises(ConfigError) as ctx:
            resolve_api_key("ONTOMATCH_TEST_KEY", "llm.api_key_env")
        self.assertEqual(ctx.exception.field, "llm.api_key_env")

    def test_present(self):
        os.environ["ONTOMATCH_TEST_KEY"] = " sk-test "
        try:
            self.assertEqual(resolve_api_key("ONTOMATCH_TEST_KEY", "llm.api_key_env"), "sk-test")
        finally:
            del os.environ["ONTOMATCH_TEST_KEY"]


class TestOpenAIChatProvider(unittest.TestCase):

    def test_logprobs_summed_per_token(self):
        create = Flaky([], chat_response("Yes", top=[("Yes", 0.6), ("yes", 0.2), ("No", 0.1)]))
        provider = OpenAIChatProvider("gpt-test", client=chat_client(create))
        result = provider.complete("prompt")
        self.assertEqual(result.mode, DecisionMode.PROBABILITY)
        self.assertAlmostEqual(result.token_probabilities["Yes"], 0.6)
        self.assertAlmostEqual(result.token_probabilities["No"], 0.1)
        self.assertEqual(create.kwargs["temperature"], 0)
        self.assertTrue(create.kwargs["logprobs"])
        self.assertEqual(create.kwargs["messages"], [{"role": "user", "content": "prompt"}])

    def test_missing_logprobs_falls_back_to_text(self):
        create = Flaky([], chat_response("no"))
        provider = OpenAIChatProvider("gpt-test", client=chat_client(create))
        result = provider.complete("prompt")
        self.assertEqual(result.mode, DecisionMode.TEXT_PARSE)
        self.assertEqual(result.text, "no")

    def test_text_mode_request(self):
        create = Flaky([], chat_response("yes"))
        provider = OpenAIChatProvider("gpt-test", logprobs=False, client=chat_client(create))
        self.assertEqual(provider.mode, DecisionMode.TEXT_PARSE)
        provider.complete("prompt")
        self.assertNotIn("logprobs", create.kwargs)

    def test_max_tokens_bounds(self):
        with self.assertRaises(ConfigError):
            OpenAIChatProvider("gpt-test", max_tokens=0, client=chat_client(Flaky([])))

    def test_retry_then_success(self):
        create = Flaky([rate_limited()], chat_response("yes"))
        provider = OpenAIChatProvider("gpt-test", logprobs=False, client=chat_client(create), retry_delay=0)
        self.assertEqual(provider.complete("prompt").text, "yes")
        self.assertEqual(create.calls, 2)
        self.assertEqual(provider.name, "openai-chat:gpt-test")


class TestOpenAIEmbeddingProvider(unittest.TestCase):

    def test_rows_ordered_by_index(self):
        data = [SimpleNamespace(index=1, embedding=[0.0, 1.0]), SimpleNamespace(index=0, embedding=[1.0, 0.0])]
        provider = OpenAIEmbeddingProvider("embed-test", client=embedding_client(Flaky([], SimpleNamespace(data=data))))
        matrix = provider.embed(["a", "b"])
        self.assertEqual(matrix.tolist(), [[1.0, 0.0], [0.0, 1.0]])
        self.assertEqual(provider.dimensionality, 2)

    def test_mixed_widths(self):
        data = [SimpleNamespace(index=0, embedding=[1.0]), SimpleNamespace(index=1, embedding=[0.0, 1.0])]
        provider = OpenAIEmbeddingProvider("embed-test", client=embedding_client(Flaky([], SimpleNamespace(data=data))))
        with self.assertRaises(ContractError):
            provider.embed(["a", "b"])


class TestMockLlmProvider(unittest.TestCase):

    def _prompt(self, source, target):
        return render_prompt(
            ConceptRepresentation("s", Variant.C, source),
            ConceptRepresentation("t", Variant.C, target),
        ).text

    def _fixture(self, tmp, data):
        path = Path(tmp) / "anatomy_mock.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    def test_probability_fixture(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._fixture(tmp, {"mode": "probability", "pairs": [
                {"source": "heart", "target": "heart organ", "probabilities": {"yes": 0.9, "no": 0.1}},
            ]})
            provider = MockLlmProvider.from_fixture(path)
        self.assertRegex(provider.name, r"^mock:anatomy_mock:[0-9a-f]{12}$")
        self.assertEqual(provider.complete(self._prompt("heart", "heart organ")).token_probabilities,
                         {"yes": 0.9, "no": 0.1})
        self.assertEqual(provider.complete(self._prompt("heart", "liver")).token_probabilities, {"no": 1.0})
        self.assertEqual(provider.calls, 2)

    def test_text_fixture(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._fixture(tmp, {"mode": "text", "pairs": [
                {"source": "lung", "target": "poumon", "text": "Yes."},
            ]})
            provider = MockLlmProvider.from_fixture(path)
        self.assertEqual(provider.mode, DecisionMode.TEXT_PARSE)
        self.assertEqual(provider.complete(self._prompt("lung", "poumon")).text, "Yes.")

    def test_name_tracks_fixture_contents(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = MockLlmProvider.from_fixture(self._fixture(tmp, {"pairs": []}))
            same = MockLlmProvider.from_fixture(self._fixture(tmp, {"pairs": []}))
            edited = MockLlmProvider.from_fixture(self._fixture(tmp, {"pairs": [
                {"source": "heart", "target": "heart organ", "probabilities": {"yes": 1.0}},
            ]}))
        self.assertEqual(first.name, same.name)
        self.assertNotEqual(first.name, edited.name)

    def test_bad_fixtures(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                MockLlmProvider.from_fixture(Path(tmp) / "missing.json")
            with self.assertRaises(ConfigError):
                MockLlmProvider.from_fixture(self._fixture(tmp, {"mode": "beam"}))
            with self.assertRaises(ConfigError):
                MockLlmProvider.from_fixture(self._fixture(tmp, {"pairs": [{"source": "a"}]}))


if __name__ == "__main__":
    unittest.main()
