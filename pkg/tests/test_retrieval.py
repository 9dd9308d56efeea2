"""
Unit tests for TF-IDF, cosine scoring, knowledge bases and top-k retrieval.
Providers are in-process fakes — no network needed.
"""

import json
import math
import os
import random
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy import sparse

# Add project root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ontomatch.cache import ResponseCache
from ontomatch.errors import ContractError, FitError, MetricError, ProviderError
from ontomatch.evaluation import ReferenceAlignment
from ontomatch.ontology import ConceptRepresentation, Role, Variant, parse_ontology
from ontomatch.retrieval import (
    CachingEmbeddingProvider, CandidatePair, TfidfProvider,
    build_knowledge_base, cosine_similarity, embed_batched, embed_texts,
    expected_provider_calls, fit_tfidf, knowledge_base_key, load_knowledge_base,
    recall_at_k, retrieve_all, retrieve_candidates, save_knowledge_base,
)


class LookupProvider:
    """Dense provider backed by a text → vector table."""

    cacheable = False

    def __init__(self, vectors: dict, name: str = "lookup"):
        self.vectors = vectors
        self.name = name
        self.dimensionality = len(next(iter(vectors.values())))
        self.calls = 0

    def embed(self, texts):
        self.calls += 1
        return np.array([self.vectors[t] for t in texts], dtype=float)


class CountingProvider:
    """Deterministic hash-seeded vectors; counts embed calls."""

    cacheable = True

    def __init__(self, dim: int = 4, name: str = "counting"):
        self.name = name
        self.dimensionality = dim
        self._width = dim
        self.calls = 0

    def embed(self, texts):
        self.calls += 1
        rows = []
        for text in texts:
            rng = np.random.default_rng(sum(map(ord, text)) + len(text))
            rows.append(rng.normal(size=self._width))
        return np.array(rows)


def _ontology(labels, role=Role.TARGET, name="target"):
    concepts = [{"id": f"t{i}", "label": label} for i, label in enumerate(labels)]
    return parse_ontology(json.dumps({"name": name, "concepts": concepts}), role)


def _query(concept_id, text, variant=Variant.C):
    return ConceptRepresentation(concept_id=concept_id, variant=variant, core_text=text)


# ── Tests ─────────────────────────────────────────────────────

class TestTfidf(unittest.TestCase):
    """Smoothed idf and unit-norm rows."""

    def test_idf_values(self):
        model = fit_tfidf(["heart", "heart valve"])
        self.assertEqual(set(model.vocabulary), {"heart", "valve"})
        self.assertAlmostEqual(model.idf_of("heart"), 1.0, delta=1e-6)
        self.assertAlmostEqual(model.idf_of("valve"), math.log(1.5) + 1, delta=1e-6)
        self.assertAlmostEqual(model.idf_of("valve"), 1.4055, delta=1e-4)
        self.assertEqual(model.document_count, 2)

    def test_single_document(self):
        model = fit_tfidf(["a"])
        self.assertEqual(list(model.vocabulary), ["a"])
        self.assertAlmostEqual(model.idf_of("a"), 1.0, delta=1e-6)

    def test_all_empty_documents(self):
        with self.assertRaises(FitError):
            fit_tfidf(["", ""])

    def test_empty_corpus(self):
        with self.assertRaises(FitError):
            fit_tfidf([])

    def test_idf_positive(self):
        model = fit_tfidf(["heart valve", "mitral valve", "left atrium", "heart"])
        self.assertEqual(len(model.idf), len(model.vocabulary))
        self.assertTrue(np.all(model.idf > 0))

    def test_single_token_text_is_unit_vector(self):
        provider = TfidfProvider.fit(["heart", "heart valve"])
        row = embed_texts(provider, ["heart"]).toarray()[0]
        heart = provider.model.vocabulary["heart"]
        self.assertAlmostEqual(row[heart], 1.0, delta=1e-12)
        self.assertAlmostEqual(float(np.abs(row).sum()), 1.0, delta=1e-12)

    def test_rows_are_unit_norm(self):
        corpus = ["heart valve", "mitral valve", "left atrium", "heart", "cardiac muscle tissue"]
        provider = TfidfProvider.fit(corpus)
        matrix = embed_texts(provider, corpus + ["valve valve heart"])
        norms = np.linalg.norm(matrix.toarray(), axis=1)
        for norm in norms:
            self.assertAlmostEqual(float(norm), 1.0, delta=1e-9)

    def test_same_text_twice(self):
        provider = TfidfProvider.fit(["heart", "heart valve"])
        matrix = embed_texts(provider, ["heart valve", "heart valve"]).toarray()
        np.testing.assert_array_equal(matrix[0], matrix[1])

    def test_unknown_tokens_ignored(self):
        provider = TfidfProvider.fit(["heart", "heart valve"])
        row = embed_texts(provider, ["kidney"])
        self.assertEqual(row.nnz, 0)


class TestCosineSimilarity(unittest.TestCase):

    def test_identity(self):
        self.assertAlmostEqual(cosine_similarity([0.3, -2.0, 1.0], [0.3, -2.0, 1.0]), 1.0, delta=1e-12)

    def test_orthogonal(self):
        self.assertEqual(cosine_similarity([1, 0, 0], [0, 1, 0]), 0.0)

    def test_half_angle(self):
        self.assertAlmostEqual(cosine_similarity([1, 1, 0], [1, 0, 0]), 1 / math.sqrt(2), delta=1e-12)
        self.assertAlmostEqual(cosine_similarity([1, 1, 0], [1, 0, 0]), 0.70711, delta=1e-5)

    def test_zero_vector(self):
        self.assertEqual(cosine_similarity([0, 0, 0], [1, 2, 3]), 0.0)

    def test_dimension_mismatch(self):
        with self.assertRaises(ContractError):
            cosine_similarity([1, 0], [1, 0, 0])

    def test_non_finite(self):
        with self.assertRaises(ContractError):
            cosine_similarity([1, float("nan")], [1, 0])

    def test_sparse_rows(self):
        u = sparse.csr_matrix([[1.0, 1.0, 0.0]])
        v = sparse.csr_matrix([[1.0, 0.0, 0.0]])
        self.assertAlmostEqual(cosine_similarity(u, v), 1 / math.sqrt(2), delta=1e-12)

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            u, v = rng.normal(size=6), rng.normal(size=6)
            a, b = rng.uniform(0.01, 100, size=2)
            base = cosine_similarity(u, v)
            self.assertAlmostEqual(base, cosine_similarity(v, u), delta=1e-12)
            self.assertAlmostEqual(base, cosine_similarity(a * u, b * v), delta=1e-9)


class TestEmbedding(unittest.TestCase):

    def test_batch_count(self):
        provider = CountingProvider()
        texts = [f"concept {i}" for i in range(1000)]
        matrix = embed_batched(provider, texts, batch_size=128)
        self.assertEqual(provider.calls, 8)
        self.assertEqual(matrix.shape, (1000, 4))
        self.assertEqual(expected_provider_calls(1000, 128), 8)

    def test_concurrent_batches_keep_order(self):
        texts = [f"concept {i}" for i in range(300)]
        serial = embed_batched(CountingProvider(), texts, batch_size=32)
        concurrent = embed_batched(CountingProvider(), texts, batch_size=32, max_in_flight=4)
        np.testing.assert_array_equal(serial, concurrent)

    def test_wrong_row_count(self):
        class Short(CountingProvider):
            def embed(self, texts):
                return super().embed(texts[:-1])

        with self.assertRaises(ContractError) as ctx:
            embed_batched(Short(), ["a", "b", "c", "d"], batch_size=2)
        self.assertIn("[0, 2)", str(ctx.exception))

    def test_declared_dimension_checked(self):
        provider = CountingProvider(dim=4)
        provider.dimensionality = 5
        with self.assertRaises(ContractError):
            embed_texts(provider, ["heart"])

    def test_provider_error_names_batch(self):
        class Failing(CountingProvider):
            def embed(self, texts):
                if "c" in texts:
                    raise ProviderError("unreachable", retryable=True)
                return super().embed(texts)

        with self.assertRaises(ProviderError) as ctx:
            embed_batched(Failing(), ["a", "b", "c", "d"], batch_size=2)
        self.assertIn("[2, 4)", str(ctx.exception))
        self.assertTrue(ctx.exception.retryable)

    def test_caching_provider(self):
        with tempfile.TemporaryDirectory() as tmp:
            cache = ResponseCache(tmp)
            inner = CountingProvider()
            cached = CachingEmbeddingProvider(inner, cache)
            first = cached.embed(["heart", "lung"])
            second = cached.embed(["lung", "heart", "liver"])
            self.assertEqual(inner.calls, 2)
            np.testing.assert_allclose(first[0], second[1])
            self.assertEqual(cache.hits, 2)
            self.assertEqual(cache.misses, 3)


class TestKnowledgeBase(unittest.TestCase):

    def test_entries_in_ontology_order(self):
        target = _ontology(["Heart", "Heart Valve", "Lung"])
        provider = TfidfProvider.fit(["heart", "heart valve", "lung"])
        kb = build_knowledge_base(target, Variant.C, provider)
        self.assertEqual(len(kb), 3)
        self.assertEqual([entry[0] for entry in kb.entries], ["t0", "t1", "t2"])
        self.assertEqual(kb.provider_name, "tfidf")

    def test_empty_ontology(self):
        with self.assertRaises(ContractError):
            build_knowledge_base(_ontology([]), Variant.C, CountingProvider())

    def test_deterministic_build(self):
        target = _ontology(["Heart", "Heart Valve", "Lung"])
        first = build_knowledge_base(target, Variant.C, CountingProvider())
        second = build_knowledge_base(target, Variant.C, CountingProvider())
        self.assertTrue(first.same_entries(second))

    def test_save_and_load_dense(self):
        target = _ontology(["Heart", "Heart Valve", "Lung"])
        kb = build_knowledge_base(target, Variant.CP, CountingProvider())
        key = knowledge_base_key("counting", Variant.CP, target)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "kb" / f"{key}.npz"
            save_knowledge_base(kb, path, key)
            loaded = load_knowledge_base(path, key)
            self.assertIsNotNone(loaded)
            self.assertTrue(kb.same_entries(loaded))
            self.assertEqual(loaded.provider_name, "counting")
            self.assertIsNone(load_knowledge_base(path, "other-key"))

    def test_save_and_load_sparse(self):
        target = _ontology(["Heart", "Heart Valve", "Lung"])
        provider = TfidfProvider.fit(["heart", "heart valve", "lung"])
        kb = build_knowledge_base(target, Variant.C, provider)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "kb.npz"
            save_knowledge_base(kb, path, "k")
            loaded = load_knowledge_base(path, "k")
            self.assertTrue(sparse.issparse(loaded.matrix))
            self.assertTrue(kb.same_entries(loaded))

    def test_corrupt_cache_file_is_a_miss(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "kb.npz"
            path.write_bytes(b"not a zip file")
            self.assertIsNone(load_knowledge_base(path, "k"))

    def test_key_depends_on_content(self):
        a = _ontology(["Heart"])
        b = _ontology(["Hearts"])
        self.assertNotEqual(knowledge_base_key("p", "C", a), knowledge_base_key("p", "C", b))
        self.assertNotEqual(knowledge_base_key("p", "C", a), knowledge_base_key("p", "CP", a))


class TestRetrieveCandidates(unittest.TestCase):

    def setUp(self):
        self.target = _ontology(["Heart", "Heart Valve", "Lung"])
        self.provider = TfidfProvider.fit(["heart", "heart valve", "lung"])
        self.kb = build_knowledge_base(self.target, Variant.C, self.provider)

    def test_min_of_k_and_kb_size(self):
        pairs = retrieve_candidates(self.kb, _query("s0", "heart"), self.provider, k=5)
        self.assertEqual(len(pairs), 3)

    def test_exact_text_ranks_first(self):
        pairs = retrieve_candidates(self.kb, _query("s0", "heart valve"), self.provider, k=2)
        self.assertEqual(pairs[0].target_id, "t1")
        self.assertAlmostEqual(pairs[0].s_ir, 1.0, delta=1e-12)
        self.assertGreaterEqual(pairs[0].s_ir, pairs[1].s_ir)

    def test_ties_keep_entry_order(self):
        vectors = {"a": [1.0, 0.0], "b": [1.0, 0.0], "c": [0.0, 1.0], "q": [1.0, 0.0]}
        provider = LookupProvider(vectors)
        kb = build_knowledge_base(_ontology(["a", "b", "c"]), Variant.C, provider)
        pairs = retrieve_candidates(kb, _query("s", "q"), provider, k=3)
        self.assertEqual([p.target_id for p in pairs], ["t0", "t1", "t2"])

    def test_duplicate_vectors_keep_entry_order(self):
        rng = random.Random(5)
        np_rng = np.random.default_rng(5)
        for _ in range(300):
            n_targets = rng.randint(2, 50)
            dim = rng.choice([3, 17, 64, 300])
            shared = np_rng.normal(size=dim)
            duplicates = sorted(rng.sample(range(n_targets), rng.randint(2, min(6, n_targets))))
            vectors = {}
            for i in range(n_targets):
                vectors[f"text {i}"] = (shared if i in duplicates else np_rng.normal(size=dim)).tolist()
            vectors["query"] = (shared * rng.uniform(0.5, 3.0)).tolist()
            provider = LookupProvider(vectors)
            kb = build_knowledge_base(_ontology([f"text {i}" for i in range(n_targets)]), Variant.C, provider)
            pairs = retrieve_candidates(kb, _query("s", "query"), provider, k=len(duplicates))
            self.assertEqual([p.target_id for p in pairs], [f"t{i}" for i in duplicates])

    def test_k_zero(self):
        with self.assertRaises(ContractError):
            retrieve_candidates(self.kb, _query("s0", "heart"), self.provider, k=0)

    def test_variant_mismatch(self):
        with self.assertRaises(ContractError):
            retrieve_candidates(self.kb, _query("s0", "heart", Variant.CP), self.provider, k=1)

    def test_provider_mismatch(self):
        other = TfidfProvider.fit(["heart"])
        other.name = "tfidf-other"
        with self.assertRaises(ContractError):
            retrieve_candidates(self.kb, _query("s0", "heart"), other, k=1)

    def test_retrieve_all_matches_single_queries(self):
        queries = [_query("s0", "heart"), _query("s1", "lung tissue"), _query("s2", "valve")]
        bulk = retrieve_all(self.kb, queries, self.provider, k=2, batch_size=2)
        for query in queries:
            single = retrieve_candidates(self.kb, query, self.provider, k=2)
            self.assertEqual([p.target_id for p in bulk[query.concept_id]], [p.target_id for p in single])

    def test_matches_brute_force_on_random_instances(self):
        rng = random.Random(11)
        np_rng = np.random.default_rng(11)
        instances = 0
        for k in (1, 5, 10, 20):
            for _ in range(60):
                n_targets = rng.randint(1, 50)
                dim = rng.randint(2, 16)
                vectors = {f"text {i}": np_rng.normal(size=dim).tolist() for i in range(n_targets)}
                vectors["query"] = np_rng.normal(size=dim).tolist()
                provider = LookupProvider(vectors)
                target = _ontology([f"text {i}" for i in range(n_targets)])
                kb = build_knowledge_base(target, Variant.C, provider)
                pairs = retrieve_candidates(kb, _query("s", "query"), provider, k=k)

                q = np.array(vectors["query"])
                scored = []
                for i in range(n_targets):
                    v = np.array(vectors[f"text {i}"])
                    scored.append((-(q @ v) / (np.linalg.norm(q) * np.linalg.norm(v)), i))
                expected = sorted(scored)[:k]

                self.assertEqual(len(pairs), min(k, n_targets))
                self.assertEqual([p.target_id for p in pairs], [f"t{i}" for _, i in expected])
                for pair, (neg_score, _) in zip(pairs, expected):
                    self.assertAlmostEqual(pair.s_ir, -neg_score, delta=1e-9)
                instances += 1
        self.assertGreaterEqual(instances, 200)


class TestRecallAtK(unittest.TestCase):

    def _c(self, source, *targets):
        return [CandidatePair(source, t, 1.0 - i * 0.1) for i, t in enumerate(targets)]

    def test_containment(self):
        reference = ReferenceAlignment(frozenset({("a", "x")}))
        self.assertEqual(recall_at_k({"a": self._c("a", "x", "y")}, reference, 5), 1.0)

    def test_miss(self):
        reference = ReferenceAlignment(frozenset({("a", "x")}))
        self.assertEqual(recall_at_k({"a": self._c("a", "y", "z")}, reference, 2), 0.0)

    def test_half_hit(self):
        reference = ReferenceAlignment(frozenset({("a", "x"), ("b", "y")}))
        self.assertEqual(recall_at_k({"a": self._c("a", "x")}, reference, 5), 0.5)

    def test_only_first_k_count(self):
        reference = ReferenceAlignment(frozenset({("a", "x")}))
        self.assertEqual(recall_at_k({"a": self._c("a", "y", "x")}, reference, 1), 0.0)

    def test_empty_reference(self):
        with self.assertRaises(MetricError):
            recall_at_k({}, ReferenceAlignment(frozenset()), 5)


if __name__ == "__main__":
    unittest.main()
