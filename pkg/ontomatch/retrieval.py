"""
Embedding knowledge base over target concepts and top-k candidate retrieval.

Scoring is an exhaustive cosine scan over every KB entry, so results are
exactly those of brute-force score-and-sort. Ties keep KB entry order.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, Union, runtime_checkable

import numpy as np
from scipy import sparse
from sklearn.feature_extraction.text import TfidfVectorizer
from sklearn.metrics.pairwise import cosine_similarity as _pairwise_cosine

from ontomatch import KB_CACHE_VERSION
from ontomatch.cache import ResponseCache, request_hash
from ontomatch.errors import ContractError, FitError, MetricError, ProviderError
from ontomatch.ontology import (
    ConceptRepresentation, Ontology, Variant,
    build_representations, tokenize, verbalize_representation,
)

log = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sparse.csr_matrix]


# ═════════════════════════════════════════════════════════════
# Provider port
# ═════════════════════════════════════════════════════════════

@runtime_checkable
class EmbeddingProvider(Protocol):
    name: str
    dimensionality: int | str  # positive int, or "sparse"
    cacheable: bool

    def embed(self, texts: Sequence[str]) -> Matrix:
        """One row per input text, in order."""
        ...


# ═════════════════════════════════════════════════════════════
# TF-IDF
# ═════════════════════════════════════════════════════════════

class TfidfModel:
    """Raw tf × smoothed idf, ln((1+N)/(1+df)) + 1, rows L2-normalized."""

    def __init__(self, vectorizer: TfidfVectorizer, document_count: int):
        self._vectorizer = vectorizer
        self.document_count = document_count

    @property
    def vocabulary(self) -> dict[str, int]:
        return dict(self._vectorizer.vocabulary_)

    @property
    def idf(self) -> np.ndarray:
        return self._vectorizer.idf_

    def idf_of(self, token: str) -> float:
        return float(self.idf[self._vectorizer.vocabulary_[token]])

    def transform(self, texts: Sequence[str]) -> sparse.csr_matrix:
        return self._vectorizer.transform(list(texts)).tocsr()


def fit_tfidf(corpus: Sequence[str]) -> TfidfModel:
    if not corpus:
        raise FitError("Cannot fit TF-IDF on an empty corpus")
    if not any(tokenize(doc) for doc in corpus):
        raise FitError("Cannot fit TF-IDF: every document is empty after normalization")

    vectorizer = TfidfVectorizer(
        tokenizer=tokenize,
        token_pattern=None,
        lowercase=False,
        smooth_idf=True,
        sublinear_tf=False,
        norm="l2",
    )
    vectorizer.fit(list(corpus))
    return TfidfModel(vectorizer, document_count=len(corpus))


class TfidfProvider:
    cacheable = False
    dimensionality = "sparse"

    def __init__(self, model: TfidfModel, name: str = "tfidf"):
        self.model = model
        self.name = name

    @classmethod
    def fit(cls, corpus: Sequence[str]) -> "TfidfProvider":
        return cls(fit_tfidf(corpus))

    def embed(self, texts: Sequence[str]) -> sparse.csr_matrix:
        return self.model.transform(texts)


class CachingEmbeddingProvider:
    """Per-text response cache in front of a remote provider."""

    cacheable = False

    def __init__(self, provider: EmbeddingProvider, cache: ResponseCache, model_tag: str = ""):
        self.provider = provider
        self.cache = cache
        self.name = provider.name
        self.dimensionality = provider.dimensionality
        self._model_tag = model_tag or provider.name

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows: list[list[float] | None] = []
        missing: list[int] = []
        for index, text in enumerate(texts):
            found, value = self.cache.lookup(self.name, request_hash(self._model_tag, text))
            rows.append(value if found else None)
            if found:
                self.cache.record(hit=True)
            else:
                missing.append(index)
        if missing:
            fresh = _dense(self.provider.embed([texts[i] for i in missing]))
            for index, vector in zip(missing, fresh):
                value = [float(x) for x in vector]
                rows[index] = value
                self.cache.record(hit=False)
                self.cache.store(self.name, request_hash(self._model_tag, texts[index]), value)
        return np.asarray(rows, dtype=float)


# ═════════════════════════════════════════════════════════════
# Embedding
# ═════════════════════════════════════════════════════════════

def _dense(matrix: Matrix) -> np.ndarray:
    if sparse.issparse(matrix):
        return matrix.toarray()
    return np.atleast_2d(np.asarray(matrix, dtype=float))


def _row_count(matrix: Matrix) -> int:
    return matrix.shape[0]


def embed_texts(provider: EmbeddingProvider, texts: Sequence[str]) -> Matrix:
    """Embed one batch and check the provider contract."""
    if not texts:
        raise ContractError("embed_texts needs at least one text")
    matrix = provider.embed(list(texts))
    if not sparse.issparse(matrix):
        try:
            matrix = np.asarray(matrix, dtype=float)
        except ValueError as e:
            raise ContractError(
                f"Provider '{provider.name}' returned vectors of mixed dimensionality"
            ) from e
        if matrix.ndim != 2:
            raise ContractError(f"Provider '{provider.name}' returned a {matrix.ndim}-D result")
    else:
        matrix = matrix.tocsr()

    if _row_count(matrix) != len(texts):
        raise ContractError(
            f"Provider '{provider.name}' returned {_row_count(matrix)} vectors for {len(texts)} texts"
        )
    declared = provider.dimensionality
    if isinstance(declared, int) and matrix.shape[1] != declared:
        raise ContractError(
            f"Provider '{provider.name}' returned dimension {matrix.shape[1]}, expected {declared}"
        )
    return matrix


def _stack(blocks: list[Matrix]) -> Matrix:
    if any(sparse.issparse(b) for b in blocks):
        return sparse.vstack([sparse.csr_matrix(b) for b in blocks]).tocsr()
    widths = {b.shape[1] for b in blocks}
    if len(widths) > 1:
        raise ContractError(f"Embedding batches disagree on dimensionality: {sorted(widths)}")
    return np.vstack(blocks)


def embed_batched(
    provider: EmbeddingProvider,
    texts: Sequence[str],
    batch_size: int = 128,
    max_in_flight: int = 1,
) -> Matrix:
    """Embed in batches (optionally concurrent); rows come back in input order."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    ranges = [(start, min(start + batch_size, len(texts))) for start in range(0, len(texts), batch_size)]

    def run(bounds: tuple[int, int]) -> Matrix:
        start, end = bounds
        try:
            return embed_texts(provider, texts[start:end])
        except ContractError as e:
            raise ContractError(f"Texts [{start}, {end}): {e}") from e
        except ProviderError as e:
            log.error("Embedding batch [%d, %d) failed: %s", start, end, e)
            raise ProviderError(
                f"Provider '{provider.name}' failed on texts [{start}, {end}): {e}",
                retryable=e.retryable,
            ) from e

    if max_in_flight > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            blocks = list(pool.map(run, ranges))
    else:
        blocks = [run(bounds) for bounds in ranges]
    return _stack(blocks)


# ═════════════════════════════════════════════════════════════
# Knowledge base
# ═════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class KnowledgeBase:
    concept_ids: tuple[str, ...]
    variant: Variant
    provider_name: str
    matrix: Matrix

    def __len__(self) -> int:
        return len(self.concept_ids)

    @property
    def entries(self) -> Iterable[tuple[str, Variant, Matrix]]:
        for index, concept_id in enumerate(self.concept_ids):
            yield concept_id, self.variant, self.matrix[index]

    def same_entries(self, other: "KnowledgeBase") -> bool:
        if self.concept_ids != other.concept_ids or self.variant != other.variant:
            return False
        return np.array_equal(_dense(self.matrix), _dense(other.matrix))


@dataclass(frozen=True)
class CandidatePair:
    source_id: str
    target_id: str
    s_ir: float


def build_knowledge_base(
    ontology: Ontology,
    variant: Variant | str,
    provider: EmbeddingProvider,
    batch_size: int = 128,
    max_in_flight: int = 1,
) -> KnowledgeBase:
    if len(ontology) == 0:
        raise ContractError(f"Cannot build a knowledge base over empty ontology '{ontology.name}'")
    variant = Variant(variant)
    reps = build_representations(ontology, variant)
    texts = [verbalize_representation(rep) for rep in reps]
    matrix = embed_batched(provider, texts, batch_size=batch_size, max_in_flight=max_in_flight)
    log.debug("Knowledge base: %d entries via %s (%s)", len(reps), provider.name, variant.value)
    return KnowledgeBase(
        concept_ids=tuple(rep.concept_id for rep in reps),
        variant=variant,
        provider_name=provider.name,
        matrix=matrix,
    )


# ═════════════════════════════════════════════════════════════
# Similarity and retrieval
# ═════════════════════════════════════════════════════════════

def _as_row(vector) -> Matrix:
    if sparse.issparse(vector):
        return sparse.csr_matrix(vector).reshape(1, -1)
    return np.asarray(vector, dtype=float).reshape(1, -1)


def _check_finite(row: Matrix, label: str):
    values = row.data if sparse.issparse(row) else row
    if not np.all(np.isfinite(values)):
        raise ContractError(f"{label} contains non-finite values")


def cosine_similarity(u, v) -> float:
    """dot(u, v) / (‖u‖‖v‖); 0.0 when either norm is 0."""
    a, b = _as_row(u), _as_row(v)
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"Dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    _check_finite(a, "u")
    _check_finite(b, "v")
    return float(np.clip(_pairwise_cosine(a, b)[0, 0], -1.0, 1.0))


def _score(kb: KnowledgeBase, queries: Matrix) -> np.ndarray:
    if queries.shape[1] != kb.matrix.shape[1]:
        raise ContractError(
            f"Query dimension {queries.shape[1]} does not match knowledge base dimension "
            f"{kb.matrix.shape[1]} ({kb.provider_name})"
        )
    return np.clip(_pairwise_cosine(queries, kb.matrix), -1.0, 1.0)


def _top_k(kb: KnowledgeBase, source_id: str, scores: np.ndarray, k: int) -> list[CandidatePair]:
    # identical vectors can differ by an ulp after the matrix product
    order = np.lexsort((np.arange(len(scores)), -np.round(scores, 12)))[:k]
    return [
        CandidatePair(source_id=source_id, target_id=kb.concept_ids[i], s_ir=float(scores[i]))
        for i in order
    ]


def _check_query(kb: KnowledgeBase, provider: EmbeddingProvider, k: int):
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if provider.name != kb.provider_name:
        raise ContractError(
            f"Provider '{provider.name}' cannot query a knowledge base built by '{kb.provider_name}'"
        )


def retrieve_candidates(
    kb: KnowledgeBase,
    query: ConceptRepresentation,
    provider: EmbeddingProvider,
    k: int,
) -> list[CandidatePair]:
    _check_query(kb, provider, k)
    if query.variant != kb.variant:
        raise ContractError(
            f"Query variant {query.variant.value} does not match knowledge base variant {kb.variant.value}"
        )
    row = embed_texts(provider, [verbalize_representation(query)])
    return _top_k(kb, query.concept_id, _score(kb, row)[0], k)


def retrieve_all(
    kb: KnowledgeBase,
    queries: Sequence[ConceptRepresentation],
    provider: EmbeddingProvider,
    k: int,
    batch_size: int = 128,
    max_in_flight: int = 1,
) -> dict[str, list[CandidatePair]]:
    """retrieve_candidates for every query, embedding queries in batches."""
    _check_query(kb, provider, k)
    if not queries:
        return {}
    if any(q.variant != kb.variant for q in queries):
        raise ContractError("Every query must use the knowledge base variant")
    rows = embed_batched(
        provider, [verbalize_representation(q) for q in queries],
        batch_size=batch_size, max_in_flight=max_in_flight,
    )
    results: dict[str, list[CandidatePair]] = {}
    for start in range(0, len(queries), batch_size):
        block = rows[start:start + batch_size]
        scores = _score(kb, block)
        for offset, query in enumerate(queries[start:start + batch_size]):
            results[query.concept_id] = _top_k(kb, query.concept_id, scores[offset], k)
    return results


def recall_at_k(
    candidates_by_source: Mapping[str, Sequence[CandidatePair]],
    reference,
    k: int,
) -> float:
    """Share of reference pairs whose target is in the source's first k candidates."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    pairs = reference.pairs
    if not pairs:
        raise MetricError("recall@k is undefined for an empty reference alignment")
    hits = 0
    for source_id, target_id in pairs:
        top = candidates_by_source.get(source_id, ())[:k]
        if any(c.target_id == target_id for c in top):
            hits += 1
    return hits / len(pairs)


# ═════════════════════════════════════════════════════════════
# Persistence
# ═════════════════════════════════════════════════════════════

def knowledge_base_key(provider_name: str, variant: Variant | str, ontology: Ontology) -> str:
    return request_hash(provider_name, Variant(variant).value, ontology.content_hash)


def save_knowledge_base(kb: KnowledgeBase, path: str | Path, key: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "version": np.array(KB_CACHE_VERSION),
        "key": np.array(key),
        "provider_name": np.array(kb.provider_name),
        "variant": np.array(kb.variant.value),
        "concept_ids": np.array(kb.concept_ids, dtype=str),
    }
    if sparse.issparse(kb.matrix):
        matrix = kb.matrix.tocsr()
        arrays.update(
            data=matrix.data, indices=matrix.indices, indptr=matrix.indptr,
            shape=np.array(matrix.shape),
        )
    else:
        arrays["vectors"] = np.asarray(kb.matrix, dtype=float)
    with path.open("wb") as handle:
        np.savez_compressed(handle, **arrays)


def load_knowledge_base(path: str | Path, key: str) -> KnowledgeBase | None:
    """Return the cached KB, or None on a missing, stale or unreadable file."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        with np.load(path, allow_pickle=False) as data:
            if int(data["version"]) != KB_CACHE_VERSION or str(data["key"]) != key:
                log.info("Knowledge base cache %s is stale; rebuilding", path.name)
                return None
            if "vectors" in data:
                matrix: Matrix = data["vectors"].copy()
            else:
                matrix = sparse.csr_matrix(
                    (data["data"], data["indices"], data["indptr"]),
                    shape=tuple(int(x) for x in data["shape"]),
                )
            return KnowledgeBase(
                concept_ids=tuple(str(x) for x in data["concept_ids"]),
                variant=Variant(str(data["variant"])),
                provider_name=str(data["provider_name"]),
                matrix=matrix,
            )
    except (OSError, ValueError, KeyError) as e:
        log.warning("Unreadable knowledge base cache %s (%s); rebuilding", path, e)
        return None


def expected_provider_calls(n_texts: int, batch_size: int) -> int:
    return math.ceil(n_texts / batch_size)
