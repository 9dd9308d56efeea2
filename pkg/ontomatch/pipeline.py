"""
End-to-end run: parse → represent → knowledge base → retrieve top-k →
classify → post-process → evaluate.

Every stage is timed; a failing stage aborts the run with a StageError
carrying the stage name and the timings collected so far.
"""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ontomatch.cache import ResponseCache
from ontomatch.config import RunConfig
from ontomatch.errors import ConfigError, ContractError, OntoMatchError, StageError
from ontomatch.evaluation import Metrics, ReferenceAlignment, evaluate_alignment, load_reference
from ontomatch.matcher import (
    Answer, ClassificationStats, LlmProvider, build_fewshot_exemplars, classify_pairs,
)
from ontomatch.ontology import (
    ConceptRepresentation, Ontology, Role, Variant,
    build_representations, load_ontology, verbalize_representation,
)
from ontomatch.postprocess import Alignment, postprocess
from ontomatch.providers import (
    MockLlmProvider, OpenAIChatProvider, OpenAIEmbeddingProvider, resolve_api_key,
)
from ontomatch.retrieval import (
    CachingEmbeddingProvider, CandidatePair, EmbeddingProvider, KnowledgeBase, TfidfProvider,
    build_knowledge_base, expected_provider_calls, knowledge_base_key,
    load_knowledge_base, recall_at_k, retrieve_all, save_knowledge_base,
)

log = logging.getLogger(__name__)

StageCallback = Callable[[str], None]


@dataclass
class RunCounts:
    sources: int = 0
    targets: int = 0
    candidates: int = 0
    llm_calls: int = 0
    cache_hits: int = 0
    provider_calls: int = 0
    undecidable: int = 0


@dataclass
class RunReport:
    config_fingerprint: str
    k: int
    counts: RunCounts = field(default_factory=RunCounts)
    metrics: Metrics | None = None
    recall_at_k: float | None = None
    timings: dict[str, float] = field(default_factory=dict)
    alignment: Alignment | None = None
    undecidable_pairs: list[tuple[str, str]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def call_bound(self) -> int:
        return self.k * self.counts.sources

    @property
    def call_bound_ok(self) -> bool:
        return self.counts.llm_calls <= self.call_bound


@dataclass
class RetrievalReport:
    config_fingerprint: str
    provider: str
    variant: Variant
    sources: int
    targets: int
    recall: dict[int, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    candidates: dict[str, list[CandidatePair]] = field(default_factory=dict)


@contextmanager
def _stage(name: str, timings: dict[str, float], on_stage: StageCallback | None = None):
    if on_stage is not None:
        on_stage(name)
    started = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (OntoMatchError, OSError) as e:
        timings[name] = time.perf_counter() - started
        log.error("Stage %s failed: %s", name, e)
        raise StageError(name, e, timings) from e
    timings[name] = time.perf_counter() - started


# ═════════════════════════════════════════════════════════════
# Providers
# ═════════════════════════════════════════════════════════════

def _base_url(spec: dict, env_var: str) -> str | None:
    return spec.get("base_url") or os.getenv(env_var) or os.getenv("OPENAI_BASE_URL") or None


def build_llm_provider(spec: dict) -> LlmProvider:
    if spec["type"] == "mock":
        return MockLlmProvider.from_fixture(spec["fixture"])
    return OpenAIChatProvider(
        model=spec["model"],
        api_key=resolve_api_key(spec.get("api_key_env", "OPENAI_API_KEY"), "llm.api_key_env"),
        base_url=_base_url(spec, "ONTOMATCH_LLM_BASE_URL"),
        logprobs=bool(spec.get("logprobs", True)),
        max_tokens=int(spec.get("max_tokens", 4)),
        top_logprobs=int(spec.get("top_logprobs", 20)),
        requests_per_minute=float(spec.get("requests_per_minute", 0)),
        max_retries=int(spec.get("max_retries", 3)),
        timeout=float(spec.get("timeout", 30)),
    )


def build_remote_embedding_provider(spec: dict) -> OpenAIEmbeddingProvider:
    return OpenAIEmbeddingProvider(
        model=spec["model"],
        api_key=resolve_api_key(spec.get("api_key_env", "OPENAI_API_KEY"), "retriever.api_key_env"),
        base_url=_base_url(spec, "ONTOMATCH_EMBEDDING_BASE_URL"),
        dimensionality=spec.get("dimensionality"),
        max_retries=int(spec.get("max_retries", 3)),
        timeout=float(spec.get("timeout", 30)),
    )


def _batching(spec: dict) -> tuple[int, int]:
    default_in_flight = 4 if spec.get("type") == "openai" else 1
    return int(spec.get("batch_size", 128)), int(spec.get("max_in_flight", default_in_flight))


def prepare_knowledge_base(
    config: RunConfig,
    target: Ontology,
    cache: ResponseCache,
    provider: EmbeddingProvider | None = None,
) -> tuple[KnowledgeBase, EmbeddingProvider]:
    """Build (or load) the KB over the target and return it with the query provider."""
    spec = config.retriever
    batch_size, in_flight = _batching(spec)
    variant = config.retrieval_variant

    if provider is None and spec["type"] == "tfidf":
        corpus = [verbalize_representation(rep) for rep in build_representations(target, variant)]
        provider = TfidfProvider.fit(corpus)
    elif provider is None:
        provider = build_remote_embedding_provider(spec)

    if not getattr(provider, "cacheable", False):
        kb = build_knowledge_base(target, variant, provider, batch_size=batch_size, max_in_flight=in_flight)
        return kb, provider

    key = knowledge_base_key(provider.name, variant, target)
    kb_path = config.cache_dir / "kb" / f"{key}.npz"
    kb = load_knowledge_base(kb_path, key)
    if kb is None:
        kb = build_knowledge_base(target, variant, provider, batch_size=batch_size, max_in_flight=in_flight)
        try:
            save_knowledge_base(kb, kb_path, key)
        except OSError as e:
            log.warning("Cannot persist knowledge base to %s: %s", kb_path, e)
    else:
        log.info("Loaded knowledge base from %s", kb_path)
    return kb, CachingEmbeddingProvider(provider, cache, model_tag=f"{provider.name}|{variant.value}")


# ═════════════════════════════════════════════════════════════
# Shared stages
# ═════════════════════════════════════════════════════════════

def _load_pair(config: RunConfig) -> tuple[Ontology, Ontology]:
    source = load_ontology(config.source_path, Role.SOURCE)
    target = load_ontology(config.target_path, Role.TARGET)
    if len(source) == 0:
        raise ContractError(f"Source ontology {config.source_path.name} has no concepts")
    return source, target


def _rep_index(ontology: Ontology, variant: Variant) -> dict[str, ConceptRepresentation]:
    return {rep.concept_id: rep for rep in build_representations(ontology, variant)}


def load_train_pairs(
    path: Path,
    source_reps: dict[str, ConceptRepresentation],
    target_reps: dict[str, ConceptRepresentation],
) -> list[tuple[ConceptRepresentation, ConceptRepresentation, Answer]]:
    """Few-shot training pairs: [{"source": id, "target": id, "gold": "yes"|"no"}]."""
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError("train_path", f"Cannot read training pairs {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("train_path", f"Invalid JSON in {Path(path).name}: {e}") from e
    if not isinstance(records, list):
        raise ConfigError("train_path", "Training pairs must be a JSON list")

    pairs = []
    for index, record in enumerate(records):
        try:
            source = source_reps[record["source"]]
            target = target_reps[record["target"]]
            gold = Answer(str(record["gold"]).lower())
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError("train_path", f"Training pair #{index} is invalid ({e!r})") from e
        pairs.append((source, target, gold))
    return pairs


def _order_by_source(alignment: Alignment, source: Ontology) -> Alignment:
    position = {cid: i for i, cid in enumerate(source.concept_order)}
    ordered = tuple(sorted(alignment.mappings, key=lambda m: (position.get(m.source_id, len(position)), m.target_id)))
    return Alignment(
        mappings=ordered,
        source_ontology=alignment.source_ontology,
        target_ontology=alignment.target_ontology,
        config_fingerprint=alignment.config_fingerprint,
        metadata=alignment.metadata,
    )


def run_metadata(config: RunConfig, provider_name: str, llm_name: str) -> dict:
    return {
        "retriever": provider_name,
        "llm": llm_name,
        "retrieval_variant": config.retrieval_variant.value,
        "llm_variant": config.llm_variant.value,
        "k": config.k,
        "s_llm_threshold": config.s_llm_threshold,
        "s_ir_threshold": config.s_ir_threshold,
        "exact_policy": config.exact_policy.value,
        "n_shots": config.n_shots,
        "seed": config.seed,
    }


# ═════════════════════════════════════════════════════════════
# Runs
# ═════════════════════════════════════════════════════════════

def run_pipeline(
    config: RunConfig,
    *,
    llm_provider: LlmProvider | None = None,
    embedding_provider: EmbeddingProvider | None = None,
    cache: ResponseCache | None = None,
    on_stage: StageCallback | None = None,
    on_classified: Callable[[], None] | None = None,
    on_classify_start: Callable[[int], None] | None = None,
) -> RunReport:
    timings: dict[str, float] = {}
    report = RunReport(config_fingerprint=config.fingerprint, k=config.k, config=config.semantic())
    cache = cache or ResponseCache(config.cache_dir / "responses")

    with _stage("parse", timings, on_stage):
        source, target = _load_pair(config)
        reference: ReferenceAlignment | None = None
        if config.reference_path is not None:
            reference = load_reference(config.reference_path)
        report.counts.sources, report.counts.targets = len(source), len(target)

    with _stage("represent", timings, on_stage):
        retrieval_queries = build_representations(source, config.retrieval_variant)
        source_llm = _rep_index(source, config.llm_variant)
        target_llm = _rep_index(target, config.llm_variant)

    with _stage("knowledge_base", timings, on_stage):
        kb, query_provider = prepare_knowledge_base(config, target, cache, embedding_provider)

    with _stage("retrieve", timings, on_stage):
        batch_size, in_flight = _batching(config.retriever)
        candidates_by_source = retrieve_all(
            kb, retrieval_queries, query_provider, config.k,
            batch_size=batch_size, max_in_flight=in_flight,
        )
        candidates = [c for rep in retrieval_queries for c in candidates_by_source[rep.concept_id]]
        report.counts.candidates = len(candidates)

    with _stage("classify", timings, on_stage):
        provider = llm_provider or build_llm_provider(config.llm)
        exemplars = []
        if config.n_shots:
            train = load_train_pairs(config.train_path, source_llm, target_llm)
            exclude = {(c.source_id, c.target_id) for c in candidates}
            exemplars = build_fewshot_exemplars(train, config.n_shots, seed=config.seed, exclude=exclude)
        jobs = [(c, source_llm[c.source_id], target_llm[c.target_id]) for c in candidates]
        if on_classify_start is not None:
            on_classify_start(len(jobs))
        decisions, stats = classify_pairs(
            provider, jobs, exemplars=exemplars, cache=cache, workers=config.workers,
            on_done=(lambda _d: on_classified()) if on_classified else None,
        )
        _record_stats(report, stats)

    with _stage("postprocess", timings, on_stage):
        alignment = postprocess(
            decisions, candidates,
            source_ontology=source.name,
            target_ontology=target.name,
            llm_threshold=config.s_llm_threshold,
            ir_threshold=config.s_ir_threshold,
            policy=config.exact_policy,
            config_fingerprint=config.fingerprint,
            metadata=run_metadata(config, kb.provider_name, provider.name),
        )
        report.alignment = _order_by_source(alignment, source)

    if reference is not None:
        with _stage("evaluate", timings, on_stage):
            report.metrics = evaluate_alignment(report.alignment, reference)
            report.recall_at_k = recall_at_k(candidates_by_source, reference, config.k)

    report.timings = timings
    if not report.call_bound_ok:
        log.error("LLM calls %d exceed k × sources = %d", report.counts.llm_calls, report.call_bound)
    return report


def _record_stats(report: RunReport, stats: ClassificationStats):
    report.counts.llm_calls = stats.requests
    report.counts.provider_calls = stats.provider_calls
    report.counts.cache_hits = stats.cache_hits
    report.counts.undecidable = len(stats.undecidable)
    report.undecidable_pairs = list(stats.undecidable)


def run_retrieval(
    config: RunConfig,
    ks: list[int],
    *,
    embedding_provider: EmbeddingProvider | None = None,
    cache: ResponseCache | None = None,
    on_stage: StageCallback | None = None,
) -> RetrievalReport:
    """Retrieval only: recall@k for each k against the reference."""
    ks = sorted(set(ks or [config.k]))
    if ks[0] < 1:
        raise ConfigError("k", f"k must be >= 1, got {ks[0]}")
    timings: dict[str, float] = {}
    cache = cache or ResponseCache(config.cache_dir / "responses")

    with _stage("parse", timings, on_stage):
        source, target = _load_pair(config)
        if config.reference_path is None:
            raise ConfigError("reference_path", "reference_path is required to report recall@k")
        reference = load_reference(config.reference_path)

    with _stage("knowledge_base", timings, on_stage):
        kb, query_provider = prepare_knowledge_base(config, target, cache, embedding_provider)

    with _stage("retrieve", timings, on_stage):
        batch_size, in_flight = _batching(config.retriever)
        candidates = retrieve_all(
            kb, build_representations(source, config.retrieval_variant), query_provider, ks[-1],
            batch_size=batch_size, max_in_flight=in_flight,
        )

    with _stage("evaluate", timings, on_stage):
        recall = {k: recall_at_k(candidates, reference, k) for k in ks}

    return RetrievalReport(
        config_fingerprint=config.fingerprint,
        provider=kb.provider_name,
        variant=config.retrieval_variant,
        sources=len(source),
        targets=len(target),
        recall=recall,
        timings=timings,
        candidates=candidates,
    )


def plan_run(config: RunConfig) -> dict:
    """Dry-run preview: parse inputs and estimate provider calls, no provider traffic."""
    source, target = _load_pair(config)
    reference_size = len(load_reference(config.reference_path)) if config.reference_path else None
    batch_size, _ = _batching(config.retriever)
    return {
        "source": source.name,
        "target": target.name,
        "sources": len(source),
        "targets": len(target),
        "reference_pairs": reference_size,
        "max_llm_calls": config.k * len(source),
        "embedding_calls": expected_provider_calls(len(source), batch_size)
        + expected_provider_calls(len(target), batch_size),
    }
