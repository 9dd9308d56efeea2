"""
Hybrid post-processing: LLM confidence filter, high-precision retrieval
matches, and greedy 1:1 cardinality filtering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

from ontomatch.errors import ContractError
from ontomatch.matcher import Answer, MatchDecision
from ontomatch.retrieval import CandidatePair

log = logging.getLogger(__name__)

DEFAULT_LLM_THRESHOLD = 0.7
DEFAULT_IR_THRESHOLD = 0.9


class Origin(str, Enum):
    LLM = "llm"
    EXACT = "exact"


class ExactPolicy(str, Enum):
    # union: exact matches survive regardless of the LLM verdict
    UNION = "union"
    # intersection: exact matches survive only where the LLM said yes
    INTERSECTION = "intersection"


@dataclass(frozen=True)
class Mapping:
    source_id: str
    target_id: str
    s_ir: float
    s_llm: float | None
    origin: Origin

    @property
    def pair(self) -> tuple[str, str]:
        return self.source_id, self.target_id

    @property
    def confidence(self) -> float:
        """s_llm, with a missing LLM decision counted as 0."""
        return self.s_llm if self.s_llm is not None else 0.0


@dataclass(frozen=True)
class Alignment:
    mappings: tuple[Mapping, ...]
    source_ontology: str
    target_ontology: str
    config_fingerprint: str = ""
    metadata: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.mappings)

    @property
    def pairs(self) -> set[tuple[str, str]]:
        return {m.pair for m in self.mappings}


def _check_threshold(threshold: float):
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"Threshold must be in [0, 1], got {threshold}")


# ═════════════════════════════════════════════════════════════
# Stages
# ═════════════════════════════════════════════════════════════

def confidence_filter(decisions: Iterable[MatchDecision], threshold: float = DEFAULT_LLM_THRESHOLD) -> list[MatchDecision]:
    """Keep yes-class decisions with s_llm strictly above threshold."""
    _check_threshold(threshold)
    return [d for d in decisions if d.predicted_class is Answer.YES and d.s_llm > threshold]


def high_precision_matches(
    candidates: Iterable[CandidatePair],
    threshold: float = DEFAULT_IR_THRESHOLD,
    decisions: dict[tuple[str, str], MatchDecision] | None = None,
) -> list[Mapping]:
    """Exact-origin mappings for candidates with s_ir strictly above threshold."""
    _check_threshold(threshold)
    decisions = decisions or {}
    out = []
    for candidate in candidates:
        if candidate.s_ir > threshold:
            decision = decisions.get((candidate.source_id, candidate.target_id))
            out.append(Mapping(
                source_id=candidate.source_id,
                target_id=candidate.target_id,
                s_ir=candidate.s_ir,
                s_llm=decision.s_llm if decision is not None else None,
                origin=Origin.EXACT,
            ))
    return out


def _sort_key(mapping: Mapping):
    return (-mapping.confidence, -mapping.s_ir, mapping.source_id, mapping.target_id)


def cardinality_filter(pool: Iterable[Mapping]) -> list[Mapping]:
    """Greedy 1:1 selection by (s_llm desc, s_ir desc, source asc, target asc)."""
    used_sources: set[str] = set()
    used_targets: set[str] = set()
    kept = []
    for mapping in sorted(pool, key=_sort_key):
        if mapping.source_id in used_sources or mapping.target_id in used_targets:
            continue
        used_sources.add(mapping.source_id)
        used_targets.add(mapping.target_id)
        kept.append(mapping)
    return kept


def _from_decision(decision: MatchDecision) -> Mapping:
    return Mapping(
        source_id=decision.source_id,
        target_id=decision.target_id,
        s_ir=decision.s_ir,
        s_llm=decision.s_llm,
        origin=Origin.LLM,
    )


def assemble_alignment(
    llm_kept: Iterable[MatchDecision | Mapping],
    exact: Iterable[Mapping],
    source_ontology: str,
    target_ontology: str,
    config_fingerprint: str = "",
    policy: ExactPolicy | str = ExactPolicy.UNION,
    decisions: dict[tuple[str, str], MatchDecision] | None = None,
    metadata: dict | None = None,
) -> Alignment:
    """Union (or intersection) of both matchers, de-duplicated, then 1:1 filtered."""
    policy = ExactPolicy(policy)
    decisions = decisions or {}

    pool: dict[tuple[str, str], Mapping] = {}
    for item in llm_kept:
        mapping = _from_decision(item) if isinstance(item, MatchDecision) else replace(item, origin=Origin.LLM)
        current = pool.get(mapping.pair)
        if current is None or mapping.confidence > current.confidence:
            pool[mapping.pair] = mapping

    dropped = 0
    for mapping in exact:
        if policy is ExactPolicy.INTERSECTION:
            decision = decisions.get(mapping.pair)
            if decision is None or decision.predicted_class is not Answer.YES:
                dropped += 1
                continue
        current = pool.get(mapping.pair)
        # ties go to the LLM-origin entry
        if current is None or mapping.confidence > current.confidence:
            pool[mapping.pair] = mapping
    if dropped:
        log.info("Exact-match policy %s dropped %d pairs without an LLM yes", policy.value, dropped)

    kept = cardinality_filter(pool.values())
    log.debug("Post-processing: pool %d → %d mappings after cardinality filter", len(pool), len(kept))
    return Alignment(
        mappings=tuple(kept),
        source_ontology=source_ontology,
        target_ontology=target_ontology,
        config_fingerprint=config_fingerprint,
        metadata=dict(metadata or {}),
    )


def postprocess(
    decisions: dict[tuple[str, str], MatchDecision],
    candidates: Sequence[CandidatePair],
    source_ontology: str,
    target_ontology: str,
    llm_threshold: float = DEFAULT_LLM_THRESHOLD,
    ir_threshold: float = DEFAULT_IR_THRESHOLD,
    policy: ExactPolicy | str = ExactPolicy.UNION,
    config_fingerprint: str = "",
    metadata: dict | None = None,
) -> Alignment:
    """All three stages in order."""
    llm_kept = confidence_filter(decisions.values(), llm_threshold)
    exact = high_precision_matches(candidates, ir_threshold, decisions)
    return assemble_alignment(
        llm_kept, exact, source_ontology, target_ontology,
        config_fingerprint=config_fingerprint, policy=policy,
        decisions=decisions, metadata=metadata,
    )
