"""
Prompted yes/no classification of candidate pairs.

Each candidate pair is verbalized into a fixed template and sent to a
language-model provider. In probability mode the confidence S_llm is
read from the label-word probabilities of the first generated token; in
text-parse mode the first label word in the reply decides, with S_llm
fixed to 1.0 or 0.0.
"""

from __future__ import annotations

import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Protocol, Sequence, runtime_checkable

from ontomatch.cache import ResponseCache, request_hash
from ontomatch.errors import ConfigError, ContractError, UndecidableError
from ontomatch.ontology import ConceptRepresentation, Variant, normalize_text
from ontomatch.retrieval import CandidatePair

log = logging.getLogger(__name__)

INSTRUCTION = (
    "Classify if two concepts refer to the same real-world entity or not "
    "(answer only yes or no)."
)
YES_WORDS = frozenset({"yes", "true", "right"})
NO_WORDS = frozenset({"no", "false", "wrong"})

# Word-start markers some tokenizers prepend (sentencepiece, byte-level BPE)
_TOKEN_MARKERS = "▁Ġ"

_CONTEXT_HEADER = {Variant.CP: "Parents", Variant.CC: "Children"}


class Answer(str, Enum):
    YES = "yes"
    NO = "no"


class DecisionMode(str, Enum):
    PROBABILITY = "probability"
    TEXT_PARSE = "text-parse"


# ═════════════════════════════════════════════════════════════
# Domain types
# ═════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class Exemplar:
    source: ConceptRepresentation
    target: ConceptRepresentation
    gold: Answer


@dataclass(frozen=True)
class PromptInstance:
    text: str
    pair: tuple[str, str]
    variant: Variant
    exemplars: tuple[Exemplar, ...] = ()

    @property
    def zero_shot(self) -> bool:
        return not self.exemplars


@dataclass(frozen=True)
class CompletionResult:
    mode: DecisionMode
    token_probabilities: dict[str, float] | None = None
    text: str = ""

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value,
            "token_probabilities": self.token_probabilities,
            "text": self.text,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "CompletionResult":
        probabilities = data.get("token_probabilities")
        return cls(
            mode=DecisionMode(data["mode"]),
            token_probabilities=dict(probabilities) if probabilities is not None else None,
            text=data.get("text") or "",
        )


@runtime_checkable
class LlmProvider(Protocol):
    name: str
    mode: DecisionMode

    def complete(self, prompt: str) -> CompletionResult:
        ...


@dataclass(frozen=True)
class MatchDecision:
    source_id: str
    target_id: str
    predicted_class: Answer
    s_llm: float
    s_ir: float
    mode: DecisionMode
    undecidable: bool = False

    @property
    def pair(self) -> tuple[str, str]:
        return self.source_id, self.target_id


@dataclass
class ClassificationStats:
    requests: int = 0
    provider_calls: int = 0
    cache_hits: int = 0
    undecidable: list[tuple[str, str]] = field(default_factory=list)


# ═════════════════════════════════════════════════════════════
# Prompt rendering
# ═════════════════════════════════════════════════════════════

def _concept_lines(rep: ConceptRepresentation) -> list[str]:
    lines = [rep.core_text]
    header = _CONTEXT_HEADER.get(rep.variant)
    if header is not None:
        joined = ", ".join(rep.context_texts)
        lines.append(f"{header}: {joined}" if joined else f"{header}:")
    return lines


def _render_block(source: ConceptRepresentation, target: ConceptRepresentation) -> str:
    lines = [INSTRUCTION, "### First concept:"]
    lines += _concept_lines(source)
    lines.append("### Second concept:")
    lines += _concept_lines(target)
    lines.append("### Answer:")
    return "\n".join(lines)


def render_prompt(
    source_rep: ConceptRepresentation,
    target_rep: ConceptRepresentation,
    exemplars: Sequence[Exemplar] = (),
) -> PromptInstance:
    """Fill the template for one pair; exemplars come first as answered blocks."""
    if source_rep.variant != target_rep.variant:
        raise ContractError(
            f"Variant mismatch: {source_rep.variant.value} vs {target_rep.variant.value}"
        )
    blocks = []
    for exemplar in exemplars:
        if exemplar.source.variant != source_rep.variant or exemplar.target.variant != source_rep.variant:
            raise ContractError("Exemplars must use the same variant as the query pair")
        blocks.append(f"{_render_block(exemplar.source, exemplar.target)} {exemplar.gold.value}")
    blocks.append(_render_block(source_rep, target_rep))
    return PromptInstance(
        text="\n\n".join(blocks),
        pair=(source_rep.concept_id, target_rep.concept_id),
        variant=source_rep.variant,
        exemplars=tuple(exemplars),
    )


# ═════════════════════════════════════════════════════════════
# Confidence
# ═════════════════════════════════════════════════════════════

def _label_of(token: str) -> str:
    return normalize_text(token.strip().lstrip(_TOKEN_MARKERS))


def derive_confidence(token_probabilities: Mapping[str, float]) -> tuple[Answer, float]:
    """(class, S_llm) from a next-token distribution.

    {"yes": 0.6, "no": 0.2, "the": 0.2} → (yes, 0.75)
    """
    if not token_probabilities:
        raise ContractError("Token probability map is empty")
    p_yes = p_no = 0.0
    for token, probability in token_probabilities.items():
        if not 0.0 <= probability <= 1.0:
            raise ContractError(f"Probability for token {token!r} is outside [0, 1]: {probability}")
        label = _label_of(token)
        if label in YES_WORDS:
            p_yes += probability
        elif label in NO_WORDS:
            p_no += probability
    if p_yes + p_no == 0.0:
        raise UndecidableError("No probability mass on yes/no label words")
    s_llm = p_yes / (p_yes + p_no)
    return (Answer.YES if s_llm >= 0.5 else Answer.NO), s_llm


def parse_answer_text(text: str) -> Answer:
    """First yes-class or no-class label word in a generated reply."""
    for word in normalize_text(text).split():
        if word in YES_WORDS:
            return Answer.YES
        if word in NO_WORDS:
            return Answer.NO
    raise UndecidableError(f"No label word in reply {text!r}")


# ═════════════════════════════════════════════════════════════
# Classification
# ═════════════════════════════════════════════════════════════

def _complete(
    provider: LlmProvider,
    prompt: PromptInstance,
    cache: ResponseCache | None,
    on_provider_call: Callable[[], None] | None = None,
) -> CompletionResult:
    def compute() -> dict:
        if on_provider_call is not None:
            on_provider_call()
        return provider.complete(prompt.text).to_json()

    if cache is None:
        return CompletionResult.from_json(compute())
    key = (provider.name, request_hash(provider.mode.value, prompt.text))
    return CompletionResult.from_json(cache.cached_call(key, compute))


def decide(result: CompletionResult, candidate: CandidatePair) -> MatchDecision:
    def decision(answer: Answer, s_llm: float, mode: DecisionMode, undecidable=False):
        return MatchDecision(
            source_id=candidate.source_id,
            target_id=candidate.target_id,
            predicted_class=answer,
            s_llm=s_llm,
            s_ir=candidate.s_ir,
            mode=mode,
            undecidable=undecidable,
        )

    if result.token_probabilities is not None:
        try:
            answer, s_llm = derive_confidence(result.token_probabilities)
            return decision(answer, s_llm, DecisionMode.PROBABILITY)
        except UndecidableError:
            log.warning("Undecidable output for (%s, %s): no label-word mass",
                        candidate.source_id, candidate.target_id)
            return decision(Answer.NO, 0.0, DecisionMode.PROBABILITY, undecidable=True)

    try:
        answer = parse_answer_text(result.text)
        return decision(answer, 1.0 if answer is Answer.YES else 0.0, DecisionMode.TEXT_PARSE)
    except UndecidableError:
        log.warning("Undecidable reply for (%s, %s): %r",
                    candidate.source_id, candidate.target_id, result.text)
        return decision(Answer.NO, 0.0, DecisionMode.TEXT_PARSE, undecidable=True)


def classify_pair(
    provider: LlmProvider,
    prompt: PromptInstance,
    candidate: CandidatePair,
    cache: ResponseCache | None = None,
) -> MatchDecision:
    if prompt.pair != (candidate.source_id, candidate.target_id):
        raise ContractError(f"Prompt is for {prompt.pair}, candidate is "
                            f"({candidate.source_id}, {candidate.target_id})")
    return decide(_complete(provider, prompt, cache), candidate)


def classify_pairs(
    provider: LlmProvider,
    jobs: Sequence[tuple[CandidatePair, ConceptRepresentation, ConceptRepresentation]],
    exemplars: Sequence[Exemplar] = (),
    cache: ResponseCache | None = None,
    workers: int = 1,
    on_done: Callable[[MatchDecision], None] | None = None,
) -> tuple[dict[tuple[str, str], MatchDecision], ClassificationStats]:
    """Classify every (candidate, source rep, target rep) job.

    Decisions are keyed by (source_id, target_id); completion order does
    not affect the result.
    """
    stats = ClassificationStats(requests=len(jobs))
    lock = threading.Lock()

    def count_call():
        with lock:
            stats.provider_calls += 1

    def run(job) -> MatchDecision:
        candidate, source_rep, target_rep = job
        prompt = render_prompt(source_rep, target_rep, exemplars)
        decision = decide(_complete(provider, prompt, cache, count_call), candidate)
        if on_done is not None:
            on_done(decision)
        return decision

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    decisions = {d.pair: d for d in results}
    stats.cache_hits = stats.requests - stats.provider_calls
    stats.undecidable = [d.pair for d in results if d.undecidable]
    return decisions, stats


# ═════════════════════════════════════════════════════════════
# Few-shot exemplars
# ═════════════════════════════════════════════════════════════

def build_fewshot_exemplars(
    train_pairs: Sequence[tuple[ConceptRepresentation, ConceptRepresentation, Answer | str]],
    n: int,
    seed: int = 0,
    exclude: frozenset[tuple[str, str]] | set[tuple[str, str]] = frozenset(),
) -> list[Exemplar]:
    """Seeded, class-balanced selection of n exemplars disjoint from `exclude`."""
    if n < 0:
        raise ConfigError("n_shots", f"n_shots must be >= 0, got {n}")
    if n == 0:
        return []

    positives: list[Exemplar] = []
    negatives: list[Exemplar] = []
    for source, target, gold in train_pairs:
        if (source.concept_id, target.concept_id) in exclude:
            continue
        exemplar = Exemplar(source=source, target=target, gold=Answer(gold))
        (positives if exemplar.gold is Answer.YES else negatives).append(exemplar)

    if len(positives) + len(negatives) < n:
        raise ConfigError(
            "n_shots",
            f"{n} exemplars requested but only {len(positives) + len(negatives)} "
            "training pairs are available outside the evaluated pairs",
        )
    if n >= 2 and (not positives or not negatives):
        raise ConfigError(
            "n_shots", f"{n}-shot prompting needs at least one positive and one negative training pair"
        )

    want_yes = (n + 1) // 2
    want_yes = min(want_yes, len(positives))
    want_no = n - want_yes
    if want_no > len(negatives):
        want_no = len(negatives)
        want_yes = n - want_no

    rng = random.Random(seed)
    chosen = rng.sample(positives, want_yes) + rng.sample(negatives, want_no)
    rng.shuffle(chosen)
    return chosen
