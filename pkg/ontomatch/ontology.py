"""
Ontology parsing and concept representations (C, CP, CC).

The native exchange format is a JSON document:

    {"name": "mouse",
     "concepts": [{"id": "...", "label": "...", "synonyms": [...],
                   "parents": [...], "children": [...]}]}

`synonyms`, `parents` and `children` are optional. Edges declared in only
one direction are closed on load, so parent/child lists are always
symmetric.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

from ontomatch.errors import (
    ConceptNotFoundError, OntologyValidationError, ParseError,
)


class Role(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class Variant(str, Enum):
    C = "C"
    CP = "CP"
    CC = "CC"


_PUNCT_TO_SPACE = str.maketrans({ch: " " for ch in string.punctuation})

_CONTEXT_LABEL = {Variant.CP: "parents", Variant.CC: "children"}


# ═════════════════════════════════════════════════════════════
# Domain types
# ═════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class Concept:
    id: str
    label: str
    synonyms: tuple[str, ...] = ()
    parent_ids: tuple[str, ...] = ()
    child_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class Ontology:
    name: str
    role: Role
    concepts: Mapping[str, Concept] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "concepts", MappingProxyType(dict(self.concepts)))

    def __len__(self) -> int:
        return len(self.concepts)

    @property
    def concept_order(self) -> list[str]:
        """Concept ids in document order."""
        return list(self.concepts)

    def get(self, concept_id: str) -> Concept:
        try:
            return self.concepts[concept_id]
        except KeyError:
            raise ConceptNotFoundError(concept_id, self.name) from None

    @property
    def content_hash(self) -> str:
        """SHA-256 over the canonical concept list (order-sensitive)."""
        payload = [
            [c.id, c.label, list(c.synonyms), list(c.parent_ids), list(c.child_ids)]
            for c in self.concepts.values()
        ]
        raw = json.dumps([self.name, payload], ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ConceptRepresentation:
    concept_id: str
    variant: Variant
    core_text: str
    context_texts: tuple[str, ...] = ()


# ═════════════════════════════════════════════════════════════
# Text normalization
# ═════════════════════════════════════════════════════════════

def normalize_text(raw: str) -> str:
    """Lowercase, ASCII punctuation → space, collapse whitespace.

    Examples:
        "Heart-Valve (anatomy)" → "heart valve anatomy"
        "mouse  LIVER"          → "mouse liver"
    """
    if not raw:
        return ""
    return " ".join(raw.lower().translate(_PUNCT_TO_SPACE).split())


def tokenize(text: str) -> list[str]:
    return normalize_text(text).split()


# ═════════════════════════════════════════════════════════════
# Parsing
# ═════════════════════════════════════════════════════════════

def _string_list(raw: dict, key: str, concept_id: str) -> list[str]:
    value = raw.get(key, [])
    if value is None:
        return []
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise OntologyValidationError(
            f"Concept '{concept_id}': \"{key}\" must be a list of strings"
        )
    return list(value)


def _append_unique(items: list[str], value: str):
    if value not in items:
        items.append(value)


def parse_ontology(document: bytes | str, role: Role | str, fmt: str = "native") -> Ontology:
    """Parse a native ontology document into a validated, edge-closed Ontology."""
    if fmt != "native":
        raise ParseError(f"Unsupported ontology format '{fmt}'")
    role = Role(role)

    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8-sig")
        except UnicodeDecodeError as e:
            raise ParseError(f"Ontology is not valid UTF-8: {e.reason}", column=e.start) from e

    try:
        data = json.loads(document)
    except json.JSONDecodeError as e:
        raise ParseError(f"Invalid JSON: {e.msg}", line=e.lineno, column=e.colno) from e

    if not isinstance(data, dict):
        raise ParseError(f"Ontology document must be a JSON object, got {type(data).__name__}")
    concepts_raw = data.get("concepts", [])
    if not isinstance(concepts_raw, list):
        raise ParseError("\"concepts\" must be an array")
    name = str(data.get("name") or role.value)

    # ── First pass: ids, labels, declared edges ──────────────
    labels: dict[str, str] = {}
    synonyms: dict[str, list[str]] = {}
    parents: dict[str, list[str]] = {}
    children: dict[str, list[str]] = {}

    for index, raw in enumerate(concepts_raw):
        if not isinstance(raw, dict):
            raise ParseError(f"Concept #{index} must be an object, got {type(raw).__name__}")
        concept_id = raw.get("id")
        if not isinstance(concept_id, str) or not concept_id:
            raise OntologyValidationError(f"Concept #{index} has a missing or empty \"id\"")
        if concept_id in labels:
            raise OntologyValidationError(f"Duplicate concept id '{concept_id}'")
        label = raw.get("label")
        if not isinstance(label, str) or not normalize_text(label):
            raise OntologyValidationError(
                f"Concept '{concept_id}' has an empty label after normalization"
            )
        labels[concept_id] = label
        synonyms[concept_id] = _string_list(raw, "synonyms", concept_id)
        parents[concept_id] = []
        children[concept_id] = []
        for parent_id in _string_list(raw, "parents", concept_id):
            _append_unique(parents[concept_id], parent_id)
        for child_id in _string_list(raw, "children", concept_id):
            _append_unique(children[concept_id], child_id)

    # ── Second pass: references, self-loops, closure ─────────
    for concept_id in labels:
        for kind, edges in (("parent", parents[concept_id]), ("child", children[concept_id])):
            for other in edges:
                if other == concept_id:
                    raise OntologyValidationError(
                        f"Concept '{concept_id}' lists itself as its own {kind}"
                    )
                if other not in labels:
                    raise OntologyValidationError(
                        f"Concept '{concept_id}' references unknown {kind} '{other}'"
                    )

    for concept_id in labels:
        for parent_id in parents[concept_id]:
            _append_unique(children[parent_id], concept_id)
        for child_id in children[concept_id]:
            _append_unique(parents[child_id], concept_id)

    concepts = {
        concept_id: Concept(
            id=concept_id,
            label=labels[concept_id],
            synonyms=tuple(synonyms[concept_id]),
            parent_ids=tuple(parents[concept_id]),
            child_ids=tuple(children[concept_id]),
        )
        for concept_id in labels
    }
    return Ontology(name=name, role=role, concepts=concepts)


def load_ontology(path: str | Path, role: Role | str) -> Ontology:
    path = Path(path)
    try:
        document = path.read_bytes()
    except OSError as e:
        raise ParseError(f"Cannot read ontology file {path}: {e.strerror or e}") from e
    return parse_ontology(document, role)


# ═════════════════════════════════════════════════════════════
# Representations
# ═════════════════════════════════════════════════════════════

def build_representation(ontology: Ontology, concept_id: str, variant: Variant | str) -> ConceptRepresentation:
    """Render one concept under C, CP or CC.

    core_text is the normalized label followed by its synonyms. CP/CC
    context lists the normalized labels of direct parents/children in
    declared order; a root (or leaf) keeps the variant tag with an empty
    context.
    """
    variant = Variant(variant)
    concept = ontology.get(concept_id)
    core_text = normalize_text(" ".join((concept.label, *concept.synonyms)))

    if variant is Variant.CP:
        related = concept.parent_ids
    elif variant is Variant.CC:
        related = concept.child_ids
    else:
        related = ()
    context = tuple(normalize_text(ontology.get(other).label) for other in related)

    return ConceptRepresentation(
        concept_id=concept_id,
        variant=variant,
        core_text=core_text,
        context_texts=context,
    )


def build_representations(ontology: Ontology, variant: Variant | str) -> list[ConceptRepresentation]:
    return [build_representation(ontology, cid, variant) for cid in ontology.concept_order]


def verbalize_representation(rep: ConceptRepresentation) -> str:
    """Text handed to embedding providers.

    (C,  "heart valve", [])                      → "heart valve"
    (CP, "heart valve", ["heart"])               → "heart valve, parents: heart"
    (CC, "heart", ["heart valve", "atrium"])     → "heart, children: heart valve, atrium"
    """
    if rep.variant is Variant.C or not rep.context_texts:
        return rep.core_text
    return f"{rep.core_text}, {_CONTEXT_LABEL[rep.variant]}: {', '.join(rep.context_texts)}"
