"""
Reference alignments and precision / recall / F1 scoring.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ontomatch.errors import MetricError, ParseError


@dataclass(frozen=True)
class ReferenceAlignment:
    pairs: frozenset[tuple[str, str]]
    name: str = ""

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    true_positives: int
    predicted_count: int
    reference_count: int
    false_positives: tuple[tuple[str, str], ...] = field(default=(), compare=False)
    false_negatives: tuple[tuple[str, str], ...] = field(default=(), compare=False)

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "true_positives": self.true_positives,
            "predicted_count": self.predicted_count,
            "reference_count": self.reference_count,
        }


# ═════════════════════════════════════════════════════════════
# Parsing
# ═════════════════════════════════════════════════════════════

def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1] if "}" in tag else tag.split(":")[-1]


def _entity_ref(element: ET.Element) -> str:
    for attr, value in element.attrib.items():
        if _local(attr) == "resource":
            return value
    # <entity1><Class rdf:about="..."/></entity1> and plain-text forms
    for child in element:
        for attr, value in child.attrib.items():
            if _local(attr) == "about":
                return value
    return (element.text or "").strip()


def iter_alignment_cells(document: bytes | str):
    """Yield (entity1, entity2, relation, measure) for every Cell of an
    OAEI Alignment-format document. Identifiers are returned bit-exact."""
    if not document or not document.strip():
        raise ParseError("Alignment document is empty")
    if isinstance(document, str):
        # ElementTree rejects str input that carries an encoding declaration
        document = document.encode("utf-8")
    try:
        root = ET.fromstring(document)
    except ET.ParseError as e:
        line, column = e.position
        raise ParseError(f"Malformed alignment XML: {e}", line=line, column=column) from e

    for cell in root.iter():
        if _local(cell.tag) != "Cell":
            continue
        parts: dict[str, ET.Element] = {}
        for child in cell:
            parts.setdefault(_local(child.tag), child)
        if "entity1" not in parts or "entity2" not in parts:
            raise ParseError("Alignment cell without entity1/entity2")
        relation = (parts["relation"].text or "").strip() if "relation" in parts else "="
        measure = None
        if "measure" in parts and (parts["measure"].text or "").strip():
            try:
                measure = float(parts["measure"].text)
            except ValueError:
                raise ParseError(f"Non-numeric measure {parts['measure'].text!r}") from None
        yield _entity_ref(parts["entity1"]), _entity_ref(parts["entity2"]), relation, measure


def _native_pairs(document: bytes | str) -> tuple[str, list]:
    if isinstance(document, bytes):
        document = document.decode("utf-8-sig")
    if not document.strip():
        raise ParseError("Reference document is empty")
    try:
        data = json.loads(document)
    except json.JSONDecodeError as e:
        raise ParseError(f"Invalid JSON: {e.msg}", line=e.lineno, column=e.colno) from e

    name = ""
    if isinstance(data, dict):
        name = str(data.get("name", ""))
        records = data.get("pairs", data.get("mappings"))
    else:
        records = data
    if not isinstance(records, list):
        raise ParseError("Reference document must be a list of {source, target} records")
    pairs = []
    for index, record in enumerate(records):
        if not isinstance(record, dict) or not isinstance(record.get("source"), str) \
                or not isinstance(record.get("target"), str):
            raise ParseError(f"Record #{index} must be an object with string \"source\" and \"target\"")
        pairs.append((record["source"], record["target"]))
    return name, pairs


def parse_reference_alignment(document: bytes | str, fmt: str = "native", name: str = "") -> ReferenceAlignment:
    if fmt == "native":
        doc_name, pairs = _native_pairs(document)
        name = name or doc_name
    elif fmt == "alignment-xml":
        pairs = [(e1, e2) for e1, e2, relation, _ in iter_alignment_cells(document) if relation == "="]
    else:
        raise ParseError(f"Unsupported reference format '{fmt}'")
    if not pairs:
        raise MetricError("Reference alignment contains no equivalence pairs")
    return ReferenceAlignment(pairs=frozenset(pairs), name=name)


def detect_format(path: Path, document: bytes) -> str:
    if path.suffix.lower() in (".rdf", ".xml", ".owl"):
        return "alignment-xml"
    return "alignment-xml" if document.lstrip().startswith(b"<") else "native"


def load_reference(path: str | Path, fmt: str | None = None) -> ReferenceAlignment:
    path = Path(path)
    try:
        document = path.read_bytes()
    except OSError as e:
        raise ParseError(f"Cannot read reference file {path}: {e.strerror or e}") from e
    return parse_reference_alignment(document, fmt or detect_format(path, document), name=path.stem)


# ═════════════════════════════════════════════════════════════
# Scoring
# ═════════════════════════════════════════════════════════════

def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def evaluate_alignment(predicted, reference: ReferenceAlignment) -> Metrics:
    """Score an Alignment (or any iterable of (source, target) pairs).

    Precision of an empty prediction is 0, so its F1 is 0 as well.
    """
    if not reference.pairs:
        raise MetricError("Cannot evaluate against an empty reference alignment")
    predicted_pairs: set[tuple[str, str]] = set(
        predicted.pairs if hasattr(predicted, "pairs") else _as_pairs(predicted)
    )
    tp_pairs = predicted_pairs & reference.pairs
    tp = len(tp_pairs)
    precision = tp / len(predicted_pairs) if predicted_pairs else 0.0
    recall = tp / len(reference.pairs)
    return Metrics(
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        true_positives=tp,
        predicted_count=len(predicted_pairs),
        reference_count=len(reference.pairs),
        false_positives=tuple(sorted(predicted_pairs - reference.pairs)),
        false_negatives=tuple(sorted(reference.pairs - predicted_pairs)),
    )


def _as_pairs(items: Iterable) -> Iterable[tuple[str, str]]:
    for item in items:
        yield (item[0], item[1]) if isinstance(item, tuple) else (item.source_id, item.target_id)
