"""
Unit tests for reference parsing and precision / recall / F1 scoring.
"""

import json
import os
import random
import sys
import tempfile
import unittest
from pathlib import Path

# Add project root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ontomatch.errors import MetricError, ParseError
from ontomatch.evaluation import (
    ReferenceAlignment, evaluate_alignment, f1_score, iter_alignment_cells,
    load_reference, parse_reference_alignment,
)

ALIGNMENT_XML = """<?xml version="1.0" encoding="utf-8"?>
<rdf:RDF xmlns="http://knowledgeweb.semanticweb.org/heterogeneity/alignment"
         xmlns:rdf="http://www.w3.org/1999/02/22-rdf-syntax-ns#">
  <Alignment>
    <xml>yes</xml>
    <level>0</level>
    <type>??</type>
    <map>
      <Cell>
        <entity1 rdf:resource="http://mouse.owl#MA_0000072"/>
        <entity2 rdf:resource="http://human.owl#NCI_C12727"/>
        <measure rdf:datatype="xsd:float">1.0</measure>
        <relation>=</relation>
      </Cell>
    </map>
    <map>
      <Cell>
        <entity1 rdf:resource="http://mouse.owl#MA_0000168"/>
        <entity2 rdf:resource="http://human.owl#NCI_C12439"/>
        <measure rdf:datatype="xsd:float">0.4</measure>
        <relation>&lt;</relation>
      </Cell>
    </map>
  </Alignment>
</rdf:RDF>
"""

# (task, precision %, recall %, reported F1 %)
REPORTED_ROWS = [
    ("Mouse-Human", 90.82, 87.46, 89.11),
    ("TAXR-NCBI(Bacteria)", 67.96, 99.42, 80.74),
    ("TAXR-NCBI(Chromista)", 69.87, 98.07, 81.61),
    ("TAXR-NCBI(Fungi)", 86.97, 99.08, 99.63),
    ("TAXR-NCBI(Plantae)", 82.59, 96.34, 88.94),
    ("TAXR-NCBI(Protozoa)", 86.06, 98.59, 91.90),
    ("DOID-ORDO", 85.79, 94.26, 89.83),
    ("NCIT-DOID (disease)", 86.19, 80.06, 83.01),
    ("SNOMED-FMA(body)", 21.12, 32.60, 25.64),
    ("SNOMED-NCIT(neoplas)", 46.96, 52.96, 49.47),
    ("SNOMED-NCIT(pharm)", 81.84, 58.19, 68.02),
]


def reference(*pairs):
    return ReferenceAlignment(frozenset(pairs), "ref")


# ── Tests ─────────────────────────────────────────────────────

class TestEvaluateAlignment(unittest.TestCase):

    def test_identity(self):
        ref = reference(("a", "x"), ("b", "y"))
        metrics = evaluate_alignment([("a", "x"), ("b", "y")], ref)
        self.assertEqual((metrics.precision, metrics.recall, metrics.f1), (1.0, 1.0, 1.0))

    def test_empty_prediction(self):
        metrics = evaluate_alignment([], reference(("a", "x"), ("b", "y"), ("c", "z")))
        self.assertEqual((metrics.precision, metrics.recall, metrics.f1), (0.0, 0.0, 0.0))
        self.assertEqual(metrics.predicted_count, 0)

    def test_partial(self):
        ref = reference(("a", "x"), ("b", "y"), ("c", "z"), ("d", "w"))
        metrics = evaluate_alignment([("a", "x"), ("b", "y"), ("c", "q")], ref)
        self.assertEqual(metrics.true_positives, 2)
        self.assertAlmostEqual(metrics.precision, 2 / 3)
        self.assertAlmostEqual(metrics.recall, 0.5)
        self.assertAlmostEqual(metrics.f1, 2 * (2 / 3) * 0.5 / (2 / 3 + 0.5))
        self.assertEqual(metrics.false_positives, (("c", "q"),))
        self.assertEqual(metrics.false_negatives, (("c", "z"), ("d", "w")))

    def test_identifiers_are_case_sensitive(self):
        metrics = evaluate_alignment([("A", "x")], reference(("a", "x")))
        self.assertEqual(metrics.true_positives, 0)

    def test_empty_reference(self):
        with self.assertRaises(MetricError):
            evaluate_alignment([("a", "x")], ReferenceAlignment(frozenset()))

    def test_reported_f1(self):
        self.assertAlmostEqual(f1_score(0.9082, 0.8746), 0.8911, delta=1e-4)

    def test_f1_consistency_on_reported_rows(self):
        consistent = []
        for task, precision, recall, reported in REPORTED_ROWS:
            recomputed = f1_score(precision / 100, recall / 100)
            if abs(recomputed - reported / 100) > 0.015:
                # reported figure does not follow from P and R
                continue
            consistent.append(task)
            with self.subTest(task=task):
                self.assertLessEqual(recomputed, 1.0)
                self.assertLessEqual(recomputed, 2 * min(precision, recall) / 100)
        self.assertNotIn("TAXR-NCBI(Fungi)", consistent)
        self.assertIn("Mouse-Human", consistent)
        self.assertIn("DOID-ORDO", consistent)

    def test_random_sets(self):
        rng = random.Random(13)
        universe = [(f"s{i}", f"t{j}") for i in range(6) for j in range(6)]
        for _ in range(500):
            ref = reference(*rng.sample(universe, rng.randint(1, 10)))
            predicted = rng.sample(universe, rng.randint(0, 10))
            metrics = evaluate_alignment(predicted, ref)
            shuffled = predicted[:]
            rng.shuffle(shuffled)
            self.assertEqual(evaluate_alignment(shuffled, ref), metrics)
            for value in (metrics.precision, metrics.recall, metrics.f1):
                self.assertTrue(0.0 <= value <= 1.0)
            self.assertLessEqual(metrics.f1, 2 * min(metrics.precision, metrics.recall) + 1e-12)


class TestParseReference(unittest.TestCase):

    def test_native_list(self):
        doc = json.dumps([{"source": "a", "target": "x"}, {"source": "b", "target": "y"}])
        self.assertEqual(len(parse_reference_alignment(doc)), 2)

    def test_native_object(self):
        doc = json.dumps({"name": "anatomy", "pairs": [{"source": "a", "target": "x"}]})
        ref = parse_reference_alignment(doc.encode("utf-8"))
        self.assertEqual(ref.name, "anatomy")
        self.assertEqual(ref.pairs, frozenset({("a", "x")}))

    def test_native_bad_record(self):
        with self.assertRaises(ParseError):
            parse_reference_alignment(json.dumps([{"source": "a"}]))

    def test_native_empty_list(self):
        with self.assertRaises(MetricError):
            parse_reference_alignment("[]")

    def test_empty_document(self):
        with self.assertRaises(ParseError):
            parse_reference_alignment("", fmt="alignment-xml")
        with self.assertRaises(ParseError):
            parse_reference_alignment("  ")

    def test_xml_keeps_only_equivalence(self):
        ref = parse_reference_alignment(ALIGNMENT_XML, fmt="alignment-xml")
        self.assertEqual(ref.pairs, frozenset({("http://mouse.owl#MA_0000072", "http://human.owl#NCI_C12727")}))

    def test_xml_cells(self):
        cells = list(iter_alignment_cells(ALIGNMENT_XML.encode("utf-8")))
        self.assertEqual([c[2] for c in cells], ["=", "<"])
        self.assertEqual(cells[1][3], 0.4)

    def test_xml_only_subsumption(self):
        doc = ALIGNMENT_XML.replace("<relation>=</relation>", "<relation>&gt;</relation>")
        with self.assertRaises(MetricError):
            parse_reference_alignment(doc, fmt="alignment-xml")

    def test_malformed_xml(self):
        with self.assertRaises(ParseError) as ctx:
            parse_reference_alignment("<rdf:RDF><Alignment>", fmt="alignment-xml")
        self.assertIsNotNone(ctx.exception.line)

    def test_unknown_format(self):
        with self.assertRaises(ParseError):
            parse_reference_alignment("[]", fmt="tsv")

    def test_load_reference_detects_format(self):
        with tempfile.TemporaryDirectory() as tmp:
            rdf = Path(tmp) / "reference.rdf"
            rdf.write_text(ALIGNMENT_XML, encoding="utf-8")
            native = Path(tmp) / "reference.json"
            native.write_text(json.dumps([{"source": "a", "target": "x"}]), encoding="utf-8")
            self.assertEqual(len(load_reference(rdf)), 1)
            self.assertEqual(load_reference(native).name, "reference")
            with self.assertRaises(ParseError):
                load_reference(Path(tmp) / "missing.json")


if __name__ == "__main__":
    unittest.main()
