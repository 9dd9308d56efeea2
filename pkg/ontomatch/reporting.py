"""
Run reports: human tables, machine JSON, OAEI alignment export and the
HTML run report.
"""

from __future__ import annotations

import html
import io
import json
import xml.etree.ElementTree as ET
from pathlib import Path

from rich import box
from rich.console import Console
from rich.table import Table

from ontomatch import ALIGNMENT_FORMAT_VERSION
from ontomatch.errors import ParseError
from ontomatch.evaluation import Metrics, iter_alignment_cells
from ontomatch.postprocess import Alignment, Mapping, Origin

ALIGN_NS = "http://knowledgeweb.semanticweb.org/heterogeneity/alignment"
RDF_NS = "http://www.w3.org/1999/02/22-rdf-syntax-ns#"
XSD_FLOAT = "http://www.w3.org/2001/XMLSchema#float"

STAGES = ("parse", "represent", "knowledge_base", "retrieve", "classify", "postprocess", "evaluate")


def _pct(value: float | None) -> str:
    return "—" if value is None else f"{value * 100:.2f}"


# ═════════════════════════════════════════════════════════════
# Alignment serialization
# ═════════════════════════════════════════════════════════════

def alignment_to_dict(alignment: Alignment) -> dict:
    return {
        "format_version": ALIGNMENT_FORMAT_VERSION,
        "source_ontology": alignment.source_ontology,
        "target_ontology": alignment.target_ontology,
        "config_fingerprint": alignment.config_fingerprint,
        "metadata": dict(alignment.metadata),
        "mappings": [
            {
                "source": m.source_id,
                "target": m.target_id,
                "s_ir": m.s_ir,
                "s_llm": m.s_llm,
                "origin": m.origin.value,
            }
            for m in alignment.mappings
        ],
    }


def alignment_from_dict(data: dict) -> Alignment:
    if not isinstance(data, dict) or not isinstance(data.get("mappings"), list):
        raise ParseError("Alignment document must be an object with a \"mappings\" list")
    version = data.get("format_version", ALIGNMENT_FORMAT_VERSION)
    if version != ALIGNMENT_FORMAT_VERSION:
        raise ParseError(f"Unsupported alignment format_version {version!r}")
    mappings = []
    for index, record in enumerate(data["mappings"]):
        try:
            s_llm = record.get("s_llm")
            mappings.append(Mapping(
                source_id=str(record["source"]),
                target_id=str(record["target"]),
                s_ir=float(record.get("s_ir", 0.0)),
                s_llm=float(s_llm) if s_llm is not None else None,
                origin=Origin(record.get("origin", Origin.LLM.value)),
            ))
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Mapping #{index} is invalid ({e!r})") from e
    return Alignment(
        mappings=tuple(mappings),
        source_ontology=str(data.get("source_ontology", "")),
        target_ontology=str(data.get("target_ontology", "")),
        config_fingerprint=str(data.get("config_fingerprint", "")),
        metadata=dict(data.get("metadata") or {}),
    )


def write_alignment_xml(alignment: Alignment) -> bytes:
    """OAEI Alignment format (RDF/XML), one equivalence Cell per mapping."""
    ET.register_namespace("", ALIGN_NS)
    ET.register_namespace("rdf", RDF_NS)

    def a(tag: str) -> str:
        return f"{{{ALIGN_NS}}}{tag}"

    resource = f"{{{RDF_NS}}}resource"

    root = ET.Element(f"{{{RDF_NS}}}RDF")
    body = ET.SubElement(root, a("Alignment"))
    ET.SubElement(body, a("xml")).text = "yes"
    ET.SubElement(body, a("level")).text = "0"
    ET.SubElement(body, a("type")).text = "11"
    ET.SubElement(body, a("onto1")).text = alignment.source_ontology
    ET.SubElement(body, a("onto2")).text = alignment.target_ontology
    for mapping in alignment.mappings:
        cell = ET.SubElement(ET.SubElement(body, a("map")), a("Cell"))
        ET.SubElement(cell, a("entity1"), {resource: mapping.source_id})
        ET.SubElement(cell, a("entity2"), {resource: mapping.target_id})
        ET.SubElement(cell, a("relation")).text = "="
        measure = mapping.s_llm if mapping.s_llm is not None else mapping.s_ir
        ET.SubElement(cell, a("measure"), {f"{{{RDF_NS}}}datatype": XSD_FLOAT}).text = repr(float(measure))
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True) + b"\n"


def load_alignment(path: str | Path) -> Alignment:
    """Read a predicted alignment: machine report, native alignment or alignment-xml."""
    path = Path(path)
    try:
        document = path.read_bytes()
    except OSError as e:
        raise ParseError(f"Cannot read alignment file {path}: {e.strerror or e}") from e

    if path.suffix.lower() in (".rdf", ".xml") or document.lstrip().startswith(b"<"):
        mappings = [
            Mapping(source_id=e1, target_id=e2, s_ir=measure or 0.0, s_llm=measure, origin=Origin.LLM)
            for e1, e2, relation, measure in iter_alignment_cells(document)
            if relation == "="
        ]
        return Alignment(mappings=tuple(mappings), source_ontology="", target_ontology="")

    try:
        data = json.loads(document.decode("utf-8-sig"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"Invalid alignment JSON in {path.name}: {e}") from e
    if isinstance(data, dict) and isinstance(data.get("alignment"), dict):
        data = data["alignment"]
    return alignment_from_dict(data)


# ═════════════════════════════════════════════════════════════
# Machine report
# ═════════════════════════════════════════════════════════════

def machine_report(report, alignment: Alignment | None = None) -> dict:
    """Deterministic run document: no timings, cache hits or provider calls."""
    alignment = alignment if alignment is not None else report.alignment
    if alignment is None:
        alignment = Alignment(mappings=(), source_ontology="", target_ontology="",
                              config_fingerprint=report.config_fingerprint)
    return {
        "format_version": ALIGNMENT_FORMAT_VERSION,
        "config_fingerprint": report.config_fingerprint,
        "config": report.config,
        "counts": {
            "sources": report.counts.sources,
            "targets": report.counts.targets,
            "candidates": report.counts.candidates,
            "llm_calls": report.counts.llm_calls,
            "undecidable": report.counts.undecidable,
        },
        "call_bound": report.call_bound,
        "call_bound_ok": report.call_bound_ok,
        "metrics": report.metrics.as_dict() if report.metrics is not None else None,
        "recall_at_k": report.recall_at_k,
        "undecidable_pairs": [list(pair) for pair in report.undecidable_pairs],
        "alignment": alignment_to_dict(alignment),
    }


def metrics_from_dict(data: dict) -> Metrics:
    return Metrics(
        precision=float(data["precision"]),
        recall=float(data["recall"]),
        f1=float(data["f1"]),
        true_positives=int(data["true_positives"]),
        predicted_count=int(data["predicted_count"]),
        reference_count=int(data["reference_count"]),
    )


def _dumps(data) -> bytes:
    return (json.dumps(data, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


# ═════════════════════════════════════════════════════════════
# Human report
# ═════════════════════════════════════════════════════════════

def metrics_table(metrics: Metrics | None, recall_at_k: float | None, k: int | None) -> Table:
    """P/R/F1 rows plus recall@k; k=None omits the retrieval row."""
    table = Table(title="Evaluation", box=box.ROUNDED, show_lines=False)
    table.add_column("Metric", style="cyan", min_width=14)
    table.add_column("Value (%)", justify="right", style="bold")
    table.add_column("Detail", style="dim")
    if metrics is None:
        table.add_row("Precision", "—", "no reference alignment")
        table.add_row("Recall", "—", "")
        table.add_row("F1", "—", "")
    else:
        table.add_row("Precision", _pct(metrics.precision), f"{metrics.true_positives}/{metrics.predicted_count}")
        table.add_row("Recall", _pct(metrics.recall), f"{metrics.true_positives}/{metrics.reference_count}")
        table.add_row("F1", _pct(metrics.f1), "")
    if k is not None:
        table.add_row(f"Recall@{k}", _pct(recall_at_k), "retrieval ceiling")
    return table


def counts_table(report) -> Table:
    counts = report.counts
    table = Table(title="Counts", box=box.ROUNDED)
    table.add_column("Item", style="cyan", min_width=14)
    table.add_column("Count", justify="right", style="yellow")
    table.add_row("Source concepts", str(counts.sources))
    table.add_row("Target concepts", str(counts.targets))
    table.add_row("Candidates", str(counts.candidates))
    bound = "[green]✓[/green]" if report.call_bound_ok else "[red]✗[/red]"
    table.add_row("LLM calls", f"{counts.llm_calls} / {report.call_bound} {bound}")
    table.add_row("Cache hits", str(counts.cache_hits))
    table.add_row("Provider calls", str(counts.provider_calls))
    table.add_row("Undecidable", str(counts.undecidable))
    return table


def timings_table(timings: dict[str, float]) -> Table:
    table = Table(title="Timings", box=box.ROUNDED)
    table.add_column("Stage", style="cyan", min_width=14)
    table.add_column("Seconds", justify="right")
    ordered = [s for s in STAGES if s in timings] + sorted(set(timings) - set(STAGES))
    for stage in ordered:
        table.add_row(stage, f"{timings[stage]:.3f}")
    table.add_section()
    table.add_row("[bold]total[/bold]", f"[bold]{sum(timings.values()):.3f}[/bold]")
    return table


def mappings_table(alignment: Alignment, limit: int | None = None) -> Table:
    table = Table(title=f"Alignment ({len(alignment)} mappings)", box=box.ROUNDED)
    table.add_column("Source", style="cyan")
    table.add_column("Target", style="green")
    table.add_column("s_ir", justify="right")
    table.add_column("s_llm", justify="right")
    table.add_column("Origin", style="dim")
    shown = alignment.mappings if limit is None else alignment.mappings[:limit]
    for m in shown:
        s_llm = "—" if m.s_llm is None else f"{m.s_llm:.4f}"
        table.add_row(m.source_id, m.target_id, f"{m.s_ir:.4f}", s_llm, m.origin.value)
    if limit is not None and len(alignment) > limit:
        table.add_section()
        table.add_row(f"[dim]… {len(alignment) - limit} more[/dim]", "", "", "", "")
    return table


def report_renderables(report, alignment: Alignment | None = None, mapping_limit: int | None = 20) -> list:
    alignment = alignment if alignment is not None else report.alignment
    items = [
        f"[bold]Config fingerprint:[/bold] {report.config_fingerprint}",
        metrics_table(report.metrics, report.recall_at_k, report.k),
        counts_table(report),
    ]
    if report.timings:
        items.append(timings_table(report.timings))
    if alignment is not None:
        items.append(mappings_table(alignment, limit=mapping_limit))
    return items


def render_text(renderables, width: int = 100) -> str:
    """Render rich objects to plain text."""
    buffer = Console(record=True, file=io.StringIO(), width=width, color_system=None)
    for item in renderables:
        buffer.print(item)
    return buffer.export_text()


def emit_report(report, alignment: Alignment | None = None, fmt: str = "human") -> bytes:
    if fmt == "machine":
        return _dumps(machine_report(report, alignment))
    if fmt == "human":
        return render_text(report_renderables(report, alignment, mapping_limit=None)).encode("utf-8")
    raise ValueError(f"Unknown report format '{fmt}'")


# ═════════════════════════════════════════════════════════════
# Retrieval and sweep reports
# ═════════════════════════════════════════════════════════════

def retrieval_report_dict(report) -> dict:
    return {
        "format_version": ALIGNMENT_FORMAT_VERSION,
        "config_fingerprint": report.config_fingerprint,
        "provider": report.provider,
        "variant": report.variant.value,
        "sources": report.sources,
        "targets": report.targets,
        "recall_at_k": {str(k): value for k, value in sorted(report.recall.items())},
    }


def recall_table(report) -> Table:
    table = Table(title=f"Recall@k ({report.provider}, {report.variant.value})", box=box.ROUNDED)
    table.add_column("k", justify="right", style="cyan")
    table.add_column("Recall (%)", justify="right", style="bold")
    for k, value in sorted(report.recall.items()):
        table.add_row(str(k), _pct(value))
    return table


def sweep_table(rows: list[dict]) -> Table:
    table = Table(title="Sweep summary", box=box.ROUNDED, show_lines=False)
    table.add_column("#", justify="right", style="dim")
    table.add_column("Cell", style="cyan")
    table.add_column("P", justify="right")
    table.add_column("R", justify="right")
    table.add_column("F1", justify="right", style="bold")
    table.add_column("R@k", justify="right")
    table.add_column("LLM calls", justify="right", style="yellow")
    for index, row in enumerate(rows, 1):
        if row.get("error"):
            table.add_row(str(index), row["cell"], "[red]✗[/red]", "", "", "", row["error"])
            continue
        metrics = row.get("metrics") or {}
        table.add_row(
            str(index), row["cell"],
            _pct(metrics.get("precision")), _pct(metrics.get("recall")), _pct(metrics.get("f1")),
            _pct(row.get("recall_at_k")), str(row.get("llm_calls", "")),
        )
    return table


def write_bytes(path: str | Path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return path


# ═════════════════════════════════════════════════════════════
# HTML report
# ═════════════════════════════════════════════════════════════

def generate_html_report(report, path: str | Path = "match_report.html") -> Path:
    """Write a standalone HTML run report."""
    alignment = report.alignment or Alignment(mappings=(), source_ontology="", target_ontology="")
    metrics = report.metrics
    esc = html.escape

    css = """
    body { font-family: 'Inter', -apple-system, sans-serif; line-height: 1.5; color: #333; max-width: 1200px; margin: 0 auto; padding: 40px 20px; background-color: #f8f9fa; }
    h1, h2, h3 { color: #1a202c; }
    .header { border-bottom: 2px solid #e2e8f0; padding-bottom: 20px; margin-bottom: 40px; display: flex; justify-content: space-between; align-items: center; }
    .status { padding: 8px 16px; border-radius: 9999px; font-weight: 600; font-size: 0.875rem; }
    .status-pass { background-color: #c6f6d5; color: #22543d; }
    .status-fail { background-color: #fed7d7; color: #822727; }
    .card { background: white; border-radius: 8px; box-shadow: 0 1px 3px rgba(0,0,0,0.1); padding: 24px; margin-bottom: 32px; }
    table { width: 100%; border-collapse: collapse; margin-top: 16px; }
    th { text-align: left; padding: 12px; background: #f7fafc; border-bottom: 2px solid #edf2f7; font-size: 0.75rem; text-transform: uppercase; letter-spacing: 0.05em; color: #4a5568; }
    td { padding: 12px; border-bottom: 1px solid #edf2f7; font-size: 0.875rem; }
    .concept { font-weight: 600; color: #2d3748; }
    .source-val { color: #b7791f; }
    .target-val { color: #2f855a; }
    .badge { padding: 2px 8px; border-radius: 4px; font-size: 0.75rem; font-weight: 600; }
    .badge-llm { background: #c6f6d5; color: #22543d; }
    .badge-exact { background: #bee3f8; color: #2a4365; }
    .badge-err { background: #fed7d7; color: #822727; }
    """

    status_class = "status-pass" if report.call_bound_ok else "status-fail"
    status_text = f"{report.counts.llm_calls} LLM CALLS ≤ k·n" if report.call_bound_ok else "CALL BOUND EXCEEDED"

    def card(label: str, value: str) -> str:
        return f"""
        <div class="card" style="margin-bottom: 0; text-align: center;">
            <div style="color: #718096; font-size: 0.875rem;">{label}</div>
            <div style="font-size: 2rem; font-weight: 700; color: #2d3748;">{value}</div>
        </div>"""

    cards = "".join([
        card("Precision", _pct(metrics.precision) if metrics else "—"),
        card("Recall", _pct(metrics.recall) if metrics else "—"),
        card("F1", _pct(metrics.f1) if metrics else "—"),
        card(f"Recall@{report.k}", _pct(report.recall_at_k)),
        card("Mappings", str(len(alignment))),
    ])

    page = f"""<!DOCTYPE html>
<html>
<head>
    <meta charset="UTF-8">
    <title>Matching Report - {esc(alignment.source_ontology)} to {esc(alignment.target_ontology)}</title>
    <style>{css}</style>
</head>
<body>
    <div class="header">
        <div>
            <h1>Matching Report</h1>
            <p style="color: #718096; margin-top: 4px;">{esc(alignment.source_ontology)} &rarr; {esc(alignment.target_ontology)} &middot; config {esc(report.config_fingerprint)}</p>
        </div>
        <div class="status {status_class}">{status_text}</div>
    </div>

    <div style="display: grid; grid-template-columns: repeat(auto-fit, minmax(180px, 1fr)); gap: 20px; margin-bottom: 40px;">{cards}
    </div>

    <div class="card">
        <h3>Alignment</h3>
        <table>
            <thead>
                <tr>
                    <th>Source</th>
                    <th>Target</th>
                    <th>s_ir</th>
                    <th>s_llm</th>
                    <th>Origin</th>
                </tr>
            </thead>
            <tbody>
    """

    for m in alignment.mappings:
        s_llm = "—" if m.s_llm is None else f"{m.s_llm:.4f}"
        page += f"""
                <tr>
                    <td class="source-val">{esc(m.source_id)}</td>
                    <td class="target-val">{esc(m.target_id)}</td>
                    <td>{m.s_ir:.4f}</td>
                    <td>{s_llm}</td>
                    <td><span class="badge badge-{m.origin.value}">{m.origin.value}</span></td>
                </tr>"""

    page += """
            </tbody>
        </table>
    </div>
    """

    if metrics is not None and (metrics.false_positives or metrics.false_negatives):
        page += """
    <div class="card" style="border-left: 4px solid #f56565;">
        <h3>Errors against the reference</h3>
        <table>
            <thead><tr><th>Kind</th><th>Source</th><th>Target</th></tr></thead>
            <tbody>
        """
        for kind, pairs in (("false positive", metrics.false_positives), ("false negative", metrics.false_negatives)):
            for source, target in pairs:
                page += f'<tr><td><span class="badge badge-err">{kind}</span></td><td>{esc(source)}</td><td>{esc(target)}</td></tr>'
        page += "</tbody></table></div>"

    if report.undecidable_pairs:
        page += '<div class="card"><h3>Undecidable pairs</h3><ul style="font-size: 0.875rem; color: #4a5568;">'
        for source, target in report.undecidable_pairs:
            page += f"<li>{esc(source)} &rarr; {esc(target)}</li>"
        page += "</ul></div>"

    page += f"""
    <div class="card">
        <h3>Run</h3>
        <table>
            <thead><tr><th>Stage</th><th>Seconds</th></tr></thead>
            <tbody>
            {"".join(f"<tr><td class='concept'>{esc(stage)}</td><td>{seconds:.3f}</td></tr>" for stage, seconds in report.timings.items())}
            </tbody>
        </table>
        <p style="color: #718096; font-size: 0.875rem;">Sources {report.counts.sources} &middot; targets {report.counts.targets} &middot; candidates {report.counts.candidates} &middot; cache hits {report.counts.cache_hits} &middot; provider calls {report.counts.provider_calls}</p>
    </div>
</body>
</html>
"""

    path = Path(path)
    path.write_text(page, encoding="utf-8")
    return path
