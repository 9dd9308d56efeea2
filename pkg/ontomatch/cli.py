"""
CLI: argument parsing, dry-run preview, and the match / retrieve / eval /
sweep commands.
"""

from __future__ import annotations

import sys
import json
import logging
import argparse
from pathlib import Path
from urllib.parse import urlsplit, urlunsplit

from rich.panel import Panel
from rich.table import Table
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn
from rich import box

from ontomatch import console, err_console, CONFIG_FILE
from ontomatch.cache import ResponseCache
from ontomatch.config import RunConfig, config_from_dict, init_config, read_config_file, sweep_cells
from ontomatch.errors import ConfigError, OntoMatchError, ProviderError, StageError
from ontomatch.evaluation import evaluate_alignment, load_reference
from ontomatch.pipeline import plan_run, run_pipeline, run_retrieval
from ontomatch.reporting import (
    emit_report, generate_html_report, load_alignment, machine_report,
    metrics_table, recall_table, report_renderables, retrieval_report_dict, sweep_table,
    write_alignment_xml, write_bytes,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

_PATH_FLAGS = {
    "source": "source_path",
    "target": "target_path",
    "reference": "reference_path",
    "train": "train_path",
    "cache_dir": "cache_dir",
}
_VALUE_FLAGS = (
    "retrieval_variant", "llm_variant", "s_llm_threshold", "s_ir_threshold",
    "exact_policy", "n_shots", "seed", "workers",
)


# ═════════════════════════════════════════════════════════════
# Arguments
# ═════════════════════════════════════════════════════════════

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=None,
                        help=f"Config file (default: {CONFIG_FILE.name} next to match.py)")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging and full tables")
    return common


def _run_parser() -> argparse.ArgumentParser:
    """Flags that override RunConfig fields."""
    run = argparse.ArgumentParser(add_help=False)
    group = run.add_argument_group("config overrides")
    group.add_argument("--source", help="Source ontology file")
    group.add_argument("--target", help="Target ontology file")
    group.add_argument("--reference", help="Reference alignment (native JSON or alignment-xml)")
    group.add_argument("--retrieval-variant", choices=("C", "CP", "CC"))
    group.add_argument("--llm-variant", choices=("C", "CP", "CC"))
    group.add_argument("--retriever", choices=("tfidf", "openai"), help="Retrieval provider type")
    group.add_argument("--embedding-model", help="Embedding model for --retriever openai")
    group.add_argument("--llm-model", help="Chat model of the OpenAI-compatible LLM")
    group.add_argument("--mock-llm", metavar="FIXTURE", help="Use the fixture-driven mock LLM")
    group.add_argument("--s-llm-threshold", type=float)
    group.add_argument("--s-ir-threshold", type=float)
    group.add_argument("--exact-policy", choices=("union", "intersection"))
    group.add_argument("--n-shots", type=int)
    group.add_argument("--train", help="Few-shot training pairs file")
    group.add_argument("--seed", type=int)
    group.add_argument("--workers", type=int)
    group.add_argument("--cache-dir")
    return run


def parse_args(argv=None):
    """Parse CLI arguments."""
    common = _common_parser()
    run = _run_parser()
    parser = argparse.ArgumentParser(
        description="Ontology matching: retrieve top-k candidates, classify them with an LLM",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "Examples:\n"
            "  python match.py init                       Create config file template\n"
            "  python match.py match --dry-run            Validate inputs, estimate calls\n"
            "  python match.py match -o report.json       Run the full pipeline\n"
            "  python match.py retrieve --k 5 10 20       Recall@k of the retriever only\n"
            "  python match.py eval alignment.rdf         Score an existing alignment\n"
            "  python match.py sweep --out-dir sweep/     Run every cell of the sweep grid\n"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("init", parents=[common], help=f"Create {CONFIG_FILE.name} and exit")

    match = sub.add_parser("match", parents=[common, run], help="Run the full pipeline")
    match.add_argument("--k", type=int, help="Candidates retrieved per source concept")
    match.add_argument("--dry-run", action="store_true",
                       help="Parse inputs and estimate provider calls, no provider traffic")
    match.add_argument("--output", "-o", help="Write the machine report (JSON)")
    match.add_argument("--xml", help="Write the alignment in OAEI Alignment format")
    match.add_argument("--html", help="Write an HTML run report")
    match.add_argument("--machine", action="store_true", help="Print the machine report instead of tables")

    retrieve = sub.add_parser("retrieve", parents=[common, run], help="Retrieval only, report recall@k")
    retrieve.add_argument("--k", type=int, nargs="+", help="One or more k values")
    retrieve.add_argument("--output", "-o", help="Write recall@k as JSON")

    evaluate = sub.add_parser("eval", parents=[common], help="Score an existing alignment file")
    evaluate.add_argument("alignment", help="Machine report, native alignment or alignment-xml")
    evaluate.add_argument("--reference", help="Reference alignment (default: from config)")
    evaluate.add_argument("--output", "-o", help="Write metrics as JSON")

    sweep = sub.add_parser("sweep", parents=[common, run], help="Run every cell of the config's sweep grid")
    sweep.add_argument("--k", type=int)
    sweep.add_argument("--out-dir", default="sweep_reports", help="Directory for per-cell reports")

    return parser.parse_args(argv)


def setup_logging(verbose: bool, stderr: bool = False):
    # machine output owns stdout
    handler_console = err_console if stderr else console
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=handler_console, show_path=verbose, rich_tracebacks=verbose)],
        force=True,
    )
    # keep HTTP client chatter out of debug output
    for name in ("httpx", "httpcore", "openai"):
        logging.getLogger(name).setLevel(logging.WARNING)


# ═════════════════════════════════════════════════════════════
# Config resolution
# ═════════════════════════════════════════════════════════════

def _config_path(args) -> Path:
    return Path(args.config) if args.config else CONFIG_FILE


def _raw_config(args) -> tuple[dict, Path]:
    """Config file contents (empty when the default file is absent) and its base dir."""
    path = _config_path(args)
    if args.config is None and not path.exists():
        return {}, Path.cwd()
    return read_config_file(path), path.resolve().parent


def resolve_config(args) -> tuple[RunConfig, dict]:
    """Config file plus CLI overrides; returns the config and the raw sweep grid."""
    data, base_dir = _raw_config(args)
    data = dict(data)
    grid = data.get("sweep") or {}

    for flag, key in _PATH_FLAGS.items():
        value = getattr(args, flag, None)
        if value:
            # CLI paths are relative to the working directory
            data[key] = str(Path(value).expanduser().resolve())
    for key in _VALUE_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    k = getattr(args, "k", None)
    if isinstance(k, int):
        data["k"] = k

    retriever = getattr(args, "retriever", None)
    if retriever == "tfidf":
        data["retriever"] = {"type": "tfidf"}
    elif retriever == "openai" or getattr(args, "embedding_model", None):
        spec = dict(data.get("retriever") or {})
        spec["type"] = "openai"
        if getattr(args, "embedding_model", None):
            spec["model"] = args.embedding_model
        data["retriever"] = spec

    if getattr(args, "mock_llm", None):
        data["llm"] = {"type": "mock", "fixture": str(Path(args.mock_llm).expanduser().resolve())}
    elif getattr(args, "llm_model", None):
        spec = dict(data.get("llm") or {"type": "openai"})
        spec.update(type="openai", model=args.llm_model)
        data["llm"] = spec

    return config_from_dict(data, base_dir=base_dir), grid


def _mask_url(url: str | None) -> str:
    if not url:
        return "default endpoint"
    parts = urlsplit(url)
    if parts.password or parts.username:
        netloc = f"{parts.username or ''}:****@{parts.hostname}" + (f":{parts.port}" if parts.port else "")
        parts = parts._replace(netloc=netloc)
    return urlunsplit(parts)


def _describe_provider(spec: dict) -> str:
    kind = spec.get("type")
    if kind == "tfidf":
        return "tfidf (fitted on the target ontology)"
    if kind == "mock":
        return f"mock ({Path(spec['fixture']).name})"
    return f"{kind}:{spec.get('model')} @ {_mask_url(spec.get('base_url'))}"


def _summary_panel(config: RunConfig, title: str) -> Panel:
    return Panel(
        f"[bold]Source:[/bold]     {config.source_path}\n"
        f"[bold]Target:[/bold]     {config.target_path}\n"
        f"[bold]Reference:[/bold]  {config.reference_path or '[dim]none[/dim]'}\n"
        f"[bold]Retriever:[/bold]  {_describe_provider(config.retriever)}  "
        f"[dim](variant {config.retrieval_variant.value}, k={config.k})[/dim]\n"
        f"[bold]LLM:[/bold]        {_describe_provider(config.llm)}  "
        f"[dim](variant {config.llm_variant.value}, "
        f"{'zero-shot' if not config.n_shots else f'{config.n_shots}-shot'})[/dim]\n"
        f"[bold]Filters:[/bold]    s_llm > {config.s_llm_threshold}, s_ir > {config.s_ir_threshold}, "
        f"exact matches: {config.exact_policy.value}\n"
        f"[bold]Config:[/bold]     {config.fingerprint}",
        title=title,
        border_style="yellow",
    )


def _banner(subtitle: str, style: str = "bright_cyan"):
    console.print(
        Panel(
            "[bold white]Ontology Matching: Retrieve → Classify → Filter[/bold white]\n"
            f"[dim]{subtitle}[/dim]",
            border_style=style,
            padding=(1, 4),
        )
    )


# ═════════════════════════════════════════════════════════════
# Error reporting
# ═════════════════════════════════════════════════════════════

def _hint(error: Exception) -> str:
    if isinstance(error, ConfigError):
        return f"Fix '{error.field}' in the config file or pass the matching flag."
    if isinstance(error, ProviderError):
        return "Check the API key environment variable, base URL and rate limits."
    return "Run again with --verbose for details."


def report_error(error: OntoMatchError, out=console) -> int:
    """Print a typed error with a hint and return the exit code."""
    cause = error.cause if isinstance(error, StageError) else error
    if isinstance(error, StageError):
        out.print(f"\n[red]✗ Stage '{error.stage}' failed:[/red] {cause}")
        if error.timings:
            done = ", ".join(f"{stage} {seconds:.2f}s" for stage, seconds in error.timings.items())
            out.print(f"  [dim]Timings so far: {done}[/dim]")
    else:
        out.print(f"\n[red]✗ {type(error).__name__}:[/red] {error}")
    out.print(f"  [dim]{_hint(cause)}[/dim]\n")
    return EXIT_CONFIG if isinstance(cause, ConfigError) else EXIT_FAILED


# ═════════════════════════════════════════════════════════════
# Commands
# ═════════════════════════════════════════════════════════════

def dry_run(config: RunConfig) -> int:
    """Validate inputs and preview the run, without provider calls."""
    _banner("🔍 DRY RUN — No provider calls will be made", style="bright_magenta")

    console.print("[bold yellow][1/3][/bold yellow] Configuration")
    console.print(_summary_panel(config, "Run Summary"))
    console.print("  [green]✓[/green] Config is valid\n")

    console.print("[bold yellow][2/3][/bold yellow] Inputs")
    try:
        plan = plan_run(config)
    except OntoMatchError as e:
        console.print(f"  [red]✗ {e}[/red]\n")
        console.print(
            Panel(
                "[bold red]✗ Dry run found issues.[/bold red]\n"
                "[yellow]Fix the errors above before running the matcher.[/yellow]",
                border_style="red",
                padding=(1, 2),
            )
        )
        return report_error(e) if isinstance(e, ConfigError) else EXIT_FAILED

    table = Table(box=box.ROUNDED)
    table.add_column("Input", style="cyan", min_width=16)
    table.add_column("Name")
    table.add_column("Concepts / pairs", justify="right", style="yellow")
    table.add_row("Source ontology", plan["source"], f"{plan['sources']:,}")
    table.add_row("Target ontology", plan["target"], f"{plan['targets']:,}")
    if plan["reference_pairs"] is not None:
        table.add_row("Reference", config.reference_path.name, f"{plan['reference_pairs']:,}")
    console.print(table)
    console.print("  [green]✓[/green] Inputs parsed and validated\n")

    console.print("[bold yellow][3/3][/bold yellow] Call estimate")
    full = plan["sources"] * plan["targets"]
    console.print(f"  LLM calls (at most k × sources):   [bold]{plan['max_llm_calls']:,}[/bold]")
    console.print(f"  Without retrieval (all pairs):     [dim]{full:,}[/dim]")
    if config.retriever["type"] != "tfidf":
        console.print(f"  Embedding requests (cold cache):   [bold]{plan['embedding_calls']:,}[/bold]")
    console.print("")

    console.print(
        Panel(
            "[bold green]✓ Dry run passed — everything looks good![/bold green]\n\n"
            "[bold]Ready to match. Run:[/bold]\n"
            "  [cyan]python match.py match[/cyan]",
            border_style="green",
            padding=(1, 2),
        )
    )
    return EXIT_OK


def _run_with_progress(config: RunConfig, cache: ResponseCache | None = None, quiet: bool = False):
    if quiet:
        return run_pipeline(config, cache=cache)
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        console=console,
        transient=True,
    ) as progress:
        stage_task = progress.add_task("[cyan]Starting...", total=None)
        classify_task = {}

        def on_stage(name: str):
            progress.update(stage_task, description=f"[cyan]Stage: {name}...")

        def on_classify_start(total: int):
            classify_task["id"] = progress.add_task("[cyan]Classifying candidate pairs", total=total)

        def on_classified():
            progress.advance(classify_task["id"])

        return run_pipeline(
            config, cache=cache,
            on_stage=on_stage, on_classify_start=on_classify_start, on_classified=on_classified,
        )


def cmd_match(args) -> int:
    config, _ = resolve_config(args)
    if args.dry_run:
        return dry_run(config)

    if not args.machine:
        _banner("Retrieval-augmented LLM ontology matching")
        console.print("[bold yellow][1/3][/bold yellow] Configuration")
        console.print(_summary_panel(config, "Run Summary"))
        console.print("")
        console.print("[bold yellow][2/3][/bold yellow] Running pipeline...")

    report = _run_with_progress(config, quiet=args.machine)

    if args.machine:
        sys.stdout.write(emit_report(report, fmt="machine").decode("utf-8"))
        sys.stdout.flush()
    else:
        console.print("  [green]✓[/green] Pipeline complete\n")
        console.print("[bold yellow][3/3][/bold yellow] Results")
        for item in report_renderables(report, mapping_limit=None if args.verbose else 20):
            console.print(item)

    outputs = []
    if args.output:
        outputs.append(write_bytes(args.output, emit_report(report, fmt="machine")))
    if args.xml:
        outputs.append(write_bytes(args.xml, write_alignment_xml(report.alignment)))
    if args.html:
        outputs.append(generate_html_report(report, args.html))
    for path in outputs:
        if not args.machine:
            console.print(f"  [green]✓[/green] Written: [cyan]{path}[/cyan]")

    if report.counts.undecidable and not args.machine:
        console.print(f"  [yellow]⚠ {report.counts.undecidable} undecidable LLM answers were treated as 'no'[/yellow]")

    if not report.call_bound_ok:
        (err_console if args.machine else console).print(
            Panel(
                "[bold red]✗ LLM call bound exceeded[/bold red]\n"
                f"{report.counts.llm_calls} calls > k × sources = {report.call_bound}",
                border_style="red",
                padding=(1, 2),
            )
        )
        return EXIT_FAILED

    if not args.machine:
        console.print("")
        console.print(
            Panel(
                "[bold green]✓ Matching completed successfully![/bold green]\n"
                f"[green]{len(report.alignment)} mappings · "
                f"{report.counts.llm_calls} LLM calls ({report.counts.cache_hits} from cache)[/green]",
                border_style="green",
                padding=(1, 2),
            )
        )
    return EXIT_OK


def cmd_retrieve(args) -> int:
    config, _ = resolve_config(args)
    ks = args.k or [config.k]
    _banner("Retrieval only — recall@k against the reference")
    console.print(_summary_panel(config, "Run Summary"))

    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                  console=console, transient=True) as progress:
        task = progress.add_task("[cyan]Starting...", total=None)
        report = run_retrieval(
            config, ks,
            on_stage=lambda name: progress.update(task, description=f"[cyan]Stage: {name}..."),
        )

    console.print(recall_table(report))
    console.print(f"  [dim]{report.sources} sources · {report.targets} targets · config {report.config_fingerprint}[/dim]")
    if args.output:
        path = write_bytes(args.output, (json.dumps(retrieval_report_dict(report), indent=2) + "\n").encode("utf-8"))
        console.print(f"  [green]✓[/green] Written: [cyan]{path}[/cyan]")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.reference:
        reference_path = Path(args.reference)
    else:
        data, base_dir = _raw_config(args)
        if not data.get("reference_path"):
            raise ConfigError("reference_path", "No reference alignment: pass --reference or set reference_path")
        reference_path = Path(data["reference_path"])
        if not reference_path.is_absolute():
            reference_path = base_dir / reference_path

    predicted = load_alignment(args.alignment)
    reference = load_reference(reference_path)
    metrics = evaluate_alignment(predicted, reference)

    console.print(metrics_table(metrics, None, None))
    if args.verbose:
        for label, pairs in (("False positives", metrics.false_positives), ("False negatives", metrics.false_negatives)):
            if pairs:
                console.print(f"\n[bold]{label}[/bold] ({len(pairs)})")
                for source, target in pairs:
                    console.print(f"  [dim]{source} → {target}[/dim]")
    if args.output:
        path = write_bytes(args.output, (json.dumps(metrics.as_dict(), indent=2) + "\n").encode("utf-8"))
        console.print(f"  [green]✓[/green] Written: [cyan]{path}[/cyan]")
    return EXIT_OK


def _cell_label(overrides: dict) -> str:
    parts = []
    for key, value in overrides.items():
        if isinstance(value, dict):
            value = value.get("type", "?") + (f":{value['model']}" if value.get("model") else "")
        parts.append(f"{key}={value}")
    return ", ".join(parts) or "base"


def cmd_sweep(args) -> int:
    config, grid = resolve_config(args)
    if not grid:
        raise ConfigError("sweep", "The config file has no \"sweep\" grid")
    cells = sweep_cells(config, grid, base_dir=_config_path(args).resolve().parent)
    out_dir = Path(args.out_dir)

    _banner(f"Sweep — {len(cells)} cells")
    console.print(_summary_panel(config, "Base Configuration"))

    cache = ResponseCache(config.cache_dir / "responses")
    rows = []
    failed = 0
    for index, (overrides, cell_config) in enumerate(cells, 1):
        label = _cell_label(overrides)
        console.print(f"[bold yellow][{index}/{len(cells)}][/bold yellow] {label}")
        try:
            report = _run_with_progress(cell_config, cache=cache)
        except OntoMatchError as e:
            failed += 1
            report_error(e)
            rows.append({"cell": label, "overrides": overrides, "error": str(e)})
            continue
        path = write_bytes(out_dir / f"cell_{index:03d}_{report.config_fingerprint}.json",
                           emit_report(report, fmt="machine"))
        document = machine_report(report)
        rows.append({
            "cell": label,
            "overrides": overrides,
            "config_fingerprint": report.config_fingerprint,
            "report": path.name,
            "metrics": document["metrics"],
            "recall_at_k": report.recall_at_k,
            "llm_calls": report.counts.llm_calls,
        })
        console.print(f"  [green]✓[/green] {path}")

    console.print("")
    console.print(sweep_table(rows))
    summary = write_bytes(out_dir / "summary.json", (json.dumps(rows, indent=2) + "\n").encode("utf-8"))
    console.print(f"  [green]✓[/green] Summary: [cyan]{summary}[/cyan]")

    if failed:
        console.print(
            Panel(
                f"[bold red]✗ {failed} of {len(cells)} cells failed[/bold red]\n"
                "Check the errors above; completed cells are cached and will not be re-queried.",
                border_style="red",
                padding=(1, 2),
            )
        )
        return EXIT_FAILED
    return EXIT_OK


COMMANDS = {
    "match": cmd_match,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    setup_logging(args.verbose, stderr=getattr(args, "machine", False))

    # ── Handle init ───────────────────────────────────────────
    if args.command == "init":
        console.print(
            Panel(
                "[bold white]Ontology Matching: Retrieve → Classify → Filter[/bold white]\n"
                "[dim]Configuration Setup[/dim]",
                border_style="bright_cyan",
                padding=(1, 4),
            )
        )
        init_config(_config_path(args))
        return EXIT_OK

    try:
        return COMMANDS[args.command](args)
    except OntoMatchError as e:
        return report_error(e, err_console if getattr(args, "machine", False) else console)
