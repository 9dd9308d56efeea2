"""
Run configuration: loading, validation, defaults and fingerprinting.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Any

from rich.prompt import Confirm

from ontomatch import console, CONFIG_FILE, DEFAULT_CONFIG, DEFAULT_CACHE_DIR
from ontomatch.errors import ConfigError
from ontomatch.ontology import Variant
from ontomatch.postprocess import ExactPolicy

RETRIEVER_TYPES = ("tfidf", "openai")
LLM_TYPES = ("mock", "openai")

# Fields that do not change what a run computes.
_OPERATIONAL_FIELDS = ("cache_dir", "workers")
_PATH_FIELDS = ("source_path", "target_path", "reference_path", "train_path")


# ═════════════════════════════════════════════════════════════
# Data classes
# ═════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class RunConfig:
    source_path: Path
    target_path: Path
    reference_path: Path | None = None
    retrieval_variant: Variant = Variant.C
    llm_variant: Variant = Variant.C
    retriever: dict = field(default_factory=lambda: {"type": "tfidf"})
    llm: dict = field(default_factory=lambda: dict(DEFAULT_CONFIG["llm"]))
    k: int = 5
    s_llm_threshold: float = 0.7
    s_ir_threshold: float = 0.9
    exact_policy: ExactPolicy = ExactPolicy.UNION
    n_shots: int = 0
    train_path: Path | None = None
    seed: int = 42
    workers: int = 4
    cache_dir: Path = Path(DEFAULT_CACHE_DIR)

    def canonical(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, Path):
                data[key] = value.as_posix()
            elif hasattr(value, "value"):
                data[key] = value.value
        return data

    def semantic(self) -> dict:
        """canonical() without the fields that cannot change the output."""
        return {k: v for k, v in self.canonical().items() if k not in _OPERATIONAL_FIELDS}

    @property
    def fingerprint(self) -> str:
        """SHA-256 over every field that changes the computed alignment."""
        raw = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, base_dir: Path | None = None, **overrides: Any) -> "RunConfig":
        """Apply CLI-style overrides (None values are ignored) and re-validate.

        Relative paths in the overrides resolve against base_dir (default: cwd).
        """
        data = self.canonical()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return config_from_dict(data, base_dir=base_dir or Path.cwd())


# ═════════════════════════════════════════════════════════════
# Validation
# ═════════════════════════════════════════════════════════════

def _number(data: dict, key: str, kind, errors: list[tuple[str, str]]):
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append((key, f"{key} — must be a number, got {value!r}"))
        return None
    if kind is int and not float(value).is_integer():
        errors.append((key, f"{key} — must be an integer, got {value!r}"))
        return None
    return kind(value)


def _path(value, base_dir: Path) -> Path:
    path = Path(str(value)).expanduser()
    return path if path.is_absolute() else base_dir / path


def _check_provider(section: str, spec, allowed: tuple[str, ...], errors: list[tuple[str, str]]):
    if not isinstance(spec, dict):
        errors.append((section, f"{section} — must be a JSON object, got {type(spec).__name__}"))
        return
    kind = spec.get("type")
    if kind not in allowed:
        errors.append((f"{section}.type", f"{section}.type — must be one of {', '.join(allowed)}, got {kind!r}"))
        return
    if kind == "openai" and not spec.get("model"):
        errors.append((f"{section}.model", f"{section}.model — required for openai providers"))
    if kind == "mock" and not spec.get("fixture"):
        errors.append((f"{section}.fixture", f"{section}.fixture — required for the mock provider"))
    for key in ("batch_size", "max_in_flight", "max_tokens"):
        if key in spec and (not isinstance(spec[key], int) or isinstance(spec[key], bool) or spec[key] < 1):
            errors.append((f"{section}.{key}", f"{section}.{key} — must be a positive integer"))


def config_from_dict(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Validate a raw config mapping; raises ConfigError listing every issue."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", f"Config must be a JSON object, got {type(data).__name__}")

    # init writes placeholder paths; they are never used as defaults
    merged = {key: value for key, value in DEFAULT_CONFIG.items() if key not in _PATH_FIELDS}
    merged.update(data)
    errors: list[tuple[str, str]] = []

    for key in ("source_path", "target_path"):
        if key not in data or not data[key] or not str(data[key]).strip():
            errors.append((key, f"{key} — field missing"))

    unknown = sorted(set(data) - set(DEFAULT_CONFIG) - {"sweep"})
    for key in unknown:
        errors.append((key, f"{key} — unknown field"))

    variants = {}
    for key in ("retrieval_variant", "llm_variant"):
        try:
            variants[key] = Variant(merged[key])
        except ValueError:
            errors.append((key, f"{key} — must be one of C, CP, CC, got {merged[key]!r}"))

    try:
        policy = ExactPolicy(merged["exact_policy"])
    except ValueError:
        policy = None
        errors.append(("exact_policy", f"exact_policy — must be union or intersection, got {merged['exact_policy']!r}"))

    k = _number(merged, "k", int, errors)
    if k is not None and k < 1:
        errors.append(("k", f"k — must be >= 1, got {k}"))
    n_shots = _number(merged, "n_shots", int, errors)
    if n_shots is not None and n_shots < 0:
        errors.append(("n_shots", f"n_shots — must be >= 0, got {n_shots}"))
    if n_shots and not merged.get("train_path"):
        errors.append(("train_path", "train_path — required when n_shots > 0"))
    seed = _number(merged, "seed", int, errors)
    workers = _number(merged, "workers", int, errors)
    if workers is not None and workers < 1:
        errors.append(("workers", f"workers — must be >= 1, got {workers}"))
    thresholds = {}
    for key in ("s_llm_threshold", "s_ir_threshold"):
        value = _number(merged, key, float, errors)
        if value is not None and not 0.0 <= value <= 1.0:
            errors.append((key, f"{key} — must be within [0, 1], got {value}"))
        thresholds[key] = value

    _check_provider("retriever", merged["retriever"], RETRIEVER_TYPES, errors)
    _check_provider("llm", merged["llm"], LLM_TYPES, errors)

    if errors:
        count = len(errors)
        lines = "\n".join(f"  • {message}" for _, message in errors)
        raise ConfigError(errors[0][0], f"Config validation failed ({count} issue{'s' if count > 1 else ''}):\n{lines}")

    llm = dict(merged["llm"])
    if llm.get("fixture"):
        llm["fixture"] = _path(llm["fixture"], base_dir).as_posix()

    return RunConfig(
        source_path=_path(merged["source_path"], base_dir),
        target_path=_path(merged["target_path"], base_dir),
        reference_path=_path(merged["reference_path"], base_dir) if merged.get("reference_path") else None,
        retrieval_variant=variants["retrieval_variant"],
        llm_variant=variants["llm_variant"],
        retriever=dict(merged["retriever"]),
        llm=llm,
        k=k,
        s_llm_threshold=thresholds["s_llm_threshold"],
        s_ir_threshold=thresholds["s_ir_threshold"],
        exact_policy=policy,
        n_shots=n_shots,
        train_path=_path(merged["train_path"], base_dir) if merged.get("train_path") else None,
        seed=seed,
        workers=workers,
        cache_dir=_path(merged["cache_dir"], base_dir),
    )


def read_config_file(path: str | Path = CONFIG_FILE) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"Config file not found: {path}")
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("<file>", f"Cannot read config file {path}: {e.strerror or e}") from e
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(
            "<file>",
            f"Invalid JSON in {path.name} (line {e.lineno}, column {e.colno}): {e.msg}",
        ) from e
    if not isinstance(data, dict):
        raise ConfigError("<root>", f"Config file must contain a JSON object, got {type(data).__name__}")
    return data


def load_config(path: str | Path = CONFIG_FILE) -> RunConfig:
    """Load, default and validate a config file.

    Relative paths resolve against the config file's directory. Provider
    credentials stay as environment variable names until a provider is built.
    """
    path = Path(path)
    return config_from_dict(read_config_file(path), base_dir=path.resolve().parent)


def init_config(path: str | Path = CONFIG_FILE) -> bool:
    """Create a fresh config file with defaults."""
    path = Path(path)
    if path.exists():
        console.print(f"  [yellow]⚠ Config file already exists:[/yellow] {path}")
        if not Confirm.ask("  Overwrite?", default=False):
            console.print("  [dim]Skipped. Edit the existing file manually.[/dim]")
            return False

    try:
        path.write_text(json.dumps(DEFAULT_CONFIG, indent=2) + "\n", encoding="utf-8")
    except PermissionError:
        console.print(
            f"\n[red]✗ Permission denied:[/red] Cannot write to {path}\n"
            "  Try running with appropriate permissions or check directory ownership.\n"
        )
        sys.exit(1)
    except OSError as e:
        console.print(
            f"\n[red]✗ Failed to create config file:[/red] {e}\n"
            "  Check disk space and directory permissions.\n"
        )
        sys.exit(1)

    console.print(f"  [green]✓[/green] Created [bold]{path}[/bold]")
    console.print("  [dim]Point the paths at your ontologies and reference alignment, then run:[/dim]")
    console.print("  [cyan]python match.py match[/cyan]\n")
    return True


def sweep_cells(config: RunConfig, grid: dict, base_dir: Path | None = None) -> list[tuple[dict, RunConfig]]:
    """Cartesian product over the sweep grid; one RunConfig per cell.

    base_dir is the config file's directory, for relative fixture paths.
    """
    allowed = ("retrieval_variant", "llm_variant", "retriever", "k", "llm")
    unknown = sorted(set(grid) - set(allowed))
    if unknown:
        raise ConfigError(f"sweep.{unknown[0]}", f"sweep.{unknown[0]} — cannot sweep this field")
    keys = [key for key in allowed if key in grid]
    for key in keys:
        if not isinstance(grid[key], list) or not grid[key]:
            raise ConfigError(f"sweep.{key}", f"sweep.{key} — must be a non-empty list")

    cells = []
    for values in product(*(grid[key] for key in keys)):
        overrides = dict(zip(keys, values))
        cells.append((overrides, config.with_overrides(base_dir=base_dir, **overrides)))
    return cells
