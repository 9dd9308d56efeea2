"""
═══════════════════════════════════════════════════════════════
  Ontology Matching with Retrieval + LLM classification (ontomatch)
═══════════════════════════════════════════════════════════════
"""

from pathlib import Path
from rich.console import Console

# ═════════════════════════════════════════════════════════════
# Shared console instance
# ═════════════════════════════════════════════════════════════

console = Console()
err_console = Console(stderr=True)

# ═════════════════════════════════════════════════════════════
# Constants
# ═════════════════════════════════════════════════════════════

SCRIPT_DIR = Path(__file__).parent.parent.resolve()
CONFIG_FILE = SCRIPT_DIR / "match_config.json"
DEFAULT_CACHE_DIR = ".ontomatch_cache"
ALIGNMENT_FORMAT_VERSION = 1
KB_CACHE_VERSION = 1

VARIANTS = ("C", "CP", "CC")

DEFAULT_CONFIG = {
    "source_path": "data/source.json",
    "target_path": "data/target.json",
    "reference_path": "data/reference.json",
    "retrieval_variant": "C",
    "llm_variant": "C",
    "retriever": {
        "type": "tfidf",
    },
    "llm": {
        "type": "openai",
        "model": "gpt-3.5-turbo",
        "api_key_env": "OPENAI_API_KEY",
        "logprobs": True,
        "max_tokens": 4,
    },
    "k": 5,
    "s_llm_threshold": 0.7,
    "s_ir_threshold": 0.9,
    "exact_policy": "union",
    "n_shots": 0,
    "train_path": None,
    "seed": 42,
    "workers": 4,
    "cache_dir": DEFAULT_CACHE_DIR,
}
