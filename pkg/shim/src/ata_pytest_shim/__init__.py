"""Pytest adapter for the ata runner protocol, with a practice corpus.

The adapter executes generated test files under branch coverage and emits
the runner result document; the bundled corpus (three small modules, two
deliberate defects) gives a refinement loop something real to chew on.

Exports resolve lazily: `python -m ata_pytest_shim` must reach its
error-marker path even when pytest or coverage is missing, so importing
this package cannot itself pull them in.
"""

from pathlib import Path

__version__ = "0.1.0"

_LAZY = {
    "run_pytest_adapter": ("ata_pytest_shim.adapter", "run_pytest_adapter"),
    "verify_corpus": ("ata_pytest_shim.verify", "verify_corpus"),
    "CorpusCheck": ("ata_pytest_shim.verify", "CorpusCheck"),
}

__all__ = [
    "CorpusCheck",
    "corpus_dir",
    "manifest_path",
    "run_pytest_adapter",
    "verify_corpus",
    "__version__",
]


def corpus_dir() -> Path:
    return Path(__file__).resolve().parent / "corpus"


def manifest_path() -> Path:
    return Path(__file__).resolve().parent / "corpus_manifest.yaml"


def __getattr__(name):
    if name in _LAZY:
        import importlib

        module_name, attr = _LAZY[name]
        return getattr(importlib.import_module(module_name), attr)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
