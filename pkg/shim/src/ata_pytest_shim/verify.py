"""Corpus self-checks: defects stay detectable, clean modules stay clean,
and the reference examples keep their statement-coverage ceiling.

The corpus ships with known defects on purpose; these checks are the guard
rail that stops someone from "fixing" one and silently defanging the whole
fixture.
"""

from __future__ import annotations

import builtins
import importlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import coverage
import yaml

CORPUS_PACKAGE = "ata_pytest_shim.corpus"

# stem -> callable carrying a deliberate defect
KNOWN_DEFECTS: Mapping[str, str] = {
    "arith": "clamp_index",
    "records": "validate_record",
}

COVERAGE_FLOOR = 0.95


def corpus_dir() -> Path:
    return Path(__file__).resolve().parent / "corpus"


def manifest_path() -> Path:
    return Path(__file__).resolve().parent / "corpus_manifest.yaml"


@dataclass
class ExampleOutcome:
    unit: str
    callable: str
    ordinal: int
    matched: bool
    detail: str = ""


@dataclass
class CorpusCheck:
    """What verify_corpus found; ok means every invariant held."""

    outcomes: list[ExampleOutcome] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)
    coverage_ceiling: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.problems

    def mismatches(self) -> list[ExampleOutcome]:
        return [o for o in self.outcomes if not o.matched]


def _load_manifest_doc() -> dict:
    return yaml.safe_load(manifest_path().read_text(encoding="utf-8"))


def _run_example(fn: Callable, example: dict) -> tuple[bool, str]:
    args = example.get("args", [])
    kwargs = example.get("kwargs", {})
    try:
        got = fn(*args, **kwargs)
        raised = None
    except Exception as exc:  # noqa: BLE001 - anything the corpus throws is data
        got, raised = None, exc
    if "raises" in example:
        expected = getattr(builtins, example["raises"])
        if isinstance(raised, expected):
            return True, ""
        return False, f"expected {example['raises']}, got {raised!r} / {got!r}"
    if raised is not None:
        return False, f"unexpected {type(raised).__name__}: {raised}"
    if got != example["expect"]:
        return False, f"expected {example['expect']!r}, got {got!r}"
    return True, ""


def verify_corpus(overrides: Mapping[str, Callable] | None = None) -> CorpusCheck:
    """Run every manifest example against the live corpus and audit the result.

    `overrides` maps "stem.callable" to a replacement installed after the
    modules are reloaded; the self-check tests use it to model a corpus
    whose defect someone patched out.

    Invariants audited: each known defect is detected by at least one
    example, callables outside the defect list match every example, and the
    full example set reaches the statement-coverage ceiling.
    """
    doc = _load_manifest_doc()
    check = CorpusCheck()
    root = corpus_dir()

    # pass 1: the ceiling is a property of the corpus as shipped, so the
    # reference examples run against pristine reloaded modules under trace
    cov = coverage.Coverage(
        data_file=None,
        branch=True,
        include=[str(root / "*.py")],
        omit=[str(root / "__init__.py")],
        config_file=False,
    )
    cov.start()
    try:
        modules = {}
        for unit in doc["units"]:
            stem = unit["module"]
            module = importlib.import_module(f"{CORPUS_PACKAGE}.{stem}")
            # re-execute the body under trace so def lines count as covered
            modules[stem] = importlib.reload(module)
        for unit in doc["units"]:
            for spec in unit["callables"]:
                fn = getattr(modules[unit["module"]], spec["name"])
                for example in spec["examples"]:
                    _run_example(fn, example)
    finally:
        cov.stop()

    total = 0
    covered = 0
    for unit in doc["units"]:
        path = root / unit["unit"]
        _, statements, _, missing, _ = cov.analysis2(str(path))
        total += len(statements)
        covered += len(statements) - len(missing)
    check.coverage_ceiling = covered / total if total else 0.0

    # pass 2: the detectability audit runs with overrides applied, modelling
    # a corpus whose defect someone patched out
    for key, replacement in (overrides or {}).items():
        stem, _, name = key.partition(".")
        setattr(modules[stem], name, replacement)
    for unit in doc["units"]:
        stem = unit["module"]
        for spec in unit["callables"]:
            fn = getattr(modules[stem], spec["name"])
            for ordinal, example in enumerate(spec["examples"], start=1):
                matched, detail = _run_example(fn, example)
                check.outcomes.append(
                    ExampleOutcome(
                        unit=unit["unit"],
                        callable=spec["name"],
                        ordinal=ordinal,
                        matched=matched,
                        detail=detail,
                    )
                )

    detected = {
        (o.unit, o.callable) for o in check.outcomes if not o.matched
    }
    for stem, name in KNOWN_DEFECTS.items():
        unit_name = f"{stem}.py"
        if (unit_name, name) not in detected:
            check.problems.append(f"defect undetectable: {unit_name}:{name}")
    for o in check.outcomes:
        if not o.matched and KNOWN_DEFECTS.get(o.unit[: -len(".py")]) != o.callable:
            check.problems.append(
                f"clean callable failed an example: {o.unit}:{o.callable}"
                f" example {o.ordinal} ({o.detail})"
            )
    if check.coverage_ceiling < COVERAGE_FLOOR:
        check.problems.append(
            f"coverage ceiling {check.coverage_ceiling:.4f} below {COVERAGE_FLOOR}"
        )
    return check
