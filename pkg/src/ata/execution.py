"""Execution agent: sandboxed runs, result ingestion, failure classification.

The runner contract is deliberately thin. Tests are written to
<workdir>/generated_tests/test_<id>.py, the configured runner command is
invoked with --out <workdir>/ata_result.json, and whatever that document
says is the truth about the run. stdout and stderr are never scraped.

Advisory settings cross the boundary as environment variables:
ATA_PER_TEST_TIMEOUT, ATA_MAX_PARALLEL, ATA_COVERAGE_SOURCE. The suite-level
timeout is enforced here with a process kill; tests the runner never
reported come back as Error in the collect phase, or Timeout when the whole
run was cut off.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import subprocess
import tempfile
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .errors import (
    ConfigurationError,
    IntegrityError,
    ParseError,
    ProtocolError,
    SandboxError,
    ValidationError,
)
from .model import (
    CoverageMap,
    ExecutionOutcome,
    FailureClass,
    FailureRecord,
    FailureSignal,
    Phase,
    TestSuite,
    UnitCoverage,
    Verdict,
)

__all__ = [
    "SandboxConfig",
    "ResultEntry",
    "ResultDocument",
    "ExecutionResult",
    "SandboxExecutor",
    "parse_result_document",
    "parse_coverage",
    "DiagnosticPatterns",
    "load_patterns",
    "classify_failure",
]

RESULT_FILENAME = "ata_result.json"
TESTS_DIRNAME = "generated_tests"

DEFAULT_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "PYTHONPATH", "TMPDIR", "VIRTUAL_ENV")


@dataclass(frozen=True, slots=True)
class SandboxConfig:
    """How the runner subprocess is launched and bounded."""

    command: tuple[str, ...]
    per_test_timeout_s: float = 30.0
    suite_timeout_s: float = 600.0
    max_parallel: int = 1
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST
    workdir_root: str | None = None

    def __post_init__(self) -> None:
        if not self.command:
            raise ValidationError("sandbox command must be non-empty")
        if self.per_test_timeout_s <= 0 or self.suite_timeout_s <= 0:
            raise ValidationError("timeouts must be positive")
        if self.max_parallel < 1:
            raise ValidationError("max_parallel must be >= 1")


@dataclass(frozen=True, slots=True)
class ResultEntry:
    id: str
    verdict: Verdict
    duration_s: float
    phase: Phase
    message: str = ""


@dataclass(frozen=True, slots=True)
class ResultDocument:
    schema_version: int
    exit_status: int
    entries: tuple[ResultEntry, ...]
    coverage_section: Mapping
    runner_error: str | None = None


@dataclass(frozen=True)
class ExecutionResult:
    outcomes: tuple[ExecutionOutcome, ...]
    coverage: CoverageMap
    wall_time_s: float
    document: ResultDocument | None
    workdir: str


def _schema_fail(message: str) -> ParseError:
    return ParseError(f"result document schema violation: {message}")


def parse_result_document(data: bytes) -> ResultDocument:
    """Strict parse of the runner's wire document.

    Unknown fields are ignored for forward compatibility; missing required
    fields, bad types, out-of-range values and duplicate test ids are not.
    Malformed JSON raises ParseError carrying the byte offset.
    """
    try:
        doc = json.loads(data.decode("utf-8", errors="strict"))
    except UnicodeDecodeError as exc:
        raise ParseError("result document is not valid UTF-8", offset=exc.start) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"result document is not valid JSON: {exc.msg}", offset=exc.pos) from exc

    if not isinstance(doc, dict):
        raise _schema_fail("top level must be an object")
    version = doc.get("schema_version")
    if not isinstance(version, int) or version < 1:
        raise _schema_fail("schema_version must be an integer >= 1")
    exit_status = doc.get("exit_status")
    if not isinstance(exit_status, int):
        raise _schema_fail("exit_status must be an integer")
    runner_error = doc.get("runner_error")
    if runner_error is not None and not isinstance(runner_error, str):
        raise _schema_fail("runner_error must be a string when present")

    raw_tests = doc.get("tests")
    if not isinstance(raw_tests, list):
        raise _schema_fail("tests must be a list")
    entries: list[ResultEntry] = []
    seen: set[str] = set()
    for index, raw in enumerate(raw_tests):
        if not isinstance(raw, dict):
            raise _schema_fail(f"tests[{index}] must be an object")
        test_id = raw.get("id")
        if not isinstance(test_id, str) or not test_id:
            raise _schema_fail(f"tests[{index}].id must be a non-empty string")
        if test_id in seen:
            raise IntegrityError(f"duplicate test id in result document: {test_id!r}")
        seen.add(test_id)
        try:
            verdict = Verdict(raw.get("verdict"))
        except ValueError:
            raise _schema_fail(
                f"tests[{index}].verdict must be one of "
                f"{[v.value for v in Verdict]}, got {raw.get('verdict')!r}"
            ) from None
        duration = raw.get("duration_s")
        if not isinstance(duration, (int, float)) or isinstance(duration, bool) or duration < 0:
            raise _schema_fail(f"tests[{index}].duration_s must be a number >= 0")
        try:
            phase = Phase(raw.get("phase"))
        except ValueError:
            raise _schema_fail(
                f"tests[{index}].phase must be one of "
                f"{[p.value for p in Phase]}, got {raw.get('phase')!r}"
            ) from None
        message = raw.get("message", "")
        if not isinstance(message, str):
            raise _schema_fail(f"tests[{index}].message must be a string")
        entries.append(
            ResultEntry(
                id=test_id,
                verdict=verdict,
                duration_s=float(duration),
                phase=phase,
                message=message,
            )
        )

    coverage_section = doc.get("coverage")
    if not isinstance(coverage_section, dict):
        raise _schema_fail("coverage section must be an object")

    return ResultDocument(
        schema_version=version,
        exit_status=exit_status,
        entries=tuple(entries),
        coverage_section=coverage_section,
        runner_error=runner_error,
    )


def _parse_native_units(units_doc: Mapping) -> CoverageMap:
    units: dict[str, UnitCoverage] = {}
    for unit, entry in units_doc.items():
        if not isinstance(entry, dict):
            raise _schema_fail(f"coverage unit {unit!r} must be an object")
        total = entry.get("total_statements")
        covered = entry.get("covered_statements")
        if not isinstance(total, int) or total < 0:
            raise _schema_fail(f"coverage unit {unit!r}: total_statements must be an integer >= 0")
        if not isinstance(covered, list):
            raise _schema_fail(f"coverage unit {unit!r}: covered_statements must be a list")
        ids = entry.get("statement_ids")
        units[unit] = UnitCoverage(
            total_statements=total,
            covered_statements=frozenset(int(x) for x in covered),
            statement_ids=frozenset(int(x) for x in ids) if ids is not None else None,
            total_branches=entry.get("total_branches"),
            covered_branches=entry.get("covered_branches"),
        )
    return CoverageMap(units=units)


_CONDITION = re.compile(r"\((\d+)/(\d+)\)")


def _parse_cobertura(xml_text: str) -> CoverageMap:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise ParseError(f"cobertura report is not well-formed XML: {exc}") from exc
    statements: dict[str, set[int]] = {}
    covered: dict[str, set[int]] = {}
    branch_totals: dict[str, int] = {}
    branch_covered: dict[str, int] = {}
    for cls in root.iter("class"):
        unit = cls.get("filename")
        if not unit:
            continue
        statements.setdefault(unit, set())
        covered.setdefault(unit, set())
        for line in cls.iter("line"):
            number = line.get("number")
            if number is None:
                continue
            n = int(number)
            statements[unit].add(n)
            hits = int(line.get("hits", "0"))
            if hits > 0:
                covered[unit].add(n)
            condition = line.get("condition-coverage")
            if condition:
                match = _CONDITION.search(condition)
                if match:
                    branch_covered[unit] = branch_covered.get(unit, 0) + int(match.group(1))
                    branch_totals[unit] = branch_totals.get(unit, 0) + int(match.group(2))
    units = {}
    for unit, ids in statements.items():
        units[unit] = UnitCoverage(
            total_statements=len(ids),
            covered_statements=frozenset(covered[unit]),
            statement_ids=frozenset(ids),
            total_branches=branch_totals.get(unit),
            covered_branches=branch_covered.get(unit) if unit in branch_totals else None,
        )
    return CoverageMap(units=units)


def parse_coverage(section: Mapping, base_dir: str | Path | None = None) -> CoverageMap:
    """Normalize a coverage section into a CoverageMap.

    Formats: "native" (inline per-unit sets) and "cobertura-xml" (inline
    "xml" text or a "path" relative to the sandbox workdir). Anything else
    is a configuration error. Covered counts exceeding totals surface as
    IntegrityError from the model layer.
    """
    fmt = section.get("format")
    if fmt == "native":
        units_doc = section.get("units")
        if not isinstance(units_doc, dict):
            raise _schema_fail("native coverage requires a units object")
        return _parse_native_units(units_doc)
    if fmt == "cobertura-xml":
        xml_text = section.get("xml")
        if xml_text is None:
            rel = section.get("path")
            if not rel:
                raise _schema_fail("cobertura-xml coverage requires xml text or a path")
            path = Path(base_dir or ".") / rel
            if not path.exists():
                raise ProtocolError(f"cobertura report {path} does not exist")
            xml_text = path.read_text(encoding="utf-8")
        return _parse_cobertura(xml_text)
    raise ConfigurationError(f"unknown coverage format {fmt!r}")


class SandboxExecutor:
    """Runs suites through an external runner process in a fresh workdir."""

    def __init__(self, project_dir: str | Path, sandbox: SandboxConfig):
        self.project_dir = Path(project_dir)
        self.sandbox = sandbox
        if not self.project_dir.is_dir():
            raise ConfigurationError(f"project directory {self.project_dir} does not exist")

    def _coverage_sources(self) -> str:
        names = []
        for child in sorted(self.project_dir.iterdir()):
            if child.name.startswith((".", "_")):
                continue
            if child.is_dir() and (child / "__init__.py").exists():
                names.append(child.name)
            elif child.suffix == ".py":
                names.append(child.name)
        return ",".join(names)

    def _build_env(self) -> dict[str, str]:
        env = {
            key: os.environ[key]
            for key in self.sandbox.env_allowlist
            if key in os.environ
        }
        env["ATA_PER_TEST_TIMEOUT"] = str(self.sandbox.per_test_timeout_s)
        env["ATA_MAX_PARALLEL"] = str(self.sandbox.max_parallel)
        sources = self._coverage_sources()
        if sources:
            env["ATA_COVERAGE_SOURCE"] = sources
        return env

    def prepare_workdir(self, suite: TestSuite) -> Path:
        root = self.sandbox.workdir_root
        workdir = Path(
            tempfile.mkdtemp(prefix=f"ata-it{suite.iteration}-", dir=root)
        )
        shutil.copytree(self.project_dir, workdir, dirs_exist_ok=True)
        tests_dir = workdir / TESTS_DIRNAME
        tests_dir.mkdir(exist_ok=True)
        for test in suite.tests:
            (tests_dir / f"test_{test.id}.py").write_text(
                test.source_text, encoding="utf-8"
            )
        return workdir

    def run(self, suite: TestSuite) -> ExecutionResult:
        workdir = self.prepare_workdir(suite)
        out_path = workdir / RESULT_FILENAME
        cmd = list(self.sandbox.command) + ["--out", str(out_path)]
        started = time.monotonic()
        timed_out = False
        try:
            proc = subprocess.run(
                cmd,
                cwd=workdir,
                env=self._build_env(),
                timeout=self.sandbox.suite_timeout_s,
                capture_output=True,
            )
        except subprocess.TimeoutExpired:
            timed_out = True
            proc = None
        except (FileNotFoundError, PermissionError, NotADirectoryError) as exc:
            raise SandboxError(f"runner command failed to launch: {exc}") from exc
        wall = time.monotonic() - started

        if not out_path.exists():
            if timed_out:
                return self._all_timed_out(suite, wall, workdir)
            raise ProtocolError(
                f"runner exited with status {proc.returncode if proc else '?'} "
                f"but wrote no {RESULT_FILENAME}"
            )

        document = parse_result_document(out_path.read_bytes())
        if document.runner_error:
            raise SandboxError(f"runner reported an internal error: {document.runner_error}")

        outcomes = self._complete_outcomes(suite, document, wall, timed_out)
        coverage = parse_coverage(document.coverage_section, base_dir=workdir)
        return ExecutionResult(
            outcomes=outcomes,
            coverage=coverage,
            wall_time_s=wall,
            document=document,
            workdir=str(workdir),
        )

    def _all_timed_out(
        self, suite: TestSuite, wall: float, workdir: Path
    ) -> ExecutionResult:
        outcomes = tuple(
            ExecutionOutcome(
                test_id=test.id,
                verdict=Verdict.TIMEOUT,
                duration_s=wall,
                phase=Phase.CALL,
                raw_message=f"suite timeout after {self.sandbox.suite_timeout_s}s",
            )
            for test in suite.tests
        )
        return ExecutionResult(
            outcomes=outcomes,
            coverage=CoverageMap(units={}),
            wall_time_s=wall,
            document=None,
            workdir=str(workdir),
        )

    def _complete_outcomes(
        self,
        suite: TestSuite,
        document: ResultDocument,
        wall: float,
        timed_out: bool,
    ) -> tuple[ExecutionOutcome, ...]:
        known = set(suite.ids())
        reported: dict[str, ResultEntry] = {}
        for entry in document.entries:
            if entry.id not in known:
                raise IntegrityError(f"runner reported unknown test id {entry.id!r}")
            reported[entry.id] = entry
        outcomes: list[ExecutionOutcome] = []
        for test in suite.tests:
            entry = reported.get(test.id)
            if entry is not None:
                outcomes.append(
                    ExecutionOutcome(
                        test_id=entry.id,
                        verdict=entry.verdict,
                        duration_s=entry.duration_s,
                        phase=entry.phase,
                        raw_message=entry.message,
                    )
                )
            elif timed_out:
                outcomes.append(
                    ExecutionOutcome(
                        test_id=test.id,
                        verdict=Verdict.TIMEOUT,
                        duration_s=wall,
                        phase=Phase.CALL,
                        raw_message=f"suite timeout after {self.sandbox.suite_timeout_s}s",
                    )
                )
            else:
                outcomes.append(
                    ExecutionOutcome(
                        test_id=test.id,
                        verdict=Verdict.ERROR,
                        duration_s=0.0,
                        phase=Phase.COLLECT,
                        raw_message="runner produced no entry for this test",
                    )
                )
        return tuple(outcomes)


class DiagnosticPatterns:
    """Compiled per-ecosystem diagnostic tables. Data-driven, not hard-coded."""

    def __init__(self, ecosystem: str, syntax: Sequence[str], environment: Sequence[str], assertion: Sequence[str]):
        self.ecosystem = ecosystem
        self._syntax = [re.compile(p) for p in syntax]
        self._environment = [re.compile(p) for p in environment]
        self._assertion = [re.compile(p) for p in assertion]

    @classmethod
    def from_doc(cls, doc: Mapping) -> "DiagnosticPatterns":
        for key in ("syntax", "environment", "assertion"):
            if not isinstance(doc.get(key), list):
                raise ConfigurationError(f"pattern table missing list field {key!r}")
        return cls(
            ecosystem=doc.get("ecosystem", "unknown"),
            syntax=doc["syntax"],
            environment=doc["environment"],
            assertion=doc["assertion"],
        )

    def matches_syntax(self, message: str) -> bool:
        return any(p.search(message) for p in self._syntax)

    def matches_environment(self, message: str) -> bool:
        return any(p.search(message) for p in self._environment)

    def matches_assertion(self, message: str) -> bool:
        return any(p.search(message) for p in self._assertion)


def load_patterns(name_or_path: str = "python") -> DiagnosticPatterns:
    """Load a diagnostic table by bundled ecosystem name or by file path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        doc = json.loads(path.read_text(encoding="utf-8"))
        return DiagnosticPatterns.from_doc(doc)
    try:
        text = (
            resources.files("ata").joinpath(f"data/patterns/{name_or_path}.json").read_text("utf-8")
        )
    except (FileNotFoundError, ModuleNotFoundError) as exc:
        raise ConfigurationError(f"no diagnostic pattern table {name_or_path!r}") from exc
    return DiagnosticPatterns.from_doc(json.loads(text))


_LOCATION = re.compile(r'File "([^"]+)", line (\d+)')
_LOCATION_SHORT = re.compile(r"([\w./-]+\.py):(\d+)")


def _extract_location(message: str) -> str:
    match = _LOCATION.search(message)
    if match:
        return f"{match.group(1)}:{match.group(2)}"
    match = _LOCATION_SHORT.search(message)
    if match:
        return f"{match.group(1)}:{match.group(2)}"
    return "unknown"


def classify_failure(
    outcome: ExecutionOutcome, patterns: DiagnosticPatterns
) -> FailureRecord:
    """Deterministic failure taxonomy.

    Rule order, first hit wins:
      1. Error during collect, or a source-parse diagnostic -> Syntax
      2. Timeout, Error during setup, or a dependency/permission/network
         diagnostic -> Environment
      3. Fail during call with an assertion diagnostic -> LogicAssertion
      4. anything else -> Environment (conservative default)

    Pass and Skipped outcomes are not failures; passing one in is a
    precondition violation.
    """
    if outcome.verdict not in (Verdict.FAIL, Verdict.ERROR, Verdict.TIMEOUT):
        raise ValidationError(
            f"cannot classify a {outcome.verdict.value} outcome as a failure"
        )
    message = outcome.raw_message
    if (outcome.verdict is Verdict.ERROR and outcome.phase is Phase.COLLECT) or (
        patterns.matches_syntax(message)
    ):
        failure_class = FailureClass.SYNTAX
    elif (
        outcome.verdict is Verdict.TIMEOUT
        or (outcome.verdict is Verdict.ERROR and outcome.phase is Phase.SETUP)
        or patterns.matches_environment(message)
    ):
        failure_class = FailureClass.ENVIRONMENT
    elif (
        outcome.verdict is Verdict.FAIL
        and outcome.phase is Phase.CALL
        and patterns.matches_assertion(message)
    ):
        failure_class = FailureClass.LOGIC_ASSERTION
    else:
        failure_class = FailureClass.ENVIRONMENT
    return FailureRecord(
        test_id=outcome.test_id,
        failure_class=failure_class,
        signal=FailureSignal(message=message, location=_extract_location(message)),
        hypothesis="",
        repeat_count=1,
    )
