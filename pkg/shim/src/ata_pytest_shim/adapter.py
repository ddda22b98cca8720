"""In-process pytest adapter that emits the runner wire document.

One invocation per sandbox workdir: run every generated test file under
branch coverage, fold each file's phase reports into a single verdict, and
write the result document to the path given on the command line. All
failure-classification intelligence lives upstream; this module only maps
runner facts onto the wire schema.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import coverage
import pytest

TESTS_DIRNAME = "generated_tests"
SCHEMA_VERSION = 1
COVERAGE_SOURCE_ENV = "ATA_COVERAGE_SOURCE"

# longrepr text is kept whole up to this size; diagnostics rendered from it
# only ever inspect the first few lines
_MESSAGE_LIMIT = 4000

_SEVERITY = {"Pass": 0, "Skipped": 1, "Fail": 2, "Error": 3}


def _test_id(nodeid: str) -> str | None:
    """File stem after "test_", or None for nodes outside the suite shape."""
    path = nodeid.split("::", 1)[0]
    name = path.replace("\\", "/").rsplit("/", 1)[-1]
    if not name.startswith("test_") or not name.endswith(".py"):
        return None
    return name[len("test_") : -len(".py")]


def _clip(text: str) -> str:
    if len(text) <= _MESSAGE_LIMIT:
        return text
    return text[:_MESSAGE_LIMIT] + " ...[truncated]"


class _Recorder:
    """Pytest plugin: folds phase reports into one fact row per test file.

    A file's verdict is its worst observation (Error > Fail > Skipped >
    Pass); the phase and message travel with whichever observation set that
    verdict, and durations accumulate across every report for the file.
    """

    def __init__(self) -> None:
        self.facts: dict[str, dict] = {}

    def _row(self, test_id: str) -> dict:
        return self.facts.setdefault(
            test_id,
            {"verdict": "Pass", "phase": "call", "message": "", "duration_s": 0.0},
        )

    def _observe(self, test_id: str, verdict: str, phase: str, message: str) -> None:
        row = self._row(test_id)
        if _SEVERITY[verdict] > _SEVERITY[row["verdict"]]:
            row["verdict"] = verdict
            row["phase"] = phase
            row["message"] = _clip(message)

    def pytest_collectreport(self, report) -> None:
        if not report.failed:
            return
        test_id = _test_id(report.nodeid)
        if test_id is None:
            return
        self._observe(test_id, "Error", "collect", str(report.longrepr))

    def pytest_runtest_logreport(self, report) -> None:
        test_id = _test_id(report.nodeid)
        if test_id is None:
            return
        row = self._row(test_id)
        row["duration_s"] += getattr(report, "duration", 0.0)
        message = str(report.longrepr) if report.longrepr is not None else ""
        if report.when == "call":
            if report.failed:
                self._observe(test_id, "Fail", "call", message)
            elif report.skipped:
                self._observe(test_id, "Skipped", "call", message)
        elif report.when in ("setup", "teardown"):
            if report.failed:
                self._observe(test_id, "Error", report.when, message)
            elif report.skipped:
                self._observe(test_id, "Skipped", report.when, message)


def _purge_stale_modules(workdir: Path, source_names: list[str]) -> None:
    """Drop module cache entries that would shadow this workdir's files.

    Repeated in-process invocations (the shim's own tests) would otherwise
    resolve `import arith` or a re-generated test module against a previous
    workdir's copy; a real sandbox gets a fresh interpreter and never has
    stale entries to drop.
    """
    stems = {name[:-3] for name in source_names if name.endswith(".py")}
    for name, module in list(sys.modules.items()):
        origin = getattr(module, "__file__", None) or ""
        if name in stems:
            del sys.modules[name]
        elif f"/{TESTS_DIRNAME}/" in origin.replace("\\", "/"):
            del sys.modules[name]


def _source_names(workdir: Path) -> list[str]:
    raw = os.environ.get(COVERAGE_SOURCE_ENV, "")
    names = [part.strip() for part in raw.split(",") if part.strip()]
    if names:
        return names
    # no declaration: measure every top-level module and package in the
    # workdir except the generated tests themselves
    found: list[str] = []
    for child in sorted(workdir.iterdir()):
        if child.name.startswith((".", "_")) or child.name == TESTS_DIRNAME:
            continue
        if child.is_dir() and (child / "__init__.py").exists():
            found.append(child.name)
        elif child.suffix == ".py":
            found.append(child.name)
    return found


def _unit_files(workdir: Path, names: list[str]) -> dict[str, Path]:
    """Map native unit key (workdir-relative path) -> absolute file path."""
    units: dict[str, Path] = {}
    for name in names:
        target = workdir / name
        if name.endswith(".py"):
            units[name] = target
        elif target.is_dir():
            for file in sorted(target.rglob("*.py")):
                if file.name.startswith("_"):
                    continue
                units[file.relative_to(workdir).as_posix()] = file
    return units


def _coverage_units(cov: coverage.Coverage, workdir: Path, names: list[str]) -> dict:
    """Fold measured data into native units, one per requested source file.

    Files the run never imported still get a unit (zero covered lines);
    coverage.py reports them because measurement is rooted at the workdir.
    """
    report_path = workdir / ".ata_coverage.json"
    try:
        cov.json_report(outfile=str(report_path))
        report = json.loads(report_path.read_text(encoding="utf-8"))
    except coverage.exceptions.CoverageException:
        report = {"files": {}}

    # report keys are relative to the reporting process's cwd, which is the
    # workdir inside a sandbox but can be anywhere during in-process use
    by_abs_path: dict[Path, dict] = {}
    for path, info in report.get("files", {}).items():
        p = Path(path)
        if not p.is_absolute():
            p = Path.cwd() / p
        by_abs_path[p.resolve()] = info

    units: dict[str, dict] = {}
    for unit_key, file in sorted(_unit_files(workdir, names).items()):
        if not file.exists():
            continue
        info = by_abs_path.get(file.resolve())
        if info is None:
            continue
        executed = sorted(int(n) for n in info.get("executed_lines", ()))
        missing = sorted(int(n) for n in info.get("missing_lines", ()))
        statements = sorted(set(executed) | set(missing))
        summary = info.get("summary", {})
        entry = {
            "total_statements": len(statements),
            "covered_statements": executed,
            "statement_ids": statements,
        }
        if "num_branches" in summary:
            entry["total_branches"] = int(summary["num_branches"])
            entry["covered_branches"] = int(summary.get("covered_branches", 0))
        units[unit_key] = entry
    return units


def run_pytest_adapter(workdir: str | Path, out_path: str | Path) -> dict:
    """Execute the generated tests in `workdir` and write the result document.

    Returns the document (also written to `out_path` as JSON). The exit
    status inside the document is pytest's; test failures are data here,
    never an adapter error.
    """
    workdir = Path(workdir).resolve()
    tests_dir = workdir / TESTS_DIRNAME
    source_names = _source_names(workdir)
    _purge_stale_modules(workdir, source_names)

    test_files = sorted(tests_dir.glob("test_*.py")) if tests_dir.is_dir() else []

    recorder = _Recorder()
    exit_status = 0
    cov = coverage.Coverage(
        data_file=str(workdir / ".ata_coverage"),
        branch=True,
        source=[str(workdir)],
        omit=[str(tests_dir / "*")],
        config_file=False,
    )
    # the workdir must shadow any same-named modules visible elsewhere
    sys.path.insert(0, str(workdir))
    try:
        cov.start()
        try:
            if test_files:
                exit_status = int(
                    pytest.main(
                        [
                            str(tests_dir),
                            "-p",
                            "no:cacheprovider",
                            "--rootdir",
                            str(workdir),
                            # one unparseable file must not take down the rest
                            # of the suite
                            "--continue-on-collection-errors",
                            "-q",
                        ],
                        plugins=[recorder],
                    )
                )
        finally:
            cov.stop()
            cov.save()
    finally:
        sys.path.remove(str(workdir))

    entries = []
    for file in test_files:
        test_id = file.stem[len("test_") :]
        row = recorder.facts.get(test_id)
        if row is None:
            row = {
                "verdict": "Error",
                "phase": "collect",
                "message": "no tests collected from this file",
                "duration_s": 0.0,
            }
        entries.append(
            {
                "id": test_id,
                "verdict": row["verdict"],
                "phase": row["phase"],
                "message": row["message"],
                "duration_s": round(row["duration_s"], 6),
            }
        )

    document = {
        "schema_version": SCHEMA_VERSION,
        "exit_status": exit_status,
        "tests": entries,
        "coverage": {
            "format": "native",
            "units": _coverage_units(cov, workdir, source_names),
        },
    }
    out = Path(out_path)
    out.write_text(
        json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return document
