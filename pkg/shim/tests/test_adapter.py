"""Adapter behavior: verdict mapping, coverage units, wire-document validity,
and the command-line contract (process exit mirrors document presence)."""

import json
import os
import re
import shutil
import subprocess
import sys
from collections import Counter
from pathlib import Path
from types import SimpleNamespace

import pytest

from ata.execution import (
    classify_failure,
    load_patterns,
    parse_coverage,
    parse_result_document,
)
from ata.generation import GenerationRequest, TemplateBackend, load_manifest
from ata.model import ExecutionOutcome, Phase, Verdict

from ata_pytest_shim import corpus_dir, manifest_path
from ata_pytest_shim.adapter import run_pytest_adapter

GOLDENS = json.loads((Path(__file__).parent / "goldens.json").read_text())
PATTERNS = load_patterns("python")

# the environment an orchestrating process would hand the shim: a small
# allowlist, never the whole parent environment
ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "PYTHONPATH", "TMPDIR", "VIRTUAL_ENV")


def make_workdir(tmp_path: Path, tests: dict[str, str] | None = None) -> Path:
    """Corpus copy plus generated test files, shaped like a sandbox workdir."""
    workdir = tmp_path / "work"
    shutil.copytree(corpus_dir(), workdir, ignore=shutil.ignore_patterns("__pycache__"))
    tests_dir = workdir / "generated_tests"
    tests_dir.mkdir(exist_ok=True)
    for name, source in (tests or {}).items():
        (tests_dir / name).write_text(source, encoding="utf-8")
    return workdir


def run_adapter(workdir: Path):
    out = workdir / "ata_result.json"
    document = run_pytest_adapter(workdir, out)
    parsed = parse_result_document(out.read_bytes())
    assert json.loads(out.read_text(encoding="utf-8")) == document
    return document, parsed


def entry_by_stem(parsed, stem: str):
    matches = [e for e in parsed.entries if e.id == stem.removeprefix("test_")]
    assert len(matches) == 1, f"expected one entry for {stem}, got {matches}"
    return matches[0]


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    """One full run over every manifest-rendered test; shared by the golden checks."""
    manifest = load_manifest(manifest_path())
    backend = TemplateBackend(manifest)
    generated = backend.generate(GenerationRequest(iteration=1, budget=999))
    workdir = make_workdir(
        tmp_path_factory.mktemp("reference"),
        {f"test_{tc.id}.py": tc.source_text for tc in generated.tests},
    )
    document, parsed = run_adapter(workdir)
    return SimpleNamespace(
        generated=generated,
        document=document,
        parsed=parsed,
        sources={tc.id: tc.source_text for tc in generated.tests},
    )


class TestReferenceRun:
    def test_every_manifest_example_renders(self, reference):
        assert len(reference.generated.tests) == GOLDENS["reference_run"]["rendered_tests"]

    def test_verdict_counts_match_golden(self, reference):
        counts = Counter(e.verdict.value for e in reference.parsed.entries)
        assert dict(counts) == GOLDENS["reference_run"]["verdicts"]

    def test_exactly_the_probe_tests_fail(self, reference):
        failing = [e for e in reference.parsed.entries if e.verdict is Verdict.FAIL]
        names = []
        for entry in failing:
            match = re.search(r"def (test_\w+)\(", reference.sources[entry.id])
            assert match is not None
            names.append(match.group(1))
        assert sorted(names) == GOLDENS["reference_run"]["failing_tests"]

    def test_failures_happen_at_call_and_classify_as_logic(self, reference):
        failing = [e for e in reference.parsed.entries if e.verdict is Verdict.FAIL]
        assert len(failing) == 2
        for entry in failing:
            assert entry.phase is Phase.CALL
            outcome = ExecutionOutcome(
                test_id=entry.id,
                verdict=entry.verdict,
                duration_s=entry.duration_s,
                phase=entry.phase,
                raw_message=entry.message,
            )
            record = classify_failure(outcome, PATTERNS)
            assert record.failure_class.value == "LogicAssertion"

    def test_statement_coverage_is_total(self, reference):
        coverage = parse_coverage(reference.parsed.coverage_section)
        assert coverage.statement_ratio() == GOLDENS["reference_run"]["statement_ratio"]
        totals = {u: c.total_statements for u, c in coverage.units.items()}
        assert totals == GOLDENS["corpus"]["statement_totals"]

    def test_branch_coverage_is_reported(self, reference):
        coverage = parse_coverage(reference.parsed.coverage_section)
        ratio = coverage.branch_ratio()
        assert ratio is not None
        assert 0.0 < ratio <= 1.0

    def test_document_exit_status_reflects_pytest(self, reference):
        # two tests fail, so pytest's own status is nonzero; that is test
        # data in the document, not an adapter failure
        assert reference.document["exit_status"] != 0


class TestVerdictMapping:
    def test_syntax_error_file_does_not_take_down_the_suite(self, tmp_path):
        workdir = make_workdir(
            tmp_path,
            {
                "test_broken.py": "def test_x(:\n    pass\n",
                "test_healthy.py": (
                    "from strtool import slugify\n"
                    "def test_ok():\n"
                    "    assert slugify('A b') == 'a-b'\n"
                ),
            },
        )
        _, parsed = run_adapter(workdir)
        broken = entry_by_stem(parsed, "test_broken")
        assert broken.verdict is Verdict.ERROR
        assert broken.phase is Phase.COLLECT
        healthy = entry_by_stem(parsed, "test_healthy")
        assert healthy.verdict is Verdict.PASS
        coverage = parse_coverage(parsed.coverage_section)
        assert len(coverage.units["strtool.py"].covered_statements) > 0

    def test_skip_inside_the_test_body(self, tmp_path):
        workdir = make_workdir(
            tmp_path,
            {
                "test_skipping.py": (
                    "import pytest\n"
                    "def test_later():\n"
                    "    pytest.skip('not yet')\n"
                )
            },
        )
        _, parsed = run_adapter(workdir)
        entry = entry_by_stem(parsed, "test_skipping")
        assert entry.verdict is Verdict.SKIPPED
        assert entry.phase is Phase.CALL

    def test_skip_marker(self, tmp_path):
        workdir = make_workdir(
            tmp_path,
            {
                "test_marked.py": (
                    "import pytest\n"
                    "@pytest.mark.skip(reason='not yet')\n"
                    "def test_later():\n"
                    "    assert False\n"
                )
            },
        )
        _, parsed = run_adapter(workdir)
        entry = entry_by_stem(parsed, "test_marked")
        assert entry.verdict is Verdict.SKIPPED
        assert entry.phase is Phase.SETUP

    def test_fixture_error_maps_to_error_at_setup(self, tmp_path):
        workdir = make_workdir(
            tmp_path,
            {
                "test_fixture.py": (
                    "import pytest\n"
                    "@pytest.fixture\n"
                    "def broken():\n"
                    "    raise RuntimeError('no database here')\n"
                    "def test_uses_fixture(broken):\n"
                    "    assert True\n"
                )
            },
        )
        _, parsed = run_adapter(workdir)
        entry = entry_by_stem(parsed, "test_fixture")
        assert entry.verdict is Verdict.ERROR
        assert entry.phase is Phase.SETUP
        assert "no database here" in entry.message

    def test_teardown_failure_maps_to_error_at_teardown(self, tmp_path):
        workdir = make_workdir(
            tmp_path,
            {
                "test_teardown.py": (
                    "import pytest\n"
                    "@pytest.fixture\n"
                    "def leaky():\n"
                    "    yield 1\n"
                    "    raise RuntimeError('cleanup exploded')\n"
                    "def test_uses_leaky(leaky):\n"
                    "    assert leaky == 1\n"
                )
            },
        )
        _, parsed = run_adapter(workdir)
        entry = entry_by_stem(parsed, "test_teardown")
        assert entry.verdict is Verdict.ERROR
        assert entry.phase is Phase.TEARDOWN

    def test_worst_verdict_wins_when_a_file_holds_several_tests(self, tmp_path):
        workdir = make_workdir(
            tmp_path,
            {
                "test_mixed.py": (
                    "def test_good():\n"
                    "    assert 1 + 1 == 2\n"
                    "def test_bad():\n"
                    "    assert 1 + 1 == 3\n"
                )
            },
        )
        _, parsed = run_adapter(workdir)
        entry = entry_by_stem(parsed, "test_mixed")
        assert entry.verdict is Verdict.FAIL
        assert entry.phase is Phase.CALL
        assert entry.duration_s >= 0.0

    def test_file_without_tests_reports_error_at_collect(self, tmp_path):
        workdir = make_workdir(tmp_path, {"test_hollow.py": "VALUE = 41\n"})
        _, parsed = run_adapter(workdir)
        entry = entry_by_stem(parsed, "test_hollow")
        assert entry.verdict is Verdict.ERROR
        assert entry.phase is Phase.COLLECT
        assert "no tests collected" in entry.message


class TestCoverageUnits:
    def test_empty_suite_still_reports_every_source_unit(self, tmp_path):
        workdir = make_workdir(tmp_path, tests={})
        document, parsed = run_adapter(workdir)
        assert parsed.entries == ()
        assert document["exit_status"] == 0
        coverage = parse_coverage(parsed.coverage_section)
        assert sorted(coverage.units) == ["arith.py", "records.py", "strtool.py"]
        for unit in coverage.units.values():
            assert unit.covered_statements == frozenset()
            assert unit.statement_ids is not None
            assert len(unit.statement_ids) == unit.total_statements

    def test_back_to_back_runs_do_not_share_coverage(self, tmp_path):
        first = make_workdir(
            tmp_path / "a",
            {
                "test_one.py": (
                    "from strtool import initials\n"
                    "def test_one():\n"
                    "    assert initials('ada lovelace') == 'AL'\n"
                )
            },
        )
        document_one, parsed_one = run_adapter(first)
        assert document_one["exit_status"] == 0
        cov_one = parse_coverage(parsed_one.coverage_section)
        assert len(cov_one.units["strtool.py"].covered_statements) > 0

        second = make_workdir(
            tmp_path / "b",
            {
                "test_two.py": (
                    "from records import field_census\n"
                    "def test_two():\n"
                    "    assert field_census([]) == []\n"
                )
            },
        )
        _, parsed_two = run_adapter(second)
        cov_two = parse_coverage(parsed_two.coverage_section)
        # strtool is never imported in the second workdir; nothing may leak
        # over from the first run
        assert cov_two.units["strtool.py"].covered_statements == frozenset()
        assert len(cov_two.units["records.py"].covered_statements) > 0

    def test_source_env_selects_the_reported_units(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ATA_COVERAGE_SOURCE", "arith.py")
        workdir = make_workdir(tmp_path, tests={})
        _, parsed = run_adapter(workdir)
        coverage = parse_coverage(parsed.coverage_section)
        assert sorted(coverage.units) == ["arith.py"]

    def test_missing_source_env_falls_back_to_a_directory_scan(
        self, tmp_path, monkeypatch
    ):
        monkeypatch.delenv("ATA_COVERAGE_SOURCE", raising=False)
        workdir = make_workdir(tmp_path, tests={})
        _, parsed = run_adapter(workdir)
        coverage = parse_coverage(parsed.coverage_section)
        assert sorted(coverage.units) == ["arith.py", "records.py", "strtool.py"]


class TestCommandLine:
    def restricted_env(self, **extra: str) -> dict:
        env = {k: os.environ[k] for k in ALLOWLIST if k in os.environ}
        env.update(extra)
        return env

    def test_exit_zero_with_failing_tests_because_the_document_exists(self, tmp_path):
        workdir = make_workdir(
            tmp_path,
            {
                "test_red.py": (
                    "from arith import clamp_index\n"
                    "def test_red():\n"
                    "    assert clamp_index(3, 3) == 2\n"
                )
            },
        )
        out = tmp_path / "result.json"
        proc = subprocess.run(
            [sys.executable, "-m", "ata_pytest_shim", "--out", str(out)],
            cwd=workdir,
            env=self.restricted_env(
                ATA_COVERAGE_SOURCE="arith.py,records.py,strtool.py"
            ),
            capture_output=True,
            text=True,
            timeout=120,
        )
        assert proc.returncode == 0, proc.stderr
        parsed = parse_result_document(out.read_bytes())
        assert parsed.runner_error is None
        assert parsed.exit_status != 0
        assert [e.verdict for e in parsed.entries] == [Verdict.FAIL]

    def test_missing_runner_still_emits_a_marked_document(self, tmp_path):
        shadow = tmp_path / "shadow"
        shadow.mkdir()
        (shadow / "coverage.py").write_text(
            "raise ImportError('coverage is not installed in this sandbox')\n",
            encoding="utf-8",
        )
        workdir = make_workdir(
            tmp_path, {"test_any.py": "def test_any():\n    assert True\n"}
        )
        out = tmp_path / "result.json"
        env = dict(os.environ)
        env["PYTHONPATH"] = f"{shadow}{os.pathsep}" + env.get("PYTHONPATH", "")
        proc = subprocess.run(
            [sys.executable, "-m", "ata_pytest_shim", "--out", str(out)],
            cwd=workdir,
            env=env,
            capture_output=True,
            text=True,
            timeout=120,
        )
        assert proc.returncode == 1
        parsed = parse_result_document(out.read_bytes())
        assert parsed.runner_error is not None
        assert "ImportError" in parsed.runner_error
        assert "coverage is not installed" in parsed.runner_error
        assert parsed.entries == ()
