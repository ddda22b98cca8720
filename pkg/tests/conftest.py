"""Shared builders for the test suite."""

import pytest

from ata.model import (
    CoverageMap,
    ExecutionOutcome,
    Phase,
    TestCase,
    TestMetadata,
    TestStatus,
    TestSuite,
    UnitCoverage,
    Verdict,
)


def make_metadata(**overrides):
    fields = dict(
        target_module="core",
        origin_agent="generation-template",
        rationale="built by a test fixture",
        timestamp="2026-08-19T00:00:00+00:00",
        iteration_created=1,
    )
    fields.update(overrides)
    return TestMetadata(**fields)


def make_test(source_text="def test_alpha():\n    assert True\n", **meta_overrides):
    return TestCase.create(source_text, make_metadata(**meta_overrides))


def make_suite(tests, iteration=1, project_ref="proj"):
    return TestSuite(tests=tuple(tests), project_ref=project_ref, iteration=iteration)


def make_outcome(test_id, verdict=Verdict.PASS, phase=Phase.CALL, message="", duration=0.01):
    return ExecutionOutcome(
        test_id=test_id,
        verdict=verdict,
        duration_s=duration,
        phase=phase,
        raw_message=message,
    )


def coverage_of(**units):
    """coverage_of(core=(10, {1, 2, 3})) -> CoverageMap with one unit."""
    built = {}
    for name, (total, covered) in units.items():
        built[name] = UnitCoverage(
            total_statements=total, covered_statements=frozenset(covered)
        )
    return CoverageMap(units=built)


@pytest.fixture
def patterns():
    from ata.execution import load_patterns

    return load_patterns("python")


@pytest.fixture
def fresh_status():
    return TestStatus.FRESH
