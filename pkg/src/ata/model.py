"""Core domain model: tests, outcomes, coverage, metrics, convergence.

Everything downstream (agents, orchestrator, CLI) speaks these types. The
dataclasses validate their invariants at construction so a value that exists
is a value that is legal; the only exception is ConvergencePolicy, which is
deliberately constructible in an invalid state so validate_policy can report
every violation to operators instead of dying on the first one.

Identity rule: a test's id is the SHA-256 hex digest of its source text and
nothing else. Metadata is advisory and never hashed, so annotating a test
cannot change its identity, while any repair that edits the source yields a
new id. That one rule gives deduplication, lineage tracking, and
content-addressed storage for free.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import ConfigurationError, IntegrityError, ValidationError

__all__ = [
    "Verdict",
    "Phase",
    "TestStatus",
    "FailureClass",
    "Decision",
    "TestMetadata",
    "TestCase",
    "TestSuite",
    "ExecutionOutcome",
    "FailureSignal",
    "FailureRecord",
    "UnitCoverage",
    "CoverageMap",
    "IterationCounts",
    "IterationMetrics",
    "ConvergencePolicy",
    "RewardWeights",
    "content_hash",
    "compute_metrics",
    "check_convergence",
    "compute_improvement",
    "validate_policy",
]


class Verdict(str, Enum):
    PASS = "Pass"
    FAIL = "Fail"
    ERROR = "Error"
    TIMEOUT = "Timeout"
    SKIPPED = "Skipped"


class Phase(str, Enum):
    COLLECT = "collect"
    SETUP = "setup"
    CALL = "call"
    TEARDOWN = "teardown"


class TestStatus(str, Enum):
    FRESH = "fresh"
    PASSING = "passing"
    FAILING = "failing"
    QUARANTINED = "quarantined"


class FailureClass(str, Enum):
    SYNTAX = "Syntax"
    ENVIRONMENT = "Environment"
    LOGIC_ASSERTION = "LogicAssertion"


class Decision(str, Enum):
    CONTINUE = "Continue"
    CONVERGED = "Converged"
    EXHAUSTED = "Exhausted"


def content_hash(source_text: str) -> str:
    """Hex id for a test body. Pure function of the text."""
    return hashlib.sha256(source_text.encode("utf-8")).hexdigest()


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def _finite(value: float, name: str) -> None:
    _require(isinstance(value, (int, float)) and math.isfinite(value), f"{name} must be finite")


@dataclass(frozen=True, slots=True)
class TestMetadata:
    """Provenance and advisory annotations. Never part of the test id.

    origin_agent, rationale and timestamp must be populated on every
    persisted test so any artifact can be traced back to the agent and
    decision that produced it.
    """

    target_module: str
    origin_agent: str
    rationale: str
    timestamp: str
    iteration_created: int
    mock_dependencies: tuple[str, ...] = ()
    coverage_estimate: float = 0.0

    def __post_init__(self) -> None:
        _require(bool(self.target_module), "target_module must be non-empty")
        _require(bool(self.origin_agent), "origin_agent must be non-empty")
        _require(bool(self.rationale), "rationale must be non-empty")
        _require(bool(self.timestamp), "timestamp must be non-empty")
        _require(self.iteration_created >= 1, "iteration_created must be >= 1")
        _finite(self.coverage_estimate, "coverage_estimate")
        _require(0.0 <= self.coverage_estimate <= 1.0, "coverage_estimate must be within [0, 1]")

    def to_dict(self) -> dict:
        return {
            "target_module": self.target_module,
            "origin_agent": self.origin_agent,
            "rationale": self.rationale,
            "timestamp": self.timestamp,
            "iteration_created": self.iteration_created,
            "mock_dependencies": list(self.mock_dependencies),
            "coverage_estimate": self.coverage_estimate,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TestMetadata":
        return cls(
            target_module=doc["target_module"],
            origin_agent=doc["origin_agent"],
            rationale=doc["rationale"],
            timestamp=doc["timestamp"],
            iteration_created=doc["iteration_created"],
            mock_dependencies=tuple(doc.get("mock_dependencies", ())),
            coverage_estimate=doc.get("coverage_estimate", 0.0),
        )


@dataclass(frozen=True, slots=True)
class TestCase:
    id: str
    source_text: str
    status: TestStatus
    metadata: TestMetadata

    def __post_init__(self) -> None:
        _require(bool(self.source_text), "source_text must be non-empty")
        expected = content_hash(self.source_text)
        if self.id != expected:
            raise ValidationError(f"id {self.id!r} is not the content hash of source_text")

    @classmethod
    def create(
        cls,
        source_text: str,
        metadata: TestMetadata,
        status: TestStatus = TestStatus.FRESH,
    ) -> "TestCase":
        return cls(
            id=content_hash(source_text),
            source_text=source_text,
            status=status,
            metadata=metadata,
        )

    def with_status(self, status: TestStatus) -> "TestCase":
        return replace(self, status=status)

    def with_metadata(self, metadata: TestMetadata) -> "TestCase":
        return replace(self, metadata=metadata)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source_text": self.source_text,
            "status": self.status.value,
            "metadata": self.metadata.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TestCase":
        return cls(
            id=doc["id"],
            source_text=doc["source_text"],
            status=TestStatus(doc["status"]),
            metadata=TestMetadata.from_dict(doc["metadata"]),
        )


@dataclass(frozen=True, slots=True)
class TestSuite:
    """An ordered collection of tests for one iteration. Ids are unique."""

    tests: tuple[TestCase, ...]
    project_ref: str
    iteration: int

    def __post_init__(self) -> None:
        _require(bool(self.project_ref), "project_ref must be non-empty")
        _require(self.iteration >= 1, "iteration must be >= 1")
        ids = [t.id for t in self.tests]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate test ids in suite: {dupes}")

    def __len__(self) -> int:
        return len(self.tests)

    def ids(self) -> tuple[str, ...]:
        return tuple(t.id for t in self.tests)

    def get(self, test_id: str) -> TestCase:
        for t in self.tests:
            if t.id == test_id:
                return t
        raise IntegrityError(f"test id {test_id!r} not in suite")

    def to_dict(self) -> dict:
        return {
            "tests": [t.to_dict() for t in self.tests],
            "project_ref": self.project_ref,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TestSuite":
        return cls(
            tests=tuple(TestCase.from_dict(t) for t in doc["tests"]),
            project_ref=doc["project_ref"],
            iteration=doc["iteration"],
        )


@dataclass(frozen=True, slots=True)
class ExecutionOutcome:
    test_id: str
    verdict: Verdict
    duration_s: float
    phase: Phase
    raw_message: str = ""

    def __post_init__(self) -> None:
        _finite(self.duration_s, "duration_s")
        _require(self.duration_s >= 0.0, "duration_s must be >= 0")

    def to_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "verdict": self.verdict.value,
            "duration_s": self.duration_s,
            "phase": self.phase.value,
            "raw_message": self.raw_message,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExecutionOutcome":
        return cls(
            test_id=doc["test_id"],
            verdict=Verdict(doc["verdict"]),
            duration_s=doc["duration_s"],
            phase=Phase(doc["phase"]),
            raw_message=doc.get("raw_message", ""),
        )


@dataclass(frozen=True, slots=True)
class FailureSignal:
    message: str
    location: str


@dataclass(frozen=True, slots=True)
class FailureRecord:
    test_id: str
    failure_class: FailureClass
    signal: FailureSignal
    hypothesis: str
    repeat_count: int

    def __post_init__(self) -> None:
        _require(self.repeat_count >= 1, "repeat_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "failure_class": self.failure_class.value,
            "signal": {"message": self.signal.message, "location": self.signal.location},
            "hypothesis": self.hypothesis,
            "repeat_count": self.repeat_count,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FailureRecord":
        return cls(
            test_id=doc["test_id"],
            failure_class=FailureClass(doc["failure_class"]),
            signal=FailureSignal(
                message=doc["signal"]["message"],
                location=doc["signal"]["location"],
            ),
            hypothesis=doc.get("hypothesis", ""),
            repeat_count=doc["repeat_count"],
        )


@dataclass(frozen=True, slots=True)
class UnitCoverage:
    """Coverage facts for one target unit.

    statement_ids, when present, is the full statement universe for the
    unit; it makes uncovered-statement reporting exact. Branch fields are
    optional because not every report format carries them.
    """

    total_statements: int
    covered_statements: frozenset[int]
    statement_ids: frozenset[int] | None = None
    total_branches: int | None = None
    covered_branches: int | None = None

    def __post_init__(self) -> None:
        _require(self.total_statements >= 0, "total_statements must be >= 0")
        if len(self.covered_statements) > self.total_statements:
            raise IntegrityError(
                f"covered statements ({len(self.covered_statements)}) exceed "
                f"total ({self.total_statements})"
            )
        if self.statement_ids is not None:
            if len(self.statement_ids) != self.total_statements:
                raise IntegrityError("statement_ids size disagrees with total_statements")
            if not self.covered_statements <= self.statement_ids:
                raise IntegrityError("covered_statements outside the statement universe")
        if (self.total_branches is None) != (self.covered_branches is None):
            raise ValidationError("branch totals and covered counts come as a pair")
        if self.total_branches is not None:
            _require(self.total_branches >= 0, "total_branches must be >= 0")
            assert self.covered_branches is not None
            _require(self.covered_branches >= 0, "covered_branches must be >= 0")
            if self.covered_branches > self.total_branches:
                raise IntegrityError("covered branches exceed total branches")

    def uncovered(self) -> tuple[int, ...]:
        universe = (
            self.statement_ids
            if self.statement_ids is not None
            else frozenset(range(1, self.total_statements + 1))
        )
        return tuple(sorted(universe - self.covered_statements))


@dataclass(frozen=True)
class CoverageMap:
    units: Mapping[str, UnitCoverage] = field(default_factory=dict)

    def statement_ratio(self) -> float:
        total = sum(u.total_statements for u in self.units.values())
        if total == 0:
            return 0.0
        covered = sum(len(u.covered_statements) for u in self.units.values())
        return covered / total

    def branch_ratio(self) -> float | None:
        pairs = [
            (u.covered_branches, u.total_branches)
            for u in self.units.values()
            if u.total_branches is not None
        ]
        total = sum(t for _, t in pairs if t is not None)
        if not pairs or total == 0:
            return None
        covered = sum(c for c, _ in pairs if c is not None)
        return covered / total

    def unit_ratio(self, unit: str) -> float:
        uc = self.units[unit]
        if uc.total_statements == 0:
            return 1.0
        return len(uc.covered_statements) / uc.total_statements

    def gaps(self) -> list[tuple[str, tuple[int, ...]]]:
        out: list[tuple[str, tuple[int, ...]]] = []
        for unit in sorted(self.units):
            missing = self.units[unit].uncovered()
            if missing:
                out.append((unit, missing))
        return out

    def to_dict(self) -> dict:
        doc: dict = {}
        for unit, uc in sorted(self.units.items()):
            entry: dict = {
                "total_statements": uc.total_statements,
                "covered_statements": sorted(uc.covered_statements),
            }
            if uc.statement_ids is not None:
                entry["statement_ids"] = sorted(uc.statement_ids)
            if uc.total_branches is not None:
                entry["total_branches"] = uc.total_branches
                entry["covered_branches"] = uc.covered_branches
            doc[unit] = entry
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CoverageMap":
        units = {}
        for unit, entry in doc.items():
            ids = entry.get("statement_ids")
            units[unit] = UnitCoverage(
                total_statements=entry["total_statements"],
                covered_statements=frozenset(entry["covered_statements"]),
                statement_ids=frozenset(ids) if ids is not None else None,
                total_branches=entry.get("total_branches"),
                covered_branches=entry.get("covered_branches"),
            )
        return cls(units=units)


@dataclass(frozen=True, slots=True)
class IterationCounts:
    total_tests: int
    passing: int
    failing: int
    erroring: int
    agent_invocations: int

    def __post_init__(self) -> None:
        for name in ("total_tests", "passing", "failing", "erroring", "agent_invocations"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0")
        # erroring folds in timeouts; skips are the only uncounted verdict
        _require(
            self.passing + self.failing + self.erroring <= self.total_tests,
            "verdict counts exceed total tests",
        )


@dataclass(frozen=True, slots=True)
class IterationMetrics:
    """The per-iteration triple (coverage, failure rate, runtime) plus counts."""

    iteration: int
    coverage: float
    failure_rate: float
    wall_time_s: float
    counts: IterationCounts
    branch_coverage: float | None = None

    def __post_init__(self) -> None:
        _require(self.iteration >= 1, "iteration must be >= 1")
        _finite(self.coverage, "coverage")
        _finite(self.failure_rate, "failure_rate")
        _finite(self.wall_time_s, "wall_time_s")
        _require(0.0 <= self.coverage <= 1.0, "coverage must be within [0, 1]")
        _require(0.0 <= self.failure_rate <= 1.0, "failure_rate must be within [0, 1]")
        _require(self.wall_time_s >= 0.0, "wall_time_s must be >= 0")
        if self.branch_coverage is not None:
            _finite(self.branch_coverage, "branch_coverage")
            _require(0.0 <= self.branch_coverage <= 1.0, "branch_coverage must be within [0, 1]")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "coverage": self.coverage,
            "branch_coverage": self.branch_coverage,
            "failure_rate": self.failure_rate,
            "wall_time_s": self.wall_time_s,
            "counts": {
                "total_tests": self.counts.total_tests,
                "passing": self.counts.passing,
                "failing": self.counts.failing,
                "erroring": self.counts.erroring,
                "agent_invocations": self.counts.agent_invocations,
            },
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "IterationMetrics":
        c = doc["counts"]
        return cls(
            iteration=doc["iteration"],
            coverage=doc["coverage"],
            branch_coverage=doc.get("branch_coverage"),
            failure_rate=doc["failure_rate"],
            wall_time_s=doc["wall_time_s"],
            counts=IterationCounts(
                total_tests=c["total_tests"],
                passing=c["passing"],
                failing=c["failing"],
                erroring=c["erroring"],
                agent_invocations=c["agent_invocations"],
            ),
        )


@dataclass(frozen=True, slots=True)
class ConvergencePolicy:
    """Stopping rule. Intentionally does not self-validate; see validate_policy."""

    coverage_threshold: float = 0.95
    failure_threshold: float = 0.02
    runtime_budget_s: float | None = None
    max_iterations: int = 8

    def to_dict(self) -> dict:
        return {
            "coverage_threshold": self.coverage_threshold,
            "failure_threshold": self.failure_threshold,
            "runtime_budget_s": self.runtime_budget_s,
            "max_iterations": self.max_iterations,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ConvergencePolicy":
        return cls(
            coverage_threshold=doc.get("coverage_threshold", 0.95),
            failure_threshold=doc.get("failure_threshold", 0.02),
            runtime_budget_s=doc.get("runtime_budget_s"),
            max_iterations=doc.get("max_iterations", 8),
        )


@dataclass(frozen=True, slots=True)
class RewardWeights:
    """Weights for gap-driven target prioritization: w = alpha*(1-c) + beta*r."""

    alpha: float = 0.7
    beta: float = 0.3

    def __post_init__(self) -> None:
        _finite(self.alpha, "alpha")
        _finite(self.beta, "beta")
        _require(self.alpha >= 0.0, "alpha must be >= 0")
        _require(self.beta >= 0.0, "beta must be >= 0")
        _require(self.alpha + self.beta > 0.0, "alpha + beta must be positive")


_FAILURE_VERDICTS = (Verdict.FAIL, Verdict.ERROR, Verdict.TIMEOUT)


def compute_metrics(
    suite: TestSuite,
    outcomes: Sequence[ExecutionOutcome],
    coverage: CoverageMap,
    wall_time_s: float,
    agent_invocations: int = 0,
) -> IterationMetrics:
    """Fold one iteration's raw results into the metrics triple.

    Coverage is aggregate covered statements over aggregate totals across all
    target units. Failure rate counts Fail, Error and Timeout verdicts over
    executed tests, where Skipped tests never count as executed. An empty or
    fully skipped iteration produced no evidence of health, so its failure
    rate is pinned to 1.0 rather than 0/0.

    Raises IntegrityError when an outcome references a test id that is not in
    the suite, or when a test id is reported more than once.
    """
    _finite(wall_time_s, "wall_time_s")
    _require(wall_time_s >= 0.0, "wall_time_s must be >= 0")
    known = set(suite.ids())
    seen: set[str] = set()
    tally = {v: 0 for v in Verdict}
    for outcome in outcomes:
        if outcome.test_id not in known:
            raise IntegrityError(f"outcome for unknown test id {outcome.test_id!r}")
        if outcome.test_id in seen:
            raise IntegrityError(f"duplicate outcome for test id {outcome.test_id!r}")
        seen.add(outcome.test_id)
        tally[outcome.verdict] += 1

    executed = len(outcomes) - tally[Verdict.SKIPPED]
    if executed > 0:
        failed = sum(tally[v] for v in _FAILURE_VERDICTS)
        failure_rate = failed / executed
    else:
        failure_rate = 1.0

    return IterationMetrics(
        iteration=suite.iteration,
        coverage=coverage.statement_ratio(),
        branch_coverage=coverage.branch_ratio(),
        failure_rate=failure_rate,
        wall_time_s=wall_time_s,
        counts=IterationCounts(
            total_tests=len(suite),
            passing=tally[Verdict.PASS],
            failing=tally[Verdict.FAIL],
            erroring=tally[Verdict.ERROR] + tally[Verdict.TIMEOUT],
            agent_invocations=agent_invocations,
        ),
    )


def check_convergence(
    history: Sequence[IterationMetrics], policy: ConvergencePolicy
) -> Decision:
    """Decide Continue, Converged, or Exhausted from the metrics history.

    Converged wins over Exhausted when both hold at the final allowed
    iteration. All threshold comparisons are inclusive. The runtime budget
    participates only when the policy sets one.
    """
    if not history:
        raise ValidationError("metrics history must be non-empty")
    problems = validate_policy(policy)
    if problems:
        raise ConfigurationError(problems)
    latest = history[-1]
    within_budget = (
        policy.runtime_budget_s is None or latest.wall_time_s <= policy.runtime_budget_s
    )
    if (
        latest.coverage >= policy.coverage_threshold
        and latest.failure_rate <= policy.failure_threshold
        and within_budget
    ):
        return Decision.CONVERGED
    if len(history) >= policy.max_iterations:
        return Decision.EXHAUSTED
    return Decision.CONTINUE


def compute_improvement(baseline: float, final: float) -> float:
    """Relative change in percent, one decimal, ties rounded away from zero."""
    _finite(baseline, "baseline")
    _finite(final, "final")
    if baseline == 0:
        raise ValidationError("improvement is undefined for a zero baseline")
    delta = (
        (Decimal(repr(final)) - Decimal(repr(baseline)))
        / Decimal(repr(baseline))
        * Decimal(100)
    )
    return float(delta.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def validate_policy(policy: ConvergencePolicy) -> list[str]:
    """Every invariant violation in one pass; an empty list means valid."""
    problems: list[str] = []
    for name in ("coverage_threshold", "failure_threshold"):
        value = getattr(policy, name)
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            problems.append(f"{name} must be a finite number")
        elif not 0.0 <= value <= 1.0:
            problems.append(f"{name} must be within [0, 1], got {value}")
    if policy.runtime_budget_s is not None:
        if not isinstance(policy.runtime_budget_s, (int, float)) or not math.isfinite(
            policy.runtime_budget_s
        ):
            problems.append("runtime_budget_s must be a finite number when set")
        elif policy.runtime_budget_s <= 0:
            problems.append(f"runtime_budget_s must be positive, got {policy.runtime_budget_s}")
    if not isinstance(policy.max_iterations, int) or policy.max_iterations < 1:
        problems.append(f"max_iterations must be an integer >= 1, got {policy.max_iterations}")
    return problems


def outcomes_by_id(outcomes: Iterable[ExecutionOutcome]) -> dict[str, ExecutionOutcome]:
    """Index outcomes, rejecting duplicates."""
    indexed: dict[str, ExecutionOutcome] = {}
    for outcome in outcomes:
        if outcome.test_id in indexed:
            raise IntegrityError(f"duplicate outcome for test id {outcome.test_id!r}")
        indexed[outcome.test_id] = outcome
    return indexed
