"""Review agent: failure analysis, repair planning, target prioritization.

The review agent owns the two decision tables that steer the loop:

Root-cause directive (per failure, first row wins):
    repeat_count >= threshold      -> Discard, then schedule fresh generation
    Syntax                         -> Regenerate
    Environment                    -> Patch (environment repair)
    LogicAssertion                 -> Patch (assertion repair with retrieved
                                      context examples)

Target weighting: w = alpha * (1 - coverage_m) + beta * risk_m, ranked
descending with unit-name ascending as the tiebreak. Everything here is
deterministic given its inputs; the only state the agent keeps across
iterations is how often each test id has failed and which ids were
discarded, both of which feed the escalation rule.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Protocol, Sequence

from .errors import ConfigurationError, IntegrityError, ValidationError
from .execution import DiagnosticPatterns, classify_failure
from .generation import GenerationRequest, GenerationResult, QuarantinedCandidate
from .memory import VectorMemory, embed_text
from .model import (
    CoverageMap,
    ExecutionOutcome,
    FailureClass,
    FailureRecord,
    RewardWeights,
    TestCase,
    TestSuite,
    Verdict,
)

__all__ = [
    "RepairAction",
    "RefinementDirective",
    "RankedTargets",
    "FeedbackBundle",
    "prioritize_targets",
    "infer_root_cause",
    "plan_refinement",
    "ReviewAgent",
    "GenerationPort",
]

log = logging.getLogger(__name__)

SIMILARITY_CITATION_FLOOR = 0.8
DEFAULT_REPEAT_THRESHOLD = 3
DEFAULT_CONTEXT_K = 3
DEFAULT_AUGMENT_BUDGET = 4


class RepairAction(str, Enum):
    PATCH = "Patch"
    REGENERATE = "Regenerate"
    DISCARD = "Discard"


@dataclass(frozen=True, slots=True)
class RefinementDirective:
    """One planned action. test_id None marks a fresh-generation entry that
    targets a unit instead of an existing test."""

    test_id: str | None
    action: RepairAction
    rationale: str
    priority: float = 0.0
    context_refs: tuple[str, ...] = ()
    target_unit: str | None = None

    def __post_init__(self) -> None:
        if not self.rationale:
            raise ValidationError("directive rationale must be non-empty")
        if self.action is RepairAction.DISCARD and self.context_refs:
            raise ValidationError("Discard directives never carry context refs")
        if self.test_id is None and self.target_unit is None:
            raise ValidationError("fresh-generation directives need a target unit")

    def to_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "action": self.action.value,
            "rationale": self.rationale,
            "priority": self.priority,
            "context_refs": list(self.context_refs),
            "target_unit": self.target_unit,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RefinementDirective":
        return cls(
            test_id=doc.get("test_id"),
            action=RepairAction(doc["action"]),
            rationale=doc["rationale"],
            priority=doc.get("priority", 0.0),
            context_refs=tuple(doc.get("context_refs", ())),
            target_unit=doc.get("target_unit"),
        )


@dataclass(frozen=True)
class RankedTargets:
    order: tuple[tuple[str, float], ...]
    ignored_risk_units: tuple[str, ...] = ()


@dataclass(frozen=True)
class FeedbackBundle:
    """Everything the next refinement pass needs, in one auditable object."""

    iteration: int
    failures: tuple[FailureRecord, ...]
    coverage_gaps: tuple[tuple[str, tuple[int, ...]], ...]
    directives: tuple[RefinementDirective, ...]
    target_order: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        directed = [d.test_id for d in self.directives if d.test_id is not None]
        failing = [f.test_id for f in self.failures]
        if sorted(directed) != sorted(set(failing)):
            raise IntegrityError(
                "directives must cover each failing test id exactly once"
            )

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "failures": [f.to_dict() for f in self.failures],
            "coverage_gaps": [[unit, list(ids)] for unit, ids in self.coverage_gaps],
            "directives": [d.to_dict() for d in self.directives],
            "target_order": [[unit, weight] for unit, weight in self.target_order],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FeedbackBundle":
        return cls(
            iteration=doc["iteration"],
            failures=tuple(FailureRecord.from_dict(f) for f in doc["failures"]),
            coverage_gaps=tuple(
                (unit, tuple(ids)) for unit, ids in doc["coverage_gaps"]
            ),
            directives=tuple(
                RefinementDirective.from_dict(d) for d in doc["directives"]
            ),
            target_order=tuple((unit, weight) for unit, weight in doc["target_order"]),
        )


def prioritize_targets(
    coverage: CoverageMap,
    risk_map: Mapping[str, float],
    weights: RewardWeights,
) -> RankedTargets:
    """Rank coverage-map units by w = alpha*(1-c) + beta*r.

    Risk entries for units absent from the coverage map are reported back as
    ignored so the caller can trace a warning. Risk values outside [0, 1]
    are configuration mistakes and rejected outright.
    """
    for unit, risk in risk_map.items():
        if not isinstance(risk, (int, float)) or not 0.0 <= float(risk) <= 1.0:
            raise ConfigurationError(f"risk for {unit!r} must be within [0, 1], got {risk!r}")
    known = set(coverage.units)
    ignored = tuple(sorted(set(risk_map) - known))
    if ignored:
        log.warning("risk map names unknown units: %s", ", ".join(ignored))
    scored = []
    for unit in coverage.units:
        c = coverage.unit_ratio(unit)
        r = float(risk_map.get(unit, 0.0))
        scored.append((unit, weights.alpha * (1.0 - c) + weights.beta * r))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return RankedTargets(order=tuple(scored), ignored_risk_units=ignored)


_VALUE_MISMATCH = re.compile(
    r"expected .+?, got|expected .+ but got|assert .+ ==|!=|are not equal",
    re.IGNORECASE,
)

_CATEGORY_BY_CLASS = {
    FailureClass.SYNTAX: "logic-level",
    FailureClass.ENVIRONMENT: "environment-level",
}


def infer_root_cause(record: FailureRecord, memory: VectorMemory) -> FailureRecord:
    """Attach a hypothesis distinguishing data-level from logic-level causes.

    LogicAssertion failures whose signal shows a concrete value mismatch are
    data-level (the expectation or fixture is stale); other assertion
    failures are logic-level. Syntax maps to logic-level (the test body is
    wrong), Environment to environment-level. When the memory store holds a
    past failure with cosine similarity >= 0.8 to this signal, the
    hypothesis cites it.
    """
    if record.failure_class is FailureClass.LOGIC_ASSERTION:
        if _VALUE_MISMATCH.search(record.signal.message):
            category = "data-level"
            detail = "observed value disagrees with the expected example"
        else:
            category = "logic-level"
            detail = "assertion structure fails without a comparable value pair"
    elif record.failure_class is FailureClass.SYNTAX:
        category = _CATEGORY_BY_CLASS[record.failure_class]
        detail = "test body does not parse; the generator emitted a malformed draft"
    else:
        category = _CATEGORY_BY_CLASS[record.failure_class]
        detail = "execution context broke before the behavior under test ran"

    citation = ""
    if len(memory) > 0:
        query = embed_text(record.signal.message, memory.dimensions)
        (top, similarity), *_ = memory.query_similar(query, k=1)
        if similarity >= SIMILARITY_CITATION_FLOOR:
            citation = f"; similar to stored failure {top.record_id} ({top.payload_ref})"
    hypothesis = f"{category}: {detail}{citation}"
    return replace(record, hypothesis=hypothesis)


def _directive_for_failure(
    record: FailureRecord,
    priority: float,
    context_refs: tuple[str, ...],
    repeat_threshold: int,
) -> RefinementDirective:
    if record.repeat_count >= repeat_threshold:
        return RefinementDirective(
            test_id=record.test_id,
            action=RepairAction.DISCARD,
            rationale=(
                f"failed {record.repeat_count} times "
                f"({record.failure_class.value}); pruning and regenerating"
            ),
            priority=priority,
        )
    if record.failure_class is FailureClass.SYNTAX:
        return RefinementDirective(
            test_id=record.test_id,
            action=RepairAction.REGENERATE,
            rationale="syntax failure: draft a structurally new test",
            priority=priority,
            context_refs=context_refs,
        )
    if record.failure_class is FailureClass.ENVIRONMENT:
        return RefinementDirective(
            test_id=record.test_id,
            action=RepairAction.PATCH,
            rationale="environment failure: repair dependencies and setup",
            priority=priority,
            context_refs=context_refs,
        )
    return RefinementDirective(
        test_id=record.test_id,
        action=RepairAction.PATCH,
        rationale="assertion failure: repair the expectation against retrieved examples",
        priority=priority,
        context_refs=context_refs,
    )


def plan_refinement(
    failures: Sequence[FailureRecord],
    coverage_gaps: Sequence[tuple[str, tuple[int, ...]]],
    weights: RewardWeights,
    memory: VectorMemory,
    *,
    target_order: Sequence[tuple[str, float]] = (),
    unit_by_test: Mapping[str, str] | None = None,
    overall_coverage: float = 1.0,
    coverage_target: float = 0.95,
    augment_budget: int = DEFAULT_AUGMENT_BUDGET,
    repeat_threshold: int = DEFAULT_REPEAT_THRESHOLD,
    context_k: int = DEFAULT_CONTEXT_K,
) -> tuple[RefinementDirective, ...]:
    """Map failures and coverage gaps to refinement directives.

    Exactly one directive per failing test, by the decision table above.
    Each Discard also schedules a fresh-generation entry for its unit. When
    overall coverage sits below the target, the highest-weight units with
    uncovered statements get fresh-generation entries too, capped by the
    augment budget. Total over the inputs: every failure class and repeat
    count yields exactly one action.
    """
    unit_by_test = unit_by_test or {}
    weight_by_unit = dict(target_order)
    directives: list[RefinementDirective] = []
    fresh: list[RefinementDirective] = []
    gap_units = [unit for unit, ids in coverage_gaps if ids]

    for record in failures:
        unit = unit_by_test.get(record.test_id)
        priority = weight_by_unit.get(unit, 0.0) if unit else 0.0
        refs: tuple[str, ...] = ()
        if record.repeat_count < repeat_threshold and len(memory) > 0:
            query = embed_text(record.signal.message, memory.dimensions)
            hits = memory.query_similar(query, k=min(context_k, len(memory)))
            refs = tuple(hit.payload_ref for hit, _ in hits)
        directive = _directive_for_failure(record, priority, refs, repeat_threshold)
        directives.append(directive)
        if directive.action is RepairAction.DISCARD:
            target = unit or (gap_units[0] if gap_units else None)
            if target is not None:
                fresh.append(
                    RefinementDirective(
                        test_id=None,
                        action=RepairAction.REGENERATE,
                        rationale=f"replace discarded test for {target}",
                        priority=priority,
                        target_unit=target,
                    )
                )

    if overall_coverage < coverage_target and augment_budget > 0:
        ranked_gap_units = [
            (unit, weight) for unit, weight in target_order if unit in set(gap_units)
        ]
        if not ranked_gap_units:
            ranked_gap_units = [(unit, 0.0) for unit in gap_units]
        for unit, weight in ranked_gap_units[:augment_budget]:
            fresh.append(
                RefinementDirective(
                    test_id=None,
                    action=RepairAction.REGENERATE,
                    rationale=f"coverage gap in {unit}: generate an additional test",
                    priority=weight,
                    target_unit=unit,
                )
            )
    return tuple(directives + fresh)


class GenerationPort(Protocol):
    """How the review agent reaches the generation agent (via the bus)."""

    def repair(
        self,
        test: TestCase,
        record: FailureRecord,
        action: RepairAction,
        request: GenerationRequest,
    ) -> GenerationResult: ...

    def fresh_for_unit(self, unit: str, request: GenerationRequest) -> GenerationResult: ...


_FAILING = (Verdict.FAIL, Verdict.ERROR, Verdict.TIMEOUT)


class ReviewAgent:
    """Stateful across one run: failure repeat counts and discarded ids."""

    name = "review"

    def __init__(
        self,
        memory: VectorMemory,
        artifacts,
        patterns: DiagnosticPatterns,
        risk_map: Mapping[str, float] | None = None,
        repeat_threshold: int = DEFAULT_REPEAT_THRESHOLD,
        context_k: int = DEFAULT_CONTEXT_K,
    ):
        self.memory = memory
        self.artifacts = artifacts
        self.patterns = patterns
        self.risk_map = dict(risk_map or {})
        self.repeat_threshold = repeat_threshold
        self.context_k = context_k
        self._fail_counts: dict[str, int] = {}
        self.discarded_ids: set[str] = set()

    def analyze_results(
        self,
        suite: TestSuite,
        outcomes: Sequence[ExecutionOutcome],
        coverage: CoverageMap,
        weights: RewardWeights,
        *,
        coverage_target: float = 0.95,
        augment_budget: int = DEFAULT_AUGMENT_BUDGET,
    ) -> tuple[FeedbackBundle, RankedTargets]:
        """Classify failures, infer causes, plan directives, persist memory.

        Failure records land in the vector memory before this returns, so
        the refinement that follows retrieves current-iteration context.
        """
        suite_ids = set(suite.ids())
        outcome_ids = [o.test_id for o in outcomes]
        if len(outcome_ids) != len(set(outcome_ids)):
            raise IntegrityError("duplicate outcomes for one test id")
        if set(outcome_ids) != suite_ids:
            raise IntegrityError(
                "outcome set does not match the suite: "
                f"{len(outcome_ids)} outcomes for {len(suite_ids)} tests"
            )

        records: list[FailureRecord] = []
        for outcome in outcomes:
            if outcome.verdict in _FAILING:
                base = classify_failure(outcome, self.patterns)
                count = self._fail_counts.get(outcome.test_id, 0) + 1
                self._fail_counts[outcome.test_id] = count
                record = replace(base, repeat_count=count)
                records.append(infer_root_cause(record, self.memory))

        ranking = prioritize_targets(coverage, self.risk_map, weights)
        gaps = tuple(coverage.gaps())
        unit_by_test = {t.id: t.metadata.target_module for t in suite.tests}
        directives = plan_refinement(
            records,
            gaps,
            weights,
            self.memory,
            target_order=ranking.order,
            unit_by_test=unit_by_test,
            overall_coverage=coverage.statement_ratio(),
            coverage_target=coverage_target,
            augment_budget=augment_budget,
            repeat_threshold=self.repeat_threshold,
            context_k=self.context_k,
        )
        bundle = FeedbackBundle(
            iteration=suite.iteration,
            failures=tuple(records),
            coverage_gaps=gaps,
            directives=directives,
            target_order=ranking.order,
        )
        # persist after inference so retrieval never cites the failure itself
        for record in records:
            address = self.artifacts.put_json(record.to_dict(), "text")
            self.memory.add(
                kind="failure",
                text=f"{record.signal.message} {record.hypothesis}",
                payload_ref=address.digest,
                iteration_stamp=suite.iteration,
            )
        bundle_address = self.artifacts.put_json(bundle.to_dict(), "feedback")
        self.memory.add(
            kind="feedback",
            text=(
                f"iteration {suite.iteration}: {len(records)} failures, "
                f"{len(gaps)} units with gaps"
            ),
            payload_ref=bundle_address.digest,
            iteration_stamp=suite.iteration,
        )
        return bundle, ranking

    def refine_tests(
        self,
        suite: TestSuite,
        bundle: FeedbackBundle,
        generation: GenerationPort,
        *,
        seed: int = 0,
    ) -> tuple[TestSuite, tuple[QuarantinedCandidate, ...]]:
        """Apply directives and produce the next iteration's suite.

        Patch keeps lineage (same target, new content hash when the backend
        actually changes the body); Regenerate replaces through the
        generation agent; Discard removes and remembers the id so fresh
        generation cannot resurrect it. Tests without directives pass
        through untouched. The result carries iteration + 1.
        """
        known = set(suite.ids())
        by_test: dict[str, RefinementDirective] = {}
        for directive in bundle.directives:
            if directive.test_id is None:
                continue
            if directive.test_id not in known:
                raise IntegrityError(
                    f"directive references unknown test id {directive.test_id!r}"
                )
            by_test[directive.test_id] = directive
        record_by_test = {r.test_id: r for r in bundle.failures}
        next_iteration = suite.iteration + 1
        quarantined: list[QuarantinedCandidate] = []

        kept: list[TestCase] = []
        kept_ids: set[str] = set()
        for test in suite.tests:
            directive = by_test.get(test.id)
            if directive is None:
                kept.append(test)
                kept_ids.add(test.id)
                continue
            if directive.action is RepairAction.DISCARD:
                self.discarded_ids.add(test.id)
                continue
            request = GenerationRequest(
                iteration=next_iteration,
                budget=1,
                targets=(test.metadata.target_module,),
                exclude_ids=frozenset(kept_ids | known | self.discarded_ids) - {test.id},
                retrieved_context=directive.context_refs,
                seed=seed,
            )
            result = generation.repair(
                test, record_by_test[test.id], directive.action, request
            )
            quarantined.extend(result.quarantined)
            replacement = result.tests[0] if result.tests else test
            if replacement.id != test.id and replacement.id in kept_ids:
                continue  # repair collided with a test already in the suite
            kept.append(replacement)
            kept_ids.add(replacement.id)

        for directive in bundle.directives:
            if directive.test_id is not None:
                continue
            assert directive.target_unit is not None
            request = GenerationRequest(
                iteration=next_iteration,
                budget=1,
                targets=(directive.target_unit,),
                exclude_ids=frozenset(kept_ids | self.discarded_ids),
                coverage_gaps=bundle.coverage_gaps,
                seed=seed,
            )
            result = generation.fresh_for_unit(directive.target_unit, request)
            quarantined.extend(result.quarantined)
            for test in result.tests:
                if test.id not in kept_ids:
                    kept.append(test)
                    kept_ids.add(test.id)

        refined = TestSuite(
            tests=tuple(kept),
            project_ref=suite.project_ref,
            iteration=next_iteration,
        )
        return refined, tuple(quarantined)
