"""Control loop: generate, execute, analyze, refine, decide, repeat.

The orchestrator is an explicit state machine. Iteration 1 asks the
generation agent for an initial suite; every later iteration starts from the
suite the review agent refined out of the previous one. All agent work goes
through the in-process MessageBus as AgentMessage envelopes, so the
orchestrator never holds a backend-specific type in its hands and the bus
invocation counters double as the per-iteration energy accounting.

Each iteration persists, in order: the executed suite, the normalized result
document, the iteration metrics, and the trace events describing every hop.
check_convergence runs exactly once per iteration, strictly after that
persistence, so a crashed run can always be audited up to its last decision.

Operators steer a live run through a control document polled at iteration
boundaries: new thresholds, new reward weights, or a stop order. Applied
documents are archived in place (renamed with the iteration stamp); invalid
ones are rejected into the trace and left for the operator to fix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .bus import AgentMessage, MessageBus
from .errors import (
    BackendError,
    ConfigurationError,
    IntegrityError,
    ProtocolError,
    SandboxError,
    ValidationError,
)
from .generation import GenerationRequest, GenerationResult, QuarantinedCandidate
from .model import (
    ConvergencePolicy,
    CoverageMap,
    Decision,
    ExecutionOutcome,
    FailureRecord,
    IterationMetrics,
    RewardWeights,
    TestCase,
    TestStatus,
    TestSuite,
    UnitCoverage,
    Verdict,
    check_convergence,
    compute_metrics,
    outcomes_by_id,
    validate_policy,
)
from .review import FeedbackBundle, RepairAction, prioritize_targets
from .trace import TraceEvent, emit_trace_event

__all__ = [
    "LoopState",
    "TerminationReason",
    "LoopSettings",
    "LoopReport",
    "CalibrationOverride",
    "parse_calibration",
    "Orchestrator",
    "step_iteration",
    "apply_calibration",
]


class LoopState(str, Enum):
    GENERATING = "Generating"
    EXECUTING = "Executing"
    ANALYZING = "Analyzing"
    REFINING = "Refining"
    DECIDING = "Deciding"
    TERMINATED = "Terminated"


class TerminationReason(str, Enum):
    CONVERGED = "Converged"
    EXHAUSTED = "Exhausted"
    OPERATOR_STOP = "OperatorStop"
    ERROR = "Error"


@dataclass(frozen=True)
class LoopSettings:
    """Run-scoped knobs that are not part of the convergence policy."""

    initial_budget: int = 8
    augment_budget: int = 4
    seed: int = 0
    project_ref: str = "project"
    target_units: tuple[str, ...] = ()
    control_path: str | Path | None = None

    def __post_init__(self) -> None:
        if self.initial_budget < 1:
            raise ValidationError("initial_budget must be >= 1")
        if self.augment_budget < 0:
            raise ValidationError("augment_budget must be >= 0")
        if not self.project_ref:
            raise ValidationError("project_ref must be non-empty")


@dataclass(frozen=True)
class LoopReport:
    """Final word on a run. Everything else is in the archive it points at."""

    run_id: str
    converged: bool
    iterations_executed: int
    metrics_history: tuple[IterationMetrics, ...]
    final_suite_ref: str | None
    termination_reason: TerminationReason
    agent_invocation_totals: Mapping[str, int] = field(default_factory=dict)
    error: str | None = None
    error_kind: str | None = None

    def __post_init__(self) -> None:
        if self.iterations_executed != len(self.metrics_history):
            raise IntegrityError(
                f"iterations_executed {self.iterations_executed} disagrees with "
                f"{len(self.metrics_history)} recorded metrics"
            )
        if self.converged != (self.termination_reason is TerminationReason.CONVERGED):
            raise IntegrityError("converged flag must mirror the termination reason")
        if (self.termination_reason is TerminationReason.ERROR) != (self.error is not None):
            raise IntegrityError("error text accompanies Error terminations, only them")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "run_id": self.run_id,
            "converged": self.converged,
            "iterations_executed": self.iterations_executed,
            "metrics_history": [m.to_dict() for m in self.metrics_history],
            "final_suite_ref": self.final_suite_ref,
            "termination_reason": self.termination_reason.value,
            "agent_invocation_totals": dict(self.agent_invocation_totals),
            "error": self.error,
            "error_kind": self.error_kind,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LoopReport":
        return cls(
            run_id=doc["run_id"],
            converged=doc["converged"],
            iterations_executed=doc["iterations_executed"],
            metrics_history=tuple(
                IterationMetrics.from_dict(m) for m in doc["metrics_history"]
            ),
            final_suite_ref=doc.get("final_suite_ref"),
            termination_reason=TerminationReason(doc["termination_reason"]),
            agent_invocation_totals=dict(doc.get("agent_invocation_totals", {})),
            error=doc.get("error"),
            error_kind=doc.get("error_kind"),
        )


@dataclass(frozen=True)
class CalibrationOverride:
    """Operator adjustments applied between iterations.

    Weights come as a complete pair or not at all. runtime_budget_s set to
    null in the control document clears the budget; an absent key leaves it
    alone, which is why the clear flag exists separately.
    """

    note: str = ""
    stop: bool = False
    alpha: float | None = None
    beta: float | None = None
    coverage_threshold: float | None = None
    failure_threshold: float | None = None
    runtime_budget_s: float | None = None
    clear_runtime_budget: bool = False
    max_iterations: int | None = None

    def __post_init__(self) -> None:
        if (self.alpha is None) != (self.beta is None):
            raise ValidationError("reward weights are overridden as a pair")
        if self.runtime_budget_s is not None and self.clear_runtime_budget:
            raise ValidationError("cannot both set and clear the runtime budget")


_CONTROL_KEYS = {"schema_version", "note", "stop", "policy", "weights"}
_POLICY_KEYS = {
    "coverage_threshold",
    "failure_threshold",
    "runtime_budget_s",
    "max_iterations",
}


def parse_calibration(doc: Any) -> CalibrationOverride:
    """Turn a control document into an override, rejecting anything murky."""
    if not isinstance(doc, Mapping):
        raise ValidationError("control document must be a mapping")
    unknown = set(doc) - _CONTROL_KEYS
    if unknown:
        raise ValidationError(f"control document has unknown keys: {sorted(unknown)}")
    version = doc.get("schema_version", 1)
    if version != 1:
        raise ValidationError(f"unsupported control schema_version {version!r}")
    note = doc.get("note", "")
    if not isinstance(note, str):
        raise ValidationError("note must be text")
    stop = doc.get("stop", False)
    if not isinstance(stop, bool):
        raise ValidationError("stop must be a boolean")

    alpha = beta = None
    weights = doc.get("weights")
    if weights is not None:
        if not isinstance(weights, Mapping) or set(weights) != {"alpha", "beta"}:
            raise ValidationError("weights override needs exactly alpha and beta")
        alpha, beta = weights["alpha"], weights["beta"]

    fields: dict[str, Any] = {}
    clear_budget = False
    policy = doc.get("policy")
    if policy is not None:
        if not isinstance(policy, Mapping):
            raise ValidationError("policy override must be a mapping")
        unknown = set(policy) - _POLICY_KEYS
        if unknown:
            raise ValidationError(f"policy override has unknown keys: {sorted(unknown)}")
        for key, value in policy.items():
            if key == "runtime_budget_s" and value is None:
                clear_budget = True
            else:
                fields[key] = value

    return CalibrationOverride(
        note=note,
        stop=stop,
        alpha=alpha,
        beta=beta,
        clear_runtime_budget=clear_budget,
        **fields,
    )


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def _request_doc(request: GenerationRequest) -> dict:
    return {
        "iteration": request.iteration,
        "budget": request.budget,
        "targets": list(request.targets),
        "exclude_ids": sorted(request.exclude_ids),
        "coverage_gaps": [[unit, list(ids)] for unit, ids in request.coverage_gaps],
        "retrieved_context": list(request.retrieved_context),
        "seed": request.seed,
    }


def _request_from_doc(doc: Mapping) -> GenerationRequest:
    return GenerationRequest(
        iteration=doc["iteration"],
        budget=doc["budget"],
        targets=tuple(doc["targets"]),
        exclude_ids=frozenset(doc["exclude_ids"]),
        coverage_gaps=tuple((unit, tuple(ids)) for unit, ids in doc["coverage_gaps"]),
        retrieved_context=tuple(doc["retrieved_context"]),
        seed=doc["seed"],
    )


def _decode_generation(payload: Mapping) -> GenerationResult:
    return GenerationResult(
        tests=tuple(TestCase.from_dict(t) for t in payload["tests"]),
        quarantined=tuple(
            QuarantinedCandidate(text=q["text"], reason=q["reason"])
            for q in payload["quarantined"]
        ),
        deduplicated=payload["deduplicated"],
    )


class _BusGenerationPort:
    """GenerationPort the review agent uses; every call is a bus hop."""

    def __init__(self, bus: MessageBus, correlation_id: str, iteration: int):
        self.bus = bus
        self.correlation_id = correlation_id
        self.iteration = iteration

    def _call(self, kind: str, payload: dict) -> GenerationResult:
        response = self.bus.request(
            AgentMessage(
                correlation_id=self.correlation_id,
                iteration=self.iteration,
                sender="review",
                kind=kind,
                payload=payload,
                timestamp=_now_iso(),
            )
        )
        return _decode_generation(response.payload)

    def repair(
        self,
        test: TestCase,
        record: FailureRecord,
        action: RepairAction,
        request: GenerationRequest,
    ) -> GenerationResult:
        return self._call(
            "generation.repair",
            {
                "test": test.to_dict(),
                "record": record.to_dict(),
                "action": action.value,
                "request": _request_doc(request),
            },
        )

    def fresh_for_unit(self, unit: str, request: GenerationRequest) -> GenerationResult:
        return self._call(
            "generation.fresh", {"unit": unit, "request": _request_doc(request)}
        )


class Orchestrator:
    """One logical control loop per run; never interleaves iterations."""

    def __init__(
        self,
        run_id: str,
        policy: ConvergencePolicy,
        weights: RewardWeights,
        generation,
        execution,
        review,
        artifacts,
        archive,
        trace_sink,
        memory,
        settings: LoopSettings | None = None,
        bus: MessageBus | None = None,
    ):
        if not run_id:
            raise ValidationError("run_id must be non-empty")
        self.run_id = run_id
        self.policy = policy
        self.weights = weights
        self.generation = generation
        self.execution = execution
        self.review = review
        self.artifacts = artifacts
        self.archive = archive
        self.trace_sink = trace_sink
        self.memory = memory
        self.settings = settings or LoopSettings()
        self.bus = bus or MessageBus()
        self.bus.register("generation", self._handle_generation)
        self.bus.register("execution", self._handle_execution)
        self.bus.register("review", self._handle_review)
        self.state = LoopState.DECIDING
        self._at_boundary = True
        self._history: list[IterationMetrics] = []
        self._last_suite_digest: str | None = None
        self._delta_base: int | None = None

    # -- agent handlers (the only place backend objects are touched) --------

    def _reply(self, message: AgentMessage, role: str, payload: dict) -> AgentMessage:
        verb = message.kind.split(".", 1)[1]
        return AgentMessage(
            correlation_id=message.correlation_id,
            iteration=message.iteration,
            sender=role,
            kind=f"{message.sender}.{verb}-result",
            payload=payload,
            timestamp=_now_iso(),
        )

    def _handle_generation(self, message: AgentMessage) -> AgentMessage:
        verb = message.kind.split(".", 1)[1]
        request = _request_from_doc(message.payload["request"])
        if verb == "generate":
            result = self.generation.generate(request)
        elif verb == "fresh":
            result = self.generation.fresh_for_unit(message.payload["unit"], request)
        elif verb == "repair":
            result = self.generation.repair(
                TestCase.from_dict(message.payload["test"]),
                FailureRecord.from_dict(message.payload["record"]),
                RepairAction(message.payload["action"]),
                request,
            )
        else:
            raise IntegrityError(f"unknown generation verb {verb!r}")
        return self._reply(
            message,
            "generation",
            {
                "tests": [t.to_dict() for t in result.tests],
                "quarantined": [
                    {"text": q.text, "reason": q.reason} for q in result.quarantined
                ],
                "deduplicated": result.deduplicated,
            },
        )

    def _handle_execution(self, message: AgentMessage) -> AgentMessage:
        suite = TestSuite.from_dict(message.payload["suite"])
        result = self.execution.run(suite)
        return self._reply(
            message,
            "execution",
            {
                "outcomes": [o.to_dict() for o in result.outcomes],
                "coverage": result.coverage.to_dict(),
                "wall_time_s": result.wall_time_s,
                "workdir": result.workdir,
            },
        )

    def _handle_review(self, message: AgentMessage) -> AgentMessage:
        verb = message.kind.split(".", 1)[1]
        suite = TestSuite.from_dict(message.payload["suite"])
        if verb == "analyze":
            bundle, ranking = self.review.analyze_results(
                suite,
                tuple(
                    ExecutionOutcome.from_dict(o) for o in message.payload["outcomes"]
                ),
                CoverageMap.from_dict(message.payload["coverage"]),
                RewardWeights(**message.payload["weights"]),
                coverage_target=message.payload["coverage_target"],
                augment_budget=message.payload["augment_budget"],
            )
            return self._reply(
                message,
                "review",
                {
                    "bundle": bundle.to_dict(),
                    "target_order": [[u, w] for u, w in ranking.order],
                    "ignored_risk_units": list(ranking.ignored_risk_units),
                },
            )
        if verb == "refine":
            port = _BusGenerationPort(self.bus, message.correlation_id, message.iteration)
            refined, quarantined = self.review.refine_tests(
                suite,
                FeedbackBundle.from_dict(message.payload["bundle"]),
                port,
                seed=message.payload["seed"],
            )
            return self._reply(
                message,
                "review",
                {
                    "suite": refined.to_dict(),
                    "quarantined": [
                        {"text": q.text, "reason": q.reason} for q in quarantined
                    ],
                },
            )
        raise IntegrityError(f"unknown review verb {verb!r}")

    # -- plumbing ------------------------------------------------------------

    def _corr(self, iteration: int) -> str:
        return f"{self.run_id}-it{iteration:02d}"

    def _trace(
        self,
        iteration: int,
        agent: str,
        kind: str,
        rationale: str,
        payload: Mapping | None = None,
    ) -> None:
        emit_trace_event(
            self.trace_sink,
            TraceEvent(
                run_id=self.run_id,
                iteration=iteration,
                agent=agent,
                kind=kind,
                correlation_id=self._corr(iteration),
                rationale=rationale,
                payload=payload or {},
            ),
        )

    def _request(self, iteration: int, kind: str, payload: dict) -> AgentMessage:
        return self.bus.request(
            AgentMessage(
                correlation_id=self._corr(iteration),
                iteration=iteration,
                sender="orchestrator",
                kind=kind,
                payload=payload,
                timestamp=_now_iso(),
            )
        )

    def _initial_targets(self) -> tuple[str, ...]:
        units = self.settings.target_units
        if not units and hasattr(self.generation, "target_units"):
            units = tuple(self.generation.target_units())
        if not units:
            return ()
        # no coverage exists yet: a one-statement zero-covered stand-in per
        # unit ranks purely by configured risk, name-ascending on ties
        pseudo = CoverageMap(
            units={
                u: UnitCoverage(total_statements=1, covered_statements=frozenset())
                for u in units
            }
        )
        risk_map = dict(getattr(self.review, "risk_map", {}) or {})
        ranking = prioritize_targets(pseudo, risk_map, self.weights)
        return tuple(unit for unit, _ in ranking.order)

    def _initial_suite(self) -> TestSuite:
        self.state = LoopState.GENERATING
        self._at_boundary = False
        request = GenerationRequest(
            iteration=1,
            budget=self.settings.initial_budget,
            targets=self._initial_targets(),
            seed=self.settings.seed,
        )
        response = self._request(
            1, "generation.generate", {"request": _request_doc(request)}
        )
        result = _decode_generation(response.payload)
        suite = TestSuite(
            tests=result.tests,
            project_ref=self.settings.project_ref,
            iteration=1,
        )
        self._trace(
            1,
            "generation",
            "generate",
            "initial suite drafted from the interface manifest",
            {
                "tests": len(suite),
                "quarantined": len(result.quarantined),
                "deduplicated": result.deduplicated,
            },
        )
        self._trace_quarantine(1, result.quarantined)
        return suite

    def _trace_quarantine(
        self, iteration: int, quarantined: Sequence[QuarantinedCandidate]
    ) -> None:
        if quarantined:
            self._trace(
                iteration,
                "generation",
                "quarantine",
                "rejected candidates held out of the suite",
                {
                    "count": len(quarantined),
                    "reasons": sorted({q.reason for q in quarantined}),
                },
            )

    def _execute_suite(self, suite: TestSuite) -> tuple:
        payload = {"suite": suite.to_dict()}
        try:
            response = self._request(suite.iteration, "execution.run", payload)
        except (SandboxError, ProtocolError) as exc:
            self._trace(
                suite.iteration,
                "orchestrator",
                "warning",
                f"execution failed with {type(exc).__name__}; retrying once",
                {"error": str(exc)[:300]},
            )
            response = self._request(suite.iteration, "execution.run", payload)
        outcomes = tuple(
            ExecutionOutcome.from_dict(o) for o in response.payload["outcomes"]
        )
        coverage = CoverageMap.from_dict(response.payload["coverage"])
        return outcomes, coverage, response.payload["wall_time_s"]

    @staticmethod
    def _mark_statuses(suite: TestSuite, outcomes) -> TestSuite:
        by_id = outcomes_by_id(outcomes)
        marked = []
        for test in suite.tests:
            try:
                outcome = by_id[test.id]
            except KeyError:
                raise IntegrityError(f"no outcome reported for test {test.id!r}") from None
            if outcome.verdict is Verdict.PASS:
                status = TestStatus.PASSING
            elif outcome.verdict is Verdict.SKIPPED:
                status = test.status
            else:
                status = TestStatus.FAILING
            marked.append(test.with_status(status))
        return TestSuite(
            tests=tuple(marked), project_ref=suite.project_ref, iteration=suite.iteration
        )

    # -- the three public operations -----------------------------------------

    def step_iteration(
        self, suite: TestSuite
    ) -> tuple[IterationMetrics, FeedbackBundle, TestSuite]:
        """One execute -> analyze -> refine pass over the given suite.

        Persists the executed suite, its result document and its metrics, in
        that order, before returning. The refined suite carries iteration+1
        and is what the loop feeds back in if the run continues.
        """
        if suite.project_ref != self.settings.project_ref:
            raise IntegrityError(
                f"suite for {suite.project_ref!r} does not belong to this run"
            )
        iteration = suite.iteration
        if self._delta_base is None:
            self._delta_base = self.bus.invocation_count()
        self._at_boundary = False

        self.state = LoopState.EXECUTING
        outcomes, coverage, wall_time_s = self._execute_suite(suite)
        suite = self._mark_statuses(suite, outcomes)
        verdicts: dict[str, int] = {}
        for outcome in outcomes:
            verdicts[outcome.verdict.value] = verdicts.get(outcome.verdict.value, 0) + 1
        self._trace(
            iteration,
            "execution",
            "execute",
            "suite executed in the sandbox",
            {
                "tests": len(suite),
                "verdicts": dict(sorted(verdicts.items())),
                "wall_time_s": wall_time_s,
            },
        )

        self.state = LoopState.ANALYZING
        response = self._request(
            iteration,
            "review.analyze",
            {
                "suite": suite.to_dict(),
                "outcomes": [o.to_dict() for o in outcomes],
                "coverage": coverage.to_dict(),
                "weights": {"alpha": self.weights.alpha, "beta": self.weights.beta},
                "coverage_target": self.policy.coverage_threshold,
                "augment_budget": self.settings.augment_budget,
            },
        )
        bundle = FeedbackBundle.from_dict(response.payload["bundle"])
        ignored = tuple(response.payload["ignored_risk_units"])
        self._trace(
            iteration,
            "review",
            "analyze",
            "failures classified and refinement directives planned",
            {
                "failures": len(bundle.failures),
                "directives": len(bundle.directives),
                "gap_units": len(bundle.coverage_gaps),
            },
        )
        if ignored:
            self._trace(
                iteration,
                "review",
                "warning",
                "risk map names units absent from the coverage report",
                {"ignored_risk_units": list(ignored)},
            )

        invocations = self.bus.invocation_count() - self._delta_base
        metrics = compute_metrics(suite, outcomes, coverage, wall_time_s, invocations)

        suite_digest = self.artifacts.put_json(suite.to_dict(), "test-suite").digest
        self.archive.map_suite(iteration, suite_digest)
        self._last_suite_digest = suite_digest
        result_doc = {
            "schema_version": 1,
            "outcomes": [o.to_dict() for o in outcomes],
            "coverage": coverage.to_dict(),
            "wall_time_s": wall_time_s,
        }
        result_digest = self.artifacts.put_json(result_doc, "result-document").digest
        self.archive.map_result(iteration, result_digest)
        self.archive.record_metrics(metrics)
        self._history.append(metrics)
        self._trace(
            iteration,
            "orchestrator",
            "metrics",
            "iteration metrics recorded",
            metrics.to_dict(),
        )

        # the refine call and everything under it belongs to the next
        # iteration's invocation budget
        self._delta_base = self.bus.invocation_count()
        self.state = LoopState.REFINING
        response = self._request(
            iteration,
            "review.refine",
            {
                "suite": suite.to_dict(),
                "bundle": bundle.to_dict(),
                "seed": self.settings.seed,
            },
        )
        refined = TestSuite.from_dict(response.payload["suite"])
        quarantined = tuple(
            QuarantinedCandidate(text=q["text"], reason=q["reason"])
            for q in response.payload["quarantined"]
        )
        self._trace(
            iteration,
            "review",
            "refine",
            "directives applied to produce the next suite",
            {
                "directives": len(bundle.directives),
                "discards": sum(
                    1 for d in bundle.directives if d.action is RepairAction.DISCARD
                ),
                "fresh": sum(1 for d in bundle.directives if d.test_id is None),
                "tests": len(refined),
            },
        )
        self._trace_quarantine(iteration, quarantined)

        self.state = LoopState.DECIDING
        return metrics, bundle, refined

    def apply_calibration(self, override: CalibrationOverride) -> "Orchestrator":
        """Adopt new weights/policy for subsequent iterations.

        Only legal at an iteration boundary; a mid-iteration call is rejected
        with the state unchanged. Raises when the merged policy or weights
        violate their own invariants.
        """
        if not self._at_boundary:
            raise ValidationError(
                "calibration applies only at iteration boundaries"
            )
        new_weights = self.weights
        if override.alpha is not None:
            assert override.beta is not None
            new_weights = RewardWeights(alpha=override.alpha, beta=override.beta)
        changes = {
            name: getattr(override, name)
            for name in ("coverage_threshold", "failure_threshold", "max_iterations")
            if getattr(override, name) is not None
        }
        if override.runtime_budget_s is not None:
            changes["runtime_budget_s"] = override.runtime_budget_s
        elif override.clear_runtime_budget:
            changes["runtime_budget_s"] = None
        new_policy = replace(self.policy, **changes)
        problems = validate_policy(new_policy)
        if problems:
            raise ConfigurationError(problems)
        self.weights = new_weights
        self.policy = new_policy
        return self

    def _poll_calibration(self, iteration: int) -> bool:
        """Consume a control document at the boundary. True means stop."""
        path = self.settings.control_path
        if path is None:
            return False
        path = Path(path)
        if not path.exists():
            return False
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
            override = parse_calibration(doc)
            self.apply_calibration(override)
        except (
            yaml.YAMLError,
            ValidationError,
            ConfigurationError,
            OSError,
        ) as exc:
            self._trace(
                iteration,
                "orchestrator",
                "calibration",
                "control document rejected; left in place for the operator",
                {"status": "rejected", "error": str(exc)[:300]},
            )
            return False
        applied = {
            key: getattr(override, key)
            for key in (
                "alpha",
                "beta",
                "coverage_threshold",
                "failure_threshold",
                "runtime_budget_s",
                "max_iterations",
            )
            if getattr(override, key) is not None
        }
        if override.clear_runtime_budget:
            applied["runtime_budget_s"] = None
        status = "stop" if override.stop else "applied"
        self._trace(
            iteration,
            "orchestrator",
            "calibration",
            override.note or "control document applied",
            {"status": status, "changes": applied},
        )
        archived = path.with_name(f"{path.name}.applied-it{iteration:02d}")
        path.replace(archived)
        return override.stop

    def run_loop(self) -> LoopReport:
        """Drive the full loop to termination and archive the report."""
        problems = validate_policy(self.policy)
        if problems:
            raise ConfigurationError(problems)
        self.archive.create()
        self._trace(
            0,
            "orchestrator",
            "run-start",
            "run opened",
            {
                "policy": self.policy.to_dict(),
                "initial_budget": self.settings.initial_budget,
                "seed": self.settings.seed,
                "project_ref": self.settings.project_ref,
            },
        )

        reason: TerminationReason | None = None
        error: str | None = None
        error_kind: str | None = None
        try:
            self._delta_base = self.bus.invocation_count()
            suite = self._initial_suite()
            while True:
                iteration = suite.iteration
                metrics, bundle, refined = self.step_iteration(suite)
                decision = check_convergence(self._history, self.policy)
                self._trace(
                    iteration,
                    "orchestrator",
                    "decision",
                    f"convergence check returned {decision.value}",
                    {
                        "decision": decision.value,
                        "coverage": metrics.coverage,
                        "failure_rate": metrics.failure_rate,
                        "iterations": len(self._history),
                    },
                )
                pruned = self.memory.prune()
                self._trace(
                    iteration,
                    "orchestrator",
                    "iteration-end",
                    "iteration closed",
                    {"decision": decision.value, "pruned": pruned},
                )
                self._at_boundary = True
                if decision is Decision.CONVERGED:
                    reason = TerminationReason.CONVERGED
                    break
                if decision is Decision.EXHAUSTED:
                    reason = TerminationReason.EXHAUSTED
                    break
                if self._poll_calibration(iteration):
                    reason = TerminationReason.OPERATOR_STOP
                    break
                suite = refined
        except (SandboxError, ProtocolError, BackendError, IntegrityError) as exc:
            reason = TerminationReason.ERROR
            error = str(exc)
            error_kind = {
                SandboxError: "sandbox",
                ProtocolError: "protocol",
                BackendError: "backend",
                IntegrityError: "integrity",
            }[type(exc)]
            self._trace(
                len(self._history) + 1,
                "orchestrator",
                "error",
                f"run aborted by {type(exc).__name__}",
                {"kind": error_kind, "message": error[:500]},
            )

        assert reason is not None
        self.state = LoopState.TERMINATED
        self._at_boundary = True
        report = LoopReport(
            run_id=self.run_id,
            converged=reason is TerminationReason.CONVERGED,
            iterations_executed=len(self._history),
            metrics_history=tuple(self._history),
            final_suite_ref=self._last_suite_digest,
            termination_reason=reason,
            agent_invocation_totals=self.bus.invocation_totals(),
            error=error,
            error_kind=error_kind,
        )
        self._trace(
            len(self._history),
            "orchestrator",
            "run-end",
            "run closed",
            {
                "termination_reason": reason.value,
                "iterations_executed": report.iterations_executed,
                "converged": report.converged,
            },
        )
        self.archive.write_report(report.to_dict())
        return report


def step_iteration(
    state: Orchestrator, suite: TestSuite
) -> tuple[IterationMetrics, FeedbackBundle, TestSuite]:
    return state.step_iteration(suite)


def apply_calibration(state: Orchestrator, override: CalibrationOverride) -> Orchestrator:
    return state.apply_calibration(override)
