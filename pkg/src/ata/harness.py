"""Synthetic harness: a hermetic model of flaky test generation and repair.

A synthetic test is a TestCase whose source text is a small JSON document:
name, target unit, the statement ids it covers, and a defect kind. The fake
runner reads that document instead of executing code, so whole convergence
runs are reproducible from a seed and finish in milliseconds.

Defect kinds map to verdicts the way the real pipeline would see them:
    none            -> Pass  (call)
    syntax          -> Error (collect), source-parse diagnostic
    environment     -> Error (setup), missing-dependency diagnostic
    wrong-assertion -> Fail  (call), assertion diagnostic

Coverage counts statements covered by tests that ran to a verdict of Pass or
Fail; collect/setup errors never execute the unit under test. Repairs
succeed with probability p (Regenerate also redraws the covered set), and
fresh tests are well-formed with probability q. Everything the harness emits
flows through the same wire-document parser as a real runner's output.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from statistics import median, quantiles
from typing import Any, Callable, Mapping

import yaml

from .errors import ConfigurationError, ValidationError
from .generation import GenerationRequest, GenerationResult
from .memory import canonical_json
from .model import (
    ConvergencePolicy,
    FailureRecord,
    RewardWeights,
    TestCase,
    TestMetadata,
    TestSuite,
    validate_policy,
)

__all__ = [
    "DefectKind",
    "SyntheticUnit",
    "SyntheticTest",
    "SyntheticScenario",
    "load_scenario",
    "synthetic_source",
    "parse_synthetic",
    "synth_execute",
    "synth_repair",
    "SyntheticBackend",
    "SyntheticExecutor",
    "SimulationReport",
    "simulate_runs",
]

DEFAULT_GENERATION_VALIDITY = 0.64


class DefectKind(str, Enum):
    NONE = "none"
    SYNTAX = "syntax"
    ENVIRONMENT = "environment"
    WRONG_ASSERTION = "wrong-assertion"


_INJECTED_DEFECTS = (DefectKind.SYNTAX, DefectKind.ENVIRONMENT, DefectKind.WRONG_ASSERTION)

_DIAGNOSTIC = {
    DefectKind.SYNTAX: "SyntaxError: invalid syntax in generated test body",
    DefectKind.ENVIRONMENT: "ModuleNotFoundError: No module named 'synthetic_dep'",
    DefectKind.WRONG_ASSERTION: "AssertionError: expected value, got a different value",
    DefectKind.NONE: "",
}


@dataclass(frozen=True, slots=True)
class SyntheticUnit:
    name: str
    statements: int

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("unit name must be non-empty")
        if self.statements < 1:
            raise ValidationError("unit must have at least one statement")


@dataclass(frozen=True, slots=True)
class SyntheticTest:
    name: str
    unit: str
    covers: tuple[int, ...]
    defect: DefectKind = DefectKind.NONE

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("synthetic test name must be non-empty")
        if len(set(self.covers)) != len(self.covers):
            raise ValidationError("covers must not repeat statement ids")


def synthetic_source(test: SyntheticTest) -> str:
    doc = {
        "name": test.name,
        "unit": test.unit,
        "covers": sorted(test.covers),
        "defect": test.defect.value,
    }
    return canonical_json(doc).decode("utf-8") + "\n"


def parse_synthetic(source_text: str) -> SyntheticTest:
    try:
        doc = json.loads(source_text)
        return SyntheticTest(
            name=doc["name"],
            unit=doc["unit"],
            covers=tuple(doc["covers"]),
            defect=DefectKind(doc["defect"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"not a synthetic test body: {exc}") from exc


@dataclass(frozen=True)
class SyntheticScenario:
    name: str
    units: tuple[SyntheticUnit, ...]
    initial_tests: tuple[SyntheticTest, ...]
    repair_probability: float
    generation_validity: float = DEFAULT_GENERATION_VALIDITY
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.units:
            raise ValidationError("scenario needs at least one unit")
        names = [u.name for u in self.units]
        if len(names) != len(set(names)):
            raise ValidationError("unit names must be unique")
        test_names = [t.name for t in self.initial_tests]
        if len(test_names) != len(set(test_names)):
            raise ValidationError("test names must be unique")
        if not 0.0 <= self.repair_probability <= 1.0:
            raise ValidationError("repair_probability must be within [0, 1]")
        if not 0.0 <= self.generation_validity <= 1.0:
            raise ValidationError("generation_validity must be within [0, 1]")
        by_name = {u.name: u for u in self.units}
        for test in self.initial_tests:
            unit = by_name.get(test.unit)
            if unit is None:
                raise ValidationError(f"test {test.name} targets unknown unit {test.unit!r}")
            bad = [s for s in test.covers if not 1 <= s <= unit.statements]
            if bad:
                raise ValidationError(
                    f"test {test.name} covers statements {bad} outside 1..{unit.statements}"
                )

    def unit(self, name: str) -> SyntheticUnit:
        for u in self.units:
            if u.name == name:
                return u
        raise ValidationError(f"unknown unit {name!r}")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "name": self.name,
            "units": [{"name": u.name, "statements": u.statements} for u in self.units],
            "initial_tests": [
                {
                    "name": t.name,
                    "unit": t.unit,
                    "covers": list(t.covers),
                    "defect": t.defect.value,
                }
                for t in self.initial_tests
            ],
            "repair_probability": self.repair_probability,
            "generation_validity": self.generation_validity,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SyntheticScenario":
        version = doc.get("schema_version", 1)
        if version != 1:
            raise ConfigurationError(f"unsupported scenario schema_version {version}")
        try:
            return cls(
                name=doc.get("name", "scenario"),
                units=tuple(
                    SyntheticUnit(name=u["name"], statements=u["statements"])
                    for u in doc["units"]
                ),
                initial_tests=tuple(
                    SyntheticTest(
                        name=t["name"],
                        unit=t["unit"],
                        covers=tuple(t.get("covers", ())),
                        defect=DefectKind(t.get("defect", "none")),
                    )
                    for t in doc.get("initial_tests", ())
                ),
                repair_probability=doc["repair_probability"],
                generation_validity=doc.get(
                    "generation_validity", DEFAULT_GENERATION_VALIDITY
                ),
                seed=doc.get("seed", 0),
            )
        except (KeyError, TypeError, ValueError, ValidationError) as exc:
            raise ConfigurationError(f"bad scenario document: {exc}") from exc


def load_scenario(path: str | Path) -> SyntheticScenario:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"scenario file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"scenario {path} is not parseable: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigurationError(f"scenario {path} must be a mapping")
    return SyntheticScenario.from_dict(doc)


_TEST_DURATION_S = 0.01


def synth_execute(suite: TestSuite, scenario: SyntheticScenario) -> dict:
    """Produce the wire-format result document for a synthetic suite."""
    entries = []
    executed: list[SyntheticTest] = []
    for case in suite.tests:
        spec = parse_synthetic(case.source_text)
        if spec.defect is DefectKind.NONE:
            verdict, phase = "Pass", "call"
        elif spec.defect is DefectKind.SYNTAX:
            verdict, phase = "Error", "collect"
        elif spec.defect is DefectKind.ENVIRONMENT:
            verdict, phase = "Error", "setup"
        else:
            verdict, phase = "Fail", "call"
        if verdict in ("Pass", "Fail"):
            executed.append(spec)
        entries.append(
            {
                "id": case.id,
                "verdict": verdict,
                "duration_s": _TEST_DURATION_S,
                "phase": phase,
                "message": _DIAGNOSTIC[spec.defect],
            }
        )

    units_doc: dict[str, dict] = {}
    for unit in scenario.units:
        covered: set[int] = set()
        for spec in executed:
            if spec.unit == unit.name:
                covered.update(spec.covers)
        units_doc[unit.name] = {
            "total_statements": unit.statements,
            "covered_statements": sorted(covered),
            "statement_ids": list(range(1, unit.statements + 1)),
        }

    return {
        "schema_version": 1,
        "exit_status": 0,
        "tests": entries,
        "coverage": {"format": "native", "units": units_doc},
    }


def synth_repair(
    test: SyntheticTest,
    action: Any,
    scenario: SyntheticScenario,
    rng: random.Random,
) -> SyntheticTest:
    """Stochastic repair: success with probability p clears the defect.

    Regenerate additionally redraws the covered statements on success. On
    failure the test comes back unchanged, so its id persists and the repeat
    counter keeps climbing toward the discard threshold.
    """
    if rng.random() >= scenario.repair_probability:
        return test
    repaired = replace(test, defect=DefectKind.NONE)
    if str(getattr(action, "value", action)) == "Regenerate":
        unit = scenario.unit(test.unit)
        size = rng.randint(1, unit.statements)
        covers = tuple(sorted(rng.sample(range(1, unit.statements + 1), size)))
        repaired = replace(repaired, covers=covers)
    return repaired


def _draw_fresh(
    unit_name: str,
    scenario: SyntheticScenario,
    rng: random.Random,
    label: str,
) -> SyntheticTest:
    unit = scenario.unit(unit_name)
    size = rng.randint(1, unit.statements)
    covers = tuple(sorted(rng.sample(range(1, unit.statements + 1), size)))
    if rng.random() < scenario.generation_validity:
        defect = DefectKind.NONE
    else:
        defect = _INJECTED_DEFECTS[rng.randrange(len(_INJECTED_DEFECTS))]
    return SyntheticTest(name=label, unit=unit_name, covers=covers, defect=defect)


class SyntheticBackend:
    """Generation backend over a scenario; consumes one seeded rng stream."""

    name = "generation-synthetic"

    def __init__(
        self,
        scenario: SyntheticScenario,
        rng: random.Random,
        clock: Callable[[], str] | None = None,
    ):
        self.scenario = scenario
        self.rng = rng
        self._clock = clock or (lambda: "1970-01-01T00:00:00+00:00")
        self._fresh_counter = 0

    def target_units(self) -> tuple[str, ...]:
        return tuple(u.name for u in self.scenario.units)

    def _to_case(self, spec: SyntheticTest, iteration: int, rationale: str) -> TestCase:
        return TestCase.create(
            synthetic_source(spec),
            TestMetadata(
                target_module=spec.unit,
                origin_agent=self.name,
                rationale=rationale,
                timestamp=self._clock(),
                iteration_created=iteration,
                coverage_estimate=len(spec.covers) / self.scenario.unit(spec.unit).statements,
            ),
        )

    def generate(self, request: GenerationRequest) -> GenerationResult:
        tests = []
        ids: set[str] = set()
        for spec in self.scenario.initial_tests[: request.budget]:
            case = self._to_case(
                spec, request.iteration, f"scenario seed test {spec.name}"
            )
            if case.id not in request.exclude_ids and case.id not in ids:
                tests.append(case)
                ids.add(case.id)
        return GenerationResult(tests=tuple(tests))

    def fresh_for_unit(self, unit: str, request: GenerationRequest) -> GenerationResult:
        self._fresh_counter += 1
        label = f"fresh-i{request.iteration}-{self._fresh_counter}"
        spec = _draw_fresh(unit, self.scenario, self.rng, label)
        case = self._to_case(spec, request.iteration, f"fresh draft for {unit}")
        if case.id in request.exclude_ids:
            return GenerationResult(tests=())
        return GenerationResult(tests=(case,))

    def repair(
        self,
        test: TestCase,
        record: FailureRecord,
        action: Any,
        request: GenerationRequest,
    ) -> GenerationResult:
        spec = parse_synthetic(test.source_text)
        repaired = synth_repair(spec, action, self.scenario, self.rng)
        if repaired == spec:
            return GenerationResult(tests=(test,))
        case = self._to_case(
            repaired,
            request.iteration,
            f"{str(getattr(action, 'value', action)).lower()} of {spec.name} "
            f"after {record.failure_class.value} failure",
        )
        return GenerationResult(tests=(case,))


class SyntheticExecutor:
    """Execution backend over a scenario. Wall time is simulated, so every
    run and replay of the same suite reports identical metrics."""

    def __init__(self, scenario: SyntheticScenario):
        self.scenario = scenario

    def run(self, suite: TestSuite):
        from .execution import ExecutionResult, parse_coverage, parse_result_document

        document = parse_result_document(canonical_json(synth_execute(suite, self.scenario)))
        by_id = {entry.id: entry for entry in document.entries}
        outcomes = []
        for case in suite.tests:
            entry = by_id[case.id]
            from .model import ExecutionOutcome

            outcomes.append(
                ExecutionOutcome(
                    test_id=entry.id,
                    verdict=entry.verdict,
                    duration_s=entry.duration_s,
                    phase=entry.phase,
                    raw_message=entry.message,
                )
            )
        coverage = parse_coverage(document.coverage_section)
        return ExecutionResult(
            outcomes=tuple(outcomes),
            coverage=coverage,
            wall_time_s=round(_TEST_DURATION_S * len(suite.tests), 6),
            document=document,
            workdir="synthetic",
        )


@dataclass(frozen=True)
class SimulationReport:
    scenario: str
    runs: int
    converged_runs: int
    convergence_rate: float
    iterations_by_run: tuple[int, ...]
    converged_iterations: tuple[int, ...]
    median_iterations: float | None
    quartiles: tuple[float, float, float] | None

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "scenario": self.scenario,
            "runs": self.runs,
            "converged_runs": self.converged_runs,
            "convergence_rate": self.convergence_rate,
            "iterations_by_run": list(self.iterations_by_run),
            "converged_iterations": list(self.converged_iterations),
            "median_iterations": self.median_iterations,
            "quartiles": list(self.quartiles) if self.quartiles else None,
        }


def simulate_runs(
    scenario: SyntheticScenario,
    policy: ConvergencePolicy | None = None,
    runs: int = 100,
    seed: int | None = None,
    weights: RewardWeights | None = None,
    augment_budget: int = 4,
) -> SimulationReport:
    """Seeded Monte Carlo over full loop runs.

    Run k uses seed base+k, so any single run can be reproduced in
    isolation. The distribution summary covers iterations-to-convergence for
    converged runs plus the convergence rate overall.
    """
    from .orchestrator import LoopSettings, Orchestrator, TerminationReason

    if runs < 1:
        raise ValidationError("runs must be >= 1")
    policy = policy or ConvergencePolicy()
    problems = validate_policy(policy)
    if problems:
        raise ConfigurationError(problems)
    weights = weights or RewardWeights()
    base_seed = scenario.seed if seed is None else seed

    iterations_by_run: list[int] = []
    converged_iterations: list[int] = []
    converged_count = 0
    for index in range(runs):
        run_seed = base_seed + index
        report = _run_one(
            scenario, policy, weights, run_seed, f"sim-{index:04d}", augment_budget
        )
        iterations_by_run.append(report.iterations_executed)
        if report.termination_reason is TerminationReason.CONVERGED:
            converged_count += 1
            converged_iterations.append(report.iterations_executed)

    rate = converged_count / runs
    med = median(converged_iterations) if converged_iterations else None
    quarts = None
    if len(converged_iterations) >= 4:
        q = quantiles(converged_iterations, n=4)
        quarts = (q[0], q[1], q[2])
    return SimulationReport(
        scenario=scenario.name,
        runs=runs,
        converged_runs=converged_count,
        convergence_rate=rate,
        iterations_by_run=tuple(iterations_by_run),
        converged_iterations=tuple(converged_iterations),
        median_iterations=med,
        quartiles=quarts,
    )


def _run_one(
    scenario: SyntheticScenario,
    policy: ConvergencePolicy,
    weights: RewardWeights,
    run_seed: int,
    run_id: str,
    augment_budget: int,
):
    from .execution import load_patterns
    from .memory import EphemeralArchive, EphemeralArtifactStore, VectorMemory
    from .orchestrator import LoopSettings, Orchestrator
    from .review import ReviewAgent
    from .trace import ListTraceSink

    rng = random.Random(run_seed)
    backend = SyntheticBackend(scenario, rng)
    executor = SyntheticExecutor(scenario)
    artifacts = EphemeralArtifactStore()
    memory = VectorMemory()
    review = ReviewAgent(memory, artifacts, load_patterns("python"))
    orchestrator = Orchestrator(
        run_id=run_id,
        policy=policy,
        weights=weights,
        generation=backend,
        execution=executor,
        review=review,
        artifacts=artifacts,
        archive=EphemeralArchive(run_id),
        trace_sink=ListTraceSink(),
        memory=memory,
        settings=LoopSettings(
            initial_budget=max(len(scenario.initial_tests), 1),
            augment_budget=augment_budget,
            seed=run_seed,
            project_ref=f"synthetic:{scenario.name}",
        ),
    )
    return orchestrator.run_loop()
