"""Command line surface: run, simulate, report, replay, validate.

Exit codes (CI contract, total over every termination path):
    0  converged run / successful command
    1  operational error (missing run, runtime validation failure, ...)
    2  run finished without converging (Exhausted or OperatorStop),
       or a replay that does not match the recorded metrics
    3  invalid configuration or scenario
    4  sandbox failure (runner could not run or broke the result protocol)
"""

from __future__ import annotations

import argparse
import json
import random
import sys
import time

from .config import RunConfig, load_config
from .errors import (
    AtaError,
    ConfigurationError,
    NotFoundError,
    ProtocolError,
    SandboxError,
)
from .execution import SandboxConfig, SandboxExecutor, load_patterns
from .generation import RemoteBackend, TemplateBackend, load_manifest
from .harness import (
    SyntheticBackend,
    SyntheticExecutor,
    SyntheticScenario,
    load_scenario,
    simulate_runs,
)
from .memory import ArtifactStore, RunArchive, VectorMemory
from .model import TestSuite, compute_metrics
from .orchestrator import LoopSettings, Orchestrator, TerminationReason
from .reporting import (
    build_report,
    compare_metrics,
    render_structured,
    render_text,
)
from .review import ReviewAgent
from .trace import FileTraceSink

EXIT_OK = 0
EXIT_OPERATIONAL = 1
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3
EXIT_SANDBOX = 4

_REASON_EXITS = {
    TerminationReason.CONVERGED: EXIT_OK,
    TerminationReason.EXHAUSTED: EXIT_NOT_CONVERGED,
    TerminationReason.OPERATOR_STOP: EXIT_NOT_CONVERGED,
}


def _build_orchestrator(config: RunConfig) -> Orchestrator:
    run_id = config.run_id or f"run-{time.strftime('%Y%m%d-%H%M%S')}"
    artifacts = ArtifactStore(config.store_root)
    archive = RunArchive(config.store_root, run_id).create()
    memory = VectorMemory(
        dimensions=config.memory_dimensions,
        window=config.memory_window,
        capacity=config.memory_capacity,
    )
    review = ReviewAgent(
        memory, artifacts, load_patterns("python"), risk_map=config.risk_map
    )

    scenario: SyntheticScenario | None = None
    target_units: tuple[str, ...] = ()
    initial_budget = config.initial_budget
    if config.generator == "synthetic":
        scenario = load_scenario(config.scenario)
        generation = SyntheticBackend(scenario, random.Random(config.seed))
        executor = SyntheticExecutor(scenario)
        project_ref = f"synthetic:{scenario.name}"
        if initial_budget is None:
            initial_budget = max(len(scenario.initial_tests), 1)
    else:
        manifest = load_manifest(config.manifest)
        if config.generator == "remote":
            generation = RemoteBackend(config.endpoint, manifest)
        else:
            generation = TemplateBackend(manifest)
        executor = SandboxExecutor(config.project, config.sandbox)
        project_ref = str(config.project)
        target_units = manifest.units()
        if initial_budget is None:
            initial_budget = 8

    config_doc = config.to_dict()
    config_doc["run_id"] = run_id
    archive.write_config(
        {
            "config": config_doc,
            "scenario": scenario.to_dict() if scenario else None,
            "risk_map": dict(config.risk_map) if config.risk_map else None,
        }
    )
    trace_sink = FileTraceSink(config.trace_path or archive.trace_path)
    settings = LoopSettings(
        initial_budget=initial_budget,
        augment_budget=config.augment_budget,
        seed=config.seed,
        project_ref=project_ref,
        target_units=target_units,
        control_path=config.control_path,
    )
    return Orchestrator(
        run_id=run_id,
        policy=config.policy,
        weights=config.weights,
        generation=generation,
        execution=executor,
        review=review,
        artifacts=artifacts,
        archive=archive,
        trace_sink=trace_sink,
        memory=memory,
        settings=settings,
    )


def cmd_run(args) -> int:
    config = load_config(args.config)
    orchestrator = _build_orchestrator(config)
    report = orchestrator.run_loop()
    # a run that aborts before its first iteration has no table to render
    if report.metrics_history:
        doc = build_report(
            report.metrics_history,
            report.run_id,
            termination_reason=report.termination_reason.value,
            converged=report.converged,
            agent_invocation_totals=report.agent_invocation_totals,
        )
        print(render_text(doc))
    if report.termination_reason is TerminationReason.ERROR:
        print(f"error ({report.error_kind}): {report.error}", file=sys.stderr)
        if report.error_kind in ("sandbox", "protocol"):
            return EXIT_SANDBOX
        return EXIT_OPERATIONAL
    return _REASON_EXITS[report.termination_reason]


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    report = simulate_runs(scenario, runs=args.runs, seed=args.seed)
    print(render_structured(report.to_dict()))
    return EXIT_OK


def cmd_report(args) -> int:
    archive = RunArchive(args.store, args.run)
    history = archive.metrics_history()
    if not history:
        raise NotFoundError(f"run {args.run!r} has no recorded metrics under {args.store}")
    reason = None
    converged = None
    totals = None
    try:
        stored = archive.read_report()
        reason = stored.get("termination_reason")
        converged = stored.get("converged")
        totals = stored.get("agent_invocation_totals")
    except NotFoundError:
        pass  # run still open or aborted before the report; metrics suffice
    doc = build_report(
        history,
        args.run,
        termination_reason=reason,
        converged=converged,
        agent_invocation_totals=totals,
    )
    print(render_structured(doc) if args.format == "json" else render_text(doc))
    return EXIT_OK


def _replay_executor(stored: dict, suite_timeout: float | None):
    config_doc = stored.get("config") or {}
    if config_doc.get("generator") == "synthetic":
        scenario_doc = stored.get("scenario")
        if scenario_doc is None:
            raise NotFoundError("archived run carries no scenario to replay against")
        return SyntheticExecutor(SyntheticScenario.from_dict(scenario_doc))
    sandbox_doc = config_doc.get("sandbox")
    project = config_doc.get("project")
    if not sandbox_doc or not project:
        raise NotFoundError("archived run carries no sandbox settings to replay with")
    sandbox = SandboxConfig(
        command=tuple(sandbox_doc["command"]),
        per_test_timeout_s=sandbox_doc["per_test_timeout_s"],
        suite_timeout_s=(
            suite_timeout if suite_timeout is not None else sandbox_doc["suite_timeout_s"]
        ),
        max_parallel=sandbox_doc["max_parallel"],
        env_allowlist=tuple(sandbox_doc["env_allowlist"]),
        workdir_root=sandbox_doc.get("workdir_root"),
    )
    return SandboxExecutor(project, sandbox)


def cmd_replay(args) -> int:
    archive = RunArchive(args.store, args.run)
    artifacts = ArtifactStore(args.store)
    suite = TestSuite.from_dict(artifacts.get_json(archive.suite_digest(args.iteration)))
    history = archive.metrics_history()
    recorded = next((m for m in history if m.iteration == args.iteration), None)
    if recorded is None:
        raise NotFoundError(f"run {args.run!r} has no metrics for iteration {args.iteration}")

    executor = _replay_executor(archive.read_config(), args.suite_timeout)
    result = executor.run(suite)
    replayed = compute_metrics(
        suite,
        result.outcomes,
        result.coverage,
        result.wall_time_s,
        agent_invocations=recorded.counts.agent_invocations,
    )
    match, deltas = compare_metrics(recorded, replayed)
    print(
        json.dumps(
            {
                "run_id": args.run,
                "iteration": args.iteration,
                "match": match,
                "recorded": recorded.to_dict(),
                "replayed": replayed.to_dict(),
                "deltas": deltas,
            },
            sort_keys=True,
            indent=2,
        )
    )
    return EXIT_OK if match else EXIT_NOT_CONVERGED


def cmd_validate(args) -> int:
    load_config(args.config)
    print(f"config {args.config} is valid")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ata",
        description="closed-loop test refinement: generate, execute, analyze, repair",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="drive the full refinement loop")
    run.add_argument("--config", required=True, help="path to the run configuration file")
    run.set_defaults(handler=cmd_run)

    simulate = sub.add_parser("simulate", help="seeded Monte-Carlo over a scenario")
    simulate.add_argument("--scenario", required=True, help="scenario file")
    simulate.add_argument("--runs", type=int, default=100, help="number of runs")
    simulate.add_argument(
        "--seed", type=int, default=None, help="base seed (default: the scenario's)"
    )
    simulate.set_defaults(handler=cmd_simulate)

    report = sub.add_parser("report", help="render a finished run's metrics")
    report.add_argument("--run", required=True, help="run id")
    report.add_argument("--store", default="ata-store", help="store root directory")
    report.add_argument("--format", choices=("text", "json"), default="text")
    report.set_defaults(handler=cmd_report)

    replay = sub.add_parser("replay", help="re-execute a stored suite and compare")
    replay.add_argument("--run", required=True, help="run id")
    replay.add_argument("--iteration", type=int, required=True, help="iteration to replay")
    replay.add_argument("--store", default="ata-store", help="store root directory")
    replay.add_argument(
        "--suite-timeout",
        type=float,
        default=None,
        help="override the archived sandbox suite timeout (seconds)",
    )
    replay.set_defaults(handler=cmd_replay)

    validate = sub.add_parser("validate", help="check a configuration file")
    validate.add_argument("--config", required=True, help="path to the configuration file")
    validate.set_defaults(handler=cmd_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigurationError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (SandboxError, ProtocolError) as exc:
        print(f"sandbox error: {exc}", file=sys.stderr)
        return EXIT_SANDBOX
    except AtaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL


if __name__ == "__main__":
    sys.exit(main())
