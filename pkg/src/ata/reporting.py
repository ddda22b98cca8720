"""Report documents: per-iteration metrics plus first-to-final improvements.

Text and structured renderings are projections of one report document, which
is itself built from the archived metrics history; nothing here recomputes
metrics from raw outcomes, so the two formats cannot drift apart.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

from .errors import ValidationError
from .model import IterationMetrics, compute_improvement

__all__ = [
    "build_report",
    "improvement_deltas",
    "render_text",
    "render_structured",
    "metrics_from_report",
    "compare_metrics",
]

_DELTA_FIELDS = ("coverage", "failure_rate", "wall_time_s")


def improvement_deltas(history: Sequence[IterationMetrics]) -> dict[str, float | None]:
    """Relative change from iteration 1 to the final iteration, per metric.

    A single-iteration history improved by exactly nothing. A zero baseline
    makes relative change undefined; that delta is reported as null rather
    than inventing a number.
    """
    if not history:
        raise ValidationError("cannot report on an empty history")
    deltas: dict[str, float | None] = {}
    first, last = history[0], history[-1]
    for fieldname in _DELTA_FIELDS:
        if len(history) == 1:
            deltas[fieldname] = 0.0
            continue
        baseline = getattr(first, fieldname)
        final = getattr(last, fieldname)
        deltas[fieldname] = (
            None if baseline == 0 else compute_improvement(baseline, final)
        )
    return deltas


def build_report(
    history: Sequence[IterationMetrics],
    run_id: str,
    termination_reason: str | None = None,
    converged: bool | None = None,
    agent_invocation_totals: Mapping[str, int] | None = None,
) -> dict:
    return {
        "schema_version": 1,
        "run_id": run_id,
        "termination_reason": termination_reason,
        "converged": converged,
        "iterations": [m.to_dict() for m in history],
        "improvement_pct": improvement_deltas(history),
        "agent_invocation_totals": dict(agent_invocation_totals or {}),
    }


def metrics_from_report(doc: Mapping) -> list[IterationMetrics]:
    return [IterationMetrics.from_dict(m) for m in doc["iterations"]]


def _fmt_pct(value: float | None) -> str:
    if value is None:
        return "n/a"
    return f"{value:+.1f}%"


def render_text(doc: Mapping) -> str:
    """Fixed-width iteration table plus the improvement summary line."""
    lines = []
    reason = doc.get("termination_reason") or "in progress"
    count = len(doc["iterations"])
    lines.append(f"run {doc['run_id']}: {reason} after {count} iteration(s)")
    lines.append("")
    lines.append(
        f"{'it':>4} {'coverage':>10} {'branch':>8} {'failing':>8} "
        f"{'fail-rate':>10} {'runtime-s':>10} {'tests':>6}"
    )
    for m in doc["iterations"]:
        counts = m["counts"]
        branch = m.get("branch_coverage")
        branch_text = f"{branch * 100:.1f}%" if branch is not None else "-"
        failing = counts["failing"] + counts["erroring"]
        lines.append(
            f"{m['iteration']:>4} {m['coverage'] * 100:>9.1f}% {branch_text:>8} "
            f"{failing:>8} {m['failure_rate']:>10.3f} {m['wall_time_s']:>10.3f} "
            f"{counts['total_tests']:>6}"
        )
    lines.append("")
    deltas = doc["improvement_pct"]
    lines.append(
        "improvement: "
        f"coverage {_fmt_pct(deltas['coverage'])}, "
        f"failure rate {_fmt_pct(deltas['failure_rate'])}, "
        f"runtime {_fmt_pct(deltas['wall_time_s'])}"
    )
    totals = doc.get("agent_invocation_totals") or {}
    if totals:
        parts = ", ".join(f"{role}={count}" for role, count in sorted(totals.items()))
        lines.append(f"agent invocations: {parts}")
    return "\n".join(lines)


def render_structured(doc: Mapping) -> str:
    """Canonical structured rendering; parse(render(x)) == x."""
    return json.dumps(doc, sort_keys=True, indent=2)


def compare_metrics(
    recorded: IterationMetrics, replayed: IterationMetrics
) -> tuple[bool, dict]:
    """Replay comparison: deltas for everything, a verdict on what must hold.

    The match verdict covers coverage, branch coverage, failure rate and the
    verdict counts. Wall time is reported but never gated (a fresh sandbox
    is slower or faster, not wrong), and agent invocations are orchestration
    bookkeeping that a bare re-execution legitimately lacks.
    """
    deltas = {
        "coverage": replayed.coverage - recorded.coverage,
        "failure_rate": replayed.failure_rate - recorded.failure_rate,
        "wall_time_s": replayed.wall_time_s - recorded.wall_time_s,
        "total_tests": replayed.counts.total_tests - recorded.counts.total_tests,
        "passing": replayed.counts.passing - recorded.counts.passing,
        "failing": replayed.counts.failing - recorded.counts.failing,
        "erroring": replayed.counts.erroring - recorded.counts.erroring,
    }
    if recorded.branch_coverage is None or replayed.branch_coverage is None:
        deltas["branch_coverage"] = None
        branch_match = recorded.branch_coverage == replayed.branch_coverage
    else:
        deltas["branch_coverage"] = replayed.branch_coverage - recorded.branch_coverage
        branch_match = deltas["branch_coverage"] == 0.0
    match = (
        deltas["coverage"] == 0.0
        and deltas["failure_rate"] == 0.0
        and branch_match
        and deltas["total_tests"] == 0
        and deltas["passing"] == 0
        and deltas["failing"] == 0
        and deltas["erroring"] == 0
    )
    return match, deltas
