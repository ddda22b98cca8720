"""Run configuration: one strict, fully-defaulted document.

The loader rejects unknown keys at every level and reports every problem it
finds in one aggregated ConfigurationError, because a CI pipeline should
need exactly one round trip to fix its config. Defaults (also the documented
table in the README):

    generator                 template
    policy.coverage_threshold 0.95
    policy.failure_threshold  0.02
    policy.runtime_budget_s   null (disabled)
    policy.max_iterations     8
    weights.alpha / beta      0.7 / 0.3
    sandbox.per_test_timeout_s 30
    sandbox.suite_timeout_s   600
    sandbox.max_parallel      1
    memory.window / capacity / dimensions   4 / 512 / 256
    loop.initial_budget       8 (template/remote); every scenario test (synthetic)
    loop.augment_budget       4
    seed                      0
    store_root                ata-store
    remote.model              test-drafter-1
    remote.temperature        0.0
    remote.timeout_s          30.0
    remote.max_retries        2
    remote.retry_backoff_s    0.5

Bearer credentials for the remote backend come only from the ATA_LLM_API_KEY
environment variable; a config file never holds a secret.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigurationError
from .execution import DEFAULT_ENV_ALLOWLIST, SandboxConfig
from .generation import EndpointConfig
from .model import ConvergencePolicy, RewardWeights, validate_policy

__all__ = ["RunConfig", "load_config", "GENERATORS"]

GENERATORS = ("template", "remote", "synthetic")

_TOP_KEYS = {
    "schema_version",
    "run_id",
    "store_root",
    "project",
    "manifest",
    "generator",
    "scenario",
    "remote",
    "policy",
    "weights",
    "risk_map",
    "sandbox",
    "memory",
    "loop",
    "seed",
    "trace",
    "control",
}
_REMOTE_KEYS = {"url", "model", "temperature", "timeout_s", "max_retries", "retry_backoff_s"}
_POLICY_KEYS = {"coverage_threshold", "failure_threshold", "runtime_budget_s", "max_iterations"}
_WEIGHT_KEYS = {"alpha", "beta"}
_SANDBOX_KEYS = {
    "command",
    "per_test_timeout_s",
    "suite_timeout_s",
    "max_parallel",
    "env_allowlist",
    "workdir_root",
}
_MEMORY_KEYS = {"window", "capacity", "dimensions"}
_LOOP_KEYS = {"initial_budget", "augment_budget"}


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully-defaulted run configuration."""

    generator: str
    policy: ConvergencePolicy
    weights: RewardWeights
    store_root: Path
    seed: int
    run_id: str | None = None
    project: Path | None = None
    manifest: Path | None = None
    scenario: Path | None = None
    endpoint: EndpointConfig | None = None
    risk_map_path: Path | None = None
    risk_map: Mapping[str, float] | None = None
    sandbox: SandboxConfig | None = None
    memory_window: int = 4
    memory_capacity: int = 512
    memory_dimensions: int = 256
    # None means backend default: 8 for template/remote, the whole scenario
    # suite for synthetic
    initial_budget: int | None = None
    augment_budget: int = 4
    trace_path: Path | None = None
    control_path: Path | None = None

    def to_dict(self) -> dict:
        """The normalized document: every default made explicit."""
        doc: dict = {
            "schema_version": 1,
            "run_id": self.run_id,
            "store_root": str(self.store_root),
            "project": str(self.project) if self.project else None,
            "manifest": str(self.manifest) if self.manifest else None,
            "generator": self.generator,
            "scenario": str(self.scenario) if self.scenario else None,
            "remote": None,
            "policy": self.policy.to_dict(),
            "weights": {"alpha": self.weights.alpha, "beta": self.weights.beta},
            "risk_map": str(self.risk_map_path) if self.risk_map_path else None,
            "sandbox": None,
            "memory": {
                "window": self.memory_window,
                "capacity": self.memory_capacity,
                "dimensions": self.memory_dimensions,
            },
            "loop": {
                "initial_budget": self.initial_budget,
                "augment_budget": self.augment_budget,
            },
            "seed": self.seed,
            "trace": str(self.trace_path) if self.trace_path else None,
            "control": str(self.control_path) if self.control_path else None,
        }
        if self.endpoint is not None:
            doc["remote"] = {
                "url": self.endpoint.url,
                "model": self.endpoint.model,
                "temperature": self.endpoint.temperature,
                "timeout_s": self.endpoint.timeout_s,
                "max_retries": self.endpoint.max_retries,
                "retry_backoff_s": self.endpoint.retry_backoff_s,
            }
        if self.sandbox is not None:
            doc["sandbox"] = {
                "command": list(self.sandbox.command),
                "per_test_timeout_s": self.sandbox.per_test_timeout_s,
                "suite_timeout_s": self.sandbox.suite_timeout_s,
                "max_parallel": self.sandbox.max_parallel,
                "env_allowlist": list(self.sandbox.env_allowlist),
                "workdir_root": (
                    str(self.sandbox.workdir_root) if self.sandbox.workdir_root else None
                ),
            }
        return doc


def _check_keys(doc: Mapping, allowed: set[str], where: str, problems: list[str]) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        problems.append(f"{where}: unknown keys {unknown}")


def _section(doc: Mapping, key: str, problems: list[str]) -> Mapping:
    value = doc.get(key)
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        problems.append(f"{key} must be a mapping")
        return {}
    return value


def _number(doc: Mapping, key: str, default, where: str, problems: list[str]):
    value = doc.get(key, default)
    if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
        problems.append(f"{where}.{key} must be a number, got {value!r}")
        return default
    return value


def _intval(doc: Mapping, key: str, default, where: str, problems: list[str]):
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        problems.append(f"{where}.{key} must be an integer, got {value!r}")
        return default
    return value


def _path(doc: Mapping, key: str, problems: list[str], base: Path) -> Path | None:
    value = doc.get(key)
    if value is None:
        return None
    if not isinstance(value, str) or not value:
        problems.append(f"{key} must be a non-empty path string")
        return None
    path = Path(value)
    if not path.is_absolute():
        path = base / path
    return path


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a run configuration file.

    Relative paths inside the document resolve against the document's own
    directory, so a config checked into a project keeps working no matter
    where the CLI is invoked from.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not parseable: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, Mapping):
        raise ConfigurationError(f"config {path} must be a mapping")
    base = path.parent

    problems: list[str] = []
    _check_keys(doc, _TOP_KEYS, "config", problems)
    version = doc.get("schema_version", 1)
    if version != 1:
        problems.append(f"unsupported schema_version {version!r}")

    generator = doc.get("generator", "template")
    if generator not in GENERATORS:
        problems.append(
            f"generator must be one of {', '.join(GENERATORS)}, got {generator!r}"
        )

    run_id = doc.get("run_id")
    if run_id is not None and (not isinstance(run_id, str) or not run_id or "/" in run_id):
        problems.append(f"run_id must be a non-empty string without '/', got {run_id!r}")

    store_root = _path(doc, "store_root", problems, base) or (base / "ata-store")
    project = _path(doc, "project", problems, base)
    manifest = _path(doc, "manifest", problems, base)
    scenario = _path(doc, "scenario", problems, base)
    risk_path = _path(doc, "risk_map", problems, base)
    trace_path = _path(doc, "trace", problems, base)
    control_path = _path(doc, "control", problems, base)

    policy_doc = _section(doc, "policy", problems)
    _check_keys(policy_doc, _POLICY_KEYS, "policy", problems)
    policy = ConvergencePolicy(
        coverage_threshold=_number(policy_doc, "coverage_threshold", 0.95, "policy", problems),
        failure_threshold=_number(policy_doc, "failure_threshold", 0.02, "policy", problems),
        runtime_budget_s=_number(policy_doc, "runtime_budget_s", None, "policy", problems),
        max_iterations=policy_doc.get("max_iterations", 8),
    )
    problems.extend(validate_policy(policy))

    weights_doc = _section(doc, "weights", problems)
    _check_keys(weights_doc, _WEIGHT_KEYS, "weights", problems)
    weights = RewardWeights()
    try:
        weights = RewardWeights(
            alpha=_number(weights_doc, "alpha", 0.7, "weights", problems),
            beta=_number(weights_doc, "beta", 0.3, "weights", problems),
        )
    except Exception as exc:
        problems.append(f"weights: {exc}")

    memory_doc = _section(doc, "memory", problems)
    _check_keys(memory_doc, _MEMORY_KEYS, "memory", problems)
    memory_window = _intval(memory_doc, "window", 4, "memory", problems)
    memory_capacity = _intval(memory_doc, "capacity", 512, "memory", problems)
    memory_dimensions = _intval(memory_doc, "dimensions", 256, "memory", problems)
    for name, value in (
        ("window", memory_window),
        ("capacity", memory_capacity),
        ("dimensions", memory_dimensions),
    ):
        if value < 1:
            problems.append(f"memory.{name} must be >= 1, got {value}")

    loop_doc = _section(doc, "loop", problems)
    _check_keys(loop_doc, _LOOP_KEYS, "loop", problems)
    initial_budget = None
    if loop_doc.get("initial_budget") is not None:
        initial_budget = _intval(loop_doc, "initial_budget", 8, "loop", problems)
        if initial_budget < 1:
            problems.append(f"loop.initial_budget must be >= 1, got {initial_budget}")
    augment_budget = _intval(loop_doc, "augment_budget", 4, "loop", problems)
    if augment_budget < 0:
        problems.append(f"loop.augment_budget must be >= 0, got {augment_budget}")

    seed = _intval(doc, "seed", 0, "config", problems)

    endpoint = None
    remote_doc = _section(doc, "remote", problems)
    if remote_doc:
        _check_keys(remote_doc, _REMOTE_KEYS, "remote", problems)
        url = remote_doc.get("url")
        if generator == "remote" and not url:
            problems.append("remote.url is required for the remote generator")
        if url:
            try:
                endpoint = EndpointConfig(
                    url=url,
                    model=remote_doc.get("model", "test-drafter-1"),
                    temperature=_number(remote_doc, "temperature", 0.0, "remote", problems),
                    timeout_s=_number(remote_doc, "timeout_s", 30.0, "remote", problems),
                    max_retries=_intval(remote_doc, "max_retries", 2, "remote", problems),
                    retry_backoff_s=_number(
                        remote_doc, "retry_backoff_s", 0.5, "remote", problems
                    ),
                )
            except Exception as exc:
                problems.append(f"remote: {exc}")
    elif generator == "remote":
        problems.append("remote section with remote.url is required for the remote generator")

    sandbox = None
    sandbox_doc = _section(doc, "sandbox", problems)
    if sandbox_doc:
        _check_keys(sandbox_doc, _SANDBOX_KEYS, "sandbox", problems)
        command = sandbox_doc.get("command", [])
        if not isinstance(command, (list, tuple)) or not all(
            isinstance(c, str) for c in command
        ):
            problems.append("sandbox.command must be a list of strings")
            command = []
        allowlist = sandbox_doc.get("env_allowlist", list(DEFAULT_ENV_ALLOWLIST))
        if not isinstance(allowlist, (list, tuple)) or not all(
            isinstance(c, str) for c in allowlist
        ):
            problems.append("sandbox.env_allowlist must be a list of strings")
            allowlist = list(DEFAULT_ENV_ALLOWLIST)
        workdir_root = sandbox_doc.get("workdir_root")
        if command:
            try:
                sandbox = SandboxConfig(
                    command=tuple(command),
                    per_test_timeout_s=_number(
                        sandbox_doc, "per_test_timeout_s", 30.0, "sandbox", problems
                    ),
                    suite_timeout_s=_number(
                        sandbox_doc, "suite_timeout_s", 600.0, "sandbox", problems
                    ),
                    max_parallel=_intval(sandbox_doc, "max_parallel", 1, "sandbox", problems),
                    env_allowlist=tuple(allowlist),
                    workdir_root=str(workdir_root) if workdir_root else None,
                )
            except Exception as exc:
                problems.append(f"sandbox: {exc}")

    # backend-specific requirements and path existence
    if generator in ("template", "remote"):
        if project is None:
            problems.append(f"project is required for the {generator} generator")
        elif not project.is_dir():
            problems.append(f"project directory {project} does not exist")
        if manifest is None:
            problems.append(f"manifest is required for the {generator} generator")
        elif not manifest.is_file():
            problems.append(f"manifest file {manifest} does not exist")
        if sandbox is None:
            problems.append(
                f"sandbox.command is required for the {generator} generator"
            )
    else:
        if scenario is None:
            problems.append("scenario is required for the synthetic generator")
        elif not scenario.is_file():
            problems.append(f"scenario file {scenario} does not exist")

    risk_map = None
    if risk_path is not None:
        if not risk_path.is_file():
            problems.append(f"risk map file {risk_path} does not exist")
        else:
            try:
                loaded = yaml.safe_load(risk_path.read_text(encoding="utf-8")) or {}
                if not isinstance(loaded, Mapping):
                    problems.append(f"risk map {risk_path} must be a mapping")
                else:
                    risk_map = {str(k): float(v) for k, v in loaded.items()}
            except (yaml.YAMLError, TypeError, ValueError) as exc:
                problems.append(f"risk map {risk_path} is not usable: {exc}")

    if problems:
        raise ConfigurationError(problems)

    return RunConfig(
        generator=generator,
        policy=policy,
        weights=weights,
        store_root=store_root,
        seed=seed,
        run_id=run_id,
        project=project,
        manifest=manifest,
        scenario=scenario,
        endpoint=endpoint,
        risk_map_path=risk_path,
        risk_map=risk_map,
        sandbox=sandbox,
        memory_window=memory_window,
        memory_capacity=memory_capacity,
        memory_dimensions=memory_dimensions,
        initial_budget=initial_budget,
        augment_budget=augment_budget,
        trace_path=trace_path,
        control_path=control_path,
    )
