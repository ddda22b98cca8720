"""Generation agent: interface manifests, template rendering, remote drafting.

Two interchangeable backends produce candidate tests:

- TemplateBackend renders arrange/act/assert tests straight from manifest
  example pairs. It is a pure function of (manifest, request, seed): same
  inputs, same bytes, which is what makes hermetic runs reproducible.
- RemoteBackend asks a chat-completion-style HTTP endpoint to draft tests
  and then applies the same hygiene: candidates that do not parse or do not
  contain a test function are quarantined with a reason, never silently
  dropped, and duplicate texts collapse to one test by content hash.

The rendering template is a data file, so adding a target dialect means
adding a template, not touching this engine.
"""

from __future__ import annotations

import ast
import os
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any, Callable, Mapping, Sequence

import httpx
import yaml

from .errors import BackendError, ConfigurationError, ValidationError
from .model import FailureRecord, TestCase, TestMetadata

__all__ = [
    "ParamSpec",
    "ExamplePair",
    "CallableEntry",
    "InterfaceManifest",
    "load_manifest",
    "GenerationRequest",
    "QuarantinedCandidate",
    "GenerationResult",
    "TemplateBackend",
    "EndpointConfig",
    "RemoteBackend",
    "annotate_metadata",
    "render_test",
    "CREDENTIAL_ENV_VAR",
]

CREDENTIAL_ENV_VAR = "ATA_LLM_API_KEY"


@dataclass(frozen=True, slots=True)
class ParamSpec:
    name: str
    kind: str = "any"


@dataclass(frozen=True, slots=True)
class ExamplePair:
    """One observed input/output pair, or an input with an expected error."""

    args: tuple = ()
    kwargs: tuple[tuple[str, Any], ...] = ()
    expect: Any = None
    raises: str | None = None
    has_expect: bool = True

    def __post_init__(self) -> None:
        if self.raises is not None and self.has_expect:
            raise ValidationError("an example declares either expect or raises, not both")
        if self.raises is None and not self.has_expect:
            raise ValidationError("an example must declare expect or raises")


@dataclass(frozen=True, slots=True)
class CallableEntry:
    unit: str
    module: str
    callable: str
    params: tuple[ParamSpec, ...]
    examples: tuple[ExamplePair, ...]
    mocks: tuple[str, ...] = ()
    statements: tuple[int, ...] = ()
    unit_total_statements: int | None = None

    def __post_init__(self) -> None:
        if not self.unit or not self.module or not self.callable:
            raise ValidationError("manifest entries need unit, module and callable names")
        if not self.examples:
            raise ValidationError(
                f"manifest entry {self.unit}:{self.callable} has no examples"
            )
        declared = {p.name for p in self.params}
        for example in self.examples:
            if self.params and len(example.args) > len(self.params):
                raise ValidationError(
                    f"{self.callable}: example has {len(example.args)} positional "
                    f"args but only {len(self.params)} params are declared"
                )
            for key, _ in example.kwargs:
                if declared and key not in declared:
                    raise ValidationError(
                        f"{self.callable}: example kwarg {key!r} is not a declared param"
                    )

    def coverage_estimate(self) -> float:
        """Heuristic: share of the unit's statements this entry names."""
        if not self.statements or not self.unit_total_statements:
            return 0.0
        return min(1.0, len(self.statements) / self.unit_total_statements)


@dataclass(frozen=True)
class InterfaceManifest:
    entries: tuple[CallableEntry, ...]
    project: str = ""

    def units(self) -> tuple[str, ...]:
        seen: list[str] = []
        for entry in self.entries:
            if entry.unit not in seen:
                seen.append(entry.unit)
        return tuple(seen)

    def entries_for(self, unit: str) -> tuple[CallableEntry, ...]:
        return tuple(e for e in self.entries if e.unit == unit)

    def unresolved_units(self, project_dir: str | Path) -> list[str]:
        root = Path(project_dir)
        return [u for u in self.units() if not (root / u).exists()]


def _load_example(raw: Mapping, where: str) -> ExamplePair:
    if "expect" not in raw and "raises" not in raw:
        raise ConfigurationError(f"{where}: example needs expect or raises")
    if "expect" in raw and "raises" in raw:
        raise ConfigurationError(f"{where}: example cannot have both expect and raises")
    kwargs = raw.get("kwargs", {})
    if not isinstance(kwargs, Mapping):
        raise ConfigurationError(f"{where}: kwargs must be a mapping")
    return ExamplePair(
        args=tuple(raw.get("args", ())),
        kwargs=tuple(sorted(kwargs.items())),
        expect=raw.get("expect"),
        raises=raw.get("raises"),
        has_expect="expect" in raw,
    )


def load_manifest(path: str | Path) -> InterfaceManifest:
    """Read a manifest document (YAML or JSON; JSON is a YAML subset)."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"manifest file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"manifest {path} is not parseable: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigurationError(f"manifest {path} must be a mapping")
    version = doc.get("schema_version", 1)
    if version != 1:
        raise ConfigurationError(f"unsupported manifest schema_version {version}")
    raw_units = doc.get("units")
    if not isinstance(raw_units, list) or not raw_units:
        raise ConfigurationError(f"manifest {path} declares no units")
    entries: list[CallableEntry] = []
    for raw_unit in raw_units:
        unit = raw_unit.get("unit", "")
        module = raw_unit.get("module", "")
        total = raw_unit.get("total_statements")
        for raw_callable in raw_unit.get("callables", ()):
            name = raw_callable.get("name", "")
            where = f"{unit}:{name or '?'}"
            raw_examples = raw_callable.get("examples", ())
            try:
                entries.append(
                    CallableEntry(
                        unit=unit,
                        module=module,
                        callable=name,
                        params=tuple(
                            ParamSpec(name=p["name"], kind=p.get("kind", "any"))
                            for p in raw_callable.get("params", ())
                        ),
                        examples=tuple(_load_example(e, where) for e in raw_examples),
                        mocks=tuple(raw_callable.get("mocks", ())),
                        statements=tuple(raw_callable.get("statements", ())),
                        unit_total_statements=total,
                    )
                )
            except ValidationError as exc:
                raise ConfigurationError(f"manifest {path}: {exc}") from exc
    if not entries:
        raise ConfigurationError(f"manifest {path} has units but no callables")
    return InterfaceManifest(entries=tuple(entries), project=doc.get("project", ""))


@dataclass(frozen=True)
class GenerationRequest:
    """What the orchestrator or review agent asks a backend to do."""

    iteration: int
    budget: int
    targets: tuple[str, ...] = ()
    exclude_ids: frozenset[str] = frozenset()
    coverage_gaps: tuple[tuple[str, tuple[int, ...]], ...] = ()
    retrieved_context: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iteration < 1:
            raise ValidationError("iteration must be >= 1")
        if self.budget < 1:
            raise ValidationError("generation budget must be >= 1")


@dataclass(frozen=True, slots=True)
class QuarantinedCandidate:
    text: str
    reason: str


@dataclass(frozen=True)
class GenerationResult:
    tests: tuple[TestCase, ...]
    quarantined: tuple[QuarantinedCandidate, ...] = ()
    deduplicated: int = 0


def _render_value(value: Any) -> str:
    return repr(value)


def _load_template(template_path: str | Path | None) -> Template:
    if template_path is not None:
        text = Path(template_path).read_text(encoding="utf-8")
    else:
        text = (
            resources.files("ata")
            .joinpath("data/templates/python_aaa.tmpl")
            .read_text("utf-8")
        )
    return Template(text)


def render_test(
    entry: CallableEntry,
    example: ExamplePair,
    ordinal: int,
    template: Template | None = None,
) -> str:
    """Render one arrange/act/assert test for an example pair.

    Injective over distinct (entry, example) inputs: the arrange section
    spells out every argument and expectation, so different pairs cannot
    collapse to the same source text.
    """
    template = template or _load_template(None)
    arrange: list[str] = []
    call_args: list[str] = []
    for position, value in enumerate(example.args):
        name = (
            entry.params[position].name
            if position < len(entry.params)
            else f"arg_{position}"
        )
        arrange.append(f"    {name} = {_render_value(value)}")
        call_args.append(name)
    for key, value in example.kwargs:
        arrange.append(f"    kw_{key} = {_render_value(value)}")
        call_args.append(f"{key}=kw_{key}")
    invocation = f"{entry.callable}({', '.join(call_args)})"

    if example.raises is not None:
        arrange.append(f"    expected_error = {example.raises}")
        act = (
            "    try:\n"
            f"        outcome = {invocation}\n"
            "        raised = None\n"
            "    except Exception as exc:\n"
            "        raised = exc"
        )
        assert_block = (
            "    assert isinstance(raised, expected_error), (\n"
            f"        f\"expected {example.raises}, got {{raised!r}}\"\n"
            "    )"
        )
    else:
        arrange.append(f"    expected = {_render_value(example.expect)}")
        act = f"    result = {invocation}"
        assert_block = (
            "    assert result == expected, (\n"
            f"        f\"{entry.callable}: expected {{expected!r}}, got {{result!r}}\"\n"
            "    )"
        )
    if not arrange:
        arrange.append("    pass  # no arguments to arrange")

    return template.substitute(
        title=f"exercise {entry.unit}::{entry.callable}, example {ordinal}",
        imports=f"from {entry.module} import {entry.callable}",
        test_name=f"test_{entry.callable}_{ordinal}",
        arrange="\n".join(arrange),
        act=act,
        assert_block=assert_block,
    )


def annotate_metadata(test: TestCase, **fields: Any) -> TestCase:
    """Replace advisory metadata fields. The id never changes; annotation is
    idempotent because metadata is not part of the content hash."""
    allowed = {
        "target_module",
        "mock_dependencies",
        "coverage_estimate",
        "origin_agent",
        "rationale",
        "timestamp",
        "iteration_created",
    }
    unknown = set(fields) - allowed
    if unknown:
        raise ValidationError(f"unknown metadata fields: {sorted(unknown)}")
    return test.with_metadata(replace(test.metadata, **fields))


Clock = Callable[[], str]


def _utc_now() -> str:
    import datetime

    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class TemplateBackend:
    """Deterministic candidate generation from manifest examples."""

    name = "generation-template"

    def __init__(
        self,
        manifest: InterfaceManifest,
        template_path: str | Path | None = None,
        clock: Clock = _utc_now,
    ):
        self.manifest = manifest
        self._template = _load_template(template_path)
        self._clock = clock

    def _candidates_for_unit(self, unit: str, iteration: int) -> list[TestCase]:
        out: list[TestCase] = []
        for entry in self.manifest.entries_for(unit):
            for ordinal, example in enumerate(entry.examples, start=1):
                source = render_test(entry, example, ordinal, self._template)
                metadata = TestMetadata(
                    target_module=entry.unit,
                    origin_agent=self.name,
                    rationale=(
                        f"rendered from manifest example {ordinal} "
                        f"of {entry.module}.{entry.callable}"
                    ),
                    timestamp=self._clock(),
                    iteration_created=iteration,
                    mock_dependencies=entry.mocks,
                    coverage_estimate=entry.coverage_estimate(),
                )
                out.append(TestCase.create(source, metadata))
        return out

    def _ordered_units(self, targets: Sequence[str]) -> list[str]:
        manifest_units = list(self.manifest.units())
        ordered = [u for u in targets if u in manifest_units]
        ordered.extend(u for u in manifest_units if u not in ordered)
        return ordered

    def generate(self, request: GenerationRequest) -> GenerationResult:
        if not self.manifest.entries:
            raise ValidationError("cannot generate from an empty manifest")
        picked: list[TestCase] = []
        picked_ids: set[str] = set()
        deduplicated = 0
        for unit in self._ordered_units(request.targets):
            for candidate in self._candidates_for_unit(unit, request.iteration):
                if len(picked) >= request.budget:
                    break
                if candidate.id in request.exclude_ids:
                    continue
                if candidate.id in picked_ids:
                    deduplicated += 1
                    continue
                picked.append(candidate)
                picked_ids.add(candidate.id)
            if len(picked) >= request.budget:
                break
        return GenerationResult(tests=tuple(picked), deduplicated=deduplicated)

    def fresh_for_unit(self, unit: str, request: GenerationRequest) -> GenerationResult:
        """One fresh candidate for a unit, skipping excluded ids."""
        for candidate in self._candidates_for_unit(unit, request.iteration):
            if candidate.id not in request.exclude_ids:
                return GenerationResult(tests=(candidate,))
        return GenerationResult(tests=())

    def repair(
        self,
        test: TestCase,
        record: FailureRecord,
        action: Any,
        request: GenerationRequest,
    ) -> GenerationResult:
        """Re-render from the manifest's correct examples.

        Patch: a test that already matches its manifest rendering comes back
        unchanged (the manifest is ground truth; nothing to fix in the test),
        otherwise the first non-excluded rendering for the unit replaces it.
        Regenerate: a structurally different rendering replaces the test.
        """
        candidates = self._candidates_for_unit(
            test.metadata.target_module, request.iteration
        )
        regenerate = str(getattr(action, "value", action)) == "Regenerate"
        if not regenerate:
            for candidate in candidates:
                if candidate.id == test.id:
                    return GenerationResult(tests=(test,))
        for candidate in candidates:
            if candidate.id not in request.exclude_ids and candidate.id != test.id:
                return GenerationResult(tests=(candidate,))
        return GenerationResult(tests=())


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str = "default"
    temperature: float = 0.0
    timeout_s: float = 30.0
    max_retries: int = 2
    retry_backoff_s: float = 0.5

    def __post_init__(self) -> None:
        if not self.url:
            raise ValidationError("endpoint url must be non-empty")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")


_FENCE = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.DOTALL)


def _extract_candidates(content: str) -> list[str]:
    blocks = [m.group(1) for m in _FENCE.finditer(content)]
    if blocks:
        return blocks
    return [content]


class RemoteBackend:
    """Chat-completion-style HTTP drafting with strict candidate hygiene.

    The request body is {model, messages, temperature, seed}; the reply is
    read from choices[0].message.content, with candidates taken from fenced
    code blocks (or the whole content when unfenced). The bearer credential
    comes from the ATA_LLM_API_KEY environment variable only; configuration
    files never carry secrets.
    """

    name = "generation-remote"

    def __init__(
        self,
        endpoint: EndpointConfig,
        manifest: InterfaceManifest | None = None,
        transport: httpx.BaseTransport | None = None,
        clock: Clock = _utc_now,
        sleeper: Callable[[float], None] | None = None,
    ):
        self.endpoint = endpoint
        self.manifest = manifest
        self._transport = transport
        self._clock = clock
        self._sleeper = sleeper

    def _credential(self) -> str:
        token = os.environ.get(CREDENTIAL_ENV_VAR, "")
        if not token:
            raise ConfigurationError(
                f"remote generation needs the {CREDENTIAL_ENV_VAR} environment variable"
            )
        return token

    def _prompt(self, request: GenerationRequest, task: str) -> list[dict]:
        gap_lines = [
            f"{unit}: uncovered statements {list(ids)}"
            for unit, ids in request.coverage_gaps
        ]
        manifest_lines: list[str] = []
        if self.manifest is not None:
            for unit in request.targets or self.manifest.units():
                for entry in self.manifest.entries_for(unit):
                    manifest_lines.append(
                        f"{entry.module}.{entry.callable}"
                        f"({', '.join(p.name for p in entry.params)})"
                    )
        user = "\n".join(
            [
                task,
                "Write pytest functions, one per fenced code block, each with",
                "arrange, act and assert sections.",
                "Interfaces under test:",
                *manifest_lines,
                "Coverage gaps:",
                *gap_lines,
                "Relevant history:",
                *request.retrieved_context,
            ]
        )
        return [
            {"role": "system", "content": "You generate minimal, deterministic unit tests."},
            {"role": "user", "content": user},
        ]

    def _post(self, messages: list[dict], seed: int) -> str:
        token = self._credential()
        body = {
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": self.endpoint.temperature,
            "seed": seed,
        }
        headers = {"Authorization": f"Bearer {token}"}
        last_error: Exception | None = None
        attempts = self.endpoint.max_retries + 1
        for attempt in range(attempts):
            try:
                with httpx.Client(
                    transport=self._transport, timeout=self.endpoint.timeout_s
                ) as client:
                    response = client.post(self.endpoint.url, json=body, headers=headers)
                response.raise_for_status()
                payload = response.json()
                return payload["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                if attempt + 1 < attempts and self._sleeper is not None:
                    self._sleeper(self.endpoint.retry_backoff_s * (attempt + 1))
        raise BackendError(
            f"remote generation failed after {attempts} attempts: {last_error}"
        )

    def _sanitize(
        self, raw_candidates: list[str], request: GenerationRequest, rationale: str
    ) -> GenerationResult:
        tests: list[TestCase] = []
        seen: set[str] = set()
        quarantined: list[QuarantinedCandidate] = []
        deduplicated = 0
        target = request.targets[0] if request.targets else "unknown"
        for raw in raw_candidates:
            text = raw.strip("\n")
            if not text.strip():
                quarantined.append(QuarantinedCandidate(text=raw, reason="empty candidate"))
                continue
            try:
                tree = ast.parse(text)
            except SyntaxError as exc:
                quarantined.append(
                    QuarantinedCandidate(text=raw, reason=f"does not parse: {exc.msg}")
                )
                continue
            has_test = any(
                isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef))
                and node.name.startswith("test")
                for node in ast.walk(tree)
            )
            if not has_test:
                quarantined.append(
                    QuarantinedCandidate(text=raw, reason="no test function defined")
                )
                continue
            if not text.endswith("\n"):
                text += "\n"
            case = TestCase.create(
                text,
                TestMetadata(
                    target_module=target,
                    origin_agent=self.name,
                    rationale=rationale,
                    timestamp=self._clock(),
                    iteration_created=request.iteration,
                ),
            )
            if case.id in seen or case.id in request.exclude_ids:
                deduplicated += 1
                continue
            seen.add(case.id)
            tests.append(case)
        return GenerationResult(
            tests=tuple(tests[: request.budget]),
            quarantined=tuple(quarantined),
            deduplicated=deduplicated,
        )

    def generate(self, request: GenerationRequest) -> GenerationResult:
        content = self._post(
            self._prompt(request, "Generate new unit tests for the targets below."),
            request.seed,
        )
        return self._sanitize(
            _extract_candidates(content),
            request,
            rationale="drafted by remote endpoint for coverage targets",
        )

    def fresh_for_unit(self, unit: str, request: GenerationRequest) -> GenerationResult:
        scoped = replace(request, targets=(unit,))
        content = self._post(
            self._prompt(scoped, f"Generate one new test for {unit}."),
            request.seed,
        )
        return self._sanitize(
            _extract_candidates(content),
            scoped,
            rationale=f"fresh draft for {unit}",
        )

    def repair(
        self,
        test: TestCase,
        record: FailureRecord,
        action: Any,
        request: GenerationRequest,
    ) -> GenerationResult:
        verb = str(getattr(action, "value", action))
        if verb == "Regenerate":
            task = (
                "Write a structurally new replacement for this repeatedly "
                f"failing test.\nFailure class: {record.failure_class.value}\n"
                f"Signal: {record.signal.message}\nOld test:\n{test.source_text}"
            )
        else:
            task = (
                f"Repair this failing test.\nFailure class: {record.failure_class.value}\n"
                f"Hypothesis: {record.hypothesis}\nSignal: {record.signal.message}\n"
                f"Test:\n{test.source_text}"
            )
        scoped = replace(request, targets=(test.metadata.target_module,))
        content = self._post(self._prompt(scoped, task), request.seed)
        return self._sanitize(
            _extract_candidates(content),
            scoped,
            rationale=f"{verb.lower()} after {record.failure_class.value} failure",
        )
