"""Manifest loading, template rendering, and both generation backends."""

import json

import httpx
import pytest

from ata.errors import BackendError, ConfigurationError, ValidationError
from ata.generation import (
    CREDENTIAL_ENV_VAR,
    CallableEntry,
    EndpointConfig,
    ExamplePair,
    GenerationRequest,
    InterfaceManifest,
    ParamSpec,
    RemoteBackend,
    TemplateBackend,
    annotate_metadata,
    load_manifest,
    render_test,
)
from ata.model import FailureClass, FailureRecord, FailureSignal, TestStatus
from ata.review import RepairAction

from conftest import make_test


MANIFEST_TEXT = """
schema_version: 1
project: demo
units:
  - unit: textkit
    module: textkit
    total_statements: 10
    callables:
      - name: slugify
        params: [{name: raw}]
        statements: [1, 2, 3, 4]
        examples:
          - {args: ["Hello World"], expect: "hello-world"}
          - {args: [""], expect: ""}
      - name: truncate
        params: [{name: raw}, {name: limit}]
        examples:
          - {args: ["abcdef", 3], expect: "abc"}
          - {args: ["abc", -1], raises: ValueError}
  - unit: mathkit
    module: mathkit
    callables:
      - name: mean
        params: [{name: values}]
        examples:
          - {args: [[1, 2, 3]], expect: 2.0}
"""


@pytest.fixture
def manifest(tmp_path):
    path = tmp_path / "manifest.yaml"
    path.write_text(MANIFEST_TEXT)
    return load_manifest(path)


# ---------------------------------------------------------------- manifest

def test_manifest_loads_units_in_declaration_order(manifest):
    assert manifest.units() == ("textkit", "mathkit")
    assert len(manifest.entries_for("textkit")) == 2


def test_manifest_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigurationError):
        load_manifest(tmp_path / "absent.yaml")


def test_manifest_example_needs_expect_or_raises(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(
        "schema_version: 1\nunits:\n  - unit: u\n    module: u\n    callables:\n"
        "      - name: f\n        examples:\n          - {args: [1]}\n"
    )
    with pytest.raises(ConfigurationError):
        load_manifest(path)


def test_manifest_example_cannot_have_both(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(
        "schema_version: 1\nunits:\n  - unit: u\n    module: u\n    callables:\n"
        "      - name: f\n        examples:\n"
        "          - {args: [1], expect: 2, raises: ValueError}\n"
    )
    with pytest.raises(ConfigurationError):
        load_manifest(path)


def test_manifest_rejects_unknown_schema_version(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("schema_version: 9\nunits: []\n")
    with pytest.raises(ConfigurationError):
        load_manifest(path)


def test_manifest_rejects_undeclared_kwarg():
    with pytest.raises(ValidationError):
        CallableEntry(
            unit="u",
            module="u",
            callable="f",
            params=(ParamSpec("x"),),
            examples=(ExamplePair(kwargs=(("y", 1),), expect=2),),
        )


def test_expect_none_is_a_real_expectation():
    pair = ExamplePair(args=(1,), expect=None)
    assert pair.has_expect
    with pytest.raises(ValidationError):
        ExamplePair(args=(1,), raises="ValueError", has_expect=True)


def test_coverage_estimate_from_statement_span(manifest):
    slugify = manifest.entries_for("textkit")[0]
    assert slugify.coverage_estimate() == pytest.approx(0.4)
    mean = manifest.entries_for("mathkit")[0]
    assert mean.coverage_estimate() == 0.0  # no span data


# --------------------------------------------------------------- rendering

def test_rendered_test_has_arrange_act_assert(manifest):
    entry = manifest.entries_for("textkit")[0]
    source = render_test(entry, entry.examples[0], 1)
    assert "raw = 'Hello World'" in source
    assert "result = slugify(raw)" in source
    assert "assert result == expected" in source
    compile(source, "<candidate>", "exec")  # must be valid python


def test_rendered_raises_test_asserts_the_exception(manifest):
    entry = manifest.entries_for("textkit")[1]
    source = render_test(entry, entry.examples[1], 2)
    assert "expected_error = ValueError" in source
    assert "isinstance(raised, expected_error)" in source
    compile(source, "<candidate>", "exec")


def test_rendering_is_injective_over_examples(manifest):
    sources = set()
    for entry in manifest.entries:
        for ordinal, example in enumerate(entry.examples, start=1):
            sources.add(render_test(entry, example, ordinal))
    assert len(sources) == 5  # one distinct body per (entry, example)


def test_rendering_is_deterministic(manifest):
    entry = manifest.entries_for("mathkit")[0]
    assert render_test(entry, entry.examples[0], 1) == render_test(
        entry, entry.examples[0], 1
    )


# ------------------------------------------------------------- annotations

def test_annotate_keeps_the_id():
    case = make_test()
    updated = annotate_metadata(case, rationale="re-reviewed", coverage_estimate=0.5)
    assert updated.id == case.id
    assert updated.metadata.rationale == "re-reviewed"


def test_annotate_is_idempotent():
    case = make_test()
    once = annotate_metadata(case, rationale="same note")
    twice = annotate_metadata(once, rationale="same note")
    assert once == twice


def test_annotate_rejects_unknown_fields():
    with pytest.raises(ValidationError):
        annotate_metadata(make_test(), color="blue")


# --------------------------------------------------------- template backend

def _clock():
    return "2026-08-19T00:00:00+00:00"


def test_template_backend_respects_budget(manifest):
    backend = TemplateBackend(manifest, clock=_clock)
    result = backend.generate(GenerationRequest(iteration=1, budget=2))
    assert len(result.tests) == 2
    assert result.quarantined == ()


def test_template_backend_orders_by_requested_targets(manifest):
    backend = TemplateBackend(manifest, clock=_clock)
    result = backend.generate(
        GenerationRequest(iteration=1, budget=3, targets=("mathkit",))
    )
    assert result.tests[0].metadata.target_module == "mathkit"


def test_template_backend_skips_excluded_ids(manifest):
    backend = TemplateBackend(manifest, clock=_clock)
    first = backend.generate(GenerationRequest(iteration=1, budget=5))
    excluded = frozenset(t.id for t in first.tests[:2])
    again = backend.generate(
        GenerationRequest(iteration=1, budget=5, exclude_ids=excluded)
    )
    assert excluded.isdisjoint(t.id for t in again.tests)


def test_template_backend_populates_provenance(manifest):
    backend = TemplateBackend(manifest, clock=_clock)
    result = backend.generate(GenerationRequest(iteration=2, budget=1))
    meta = result.tests[0].metadata
    assert meta.origin_agent == "generation-template"
    assert meta.rationale
    assert meta.timestamp == _clock()
    assert meta.iteration_created == 2
    assert result.tests[0].status is TestStatus.FRESH


def test_template_fresh_for_unit_skips_exclusions(manifest):
    backend = TemplateBackend(manifest, clock=_clock)
    all_math = backend.generate(
        GenerationRequest(iteration=1, budget=9, targets=("mathkit",))
    )
    math_ids = frozenset(
        t.id for t in all_math.tests if t.metadata.target_module == "mathkit"
    )
    result = backend.fresh_for_unit(
        "mathkit", GenerationRequest(iteration=1, budget=1, exclude_ids=math_ids)
    )
    assert result.tests == ()  # the single mathkit example is excluded


def _failure_record(test_id):
    return FailureRecord(
        test_id=test_id,
        failure_class=FailureClass.LOGIC_ASSERTION,
        signal=FailureSignal(message="AssertionError: expected 1, got 2", location="x:1"),
        hypothesis="",
        repeat_count=1,
    )


def test_template_patch_keeps_a_manifest_true_test(manifest):
    backend = TemplateBackend(manifest, clock=_clock)
    case = backend.generate(GenerationRequest(iteration=1, budget=1)).tests[0]
    result = backend.repair(
        case,
        _failure_record(case.id),
        RepairAction.PATCH,
        GenerationRequest(iteration=2, budget=1),
    )
    assert result.tests == (case,)


def test_template_patch_replaces_a_drifted_test(manifest):
    backend = TemplateBackend(manifest, clock=_clock)
    drifted = make_test(
        "def test_slugify_drifted():\n    assert slugify('x') == 'y'\n",
        target_module="textkit",
    )
    result = backend.repair(
        drifted,
        _failure_record(drifted.id),
        RepairAction.PATCH,
        GenerationRequest(iteration=2, budget=1),
    )
    assert result.tests and result.tests[0].id != drifted.id


def test_template_regenerate_returns_a_different_body(manifest):
    backend = TemplateBackend(manifest, clock=_clock)
    case = backend.generate(
        GenerationRequest(iteration=1, budget=1, targets=("textkit",))
    ).tests[0]
    result = backend.repair(
        case,
        _failure_record(case.id),
        RepairAction.REGENERATE,
        GenerationRequest(iteration=2, budget=1),
    )
    assert result.tests and result.tests[0].id != case.id


def test_generation_request_validates_bounds():
    with pytest.raises(ValidationError):
        GenerationRequest(iteration=0, budget=1)
    with pytest.raises(ValidationError):
        GenerationRequest(iteration=1, budget=0)


# ----------------------------------------------------------- remote backend

GOOD_CONTENT = """Here are the tests:

```python
def test_alpha():
    assert slugify("A B") == "a-b"
```

```python
def test_beta():
    assert slugify("") == ""
```
"""


def _chat_response(content):
    return httpx.Response(
        200, json={"choices": [{"message": {"content": content}}]}
    )


def _endpoint():
    return EndpointConfig(url="https://llm.internal/v1/chat", max_retries=1)


def test_remote_backend_drafts_from_fenced_blocks(monkeypatch):
    monkeypatch.setenv(CREDENTIAL_ENV_VAR, "token-123")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _chat_response(GOOD_CONTENT)

    backend = RemoteBackend(
        _endpoint(), transport=httpx.MockTransport(handler), clock=_clock
    )
    result = backend.generate(GenerationRequest(iteration=1, budget=5, seed=9))
    assert len(result.tests) == 2
    assert seen["auth"] == "Bearer token-123"
    assert seen["body"]["seed"] == 9
    assert all(t.metadata.origin_agent == "generation-remote" for t in result.tests)


def test_remote_backend_quarantines_unparseable_candidates(monkeypatch):
    monkeypatch.setenv(CREDENTIAL_ENV_VAR, "t")
    content = "```python\ndef test_broken(:\n    pass\n```\n```python\nx = 1\n```"
    backend = RemoteBackend(
        _endpoint(),
        transport=httpx.MockTransport(lambda r: _chat_response(content)),
        clock=_clock,
    )
    result = backend.generate(GenerationRequest(iteration=1, budget=5))
    assert result.tests == ()
    reasons = [q.reason for q in result.quarantined]
    assert any("parse" in reason for reason in reasons)
    assert any("no test function" in reason for reason in reasons)


def test_remote_backend_deduplicates_identical_candidates(monkeypatch):
    monkeypatch.setenv(CREDENTIAL_ENV_VAR, "t")
    block = "```python\ndef test_same():\n    assert True\n```\n"
    backend = RemoteBackend(
        _endpoint(),
        transport=httpx.MockTransport(lambda r: _chat_response(block * 3)),
        clock=_clock,
    )
    result = backend.generate(GenerationRequest(iteration=1, budget=5))
    assert len(result.tests) == 1
    assert result.deduplicated == 2


def test_remote_backend_needs_the_credential_env_var(monkeypatch):
    monkeypatch.delenv(CREDENTIAL_ENV_VAR, raising=False)
    backend = RemoteBackend(
        _endpoint(), transport=httpx.MockTransport(lambda r: _chat_response("x"))
    )
    with pytest.raises(ConfigurationError):
        backend.generate(GenerationRequest(iteration=1, budget=1))


def test_remote_backend_retries_then_fails(monkeypatch):
    monkeypatch.setenv(CREDENTIAL_ENV_VAR, "t")
    calls = {"n": 0}
    naps = []

    def handler(request):
        calls["n"] += 1
        return httpx.Response(500, json={"error": "overloaded"})

    backend = RemoteBackend(
        EndpointConfig(url="https://llm.internal/v1/chat", max_retries=2),
        transport=httpx.MockTransport(handler),
        sleeper=naps.append,
    )
    with pytest.raises(BackendError):
        backend.generate(GenerationRequest(iteration=1, budget=1))
    assert calls["n"] == 3
    assert naps == [0.5, 1.0]  # linear backoff between attempts


def test_remote_backend_recovers_on_retry(monkeypatch):
    monkeypatch.setenv(CREDENTIAL_ENV_VAR, "t")
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] == 1:
            return httpx.Response(503)
        return _chat_response(GOOD_CONTENT)

    backend = RemoteBackend(
        _endpoint(), transport=httpx.MockTransport(handler), clock=_clock, sleeper=lambda s: None
    )
    result = backend.generate(GenerationRequest(iteration=1, budget=5))
    assert len(result.tests) == 2


def test_remote_repair_prompt_carries_the_failure(monkeypatch):
    monkeypatch.setenv(CREDENTIAL_ENV_VAR, "t")
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return _chat_response("```python\ndef test_fixed():\n    assert True\n```")

    backend = RemoteBackend(
        _endpoint(), transport=httpx.MockTransport(handler), clock=_clock
    )
    case = make_test()
    result = backend.repair(
        case,
        _failure_record(case.id),
        RepairAction.PATCH,
        GenerationRequest(iteration=2, budget=1),
    )
    assert len(result.tests) == 1
    prompt = bodies[0]["messages"][1]["content"]
    assert "AssertionError: expected 1, got 2" in prompt
    assert case.source_text in prompt


def test_endpoint_config_validates():
    with pytest.raises(ValidationError):
        EndpointConfig(url="")
    with pytest.raises(ValidationError):
        EndpointConfig(url="https://x", max_retries=-1)


def test_manifest_unresolved_units(tmp_path, manifest):
    (tmp_path / "textkit").mkdir()
    assert manifest.unresolved_units(tmp_path) == ["mathkit"]
