"""Configuration loading and the command line surface, exit codes included."""

import json

import pytest
import yaml

from ata.config import RunConfig, load_config
from ata.errors import ConfigurationError
from ata.memory import RunArchive
from ata.model import IterationCounts, IterationMetrics
from ata.cli import (
    EXIT_CONFIG,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_OPERATIONAL,
    EXIT_SANDBOX,
    main,
)


def scenario_path(name):
    from importlib import resources

    return resources.files("ata.data.scenarios") / f"{name}.yaml"


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


def synthetic_config(tmp_path, scenario="full-repair", run_id="cli-run", **overrides):
    doc = {
        "schema_version": 1,
        "run_id": run_id,
        "generator": "synthetic",
        "scenario": str(scenario_path(scenario)),
        "store_root": str(tmp_path / "store"),
        "seed": 7,
    }
    doc.update(overrides)
    return write_yaml(tmp_path / "run.yaml", doc)


# ---------------------------------------------------------------------------
# configuration loading


def test_minimal_synthetic_config_gets_every_default(tmp_path):
    config = load_config(synthetic_config(tmp_path))
    assert config.generator == "synthetic"
    assert config.policy.coverage_threshold == 0.95
    assert config.policy.failure_threshold == 0.02
    assert config.policy.max_iterations == 8
    assert config.policy.runtime_budget_s is None
    assert (config.weights.alpha, config.weights.beta) == (0.7, 0.3)
    assert (config.memory_window, config.memory_capacity, config.memory_dimensions) == (
        4,
        512,
        256,
    )
    assert config.initial_budget is None  # backend decides
    assert config.augment_budget == 4
    assert config.sandbox is None and config.endpoint is None


def test_relative_paths_resolve_against_the_config_directory(tmp_path):
    nested = tmp_path / "ci"
    nested.mkdir()
    scenario = nested / "scen.yaml"
    scenario.write_text(scenario_path("no-repair").read_text(), encoding="utf-8")
    config = load_config(
        write_yaml(
            nested / "run.yaml",
            {"generator": "synthetic", "scenario": "scen.yaml", "store_root": "out"},
        )
    )
    assert config.scenario == scenario
    assert config.store_root == nested / "out"


def test_store_root_defaults_next_to_the_config(tmp_path):
    path = synthetic_config(tmp_path)
    doc = yaml.safe_load(path.read_text())
    del doc["store_root"]
    config = load_config(write_yaml(path, doc))
    assert config.store_root == tmp_path / "ata-store"


def test_every_problem_is_reported_in_one_pass(tmp_path):
    path = write_yaml(
        tmp_path / "bad.yaml",
        {
            "generator": "quantum",
            "surprise": True,
            "policy": {"coverage_threshold": 2.0},
            "memory": {"window": 0},
            "seed": "seven",
        },
    )
    with pytest.raises(ConfigurationError) as exc:
        load_config(path)
    text = str(exc.value)
    assert len(exc.value.problems) >= 5
    assert "generator must be one of" in text
    assert "unknown keys ['surprise']" in text
    assert "coverage_threshold" in text
    assert "memory.window must be >= 1" in text
    assert "config.seed must be an integer" in text


def test_template_generator_demands_project_manifest_and_sandbox(tmp_path):
    with pytest.raises(ConfigurationError) as exc:
        load_config(write_yaml(tmp_path / "t.yaml", {"generator": "template"}))
    text = str(exc.value)
    assert "project is required" in text
    assert "manifest is required" in text
    assert "sandbox.command is required" in text


def test_remote_generator_demands_an_endpoint_url(tmp_path):
    with pytest.raises(ConfigurationError) as exc:
        load_config(write_yaml(tmp_path / "r.yaml", {"generator": "remote"}))
    assert any("remote.url" in p for p in exc.value.problems)


def test_missing_scenario_file_is_a_config_problem(tmp_path):
    path = synthetic_config(tmp_path, scenario="full-repair")
    doc = yaml.safe_load(path.read_text())
    doc["scenario"] = str(tmp_path / "gone.yaml")
    with pytest.raises(ConfigurationError) as exc:
        load_config(write_yaml(path, doc))
    assert any("does not exist" in p for p in exc.value.problems)


def test_run_id_with_a_slash_is_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(synthetic_config(tmp_path, run_id="a/b"))


def test_unparseable_and_non_mapping_documents_are_config_errors(tmp_path):
    broken = tmp_path / "broken.yaml"
    broken.write_text("policy: {coverage_threshold: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(broken)
    with pytest.raises(ConfigurationError):
        load_config(write_yaml(tmp_path / "list.yaml", [1, 2]))
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.yaml")


def test_risk_map_file_loads_into_the_config(tmp_path):
    risk = write_yaml(tmp_path / "risk.yaml", {"core": 0.8, "io": 0.3})
    config = load_config(synthetic_config(tmp_path, risk_map=str(risk)))
    assert config.risk_map == {"core": 0.8, "io": 0.3}


def test_normalized_document_reloads_to_the_same_settings(tmp_path):
    original = load_config(synthetic_config(tmp_path, seed=42))
    reloaded = load_config(write_yaml(tmp_path / "normalized.yaml", original.to_dict()))
    assert reloaded == original


def test_explicit_loop_budgets_are_honored(tmp_path):
    config = load_config(
        synthetic_config(tmp_path, loop={"initial_budget": 3, "augment_budget": 0})
    )
    assert config.initial_budget == 3
    assert config.augment_budget == 0


# ---------------------------------------------------------------------------
# ata run


def test_run_that_converges_exits_zero(tmp_path, capsys):
    assert main(["run", "--config", str(synthetic_config(tmp_path))]) == EXIT_OK
    out = capsys.readouterr().out
    assert "run cli-run: Converged after 2 iteration(s)" in out
    assert "failure rate -100.0%" in out
    assert "agent invocations: execution=2, generation=4, review=4" in out


def test_run_that_exhausts_exits_two(tmp_path, capsys):
    code = main(["run", "--config", str(synthetic_config(tmp_path, scenario="no-repair"))])
    assert code == EXIT_NOT_CONVERGED
    assert "Exhausted after 8 iteration(s)" in capsys.readouterr().out


def test_run_with_a_bad_config_exits_three(tmp_path, capsys):
    path = write_yaml(tmp_path / "bad.yaml", {"generator": "quantum"})
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.count("config error:") == len(
        ["generator must be one of", "scenario is required"]
    )


def test_run_archives_everything_a_report_needs(tmp_path, capsys):
    main(["run", "--config", str(synthetic_config(tmp_path))])
    capsys.readouterr()
    store = tmp_path / "store"
    assert (store / "runs" / "cli-run" / "trace.ndjson").exists()
    assert (store / "runs" / "cli-run" / "config.json").exists()
    code = main(["report", "--run", "cli-run", "--store", str(store)])
    assert code == EXIT_OK
    assert "Converged after 2 iteration(s)" in capsys.readouterr().out


def test_broken_sandbox_exits_four(tmp_path, capsys):
    project = tmp_path / "proj"
    project.mkdir()
    manifest = write_yaml(
        tmp_path / "manifest.yaml",
        {
            "schema_version": 1,
            "project": "demo",
            "units": [
                {
                    "unit": "textkit",
                    "module": "textkit",
                    "callables": [
                        {
                            "name": "slugify",
                            "params": [{"name": "raw"}],
                            "examples": [{"args": ["Hello"], "expect": "hello"}],
                        }
                    ],
                }
            ],
        },
    )
    config = write_yaml(
        tmp_path / "run.yaml",
        {
            "generator": "template",
            "project": str(project),
            "manifest": str(manifest),
            "store_root": str(tmp_path / "store"),
            "sandbox": {"command": ["/nonexistent/ata-runner"], "suite_timeout_s": 5},
        },
    )
    assert main(["run", "--config", str(config)]) == EXIT_SANDBOX
    captured = capsys.readouterr()
    assert "error (sandbox):" in captured.err


# ---------------------------------------------------------------------------
# ata simulate


def test_simulate_output_is_identical_across_invocations(tmp_path, capsys):
    argv = [
        "simulate",
        "--scenario",
        str(scenario_path("full-repair")),
        "--runs",
        "3",
        "--seed",
        "5",
    ]
    assert main(argv) == EXIT_OK
    first = capsys.readouterr().out
    assert main(argv) == EXIT_OK
    second = capsys.readouterr().out
    assert first == second
    doc = json.loads(first)
    assert doc["scenario"] == "full-repair"
    assert doc["runs"] == 3
    assert doc["convergence_rate"] == 1.0


# ---------------------------------------------------------------------------
# ata report


def test_report_json_is_machine_readable(tmp_path, capsys):
    main(["run", "--config", str(synthetic_config(tmp_path))])
    capsys.readouterr()
    code = main(
        ["report", "--run", "cli-run", "--store", str(tmp_path / "store"), "--format", "json"]
    )
    assert code == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["run_id"] == "cli-run"
    assert doc["termination_reason"] == "Converged"
    assert len(doc["iterations"]) == 2
    assert doc["improvement_pct"]["failure_rate"] == -100.0
    assert doc["improvement_pct"]["coverage"] == 0.0


def test_report_for_an_unknown_run_exits_one(tmp_path, capsys):
    code = main(["report", "--run", "ghost", "--store", str(tmp_path / "store")])
    assert code == EXIT_OPERATIONAL
    assert "error:" in capsys.readouterr().err


def test_report_renders_metrics_even_before_the_run_finishes(tmp_path, capsys):
    archive = RunArchive(tmp_path / "store", "open-run").create()
    archive.record_metrics(
        IterationMetrics(
            iteration=1,
            coverage=0.5,
            failure_rate=0.5,
            wall_time_s=1.0,
            counts=IterationCounts(
                total_tests=2, passing=1, failing=1, erroring=0, agent_invocations=3
            ),
        )
    )
    code = main(["report", "--run", "open-run", "--store", str(tmp_path / "store")])
    assert code == EXIT_OK
    assert "in progress after 1 iteration(s)" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# ata replay


def run_then_replay(tmp_path, capsys, iteration=1, tamper=None):
    main(["run", "--config", str(synthetic_config(tmp_path))])
    capsys.readouterr()
    store = tmp_path / "store"
    if tamper:
        tamper(store / "runs" / "cli-run" / "metrics.ndjson")
    code = main(
        ["replay", "--run", "cli-run", "--store", str(store), "--iteration", str(iteration)]
    )
    return code, capsys.readouterr()


def test_replay_reproduces_the_recorded_iteration(tmp_path, capsys):
    code, captured = run_then_replay(tmp_path, capsys, iteration=1)
    assert code == EXIT_OK
    doc = json.loads(captured.out)
    assert doc["match"] is True
    assert doc["iteration"] == 1
    assert doc["deltas"]["coverage"] == 0.0
    assert doc["deltas"]["failing"] == 0
    assert doc["recorded"]["failure_rate"] == 0.3


def test_replay_flags_an_archive_that_disagrees(tmp_path, capsys):
    def tamper(path):
        lines = path.read_text().splitlines()
        doc = json.loads(lines[0])
        doc["coverage"] = 0.5
        lines[0] = json.dumps(doc, sort_keys=True)
        path.write_text("\n".join(lines) + "\n")

    code, captured = run_then_replay(tmp_path, capsys, iteration=1, tamper=tamper)
    assert code == EXIT_NOT_CONVERGED
    doc = json.loads(captured.out)
    assert doc["match"] is False
    assert doc["deltas"]["coverage"] == 0.5


def test_replay_of_an_unknown_iteration_exits_one(tmp_path, capsys):
    code, captured = run_then_replay(tmp_path, capsys, iteration=9)
    assert code == EXIT_OPERATIONAL
    assert "error:" in captured.err


# ---------------------------------------------------------------------------
# ata validate and argument handling


def test_validate_accepts_a_good_config(tmp_path, capsys):
    path = synthetic_config(tmp_path)
    assert main(["validate", "--config", str(path)]) == EXIT_OK
    assert "is valid" in capsys.readouterr().out


def test_validate_rejects_a_bad_config_with_specifics(tmp_path, capsys):
    path = write_yaml(tmp_path / "bad.yaml", {"generator": "synthetic"})
    assert main(["validate", "--config", str(path)]) == EXIT_CONFIG
    assert "scenario is required" in capsys.readouterr().err


def test_the_cli_requires_a_subcommand():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
