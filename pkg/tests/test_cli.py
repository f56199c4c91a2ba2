"""Config ingestion, the run pipeline, exports, and the command line surface."""

from __future__ import annotations

import json
import pathlib
import shutil
import subprocess

import numpy as np
import pytest

from epigraph import cli
from epigraph.cli import (
    builtin_config,
    export_profile_csv,
    export_slice_csv,
    main,
    parse_config,
    resolve_grid,
    run,
    run_simulation,
    run_verification,
    serialize_config,
)
from epigraph.errors import (
    IncompatibleGrids,
    Interrupted,
    ParseError,
    SchemaViolation,
    UnknownKey,
)
from epigraph.fields import save_snapshot
from epigraph.solver import max_stable_dt, solve_shortfall


def config_text(name: str, directory: str, **tweaks) -> str:
    document = builtin_config(name, directory=directory)
    document.update(tweaks)
    return json.dumps(document)


def zero_config(directory) -> cli.RunConfig:
    return parse_config(config_text("zero", str(directory)))


@pytest.fixture(scope="module")
def zero_run(tmp_path_factory):
    """One completed zero-problem run shared by the read-only tests."""
    out = tmp_path_factory.mktemp("zero_run")
    config = zero_config(out)
    manifest = run(config)
    return config, out, manifest


# ---------------------------------------------------------------------------
# parsing and validation
# ---------------------------------------------------------------------------

def test_minimal_document_fills_defaults():
    config = parse_config(
        '{"problem": {"builtin": "zero"},'
        ' "grid": {"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],'
        '          "time_step": 0.005}}'
    )
    assert config.scheme.safety == 0.9
    assert config.scheme.delta == 0.0
    assert config.scheme.hedge == "spectral"
    assert config.epsilon is None
    assert config.outputs == {"directory": "out", "formats": ["csv"],
                              "checkpoint_every": 25}
    assert config.seed == 0
    assert config.threads == 1


def test_builtin_without_grid_uses_the_stock_grid():
    config = parse_config('{"problem": {"builtin": "jump-variance"}}')
    assert config.grid_spec == builtin_config("jump-variance")["grid"]


def test_inline_problem_still_requires_a_grid():
    with pytest.raises(SchemaViolation, match="grid"):
        parse_config('{"problem": {"horizon": 1.0}}')


def test_missing_horizon_names_the_path():
    with pytest.raises(SchemaViolation, match="problem.horizon"):
        parse_config('{"problem": {"dim_state": 1},'
                     ' "grid": {"state": [[-1, 1, 5]], "margin": [0, 1, 5]}}')


def test_unknown_top_level_key_suggests_grid():
    with pytest.raises(UnknownKey, match="grid"):
        parse_config('{"problem": {"builtin": "zero"}, "gird": {}}')


def test_unknown_scheme_key_suggests_safety():
    text = config_text("zero", "out", scheme={"safetyy": 1})
    with pytest.raises(UnknownKey, match="safety"):
        parse_config(text)


def test_parse_error_reports_position():
    with pytest.raises(ParseError, match="line 1"):
        parse_config('{"problem": }')


def test_non_object_document_rejected():
    with pytest.raises(SchemaViolation):
        parse_config("[1, 2, 3]")


def test_epsilon_must_be_positive():
    with pytest.raises(SchemaViolation, match="scheme.epsilon"):
        parse_config(config_text("zero", "out", scheme={"epsilon": -0.5}))


def test_grid_axis_triplet_validation():
    with pytest.raises(SchemaViolation, match=r"grid.state\[0\]"):
        parse_config(config_text("zero", "out",
                                 grid={"state": [[1.0, -1.0, 5]], "margin": [0, 1, 5]}))


def test_unknown_builtin_lists_catalog():
    with pytest.raises(SchemaViolation, match="deterministic-steering"):
        parse_config('{"problem": {"builtin": "steering"},'
                     ' "grid": {"state": [[-1, 1, 5]], "margin": [0, 1, 5]}}')


def test_inline_problem_round_trips():
    text = json.dumps({
        "problem": {"horizon": 0.5, "controls": [-1.0, 1.0], "drift": "control",
                    "terminal_cost": "square", "diffusion": 0.2,
                    "region": {"kind": "ball", "center": [0.0], "radius": 1.0},
                    "jumps": {"marks": [0.5], "weights": [1.0]}},
        "grid": {"state": [[-2.0, 2.0, 21]], "margin": [0.0, 1.0, 11],
                 "time_step": 0.01},
    })
    config = parse_config(text)
    assert config.problem.jumps.total_mass == 1.0
    assert config.problem.region.kind == "ball"
    again = parse_config(serialize_config(config))
    assert serialize_config(again) == serialize_config(config)


def test_builtin_round_trips():
    config = zero_config("out")
    assert serialize_config(parse_config(serialize_config(config))) == \
        serialize_config(config)


def test_builtin_scheme_defaults_apply_and_user_wins():
    jumpy = parse_config(config_text("jump-variance", "out"))
    assert (jumpy.scheme.hedge, jumpy.scheme.jump_hedge) == ("frozen", "zero")
    forced = parse_config(config_text("jump-variance", "out",
                                      scheme={"hedge": "spectral"}))
    assert forced.scheme.hedge == "spectral"
    assert forced.scheme.jump_hedge == "zero"  # untouched default survives


def test_resolve_grid_picks_a_stable_step():
    config = parse_config(config_text(
        "zero", "out",
        grid={"state": [[-3.0, 3.0, 101]], "margin": [0.0, 1.0, 101],
              "time_step": None}))
    grid = resolve_grid(config)
    assert grid.dt <= max_stable_dt(config.problem, grid, 0.9) * (1 + 1e-12)
    # and a pinned step is taken literally
    pinned = zero_config("out")
    assert resolve_grid(pinned).dt == pytest.approx(0.01)


# ---------------------------------------------------------------------------
# the run pipeline
# ---------------------------------------------------------------------------

def test_zero_run_profile_is_identically_zero(zero_run):
    _, out, manifest = zero_run
    table = np.loadtxt(out / "profile.csv", delimiter=",", skiprows=1)
    assert np.array_equal(table[:, 1], np.zeros(table.shape[0]))
    assert manifest["epsilon"] == pytest.approx(1e-3)


def test_run_writes_manifest_and_snapshots(zero_run):
    _, out, manifest = zero_run
    assert manifest["snapshot_levels"] == [0, 25, 50, 75, 100]
    for name, digest in manifest["artifacts"].items():
        assert (out / name).exists()
        assert len(digest) == 64
    assert not (out / "checkpoint.json").exists()
    stored = json.loads((out / "manifest.json").read_text())
    assert stored == manifest


def test_rerun_is_bit_identical(zero_run):
    config, out, _ = zero_run
    before = (out / "manifest.json").read_bytes()
    run(config)
    assert (out / "manifest.json").read_bytes() == before


def test_interrupted_run_resumes_to_identical_artifacts(zero_run, tmp_path,
                                                        monkeypatch):
    _, _, reference = zero_run
    out = tmp_path / "resumed"
    config = zero_config(out)

    calls = {"n": 0}

    def trip_after_forty() -> bool:
        calls["n"] += 1
        return calls["n"] > 40

    monkeypatch.setattr(cli, "_interrupt_requested", trip_after_forty)
    with pytest.raises(Interrupted, match="--resume"):
        run(config)
    monkeypatch.undo()

    checkpoint = json.loads((out / "checkpoint.json").read_text())
    assert checkpoint["tag"] == "interrupt"
    assert 0 < checkpoint["level"] < 100

    resumed = run(config, resume=True)
    assert resumed["artifacts"] == reference["artifacts"]
    assert not (out / "checkpoint.json").exists()


def test_resume_without_checkpoint_is_a_fresh_run(zero_run, tmp_path):
    _, _, reference = zero_run
    config = zero_config(tmp_path / "fresh")
    assert run(config, resume=True)["artifacts"] == reference["artifacts"]


def test_resume_rejects_a_checkpoint_from_another_grid(tmp_path):
    out = tmp_path / "mismatch"
    config = zero_config(out)
    other = parse_config(config_text(
        "zero", str(out),
        grid={"state": [[-1.0, 1.0, 9]], "margin": [0.0, 1.0, 5],
              "time_step": 0.02}))
    small = solve_shortfall(other.problem, resolve_grid(other), other.scheme)
    out.mkdir()
    save_snapshot(small, 3, str(out / "checkpoint"), tag="interrupt")
    with pytest.raises(IncompatibleGrids):
        run(config, resume=True)


def test_checkpoints_are_written_on_cadence(tmp_path):
    out = tmp_path / "cadence"
    config = parse_config(config_text(
        "zero", str(out),
        grid={"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],
              "time_step": 0.01},
        outputs={"directory": str(out), "checkpoint_every": 10}))
    manifest = run(config)
    assert manifest["snapshot_levels"] == [0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def test_slice_export_has_long_form_columns(zero_run):
    _, out, _ = zero_run
    lines = (out / "w_t0.csv").read_text().splitlines()
    assert lines[0] == "state_1,margin,shortfall"
    first = lines[1].split(",")
    assert float(first[0]) == -3.0 and float(first[1]) == 0.0


def test_profile_export_renders_unreachable_as_inf(tmp_path):
    # Frozen dynamics accrue |a| forever, so away from the origin no margin
    # on the axis brings the shortfall under the threshold.
    config = parse_config(config_text("frozen-penalty", str(tmp_path / "frozen")))
    field = solve_shortfall(config.problem, resolve_grid(config), config.scheme)
    path = tmp_path / "profile.csv"
    export_profile_csv(field, 0, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "state_1,required_margin"
    by_state = {row.split(",")[0]: row.split(",")[1] for row in lines[1:]}
    assert by_state["-2"] == "inf"
    assert by_state["0"] == "0"


def test_plot_script_pins_margins_from_the_axis(tmp_path):
    script = tmp_path / "plot.gp"
    cli.write_plot_script(str(script), "w_t0.csv", "profile.csv", [0.0, 0.5, 1.0])
    text = script.read_text()
    assert "'profile.csv' every ::1 using 1:2" in text
    assert "$2 == 0.5" in text
    assert text.count("w_t0.csv") == 3


@pytest.mark.skipif(shutil.which("gnuplot") is None, reason="gnuplot not installed")
def test_plot_script_renders_without_warnings(tmp_path):
    out = tmp_path / "plotted"
    config = parse_config(config_text(
        "zero", str(out), outputs={"directory": str(out),
                                   "formats": ["csv", "gnuplot"]}))
    run(config)
    proc = subprocess.run(["gnuplot", "plot.gp"], cwd=out, capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert proc.stderr == ""
    assert (out / "profile.txt").exists()


def test_gnuplot_format_adds_the_script_artifact(tmp_path):
    out = tmp_path / "with_plot"
    config = parse_config(config_text(
        "zero", str(out),
        grid={"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],
              "time_step": 0.01},
        outputs={"directory": str(out), "formats": ["csv", "gnuplot"]}))
    manifest = run(config)
    assert "plot.gp" in manifest["artifacts"]


# ---------------------------------------------------------------------------
# simulation spot checks and the verification battery
# ---------------------------------------------------------------------------

def test_run_simulation_is_deterministic(tmp_path):
    out = tmp_path / "sim"
    config = parse_config(config_text(
        "zero", str(out),
        grid={"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],
              "time_step": 0.02}))
    first = run_simulation(config, n_paths=500)
    blob = (out / "simulate.json").read_bytes()
    again = run_simulation(config, n_paths=500)
    assert first == again
    assert (out / "simulate.json").read_bytes() == blob
    assert first["cost"]["mean"] == 0.0        # zero problem: no costs at all
    assert (out / "path.csv").read_text().count("\n") >= 50


def test_run_verification_passes_on_the_zero_problem(tmp_path):
    out = tmp_path / "verified"
    config = zero_config(out)
    reports, all_pass = run_verification(config, checks="taylor,lipschitz,subsolution")
    assert all_pass
    names = [report.name for report in reports]
    assert names == ["taylor-remainder", "lipschitz-quotients", "strict-subsolution"]
    payload = json.loads((out / "reports.json").read_text())
    assert payload["all_pass"] is True


def test_run_verification_rejects_unknown_check(tmp_path):
    config = zero_config(tmp_path)
    with pytest.raises(SchemaViolation, match="available"):
        run_verification(config, checks="sign,bogus")


# ---------------------------------------------------------------------------
# the command line
# ---------------------------------------------------------------------------

def write_config(tmp_path, name="zero", **tweaks) -> pathlib.Path:
    path = tmp_path / "config.json"
    path.write_text(config_text(name, str(tmp_path / "run"), **tweaks))
    return path


def test_main_solve_then_report(tmp_path, capsys):
    path = write_config(
        tmp_path,
        grid={"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],
              "time_step": 0.01})
    assert main(["solve", "--config", str(path)]) == 0
    assert main(["report", "--out", str(tmp_path / "run")]) == 0
    lines = capsys.readouterr().out
    assert "manifest.json" in lines
    assert "problem: zero" in lines


def test_main_exit_codes_for_bad_configs(tmp_path, capsys):
    bad_key = tmp_path / "bad_key.json"
    bad_key.write_text('{"problem": {"builtin": "zero"}, "gird": {}}')
    assert main(["solve", "--config", str(bad_key)]) == 1

    bad_json = tmp_path / "bad_json.json"
    bad_json.write_text('{"problem": ')
    assert main(["solve", "--config", str(bad_json)]) == 1

    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 1
    capsys.readouterr()


def test_main_numerical_failure_exits_two(tmp_path, capsys):
    path = write_config(
        tmp_path,
        grid={"state": [[-3.0, 3.0, 101]], "margin": [0.0, 1.0, 101],
              "time_step": 0.5})
    assert main(["solve", "--config", str(path)]) == 2
    assert "stable bound" in capsys.readouterr().err


def test_main_usage_error_exits_one(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["--help"]) == 0
    capsys.readouterr()


def test_main_verify_exit_three_on_failure(tmp_path, monkeypatch, capsys):
    path = write_config(tmp_path)
    monkeypatch.setattr(cli, "run_verification", lambda config, **kw: ([], False))
    assert main(["verify", "--config", str(path)]) == 3
    capsys.readouterr()


def test_main_verify_passes_quick_checks(tmp_path, capsys):
    path = write_config(
        tmp_path,
        grid={"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],
              "time_step": 0.01})
    assert main(["verify", "--config", str(path), "--checks", "taylor,lipschitz"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2


def test_main_extract_honors_epsilon_and_level(tmp_path, capsys):
    path = write_config(
        tmp_path,
        grid={"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],
              "time_step": 0.01})
    assert main(["extract", "--config", str(path), "--epsilon", "0.05",
                 "--level", "3"]) == 0
    profile = tmp_path / "run" / "profile_00003.csv"
    assert profile.exists()
    assert main(["extract", "--config", str(path), "--level", "9999"]) == 1
    capsys.readouterr()


def test_main_seed_override_lands_in_manifest(tmp_path, capsys):
    path = write_config(
        tmp_path,
        grid={"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],
              "time_step": 0.01})
    assert main(["solve", "--config", str(path), "--seed", "7",
                 "--out", str(tmp_path / "other")]) == 0
    manifest = json.loads((tmp_path / "other" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7
    assert manifest["config"]["outputs"]["directory"] == str(tmp_path / "other")
    capsys.readouterr()


def test_main_simulate_smoke(tmp_path, capsys):
    path = write_config(
        tmp_path,
        grid={"state": [[-1.0, 1.0, 11]], "margin": [0.0, 1.0, 11],
              "time_step": 0.02})
    assert main(["simulate", "--config", str(path), "--paths", "200"]) == 0
    assert (tmp_path / "run" / "simulate.json").exists()
    assert "cost" in capsys.readouterr().out


def test_main_report_missing_directory(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "nowhere")]) == 1
    assert "manifest" in capsys.readouterr().err
