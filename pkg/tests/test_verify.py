"""Diagnostic battery: each check against fields with known behaviour."""

import json

import numpy as np
import pytest

from epigraph.errors import IncompatibleGrids
from epigraph.fields import blank_field, make_grid, terminal_slice, time_axis
from epigraph.problems import builtin_grid, builtin_problem
from epigraph.solver import max_stable_dt, solve_floor, solve_shortfall
from epigraph.verify import (
    DiagnosticReport,
    dpp_consistency,
    lipschitz_profile,
    make_report,
    sign_equivalence_suite,
    slab_identity_residual,
    strict_subsolution_residual,
    taylor_remainder_residual,
    write_reports,
)


@pytest.fixture(scope="module")
def zero_setup():
    problem = builtin_problem("zero")
    spec = builtin_grid("zero")
    grid = make_grid([tuple(r) for r in spec["state"]], tuple(spec["margin"]),
                     time_axis(problem.horizon, spec["time_step"]))
    return problem, grid, solve_shortfall(problem, grid)


@pytest.fixture(scope="module")
def frozen_setup():
    problem = builtin_problem("frozen-penalty")
    spec = builtin_grid("frozen-penalty")
    grid = make_grid([tuple(r) for r in spec["state"]], tuple(spec["margin"]),
                     time_axis(problem.horizon, spec["time_step"]))
    return problem, grid, solve_shortfall(problem, grid)


def steering_solve(na, nb):
    problem = builtin_problem("deterministic-steering")
    probe = make_grid([(-2.1, 2.1, na)], (0.0, 0.6, nb), time_axis(1.0, 0.5))
    grid = make_grid([(-2.1, 2.1, na)], (0.0, 0.6, nb),
                     time_axis(1.0, max_stable_dt(problem, probe)))
    return problem, grid, solve_shortfall(problem, grid)


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------

def test_report_invariant_is_enforced():
    with pytest.raises(ValueError):
        DiagnosticReport(name="x", max_residual=2.0, tolerance=1.0, passed=True)
    report = make_report("x", 2.0, 1.0)
    assert not report.passed
    assert make_report("x", 1.0, 1.0).passed


def test_reports_serialize_to_json(tmp_path):
    reports = [
        make_report("first", np.float64(0.5), 1.0, {"node": np.int64(3),
                    "values": np.arange(3.0)}),
        make_report("second", 2.0, 1.0),
    ]
    path = tmp_path / "reports.json"
    write_reports(str(path), reports)
    payload = json.loads(path.read_text())
    assert payload["all_pass"] is False
    assert [r["name"] for r in payload["reports"]] == ["first", "second"]
    assert payload["reports"][0]["pass"] is True
    assert payload["reports"][0]["details"]["values"] == [0.0, 1.0, 2.0]


# ---------------------------------------------------------------------------
# quadrature remainder
# ---------------------------------------------------------------------------

def test_remainder_exact_for_a_quadratic():
    residual = taylor_remainder_residual(
        lambda v: float(v[0] ** 2), lambda v: 2.0 * v,
        lambda v: np.array([[2.0]]), 1.0, 2.0, quad_nodes=2,
    )
    assert residual == 0.0


def test_remainder_exact_for_random_quadratics():
    rng = np.random.default_rng(8)
    for _ in range(5):
        mat = rng.normal(size=(2, 2))
        mat = mat + mat.T
        lin = rng.normal(size=2)
        x = rng.normal(size=2)
        a = rng.normal(size=2)
        residual = taylor_remainder_residual(
            lambda v: float(0.5 * v @ mat @ v + lin @ v),
            lambda v: mat @ v + lin,
            lambda v: mat,
            x, a, quad_nodes=3,
        )
        assert residual < 1e-12


def test_remainder_cubic_needs_only_two_nodes():
    residual = taylor_remainder_residual(
        lambda v: float(v[0] ** 3), lambda v: 3.0 * v**2,
        lambda v: np.array([[6.0 * v[0]]]), 0.0, 1.0, quad_nodes=2,
    )
    assert residual < 1e-15


def test_remainder_exponential_at_twenty_nodes():
    residual = taylor_remainder_residual(
        lambda v: float(np.exp(v[0])), lambda v: np.exp(v),
        lambda v: np.array([[np.exp(v[0])]]), 0.0, 1.0, quad_nodes=20,
    )
    assert residual <= 1e-10


def test_remainder_rejects_single_node():
    with pytest.raises(ValueError):
        taylor_remainder_residual(
            lambda v: 0.0, lambda v: v * 0, lambda v: np.zeros((1, 1)),
            0.0, 1.0, quad_nodes=1,
        )


# ---------------------------------------------------------------------------
# negative-margin slab
# ---------------------------------------------------------------------------

def test_slab_identity_zero_problem():
    problem = builtin_problem("zero")
    grid = make_grid([(-3.0, 3.0, 31)], (-0.5, 1.0, 16), time_axis(1.0, 0.02))
    field = solve_shortfall(problem, grid)
    floor = solve_floor(problem, grid)
    report = slab_identity_residual(field, floor)
    assert report.passed
    assert report.max_residual <= 1e-12


def test_slab_identity_frozen_penalty(frozen_setup):
    problem, grid, field = frozen_setup
    report = slab_identity_residual(field, solve_floor(problem, grid))
    assert report.passed
    assert report.max_residual < 1e-12


def test_slab_fault_injection_locates_the_offender(frozen_setup):
    problem, grid, _ = frozen_setup
    floor = solve_floor(problem, grid)
    corrupted = solve_shortfall(problem, grid)
    corrupted.values[3, 17, 5] += 0.1
    report = slab_identity_residual(corrupted, floor)
    assert not report.passed
    assert report.max_residual == pytest.approx(0.1, abs=1e-9)
    worst = report.details["worst"]
    assert (worst["level"], worst["state_index"], worst["margin_index"]) == (3, [17], 5)


def test_slab_rejects_incompatible_inputs(frozen_setup, zero_setup):
    problem, grid, field = frozen_setup
    other_grid = make_grid([(-2.0, 2.0, 21)], (-1.0, 3.0, 21), time_axis(1.0, 0.05))
    with pytest.raises(IncompatibleGrids):
        slab_identity_residual(field, solve_floor(problem, other_grid))
    floor = solve_floor(problem, grid)
    with pytest.raises(IncompatibleGrids):
        slab_identity_residual(floor, floor)
    _, zgrid, zfield = zero_setup
    with pytest.raises(IncompatibleGrids):
        # the zero problem's default margin axis has no sub-zero part
        slab_identity_residual(zfield, solve_floor(zero_setup[0], zgrid))


# ---------------------------------------------------------------------------
# strict subsolution probe
# ---------------------------------------------------------------------------

def test_unperturbed_field_has_zero_interior_residual(zero_setup):
    problem, _, field = zero_setup
    report = strict_subsolution_residual(problem, field, 0.0, tol_h=1e-10)
    assert report.passed
    assert report.max_residual == 0.0
    assert report.details["worst_residual"] == 0.0


def test_perturbed_field_is_strictly_negative(zero_setup):
    problem, _, field = zero_setup
    report = strict_subsolution_residual(problem, field, 0.1, tol_h=0.0)
    assert report.passed
    assert report.tolerance == pytest.approx(-0.0125)
    assert report.details["fraction_within"] == 1.0
    # the probe's time slope passes through untouched: residual is exactly -nu
    assert report.max_residual == pytest.approx(-0.1, abs=1e-12)


def test_perturbation_scales_linearly(zero_setup):
    problem, _, field = zero_setup
    single = strict_subsolution_residual(problem, field, 0.1)
    double = strict_subsolution_residual(problem, field, 0.2)
    assert double.details["median_residual"] == pytest.approx(
        2.0 * single.details["median_residual"], rel=1e-9
    )


def test_subsolution_rejects_bad_inputs(zero_setup, frozen_setup):
    problem, grid, _ = zero_setup
    unsolved = blank_field(grid, "shortfall")
    with pytest.raises(ValueError):
        strict_subsolution_residual(problem, unsolved, 0.1)
    fproblem, _, ffield = frozen_setup
    with pytest.raises(ValueError):
        # frozen-penalty's margin axis reaches -1, where log(1+b) blows up
        strict_subsolution_residual(fproblem, ffield, 0.1)


# ---------------------------------------------------------------------------
# dynamic programming, one-sided
# ---------------------------------------------------------------------------

def test_dpp_single_frozen_step_is_exact(frozen_setup):
    problem, grid, field = frozen_setup
    states = grid.state_axes[0][np.array([10, 25, 40, 55, 70])][:, None]
    margins = np.array([0.5, 1.0, 0.0, 1.5, 0.25])
    report = dpp_consistency(problem, field, 0, 1, states, margins,
                             n_paths=64, dt=grid.dt, tol=1e-9)
    assert report.passed
    assert abs(report.max_residual) < 1e-12
    # sigma = 0: every path is identical, the interval is pure roundoff
    assert all(row["half_width"] < 1e-15 for row in report.details["samples"])


def test_dpp_zero_problem_both_sides_vanish(zero_setup):
    problem, grid, field = zero_setup
    states = grid.state_axes[0][np.array([20, 50, 80])][:, None]
    margins = np.array([0.2, 0.0, 0.7])
    report = dpp_consistency(problem, field, 0, grid.n_levels // 2,
                             states, margins, n_paths=500, seed=11)
    assert report.passed
    assert report.max_residual == 0.0


def test_dpp_steering_one_sided_at_twenty_points():
    problem, grid, field = steering_solve(141, 81)
    rng = np.random.default_rng(5)
    pick = rng.choice(np.arange(20, 121), size=20, replace=False)
    states = grid.state_axes[0][pick][:, None]
    margins = grid.margin_axis[rng.integers(0, 81, size=20)]
    r_index = int(np.argmin(np.abs(grid.times - 0.5)))
    report = dpp_consistency(problem, field, 0, r_index, states, margins,
                             n_paths=400, seed=3, controls=problem.controls[::5])
    assert report.passed
    assert report.max_residual < 0.02


def test_dpp_needs_ordered_time_indices(zero_setup):
    problem, grid, field = zero_setup
    with pytest.raises(ValueError):
        dpp_consistency(problem, field, 5, 5, np.zeros((1, 1)), np.zeros(1))


# ---------------------------------------------------------------------------
# Lipschitz quotients
# ---------------------------------------------------------------------------

def test_quotients_on_the_terminal_slice():
    problem = builtin_problem("deterministic-steering")
    grid = make_grid([(-2.0, 2.0, 21)], (0.0, 5.0, 26), time_axis(1.0, 0.25))
    field = blank_field(grid, "shortfall")
    field.values[-1] = terminal_slice(problem, grid)
    field.solved_from = grid.n_levels - 1
    report = lipschitz_profile(field)
    assert report.passed
    base = report.details["base"]
    assert base["margin_quotient"] == pytest.approx(1.0, rel=1e-12)
    # steepest state quotient of max(a^2 - b, 0): (4 - (2-h)^2)/h = 4 - h
    assert base["state_quotients"][0] == pytest.approx(3.8, rel=1e-12)


def test_quotients_vanish_on_the_zero_field(zero_setup):
    _, _, field = zero_setup
    report = lipschitz_profile(field)
    assert report.passed
    assert report.details["base"]["margin_quotient"] == 0.0
    assert report.details["base"]["state_quotients"] == [0.0]


def test_quotients_stable_under_refinement():
    _, _, coarse = steering_solve(141, 81)
    _, _, fine = steering_solve(281, 161)
    report = lipschitz_profile(coarse, fine)
    assert report.passed
    assert max(report.details["ratios"]) <= 1.1
    assert report.details["base"]["margin_quotient"] <= 1.0 + 1e-9
    assert report.details["refined"]["margin_quotient"] <= 1.0 + 1e-9


def test_quotients_need_a_margin_axis(zero_setup):
    problem, grid, _ = zero_setup
    with pytest.raises(ValueError):
        lipschitz_profile(solve_floor(problem, grid))


# ---------------------------------------------------------------------------
# sign equivalence
# ---------------------------------------------------------------------------

def test_sign_equivalence_over_a_thousand_instances():
    report = sign_equivalence_suite(1000, seed=0)
    assert report.passed
    assert report.max_residual == 0.0
    assert report.details["considered"] >= 900


def test_sign_equivalence_needs_instances():
    with pytest.raises(ValueError):
        sign_equivalence_suite(0)