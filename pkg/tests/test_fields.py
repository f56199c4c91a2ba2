"""Grid, interpolation, field bookkeeping, and snapshot round-trips."""

import numpy as np
import pytest

from epigraph.errors import DegenerateGrid, ShiftOutOfDomain, UnsolvedField
from epigraph.fields import (
    Field,
    blank_field,
    interp_state,
    load_snapshot,
    make_grid,
    save_snapshot,
    terminal_slice,
    time_axis,
)
from epigraph.model import build_problem


def square_problem():
    return build_problem(
        dim_state=1,
        dim_noise=1,
        horizon=1.0,
        terminal_cost=lambda a: np.atleast_2d(a)[:, 0] ** 2,
        controls=[0.0],
        vectorized=True,
    )


def small_grid(margin=(0.0, 1.0, 5)):
    return make_grid([(-2.0, 2.0, 9)], margin, time_axis(1.0, 0.25))


# ---------------------------------------------------------------------------
# grid construction
# ---------------------------------------------------------------------------

def test_grid_geometry_properties():
    grid = small_grid()
    assert grid.dim_state == 1
    assert grid.state_shape == (9,)
    assert grid.state_spacings == (0.5,)
    assert grid.margin_spacing == 0.25
    assert grid.margin_zero_index == 0
    assert grid.n_levels == 5
    assert grid.dt == 0.25
    assert grid.times[-1] == 1.0


def test_grid_mesh_enumerates_in_axis_order():
    grid = make_grid([(0.0, 1.0, 3), (0.0, 2.0, 3)], (0.0, 1.0, 3),
                     time_axis(1.0, 0.5))
    mesh = grid.state_mesh()
    assert mesh.shape == (9, 2)
    assert np.allclose(mesh[0], [0.0, 0.0])
    assert np.allclose(mesh[1], [0.0, 1.0])   # last axis varies fastest
    assert np.allclose(mesh[-1], [1.0, 2.0])


def test_margin_axis_must_contain_zero():
    with pytest.raises(DegenerateGrid):
        small_grid(margin=(0.1, 1.1, 5))


def test_margin_axis_may_extend_below_zero():
    grid = small_grid(margin=(-0.5, 0.5, 5))
    assert grid.margin_zero_index == 2
    assert grid.margin_axis[2] == 0.0


def test_axes_need_at_least_three_nodes():
    with pytest.raises(DegenerateGrid):
        make_grid([(-1.0, 1.0, 2)], (0.0, 1.0, 5), time_axis(1.0, 0.25))
    with pytest.raises(DegenerateGrid):
        make_grid([(-1.0, 1.0, 5)], (0.0, 1.0, 2), time_axis(1.0, 0.25))


def test_degenerate_ranges_are_rejected():
    with pytest.raises(DegenerateGrid):
        make_grid([(1.0, 1.0, 5)], (0.0, 1.0, 5), time_axis(1.0, 0.25))
    with pytest.raises(DegenerateGrid):
        time_axis(1.0, 0.0)


def test_time_axis_ends_exactly_at_horizon():
    times = time_axis(0.7, 0.09)
    assert times[0] == 0.0
    assert times[-1] == 0.7
    assert np.all(np.diff(times) <= 0.09 + 1e-12)


def test_grid_matching():
    grid = small_grid()
    assert grid.matches(small_grid())
    assert not grid.matches(small_grid(margin=(0.0, 1.0, 9)))


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def test_interp_state_is_exact_on_multilinear_data():
    axes = (np.linspace(0.0, 1.0, 5), np.linspace(-1.0, 1.0, 9))
    xx, yy = np.meshgrid(*axes, indexing="ij")
    values = 2.0 + 3.0 * xx - 1.5 * yy + 0.5 * xx * yy
    rng = np.random.default_rng(7)
    pts = np.column_stack([rng.uniform(0, 1, 64), rng.uniform(-1, 1, 64)])
    got = interp_state(values, axes, pts)
    want = 2.0 + 3.0 * pts[:, 0] - 1.5 * pts[:, 1] + 0.5 * pts[:, 0] * pts[:, 1]
    assert np.allclose(got, want, atol=1e-12)


def test_interp_state_keeps_trailing_axes():
    axes = (np.linspace(0.0, 1.0, 5),)
    values = np.arange(5.0)[:, None] * np.ones(3)[None, :]
    got = interp_state(values, axes, np.array([[0.375]]))
    assert got.shape == (1, 3)
    assert np.allclose(got, 1.5)


def test_interp_state_clamps_out_of_hull_points():
    axes = (np.linspace(0.0, 1.0, 5),)
    values = np.linspace(0.0, 4.0, 5)
    got = interp_state(values, axes, np.array([[-3.0], [9.0]]))
    assert np.allclose(got, [0.0, 4.0])


def test_interp_state_raise_mode():
    axes = (np.linspace(0.0, 1.0, 5),)
    values = np.linspace(0.0, 4.0, 5)
    with pytest.raises(ShiftOutOfDomain):
        interp_state(values, axes, np.array([[1.5]]), mode="raise")


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

def test_blank_field_guards_unsolved_levels():
    field = blank_field(small_grid(), "shortfall")
    assert not field.solved
    with pytest.raises(UnsolvedField):
        field.slice_at(0)
    field.values[-1] = 0.0
    field.solved_from = field.grid.n_levels - 1
    assert field.slice_at(field.grid.n_levels - 1).shape == (9, 5)


def test_field_rejects_unknown_kind():
    grid = small_grid()
    with pytest.raises(ValueError):
        Field(grid=grid, kind="mystery", values=np.zeros((5, 9, 5)),
              solved_from=0, solved_to=4)


def test_field_evaluate_interpolates_state_and_margin():
    grid = small_grid()
    field = blank_field(grid, "shortfall")
    aa = grid.state_axes[0][:, None]
    bb = grid.margin_axis[None, :]
    field.values[:] = (1.0 + aa + 2.0 * bb)[None, ...]
    field.solved_from = 0
    got = field.evaluate(0, np.array([[0.25]]), margins=0.375)
    assert np.allclose(got, 1.0 + 0.25 + 0.75)


def test_state_only_field_evaluate_ignores_margin():
    grid = small_grid()
    field = blank_field(grid, "floor")
    field.values[:] = 2.0 * grid.state_axes[0][None, :]
    field.solved_from = 0
    assert np.allclose(field.evaluate(0, np.array([[1.25]])), 2.5)


# ---------------------------------------------------------------------------
# terminal data
# ---------------------------------------------------------------------------

def test_terminal_slice_values():
    grid = make_grid([(-2.0, 2.0, 5)], (0.0, 4.0, 5), time_axis(1.0, 0.25))
    slab = terminal_slice(square_problem(), grid)
    a = grid.state_axes[0]
    # m(a)=a^2, a=2, b=1 -> 3
    assert slab[np.argmax(a == 2.0), 1] == 3.0
    # b >= m(a) -> 0;  b == m(a) -> 0
    assert slab[np.argmax(a == 1.0), 1] == 0.0
    assert slab[np.argmax(a == 1.0), 2] == 0.0
    assert np.all(slab >= 0.0)


def test_terminal_slice_is_linear_on_the_diagnostic_slab():
    grid = make_grid([(-2.0, 2.0, 5)], (-1.0, 3.0, 5), time_axis(1.0, 0.25))
    slab = terminal_slice(square_problem(), grid)
    a = grid.state_axes[0]
    below = grid.margin_axis < 0.0
    expect = a[:, None] ** 2 - grid.margin_axis[None, below]
    assert np.allclose(slab[:, below], expect)


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def test_snapshot_roundtrip_is_lossless(tmp_path):
    grid = small_grid()
    field = blank_field(grid, "shortfall")
    rng = np.random.default_rng(3)
    field.values[-1] = rng.uniform(0.0, 5.0, size=(9, 5))
    field.solved_from = grid.n_levels - 1
    prefix = str(tmp_path / "level4")
    save_snapshot(field, grid.n_levels - 1, prefix, tag="abc123")
    meta, values = load_snapshot(prefix)
    assert meta["kind"] == "shortfall"
    assert meta["level"] == grid.n_levels - 1
    assert meta["tag"] == "abc123"
    assert np.array_equal(values, field.values[-1])   # %.17g is exact for float64


def test_snapshot_roundtrip_state_only(tmp_path):
    grid = small_grid()
    field = blank_field(grid, "floor")
    field.values[0] = np.linspace(0.0, 1.0, 9)
    field.solved_from = 0
    field.solved_to = 0
    prefix = str(tmp_path / "floor0")
    save_snapshot(field, 0, prefix)
    meta, values = load_snapshot(prefix)
    assert meta["kind"] == "floor"
    assert values.shape == (9,)
    assert np.array_equal(values, field.values[0])
