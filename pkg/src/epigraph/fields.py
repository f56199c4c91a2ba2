"""Grids, value fields, interpolation, and snapshot serialization.

A :class:`Grid` is uniform per axis: one or more state axes, one margin axis
that must contain 0 (and may extend below it — the negative slab exists only
as a consistency diagnostic), and a uniform time axis ending exactly at the
horizon.  A :class:`Field` is a value tensor over (time level, state..., margin)
— or without the margin axis for the state-only boundary fields — filled
backward from the terminal level.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DegenerateGrid, ShiftOutOfDomain, UnsolvedField
from .model import Problem, eval_terminal

Array = np.ndarray

FIELD_KINDS = ("shortfall", "floor", "ceiling")


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def _uniform_axis(lo: float, hi: float, count: int, label: str) -> Array:
    if count < 3:
        raise DegenerateGrid(f"{label} axis needs at least 3 nodes, got {count}")
    if not hi > lo:
        raise DegenerateGrid(f"{label} axis needs hi > lo, got [{lo}, {hi}]")
    return np.linspace(float(lo), float(hi), int(count))


@dataclass(frozen=True)
class Grid:
    """Uniform product grid over state axes, a margin axis, and time levels."""

    state_axes: tuple[Array, ...]
    margin_axis: Array
    times: Array

    def __post_init__(self) -> None:
        for axis in (*self.state_axes, self.margin_axis, self.times):
            steps = np.diff(axis)
            if axis.shape[0] < 3:
                raise DegenerateGrid("every grid axis needs at least 3 nodes")
            if steps.size == 0 or steps.min() <= 0:
                raise DegenerateGrid("grid axes must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                raise DegenerateGrid("grid axes must be uniform")
        gaps = np.abs(self.margin_axis)
        zero = int(np.argmin(gaps))
        if gaps[zero] > 1e-9 * (self.margin_axis[-1] - self.margin_axis[0]):
            raise DegenerateGrid("the margin axis must contain 0")
        self.margin_axis[zero] = 0.0  # snap away any roundoff
        if self.times[0] != 0.0:
            raise DegenerateGrid("the time axis must start at 0")

    # -- geometry ----------------------------------------------------------

    @property
    def dim_state(self) -> int:
        return len(self.state_axes)

    @property
    def state_shape(self) -> tuple[int, ...]:
        return tuple(axis.shape[0] for axis in self.state_axes)

    @property
    def state_spacings(self) -> tuple[float, ...]:
        return tuple(float(axis[1] - axis[0]) for axis in self.state_axes)

    @property
    def margin_spacing(self) -> float:
        return float(self.margin_axis[1] - self.margin_axis[0])

    @property
    def margin_zero_index(self) -> int:
        return int(np.argmin(np.abs(self.margin_axis)))

    @property
    def n_levels(self) -> int:
        return int(self.times.shape[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def state_mesh(self) -> Array:
        """All state nodes as rows, shape (prod(state_shape), dim_state)."""
        mesh = np.meshgrid(*self.state_axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def matches(self, other: "Grid") -> bool:
        return (
            len(self.state_axes) == len(other.state_axes)
            and all(
                a.shape == b.shape and np.allclose(a, b)
                for a, b in zip(self.state_axes, other.state_axes)
            )
            and self.margin_axis.shape == other.margin_axis.shape
            and np.allclose(self.margin_axis, other.margin_axis)
            and self.times.shape == other.times.shape
            and np.allclose(self.times, other.times)
        )


def time_axis(horizon: float, max_dt: float) -> Array:
    """Uniform levels 0..horizon with spacing at most ``max_dt``."""
    if max_dt <= 0 or not np.isfinite(max_dt):
        raise DegenerateGrid(f"time step bound must be a positive finite number, got {max_dt}")
    n_steps = max(2, int(np.ceil(horizon / max_dt - 1e-12)))
    return np.linspace(0.0, float(horizon), n_steps + 1)


def make_grid(
    state_ranges: Sequence[tuple[float, float, int]],
    margin_range: tuple[float, float, int],
    times: Array,
) -> Grid:
    state_axes = tuple(
        _uniform_axis(lo, hi, count, f"state[{i}]")
        for i, (lo, hi, count) in enumerate(state_ranges)
    )
    margin_axis = _uniform_axis(*margin_range, "margin")
    return Grid(state_axes=state_axes, margin_axis=margin_axis,
                times=np.asarray(times, dtype=float))


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def interp_state(
    values: Array,
    axes: tuple[Array, ...],
    points: Array,
    mode: str = "clamp",
) -> Array:
    """Multilinear interpolation over the leading state axes of ``values``.

    ``values`` has shape (*state_shape, tail...); ``points`` is (N, n).
    Returns (N, tail...).  Out-of-hull points are clamped to the boundary by
    default; ``mode="raise"`` raises :class:`ShiftOutOfDomain` instead.
    Clamping keeps interpolation weights nonnegative, which the sweep's
    monotonicity relies on.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(axes)
    if points.shape[1] != n:
        raise ValueError(f"points have dimension {points.shape[1]}, grid has {n}")

    lows = np.empty((points.shape[0], n), dtype=np.int64)
    fracs = np.empty((points.shape[0], n))
    for i, axis in enumerate(axes):
        h = axis[1] - axis[0]
        rel = (points[:, i] - axis[0]) / h
        if mode == "raise":
            out = (rel < -1e-9) | (rel > axis.shape[0] - 1 + 1e-9)
            if np.any(out):
                bad = points[np.argmax(out)]
                raise ShiftOutOfDomain(f"point {bad} leaves the grid hull on axis {i}")
        rel = np.clip(rel, 0.0, axis.shape[0] - 1)
        lo = np.minimum(rel.astype(np.int64), axis.shape[0] - 2)
        lows[:, i] = lo
        fracs[:, i] = rel - lo

    tail = values.shape[n:]
    out = np.zeros((points.shape[0], *tail))
    for corner in itertools.product((0, 1), repeat=n):
        weight = np.ones(points.shape[0])
        for i, c in enumerate(corner):
            weight = weight * (fracs[:, i] if c else 1.0 - fracs[:, i])
        idx = tuple(lows[:, i] + corner[i] for i in range(n))
        out += weight.reshape(-1, *([1] * len(tail))) * values[idx]
    return out


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class Field:
    """A value tensor over time levels, state nodes, and (optionally) margins.

    ``solved_from``..``solved_to`` is the contiguous range of time levels
    holding valid data; anything outside it is uninitialized garbage and
    guarded by :class:`UnsolvedField`.  (A sweep resumed from a checkpointed
    slice has no levels above that slice, hence the upper bound.)
    """

    grid: Grid
    kind: str
    values: Array
    solved_from: int
    solved_to: int

    def __post_init__(self) -> None:
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")

    @property
    def has_margin_axis(self) -> bool:
        return self.kind == "shortfall"

    @property
    def solved(self) -> bool:
        return self.solved_from == 0

    def slice_at(self, level: int) -> Array:
        if not 0 <= level < self.grid.n_levels:
            raise IndexError(f"time level {level} outside 0..{self.grid.n_levels - 1}")
        if not self.solved_from <= level <= self.solved_to:
            raise UnsolvedField(
                f"{self.kind} field holds levels {self.solved_from}.."
                f"{self.solved_to}, level {level} requested"
            )
        return self.values[level]

    def evaluate(
        self,
        level: int,
        points: Array,
        margins: Array | float | None = None,
        mode: str = "clamp",
    ) -> Array:
        """Interpolated field values at arbitrary (state, margin) points."""
        data = self.slice_at(level)
        if not self.has_margin_axis:
            return interp_state(data, self.grid.state_axes, points, mode=mode)
        if margins is None:
            raise ValueError("a shortfall field needs margin values to evaluate")
        points = np.atleast_2d(np.asarray(points, dtype=float))
        margins = np.broadcast_to(
            np.asarray(margins, dtype=float).ravel(), (points.shape[0],)
        )
        joint_axes = (*self.grid.state_axes, self.grid.margin_axis)
        joint_points = np.concatenate([points, margins[:, None]], axis=1)
        return interp_state(data, joint_axes, joint_points, mode=mode)


def blank_field(grid: Grid, kind: str) -> Field:
    shape: tuple[int, ...] = (grid.n_levels, *grid.state_shape)
    if kind == "shortfall":
        shape = (*shape, grid.margin_axis.shape[0])
    return Field(grid=grid, kind=kind, values=np.full(shape, np.nan),
                 solved_from=grid.n_levels, solved_to=grid.n_levels - 1)


def terminal_slice(problem: Problem, grid: Grid) -> Array:
    """Terminal data: shortfall of the terminal cost against the margin.

    max{m(a) - b, 0}; below-zero margins land on the linear branch
    automatically since m >= 0.
    """
    m_vals = eval_terminal(problem, grid.state_mesh()).reshape(grid.state_shape)
    return np.maximum(m_vals[..., None] - grid.margin_axis, 0.0)


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def save_snapshot(
    field_obj: Field, level: int, prefix: str, tag: str = ""
) -> tuple[str, str]:
    """Write one time level as metadata JSON plus a CSV of values.

    Returns the two file paths.  The CSV is 2-D: one row per flattened state
    node, one column per margin node (a single column for state-only kinds).
    """
    data = field_obj.slice_at(level)
    n_state = int(np.prod(field_obj.grid.state_shape))
    table = data.reshape(n_state, -1)
    meta = {
        "kind": field_obj.kind,
        "level": int(level),
        "time": float(field_obj.grid.times[level]),
        "state_axes": [
            [float(axis[0]), float(axis[-1]), int(axis.shape[0])]
            for axis in field_obj.grid.state_axes
        ],
        "margin_axis": [
            float(field_obj.grid.margin_axis[0]),
            float(field_obj.grid.margin_axis[-1]),
            int(field_obj.grid.margin_axis.shape[0]),
        ],
        "times": [0.0, float(field_obj.grid.times[-1]), int(field_obj.grid.n_levels)],
        "tag": tag,
    }
    json_path = f"{prefix}.json"
    csv_path = f"{prefix}.csv"
    with open(json_path, "w") as handle:
        json.dump(meta, handle, indent=1, sort_keys=True)
        handle.write("\n")
    np.savetxt(csv_path, table, delimiter=",", fmt="%.17g")
    return json_path, csv_path


def load_snapshot(prefix: str) -> tuple[dict[str, Any], Array]:
    """Read a snapshot back; returns (metadata, values in grid shape)."""
    with open(f"{prefix}.json") as handle:
        meta = json.load(handle)
    table = np.atleast_2d(np.loadtxt(f"{prefix}.csv", delimiter=","))
    state_shape = tuple(int(axis[2]) for axis in meta["state_axes"])
    if meta["kind"] == "shortfall":
        shape = (*state_shape, int(meta["margin_axis"][2]))
    else:
        shape = state_shape
    return meta, table.reshape(shape)
