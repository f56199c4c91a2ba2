"""Config-driven command line front end.

A run is described by one JSON document with four sections plus two scalar
knobs::

    {
      "problem": {"builtin": "deterministic-steering"},
      "grid":    {"state": [[-2.1, 2.1, 281]], "margin": [0.0, 0.6, 241],
                  "time_step": null},
      "scheme":  {"safety": 0.9, "delta": 0.0, "epsilon": null,
                  "hedge": "spectral", "beta_candidates": "grid"},
      "outputs": {"directory": "out", "formats": ["csv"],
                  "checkpoint_every": 25},
      "seed": 0,
      "threads": 1
    }

``problem`` either names a built-in (``{"builtin": name}``) or describes a
constant-coefficient problem inline with the keys ``dim_state``,
``dim_noise``, ``horizon`` (required), ``controls``, ``drift`` (``"control"``,
a number, or a per-component list), ``diffusion`` (a number filling every
matrix entry — intended for scalar noise), ``running_cost`` (a number),
``terminal_cost`` (``"zero"``, ``"square"`` for |a|^2, or a number),
``region`` (a kind dict as accepted by the model layer), ``jumps``
(``{"marks": [...], "weights": [...]}`` with unit mark shifts), and ``name``.

``grid`` axes are ``[low, high, count]`` triplets; ``time_step`` ``null``
means "largest stable step".  ``scheme.epsilon`` ``null`` defers to the
level-set default threshold.  A missing ``scheme``/``outputs`` section gets
defaults, with built-in problems contributing their own scheme overrides.

Subcommands: ``solve`` (full pipeline + manifest), ``extract`` (profile CSV
only), ``simulate`` (Monte Carlo spot checks), ``verify`` (diagnostic
battery, exit 3 on failure), ``report`` (summarize a run directory).  Exit
codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import dataclasses
import difflib
import hashlib
import json
import math
import pathlib
import signal
import sys
import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping, NoReturn, Sequence

import numpy as np

from .errors import (
    DegenerateGrid,
    EmptyControlGrid,
    EpigraphError,
    IncompatibleGrids,
    Interrupted,
    MissingField,
    NegativeWeight,
    NonpositiveHorizon,
    ParseError,
    SchemaViolation,
    UnknownKey,
)
from .fields import (
    Field,
    Grid,
    blank_field,
    load_snapshot,
    make_grid,
    save_snapshot,
    terminal_slice,
    time_axis,
)
from .levelset import LevelSetQuery, default_epsilon, required_margin_profile
from .model import JumpModel, Problem, Region, build_problem
from .problems import builtin_grid, builtin_problem, builtin_scheme
from .simulate import (
    constant_policy,
    estimate_cost,
    estimate_shortfall,
    path_to_csv,
    simulate_pair_path,
)
from .solver import (
    SchemeOptions,
    max_stable_dt,
    solve_ceiling,
    solve_floor,
    solve_shortfall,
)
from .verify import (
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

Array = np.ndarray

_TOP_KEYS = ("problem", "grid", "scheme", "outputs", "seed", "threads")
_PROBLEM_KEYS = (
    "builtin", "dim_state", "dim_noise", "horizon", "controls", "drift",
    "diffusion", "running_cost", "terminal_cost", "region", "jumps", "name",
)
_GRID_KEYS = ("state", "margin", "time_step")
_SCHEME_KEYS = ("safety", "delta", "epsilon", "hedge", "beta_candidates")
_OUTPUT_KEYS = ("directory", "formats", "checkpoint_every")
_REGION_KEYS = ("kind", "lo", "hi", "center", "radius", "normal", "offset")
_JUMP_KEYS = ("marks", "weights")
_FORMATS = ("csv", "gnuplot")


# ---------------------------------------------------------------------------
# validated configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """A fully validated run description.

    ``problem_spec``/``grid_spec``/``outputs`` keep the normalized JSON form
    so :func:`serialize_config` can reproduce the document; the built
    ``problem`` and ``scheme`` carry the same information as live objects.
    ``epsilon`` is the level-set threshold (None defers to the default rule).
    """

    problem: Problem
    problem_spec: dict[str, Any]
    grid_spec: dict[str, Any]
    scheme: SchemeOptions
    epsilon: float | None
    outputs: dict[str, Any]
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.epsilon is not None and not self.epsilon > 0.0:
            raise SchemaViolation(f"scheme.epsilon must be > 0, got {self.epsilon}")
        if self.seed < 0:
            raise SchemaViolation(f"seed must be >= 0, got {self.seed}")
        if self.threads < 1:
            raise SchemaViolation(f"threads must be >= 1, got {self.threads}")


def _fail(path: str, why: str) -> NoReturn:
    raise SchemaViolation(f"{path} {why}")


def _reject_unknown(section: Mapping[str, Any], allowed: Sequence[str], path: str) -> None:
    for key in section:
        if key in allowed:
            continue
        dotted = f"{path}.{key}" if path else str(key)
        matches = difflib.get_close_matches(str(key), allowed, n=1)
        hint = f" (did you mean {matches[0]!r}?)" if matches else ""
        raise UnknownKey(f"unknown key {dotted!r}{hint}")


def _number(value: Any, path: str, *, minimum: float | None = None,
            positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, "must be a number")
    out = float(value)
    if not math.isfinite(out):
        _fail(path, "must be finite")
    if positive and out <= 0.0:
        _fail(path, f"must be > 0, got {out}")
    if minimum is not None and out < minimum:
        _fail(path, f"must be >= {minimum}, got {out}")
    return out


def _integer(value: Any, path: str, *, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, "must be an integer")
    if minimum is not None and value < minimum:
        _fail(path, f"must be >= {minimum}, got {value}")
    return int(value)


def _axis_triplet(value: Any, path: str) -> list[Any]:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        _fail(path, "must be a [low, high, count] triplet")
    lo = _number(value[0], f"{path}[0]")
    hi = _number(value[1], f"{path}[1]")
    count = _integer(value[2], f"{path}[2]", minimum=2)
    if not hi > lo:
        _fail(path, f"needs low < high, got [{lo}, {hi}]")
    return [lo, hi, count]


# ---------------------------------------------------------------------------
# problem section (built-in reference or inline constant coefficients)
# ---------------------------------------------------------------------------

def _control_drift(t: float, a: Array, u: Array) -> Array:
    return np.zeros_like(np.atleast_2d(a)) + u


def _constant_drift(row: Array) -> Callable[..., Array]:
    def drift(t: float, a: Array, u: Array) -> Array:
        return np.zeros_like(np.atleast_2d(a)) + row
    return drift


def _full_diffusion(value: float, dim_noise: int) -> Callable[..., Array]:
    def diffusion(t: float, a: Array, u: Array) -> Array:
        a = np.atleast_2d(a)
        return np.full((*a.shape, dim_noise), value)
    return diffusion


def _constant_running(value: float) -> Callable[..., Array]:
    def running(t: float, a: Array, u: Array) -> Array:
        return np.full(np.atleast_2d(a).shape[0], value)
    return running


def _zero_terminal(a: Array) -> Array:
    return np.zeros(np.atleast_2d(a).shape[0])


def _square_terminal(a: Array) -> Array:
    a = np.atleast_2d(a)
    return (a * a).sum(axis=1)


def _constant_terminal(value: float) -> Callable[[Array], Array]:
    def terminal(a: Array) -> Array:
        return np.full(np.atleast_2d(a).shape[0], value)
    return terminal


def _mark_shift(t: float, a: Array, u: Array, e: float) -> Array:
    return np.full(np.atleast_2d(a).shape, float(e))


def _controls_value(value: Any) -> list[Any]:
    bad = 'must be a non-empty list of numbers (or of per-component lists)'
    if not isinstance(value, (list, tuple)) or not value:
        _fail("problem.controls", bad)
    if all(isinstance(u, (int, float)) and not isinstance(u, bool) for u in value):
        return [float(u) for u in value]
    out = []
    for i, row in enumerate(value):
        if not isinstance(row, (list, tuple)) or not row:
            _fail(f"problem.controls[{i}]", bad)
        out.append([_number(u, f"problem.controls[{i}][{j}]") for j, u in enumerate(row)])
    return out


def _drift_value(spec: Any, dim_state: int) -> tuple[Any, Callable[..., Array] | None]:
    if spec == "control":
        return "control", _control_drift
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        value = _number(spec, "problem.drift")
        if value == 0.0:
            return 0.0, None
        return value, _constant_drift(np.full(dim_state, value))
    if isinstance(spec, (list, tuple)):
        row = [_number(v, f"problem.drift[{i}]") for i, v in enumerate(spec)]
        if len(row) != dim_state:
            _fail("problem.drift", f"needs {dim_state} components, got {len(row)}")
        return row, _constant_drift(np.asarray(row))
    _fail("problem.drift", 'must be "control", a number, or a list of numbers')


def _region_value(spec: Any) -> tuple[dict[str, Any], Region | None]:
    if spec is None:
        return {"kind": "all"}, None
    if not isinstance(spec, dict):
        _fail("problem.region", "must be an object with a 'kind' key")
    _reject_unknown(spec, _REGION_KEYS, "problem.region")
    normalized = copy.deepcopy(dict(spec))
    kwargs: dict[str, Any] = {}
    for key, value in spec.items():
        if key in ("lo", "hi", "center", "normal"):
            kwargs[key] = np.asarray(value, dtype=float)
        else:
            kwargs[key] = value
    try:
        region = Region(**kwargs)
    except (ValueError, TypeError, EpigraphError) as exc:
        raise SchemaViolation(f"problem.region: {exc}") from None
    return normalized, region


def _jumps_value(spec: Any) -> tuple[dict[str, Any] | None, JumpModel | None]:
    if spec is None:
        return None, None
    if not isinstance(spec, dict):
        _fail("problem.jumps", "must be an object with 'marks' and 'weights'")
    _reject_unknown(spec, _JUMP_KEYS, "problem.jumps")
    for key in _JUMP_KEYS:
        if key not in spec:
            _fail(f"problem.jumps.{key}", "is required")
    try:
        jumps = JumpModel(marks=np.asarray(spec["marks"], dtype=float),
                          weights=np.asarray(spec["weights"], dtype=float))
    except (ValueError, TypeError, EpigraphError) as exc:
        raise SchemaViolation(f"problem.jumps: {exc}") from None
    normalized = {"marks": np.asarray(spec["marks"], dtype=float).tolist(),
                  "weights": np.asarray(spec["weights"], dtype=float).tolist()}
    return normalized, jumps


def _problem_section(section: Any) -> tuple[Problem, dict[str, Any], dict[str, Any]]:
    """Build (problem, normalized section, scheme defaults) from the config."""
    if not isinstance(section, dict):
        _fail("problem", "must be an object")
    if "builtin" in section:
        _reject_unknown(section, ("builtin",), "problem")
        name = section["builtin"]
        if not isinstance(name, str):
            _fail("problem.builtin", "must be a string")
        try:
            problem = builtin_problem(name)
        except KeyError as exc:
            raise SchemaViolation(f"problem.builtin: {exc.args[0]}") from None
        return problem, {"builtin": name}, builtin_scheme(name)

    _reject_unknown(section, _PROBLEM_KEYS[1:], "problem")
    if "horizon" not in section:
        _fail("problem.horizon", "is required")
    dim_state = _integer(section.get("dim_state", 1), "problem.dim_state", minimum=1)
    dim_noise = _integer(section.get("dim_noise", 1), "problem.dim_noise", minimum=1)
    horizon = _number(section["horizon"], "problem.horizon", positive=True)
    controls = _controls_value(section.get("controls", [0.0]))
    drift_spec, drift = _drift_value(section.get("drift", 0.0), dim_state)

    sigma = _number(section.get("diffusion", 0.0), "problem.diffusion")
    diffusion = _full_diffusion(sigma, dim_noise) if sigma != 0.0 else None

    running_value = _number(section.get("running_cost", 0.0),
                            "problem.running_cost", minimum=0.0)
    running = _constant_running(running_value) if running_value != 0.0 else None

    terminal_spec = section.get("terminal_cost", "zero")
    if terminal_spec == "zero":
        terminal: Callable[[Array], Array] = _zero_terminal
    elif terminal_spec == "square":
        terminal = _square_terminal
    elif isinstance(terminal_spec, (int, float)) and not isinstance(terminal_spec, bool):
        terminal_spec = _number(terminal_spec, "problem.terminal_cost", minimum=0.0)
        terminal = _constant_terminal(terminal_spec)
    else:
        _fail("problem.terminal_cost", 'must be "zero", "square", or a number')

    region_spec, region = _region_value(section.get("region"))
    jumps_spec, jumps = _jumps_value(section.get("jumps"))
    name = section.get("name", "")
    if not isinstance(name, str):
        _fail("problem.name", "must be a string")

    try:
        problem = build_problem(
            dim_state=dim_state,
            dim_noise=dim_noise,
            horizon=horizon,
            controls=controls,
            drift=drift,
            diffusion=diffusion,
            running_cost=running,
            terminal_cost=terminal,
            region=region,
            jumps=jumps,
            jump_size=_mark_shift if jumps is not None else None,
            vectorized=True,
            name=name,
        )
    except ValueError as exc:
        raise SchemaViolation(f"problem: {exc}") from None

    normalized = {
        "dim_state": dim_state,
        "dim_noise": dim_noise,
        "horizon": horizon,
        "controls": controls,
        "drift": drift_spec,
        "diffusion": sigma,
        "running_cost": running_value,
        "terminal_cost": terminal_spec,
        "region": region_spec,
        "jumps": jumps_spec,
        "name": name,
    }
    return problem, normalized, {}


def _grid_section(section: Any) -> dict[str, Any]:
    if not isinstance(section, dict):
        _fail("grid", "must be an object")
    _reject_unknown(section, _GRID_KEYS, "grid")
    for required in ("state", "margin"):
        if required not in section:
            _fail(f"grid.{required}", "is required")
    state = section["state"]
    if not isinstance(state, (list, tuple)) or not state:
        _fail("grid.state", "must be a non-empty list of [low, high, count] axes")
    axes = [_axis_triplet(axis, f"grid.state[{i}]") for i, axis in enumerate(state)]
    margin = _axis_triplet(section["margin"], "grid.margin")
    step = section.get("time_step")
    if step is not None:
        step = _number(step, "grid.time_step", positive=True)
    return {"state": axes, "margin": margin, "time_step": step}


def _scheme_section(section: Any, defaults: Mapping[str, Any]) -> tuple[SchemeOptions, float | None]:
    if section is None:
        section = {}
    if not isinstance(section, dict):
        _fail("scheme", "must be an object")
    _reject_unknown(section, _SCHEME_KEYS, "scheme")
    hedge = section.get("hedge", defaults.get("hedge", "spectral"))
    beta = section.get("beta_candidates", defaults.get("jump_hedge", "grid"))
    if not isinstance(hedge, str):
        _fail("scheme.hedge", "must be a string")
    if not isinstance(beta, str):
        _fail("scheme.beta_candidates", "must be a string")
    safety = _number(section.get("safety", 0.9), "scheme.safety", positive=True)
    delta = _number(section.get("delta", 0.0), "scheme.delta", minimum=0.0)
    epsilon = section.get("epsilon")
    if epsilon is not None:
        epsilon = _number(epsilon, "scheme.epsilon", positive=True)
    try:
        options = SchemeOptions(hedge=hedge, jump_hedge=beta, safety=safety, delta=delta)
    except ValueError as exc:
        raise SchemaViolation(f"scheme: {exc}") from None
    return options, epsilon


def _outputs_section(section: Any) -> dict[str, Any]:
    if section is None:
        section = {}
    if not isinstance(section, dict):
        _fail("outputs", "must be an object")
    _reject_unknown(section, _OUTPUT_KEYS, "outputs")
    directory = section.get("directory", "out")
    if not isinstance(directory, str) or not directory:
        _fail("outputs.directory", "must be a non-empty string")
    formats = section.get("formats", ["csv"])
    if not isinstance(formats, (list, tuple)):
        _fail("outputs.formats", f"must be a list drawn from {_FORMATS}")
    for i, entry in enumerate(formats):
        if entry not in _FORMATS:
            _fail(f"outputs.formats[{i}]", f"must be one of {_FORMATS}, got {entry!r}")
    every = _integer(section.get("checkpoint_every", 25), "outputs.checkpoint_every",
                     minimum=1)
    return {"directory": directory, "formats": list(formats), "checkpoint_every": every}


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON run configuration.

    Raises :class:`ParseError` for malformed JSON (with position),
    :class:`UnknownKey` for unrecognized keys (with a spelling suggestion),
    and :class:`SchemaViolation` for missing or out-of-range values (naming
    the offending path).
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"configuration is not valid JSON: {exc.msg} "
            f"(line {exc.lineno}, column {exc.colno})"
        ) from None
    if not isinstance(document, dict):
        raise SchemaViolation("the configuration must be a JSON object")
    _reject_unknown(document, _TOP_KEYS, "")
    if "problem" not in document:
        _fail("problem", "is required")
    problem, problem_spec, scheme_defaults = _problem_section(document["problem"])
    if "grid" in document:
        grid_spec = _grid_section(document["grid"])
    elif "builtin" in problem_spec:
        # built-in problems carry a stock grid so a bare name is runnable
        grid_spec = _grid_section(builtin_grid(problem_spec["builtin"]))
    else:
        _fail("grid", "is required")
    options, epsilon = _scheme_section(document.get("scheme"), scheme_defaults)
    outputs = _outputs_section(document.get("outputs"))
    seed = _integer(document.get("seed", 0), "seed", minimum=0)
    threads = _integer(document.get("threads", 1), "threads", minimum=1)
    return RunConfig(problem=problem, problem_spec=problem_spec, grid_spec=grid_spec,
                     scheme=options, epsilon=epsilon, outputs=outputs,
                     seed=seed, threads=threads)


def _config_document(config: RunConfig) -> dict[str, Any]:
    return {
        "problem": copy.deepcopy(config.problem_spec),
        "grid": copy.deepcopy(config.grid_spec),
        "scheme": {
            "safety": config.scheme.safety,
            "delta": config.scheme.delta,
            "epsilon": config.epsilon,
            "hedge": config.scheme.hedge,
            "beta_candidates": config.scheme.jump_hedge,
        },
        "outputs": copy.deepcopy(config.outputs),
        "seed": config.seed,
        "threads": config.threads,
    }


def serialize_config(config: RunConfig) -> str:
    """Inverse of :func:`parse_config`: the normalized document as JSON text."""
    return json.dumps(_config_document(config), indent=1, sort_keys=True) + "\n"


def builtin_config(name: str, directory: str = "out") -> dict[str, Any]:
    """A complete config document for a built-in problem and its default grid."""
    builtin_scheme(name)  # validates the name with the catalog in the message
    return {
        "problem": {"builtin": name},
        "grid": builtin_grid(name),
        "outputs": {"directory": directory},
    }


def resolve_grid(config: RunConfig) -> Grid:
    """Build the solve grid, choosing a stable time step when none is pinned."""
    spec = config.grid_spec
    state = [tuple(axis) for axis in spec["state"]]
    margin = tuple(spec["margin"])
    horizon = config.problem.horizon
    step = spec["time_step"]
    if step is None:
        probe = make_grid(state, margin, time_axis(horizon, horizon / 2.0))
        step = max_stable_dt(config.problem, probe, config.scheme.safety)
        if not math.isfinite(step):
            step = horizon / 128.0  # nothing constrains the step (frozen dynamics)
    return make_grid(state, margin, time_axis(horizon, min(step, horizon)))


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def _write_rows(path: str, header: Sequence[str], table: Array) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in table:
            writer.writerow(["%.17g" % value for value in row])


def export_slice_csv(field_obj: Field, level: int, path: str) -> str:
    """Write one time level in long form: state columns, margin, value."""
    data = field_obj.slice_at(level)
    mesh = np.meshgrid(*field_obj.grid.state_axes, indexing="ij")
    state_cols = [m.reshape(-1) for m in mesh]
    names = [f"state_{i + 1}" for i in range(len(state_cols))]
    if field_obj.kind == "shortfall":
        margin = field_obj.grid.margin_axis
        state_cols = [np.repeat(col, margin.size) for col in state_cols]
        table = np.column_stack(
            [*state_cols, np.tile(margin, data.size // margin.size), data.reshape(-1)]
        )
        header = [*names, "margin", "shortfall"]
    else:
        table = np.column_stack([*state_cols, data.reshape(-1)])
        header = [*names, field_obj.kind]
    _write_rows(path, header, table)
    return path


def export_profile_csv(field_obj: Field, level: int, path: str,
                       query: LevelSetQuery | None = None) -> str:
    """Write the extracted required-margin profile at one level to CSV."""
    profile = required_margin_profile(field_obj, level, query)
    mesh = np.meshgrid(*field_obj.grid.state_axes, indexing="ij")
    table = np.column_stack([m.reshape(-1) for m in mesh] + [profile.reshape(-1)])
    header = [f"state_{i + 1}" for i in range(len(mesh))] + ["required_margin"]
    _write_rows(path, header, table)
    return path


_PLOT_TEMPLATE = """\
# rendered views of one solve: shortfall slices and the extracted profile.
# The dumb terminal renders anywhere gnuplot does; swap it for pngcairo
# (and .png output names) to get bitmaps.
set datafile separator comma
set key off
set terminal dumb size 120,35
set yrange [-1:*]
set xlabel 'state_1'
set output 'profile.txt'
set title 'required margin at the initial time'
plot '{profile}' every ::1 using 1:2 with lines
set output 'shortfall_slices.txt'
set title 'shortfall vs state at fixed margin levels'
plot {slices}
"""


def write_plot_script(path: str, slice_csv: str, profile_csv: str,
                      margin_levels: Sequence[float]) -> str:
    """Write a gnuplot script rendering the level-0 exports (1-D state only)."""
    slices = ", \\\n     ".join(
        f"'{slice_csv}' every ::1 using 1:($2 == {level:.17g} ? $3 : 1/0) with lines"
        for level in margin_levels
    )
    text = _PLOT_TEMPLATE.format(profile=profile_csv, slices=slices)
    with open(path, "w") as handle:
        handle.write(text)
    return path


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------

_INTERRUPT = {"pending": False}


def _flag_interrupt(signum: int, frame: Any) -> None:  # pragma: no cover
    _INTERRUPT["pending"] = True


def _interrupt_requested() -> bool:
    return _INTERRUPT["pending"]


@contextlib.contextmanager
def _signal_watch() -> Iterator[None]:
    """Route SIGINT/SIGTERM into a flag the level callback polls."""
    _INTERRUPT["pending"] = False
    if threading.current_thread() is not threading.main_thread():
        yield  # signal handlers are a main-thread privilege
        return
    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, _flag_interrupt)
    try:
        yield
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
        _INTERRUPT["pending"] = False


def _sha256(path: pathlib.Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_checkpoint(prefix: str, grid: Grid) -> tuple[int, Array] | None:
    if not (pathlib.Path(prefix + ".json").exists()
            and pathlib.Path(prefix + ".csv").exists()):
        return None
    meta, values = load_snapshot(prefix)
    want_state = [[float(ax[0]), float(ax[-1]), int(ax.shape[0])]
                  for ax in grid.state_axes]
    want_margin = [float(grid.margin_axis[0]), float(grid.margin_axis[-1]),
                   int(grid.margin_axis.shape[0])]
    want_times = [0.0, float(grid.times[-1]), int(grid.n_levels)]
    if (meta.get("kind") != "shortfall" or meta.get("state_axes") != want_state
            or meta.get("margin_axis") != want_margin
            or meta.get("times") != want_times):
        raise IncompatibleGrids(
            "the checkpoint was written on a different grid than the config describes"
        )
    return int(meta["level"]), values


def run(config: RunConfig, out_dir: str | None = None, *, resume: bool = False) -> dict[str, Any]:
    """Execute the full pipeline and write every artifact plus a manifest.

    Solves the floor and ceiling fields, sweeps the shortfall field with
    periodic checkpoints (and one on SIGINT/SIGTERM), extracts the
    required-margin profile, and writes the CSV/plot exports.  The manifest
    maps every artifact to its SHA-256 content hash and embeds the normalized
    config; nothing in it depends on wall-clock time, so rerunning the same
    document reproduces it bit for bit.  An interrupted sweep raises
    :class:`Interrupted` after checkpointing; ``resume=True`` picks such a
    run back up from the stored level.
    """
    out = pathlib.Path(out_dir if out_dir is not None else config.outputs["directory"])
    out.mkdir(parents=True, exist_ok=True)
    problem, options = config.problem, config.scheme
    grid = resolve_grid(config)
    floor = solve_floor(problem, grid, options)
    ceiling = solve_ceiling(problem, grid, options)

    ckpt_prefix = str(out / "checkpoint")
    resume_level: int | None = None
    resume_values: Array | None = None
    if resume:
        loaded = _load_checkpoint(ckpt_prefix, grid)
        if loaded is not None:
            resume_level, resume_values = loaded

    every = int(config.outputs["checkpoint_every"])
    last = grid.n_levels - 1
    levels = sorted(set(range(0, grid.n_levels, every)) | {last})
    slice_set = set(levels)

    # The terminal slice never reaches the level callback, and a resumed
    # sweep cannot revisit it, so it is written up front from the terminal
    # data alone (identical bytes on fresh and resumed runs).
    seed = blank_field(grid, "shortfall")
    seed.values[-1] = terminal_slice(problem, grid)
    seed.solved_from = last
    save_snapshot(seed, last, str(out / f"slice_{last:05d}"))

    def checkpointer(level: int, partial: Field) -> bool:
        # Decimated slices are persisted as the sweep passes them — before
        # the interrupt check — so a resumed run never has to revisit levels
        # the partial field no longer covers.
        if level in slice_set:
            save_snapshot(partial, level, str(out / f"slice_{level:05d}"))
        if _interrupt_requested():
            save_snapshot(partial, level, ckpt_prefix, tag="interrupt")
            return False
        if level != last and (last - level) % every == 0:
            save_snapshot(partial, level, ckpt_prefix, tag="checkpoint")
        return True

    with _signal_watch():
        field = solve_shortfall(problem, grid, options, floor=floor, ceiling=ceiling,
                                on_level=checkpointer, resume_values=resume_values,
                                resume_level=resume_level)
    if not field.solved:
        raise Interrupted(
            f"stopped at time level {field.solved_from}; checkpoint written at "
            f"{ckpt_prefix}.json — rerun with --resume to continue"
        )

    written: dict[str, str] = {}

    def record(*paths: str) -> None:
        for p in paths:
            q = pathlib.Path(p)
            if not q.exists():
                raise EpigraphError(
                    f"expected artifact {q.name} is missing; a resumed run must "
                    f"reuse the original output directory"
                )
            written[q.name] = _sha256(q)

    record(*save_snapshot(floor, 0, str(out / "floor")))
    record(*save_snapshot(ceiling, 0, str(out / "ceiling")))
    for level in levels:
        prefix = str(out / f"slice_{level:05d}")
        record(prefix + ".json", prefix + ".csv")

    # The default threshold reads the terminal slice, which a resumed field
    # no longer covers; the seed field holds it on both paths.
    epsilon = config.epsilon if config.epsilon is not None else default_epsilon(seed)
    query = LevelSetQuery(epsilon=epsilon)
    record(export_profile_csv(field, 0, str(out / "profile.csv"), query))
    record(export_slice_csv(field, 0, str(out / "w_t0.csv")))
    if "gnuplot" in config.outputs["formats"] and problem.dim_state == 1:
        margin = grid.margin_axis
        jz = grid.margin_zero_index
        picks = sorted({jz, (jz + margin.size - 1) // 2, margin.size - 1})
        record(write_plot_script(str(out / "plot.gp"), "w_t0.csv", "profile.csv",
                                 [float(margin[j]) for j in picks]))

    for suffix in (".json", ".csv"):  # a finished run needs no resume state
        leftover = pathlib.Path(ckpt_prefix + suffix)
        if leftover.exists():
            leftover.unlink()

    manifest = {
        "artifacts": written,
        "config": _config_document(config),
        "epsilon": float(epsilon),
        "grid": {"dt": float(grid.dt), "n_levels": int(grid.n_levels)},
        "snapshot_levels": [int(level) for level in levels],
    }
    with open(out / "manifest.json", "w") as handle:
        json.dump(manifest, handle, indent=1, sort_keys=True)
        handle.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# verification battery and simulation spot checks
# ---------------------------------------------------------------------------

_CHECK_NAMES = ("sign", "taylor", "lipschitz", "slab", "subsolution", "dpp")


def _taylor_report() -> DiagnosticReport:
    def g(p: Array) -> float:
        return float(np.exp(p[0] + 2.0 * p[1]))

    def gradient(p: Array) -> Array:
        value = np.exp(p[0] + 2.0 * p[1])
        return np.array([value, 2.0 * value])

    def hessian(p: Array) -> Array:
        value = np.exp(p[0] + 2.0 * p[1])
        return np.array([[value, 2.0 * value], [2.0 * value, 4.0 * value]])

    residual = taylor_remainder_residual(
        g, gradient, hessian, np.array([0.1, -0.2]), np.array([0.3, 0.1]),
        quad_nodes=20,
    )
    return make_report("taylor-remainder", residual, 1e-10,
                       details={"base": [0.1, -0.2], "shift": [0.3, 0.1]})


def _dpp_report(problem: Problem, field: Field, seed: int) -> DiagnosticReport:
    grid = field.grid
    rng = np.random.default_rng(seed)
    r_index = max(1, (grid.n_levels - 1) // 2)
    margin = grid.margin_axis
    low = min(grid.margin_zero_index + 1, margin.size - 2)
    states, margins = [], []
    for _ in range(4):
        states.append(np.array([float(axis[rng.integers(1, axis.size - 1)])
                                for axis in grid.state_axes]))
        margins.append(float(margin[rng.integers(low, margin.size - 1)]))
    stride = max(1, problem.controls.shape[0] // 5)
    return dpp_consistency(problem, field, 0, r_index, states, margins,
                           controls=problem.controls[::stride], n_paths=2000,
                           dt=grid.dt, seed=seed)


def run_verification(config: RunConfig, out_dir: str | None = None,
                     checks: str = "all") -> tuple[list[DiagnosticReport], bool]:
    """Run the diagnostic battery and write ``reports.json``.

    ``checks`` is "all" or a comma-separated subset of sign, taylor,
    lipschitz, slab, subsolution, dpp.  Under "all", checks whose grid
    preconditions fail (slab needs margins below zero, the subsolution probe
    needs the margin axis above -1) are skipped; naming one explicitly runs
    it unconditionally so its own error surfaces.
    """
    if checks in (None, "", "all"):
        requested, explicit = _CHECK_NAMES, False
    else:
        requested = tuple(part.strip() for part in checks.split(","))
        explicit = True
        for name in requested:
            if name not in _CHECK_NAMES:
                raise SchemaViolation(
                    f"unknown check {name!r}; available: {', '.join(_CHECK_NAMES)}"
                )
    reports: list[DiagnosticReport] = []
    if "sign" in requested:
        reports.append(sign_equivalence_suite(1000, seed=config.seed))
    if "taylor" in requested:
        reports.append(_taylor_report())
    if {"lipschitz", "slab", "subsolution", "dpp"} & set(requested):
        problem = config.problem
        grid = resolve_grid(config)
        floor = solve_floor(problem, grid, config.scheme)
        field = solve_shortfall(problem, grid, config.scheme, floor=floor)
        if "lipschitz" in requested:
            reports.append(lipschitz_profile(field))
        if "slab" in requested and (explicit or grid.margin_axis[0] < 0.0):
            reports.append(slab_identity_residual(field, floor))
        if "subsolution" in requested and (explicit or grid.margin_axis[0] > -1.0):
            reports.append(strict_subsolution_residual(
                problem, field, 0.1, options=config.scheme, max_levels=25))
        if "dpp" in requested:
            reports.append(_dpp_report(problem, field, config.seed))
    out = pathlib.Path(out_dir if out_dir is not None else config.outputs["directory"])
    out.mkdir(parents=True, exist_ok=True)
    write_reports(str(out / "reports.json"), reports)
    return reports, all(report.passed for report in reports)


def run_simulation(config: RunConfig, out_dir: str | None = None,
                   n_paths: int = 20000) -> dict[str, Any]:
    """Monte Carlo spot check: cost and shortfall estimates plus one logged path.

    Plays the first control constantly from the center of the state box with
    the starting margin clamped to zero from below; writes ``simulate.json``
    and ``path.csv``.
    """
    out = pathlib.Path(out_dir if out_dir is not None else config.outputs["directory"])
    out.mkdir(parents=True, exist_ok=True)
    problem = config.problem
    grid = resolve_grid(config)
    center = np.array([0.5 * (axis[0] + axis[-1]) for axis in grid.state_axes])
    start_margin = float(max(grid.margin_axis[0], 0.0))
    policy = constant_policy(problem.controls[0])
    cost = estimate_cost(problem, 0.0, center, policy, n_paths, grid.dt, config.seed)
    shortfall = estimate_shortfall(problem, 0.0, center, start_margin, policy,
                                   n_paths, grid.dt, config.seed + 1)
    sample = simulate_pair_path(problem, 0.0, center, start_margin, policy,
                                grid.dt, np.random.default_rng(config.seed))
    path_to_csv(sample, str(out / "path.csv"))
    results = {
        "control": np.atleast_1d(problem.controls[0]).tolist(),
        "state": center.tolist(),
        "margin": start_margin,
        "dt": float(grid.dt),
        "n_paths": int(n_paths),
        "cost": {"mean": cost.mean, "half_width": cost.half_width},
        "shortfall": {"mean": shortfall.mean, "half_width": shortfall.half_width},
    }
    with open(out / "simulate.json", "w") as handle:
        json.dump(results, handle, indent=1, sort_keys=True)
        handle.write("\n")
    return results


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_CONFIG_ERRORS = (ParseError, UnknownKey, SchemaViolation, MissingField,
                  NonpositiveHorizon, EmptyControlGrid, NegativeWeight,
                  DegenerateGrid)


def _read_config(args: argparse.Namespace) -> RunConfig:
    with open(args.config) as handle:
        config = parse_config(handle.read())
    if getattr(args, "out", None):
        config = dataclasses.replace(
            config, outputs={**config.outputs, "directory": args.out})
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "threads", None) is not None:
        config = dataclasses.replace(config, threads=args.threads)
    if getattr(args, "epsilon", None) is not None:
        config = dataclasses.replace(config, epsilon=args.epsilon)
    return config


def _cmd_solve(args: argparse.Namespace) -> int:
    config = _read_config(args)
    manifest = run(config, resume=args.resume)
    print(f"wrote {len(manifest['artifacts'])} artifacts under "
          f"{config.outputs['directory']} (see manifest.json)")
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    config = _read_config(args)
    out = pathlib.Path(config.outputs["directory"])
    out.mkdir(parents=True, exist_ok=True)
    grid = resolve_grid(config)
    if not 0 <= args.level < grid.n_levels:
        raise SchemaViolation(
            f"--level must be in [0, {grid.n_levels - 1}], got {args.level}")
    field = solve_shortfall(config.problem, grid, config.scheme)
    epsilon = config.epsilon if config.epsilon is not None else default_epsilon(field)
    path = out / f"profile_{args.level:05d}.csv"
    export_profile_csv(field, args.level, str(path), LevelSetQuery(epsilon=epsilon))
    print(f"wrote {path} (epsilon {epsilon:.6g})")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    config = _read_config(args)
    results = run_simulation(config, n_paths=args.paths)
    print(f"cost {results['cost']['mean']:.6g} +- {results['cost']['half_width']:.2g}, "
          f"shortfall {results['shortfall']['mean']:.6g} "
          f"+- {results['shortfall']['half_width']:.2g} "
          f"({args.paths} paths, see simulate.json)")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    config = _read_config(args)
    reports, all_pass = run_verification(config, checks=args.checks)
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {report.name:20s} max residual {report.max_residual:.4g} "
              f"vs tolerance {report.tolerance:.4g}")
    return 0 if all_pass else 3


def _cmd_report(args: argparse.Namespace) -> int:
    out = pathlib.Path(args.out)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        print(f"error: no manifest.json under {out}", file=sys.stderr)
        return 1
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    problem_spec = manifest["config"]["problem"]
    label = problem_spec.get("builtin") or problem_spec.get("name") or "inline"
    print(f"run directory: {out}")
    print(f"problem: {label}")
    print(f"grid: {manifest['grid']['n_levels']} levels, dt {manifest['grid']['dt']:.6g}")
    print(f"epsilon: {manifest['epsilon']:.6g}")
    print(f"artifacts ({len(manifest['artifacts'])}):")
    for name in sorted(manifest["artifacts"]):
        print(f"  {name}  {manifest['artifacts'][name][:12]}")
    reports_path = out / "reports.json"
    if reports_path.exists():
        with open(reports_path) as handle:
            payload = json.load(handle)
        for entry in payload["reports"]:
            status = "PASS" if entry["pass"] else "FAIL"
            print(f"verification: {status} {entry['name']}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epigraph",
        description="Shortfall-field solver with required-margin extraction.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", required=True, metavar="PATH",
                         help="JSON run configuration")
        sub.add_argument("--out", metavar="DIR", help="override the output directory")
        sub.add_argument("--threads", type=int, metavar="N",
                         help="thread budget (advisory)")
        sub.add_argument("--seed", type=int, metavar="N", help="override the run seed")

    sub = commands.add_parser("solve", help="run the full pipeline and write artifacts")
    common(sub)
    sub.add_argument("--resume", action="store_true",
                     help="continue from the latest checkpoint")
    sub.set_defaults(func=_cmd_solve)

    sub = commands.add_parser("extract", help="solve and write one required-margin profile")
    common(sub)
    sub.add_argument("--epsilon", type=float, metavar="X",
                     help="zero-level threshold override")
    sub.add_argument("--level", type=int, default=0, metavar="K",
                     help="time level to extract (default 0)")
    sub.set_defaults(func=_cmd_extract)

    sub = commands.add_parser("simulate", help="Monte Carlo spot checks for the problem")
    common(sub)
    sub.add_argument("--paths", type=int, default=20000, metavar="N",
                     help="number of sample paths (default 20000)")
    sub.set_defaults(func=_cmd_simulate)

    sub = commands.add_parser("verify", help="run the diagnostic battery")
    common(sub)
    sub.add_argument("--checks", default="all", metavar="LIST",
                     help=f"comma list from: {', '.join(_CHECK_NAMES)} (default all)")
    sub.set_defaults(func=_cmd_verify)

    sub = commands.add_parser("report", help="summarize a completed run directory")
    sub.add_argument("--out", required=True, metavar="DIR", help="run directory")
    sub.set_defaults(func=_cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return 0 if (exc.code or 0) == 0 else 1
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EpigraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
