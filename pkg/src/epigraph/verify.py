"""Diagnostics tying the solved fields back to the continuous theory.

Each check packages one falsifiable statement about a solved field — the
negative-margin slab is linear, a perturbed field is a strictly negative
scheme residual, the dynamic programming inequality holds against Monte
Carlo, difference quotients stay bounded under refinement, the eigenvalue
form of the hedge supremum has the right sign — as a
:class:`DiagnosticReport` with a scalar residual, a tolerance, and enough
detail to locate the worst offender.  The CLI aggregates these into a
verification run; the acceptance tests pin their values.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field as dataclass_field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import IncompatibleGrids
from .fields import Field
from .hamiltonian import Stencil, assemble_arrowhead, top_eigenvalue
from .model import Coefficients, Problem
from .simulate import _chunked, constant_policy
from .solver import DEFAULT_OPTIONS, SchemeOptions, max_stable_dt, step_backward

Array = np.ndarray


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------

def _plain(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays so json.dump accepts them."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


@dataclass(frozen=True)
class DiagnosticReport:
    """One check's outcome: pass is defined as max_residual <= tolerance."""

    name: str
    max_residual: float
    tolerance: float
    passed: bool
    details: dict[str, Any] = dataclass_field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.passed != (self.max_residual <= self.tolerance):
            raise ValueError(
                f"pass flag {self.passed} contradicts residual "
                f"{self.max_residual} vs tolerance {self.tolerance}"
            )

    def as_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "max_residual": float(self.max_residual),
            "tolerance": float(self.tolerance),
            "pass": self.passed,
            "details": _plain(self.details),
        }


def make_report(
    name: str,
    max_residual: float,
    tolerance: float,
    details: dict[str, Any] | None = None,
) -> DiagnosticReport:
    return DiagnosticReport(
        name=name,
        max_residual=float(max_residual),
        tolerance=float(tolerance),
        passed=bool(max_residual <= tolerance),
        details=details or {},
    )


def write_reports(path: str, reports: Sequence[DiagnosticReport]) -> None:
    payload = {
        "all_pass": all(r.passed for r in reports),
        "reports": [r.as_dict() for r in reports],
    }
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=1, sort_keys=True)
        handle.write("\n")


# ---------------------------------------------------------------------------
# quadrature check for the second-order remainder identity
# ---------------------------------------------------------------------------

def taylor_remainder_residual(
    g: Callable[[Array], float],
    gradient: Callable[[Array], Array],
    hessian: Callable[[Array], Array],
    x: Array | float,
    shift: Array | float,
    quad_nodes: int = 20,
) -> float:
    """Defect of the exact second-order expansion with integral remainder.

    Evaluates |g(x+a) - g(x) - <Dg(x), a> - R| where the remainder

        R = integral over z in [0,1] of (1-z) <D^2 g(x + z a) a, a> dz

    is computed by ``quad_nodes``-point Gauss-Legendre quadrature.  Zero (to
    quadrature precision) for any g with an integrable second derivative;
    exactly zero for quadratics at any node count >= 2.
    """
    if quad_nodes < 2:
        raise ValueError("the remainder integrand needs at least 2 quadrature nodes")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = np.atleast_1d(np.asarray(shift, dtype=float))
    nodes, weights = np.polynomial.legendre.leggauss(quad_nodes)
    z = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    remainder = 0.0
    for zi, wi in zip(z, w):
        hess = np.atleast_2d(np.asarray(hessian(x + zi * a), dtype=float))
        remainder += wi * (1.0 - zi) * float(a @ hess @ a)
    grad = np.atleast_1d(np.asarray(gradient(x), dtype=float))
    defect = float(g(x + a)) - float(g(x)) - float(grad @ a) - remainder
    return abs(defect)


# ---------------------------------------------------------------------------
# the negative-margin slab is the floor minus the margin
# ---------------------------------------------------------------------------

def slab_identity_residual(
    field: Field, floor: Field, tolerance: float = 1e-9
) -> DiagnosticReport:
    """Check W(t, a, b) = W0(t, a) - b on every node with b <= 0.

    The sub-zero margin rows evolve under the same sweep as the rest of the
    field, so agreement with the independently solved floor is a genuine
    two-route comparison, not a tautology.  The worst offending node is
    reported for fault localization.
    """
    if field.kind != "shortfall" or floor.kind != "floor":
        raise IncompatibleGrids(
            f"need a shortfall and a floor field, got {field.kind!r} and {floor.kind!r}"
        )
    if not field.grid.matches(floor.grid):
        raise IncompatibleGrids("the fields were solved on different grids")
    b = field.grid.margin_axis
    below = b <= 0.0
    if not np.any(b < 0.0):
        raise IncompatibleGrids("the margin axis never goes below zero")

    expect = floor.values[..., None] - b[below]
    gap = np.abs(field.values[..., below] - expect)
    worst_flat = int(np.argmax(gap))
    worst_idx = np.unravel_index(worst_flat, gap.shape)
    details = {
        "n_nodes": int(gap.size),
        "worst": {
            "level": int(worst_idx[0]),
            "state_index": [int(i) for i in worst_idx[1:-1]],
            "margin_index": int(np.flatnonzero(below)[worst_idx[-1]]),
            "residual": float(gap[worst_idx]),
        },
    }
    return make_report("slab-identity", float(gap.max()), tolerance, details)


# ---------------------------------------------------------------------------
# strict-subsolution probe
# ---------------------------------------------------------------------------

def _log_margin_probe(t: float, horizon: float, margin: Array, nu: float) -> Array:
    return nu * (-(horizon - t) - np.log1p(margin))


def strict_subsolution_residual(
    problem: Problem,
    field: Field,
    nu: float,
    options: SchemeOptions = DEFAULT_OPTIONS,
    *,
    tol_h: float | None = None,
    max_levels: int | None = None,
) -> DiagnosticReport:
    """Scheme residual of the field after the strictly-negative perturbation.

    Perturbs the solved field by nu * (-(T-t) - log(1+b)) and re-evaluates
    the discrete time slope: the perturbed field must violate the scheme by
    a margin — residual <= -nu/8 plus a consistency allowance ``tol_h`` — on
    at least 95% of interior nodes with b >= 0 (the reported residual is the
    95th-percentile node value).  With nu = 0 this degenerates to checking
    that the solved field itself has zero interior residual.
    """
    if not field.solved or field.kind != "shortfall":
        raise ValueError("need a fully solved shortfall field")
    grid = field.grid
    if float(grid.margin_axis[0]) <= -1.0:
        raise ValueError("the log-margin probe needs the margin axis above -1")
    if tol_h is None:
        tol_h = grid.dt + float(max(grid.state_spacings)) + grid.margin_spacing

    levels = np.arange(grid.n_levels - 1)
    if max_levels is not None and levels.shape[0] > max_levels:
        levels = levels[np.linspace(0, levels.shape[0] - 1, max_levels).astype(int)]

    jz = grid.margin_zero_index
    interior: list = [slice(None)] + [slice(1, -1)] * grid.dim_state
    interior.append(slice(jz + 1, -1))

    bound = max_stable_dt(problem, grid, options.safety)
    b = grid.margin_axis
    horizon = problem.horizon
    pooled = []
    for k in levels:
        t_next = float(grid.times[k + 1])
        dt = t_next - float(grid.times[k])
        pert_prev = field.values[k + 1] + _log_margin_probe(t_next, horizon, b, nu)
        stepped = step_backward(
            pert_prev, t_next, dt, problem, grid, options, cfl_bound=bound
        )
        pert_target = field.values[k] + _log_margin_probe(
            float(grid.times[k]), horizon, b, nu
        )
        residual = (pert_target - stepped) / dt
        pooled.append(residual[tuple(interior[1:])][None, ...])
    res = np.concatenate(pooled, axis=0).ravel()

    tolerance = -nu / 8.0 + tol_h
    pctl95 = float(np.quantile(res, 0.95, method="inverted_cdf"))
    details = {
        "nu": nu,
        "tol_h": tol_h,
        "n_nodes": int(res.size),
        "levels_checked": int(len(levels)),
        "fraction_within": float(np.mean(res <= tolerance)),
        "worst_residual": float(res.max()),
        "median_residual": float(np.median(res)),
    }
    return make_report("strict-subsolution", pctl95, tolerance, details)


# ---------------------------------------------------------------------------
# one-sided dynamic programming check against Monte Carlo
# ---------------------------------------------------------------------------

def dpp_consistency(
    problem: Problem,
    field: Field,
    t_index: int,
    r_index: int,
    states: Array,
    margins: Array,
    *,
    controls: Array | None = None,
    n_paths: int = 2000,
    dt: float | None = None,
    seed: int = 0,
    tol: float | None = None,
) -> DiagnosticReport:
    """W(t) must not exceed any restarted constant-policy estimate.

    For each sampled (state, margin), simulates the pair from t to the
    intermediate time r under every constant control (zero hedges), accrues
    the constraint penalty, continues with the interpolated field value at
    r, and takes the cheapest policy.  Since constant policies are a subset
    of admissible ones, the estimate can only overestimate the true
    continuation value: the check is one-sided,

        W(t, a, b) <= estimate + CI + tol.

    The reported residual is the largest signed gap over the samples.
    """
    if not 0 <= t_index < r_index < field.grid.n_levels:
        raise ValueError("need t_index < r_index on the time grid")
    grid = field.grid
    t0 = float(grid.times[t_index])
    r = float(grid.times[r_index])
    sub = dataclasses.replace(problem, horizon=r)
    if dt is None:
        dt = (r - t0) / 16.0
    if tol is None:
        tol = grid.dt + float(max(grid.state_spacings)) + grid.margin_spacing
    if controls is None:
        controls = problem.controls

    states = np.atleast_2d(np.asarray(states, dtype=float))
    margins = np.atleast_1d(np.asarray(margins, dtype=float))
    rows = []
    worst = -math.inf
    for i in range(states.shape[0]):
        here = float(
            field.evaluate(t_index, states[i : i + 1], margins=margins[i])[0]
        )
        best: dict[str, float] | None = None
        for j, u in enumerate(controls):
            stats = _chunked(
                sub, constant_policy(u), t0, states[i], float(margins[i]),
                n_paths, dt, seed + i * len(controls) + j,
            )
            cont = field.evaluate(r_index, stats["x_T"], margins=stats["y_T"])
            samples = stats["penalty"] + cont
            mean = float(np.mean(samples))
            half = (
                float(1.96 * np.std(samples, ddof=1) / np.sqrt(n_paths))
                if n_paths > 1 else 0.0
            )
            if best is None or mean < best["mean"]:
                best = {"mean": mean, "half_width": half, "control": float(u[0])}
        residual = here - (best["mean"] + best["half_width"])
        worst = max(worst, residual)
        rows.append({
            "state": states[i].tolist(),
            "margin": float(margins[i]),
            "field_value": here,
            "estimate": best["mean"],
            "half_width": best["half_width"],
            "residual": residual,
        })
    details = {
        "t_index": t_index,
        "r_index": r_index,
        "n_paths": n_paths,
        "mc_dt": dt,
        "samples": rows,
    }
    return make_report("dpp-one-sided", worst, float(tol), details)


# ---------------------------------------------------------------------------
# Lipschitz difference quotients
# ---------------------------------------------------------------------------

def _quotients(field: Field) -> dict[str, Any]:
    # the top margin row is externally pinned Dirichlet data: its seam with
    # the evolved rows scales like 1/spacing and says nothing about the
    # field's own regularity, so all quotients exclude it
    core = field.values[field.solved_from : field.solved_to + 1, ..., :-1]
    grid = field.grid
    state_q = [
        float(np.abs(np.diff(core, axis=1 + i)).max()) / grid.state_spacings[i]
        for i in range(grid.dim_state)
    ]
    margin_q = float(np.abs(np.diff(core, axis=-1)).max()) / grid.margin_spacing
    return {"state_quotients": state_q, "margin_quotient": margin_q}


def lipschitz_profile(
    field: Field,
    refined: Field | None = None,
    *,
    margin_tol: float = 1e-6,
    ratio_bound: float = 1.5,
) -> DiagnosticReport:
    """Difference-quotient bounds: slope at most 1 in the margin, stable in state.

    The margin direction inherits the terminal slice's unit slope and the
    dynamics never amplify it, so its quotient must not exceed 1 (plus
    roundoff).  State-direction quotients have no universal constant; when a
    ``refined`` solve of the same problem is supplied, their growth ratio is
    bounded instead.  The residual is the worst criterion slack (pass at 0).
    """
    if not field.has_margin_axis:
        raise ValueError("difference-quotient profile needs a margin-bearing field")
    base = _quotients(field)
    slacks = [base["margin_quotient"] - (1.0 + margin_tol)]
    details: dict[str, Any] = {"base": base, "margin_bound": 1.0 + margin_tol}
    if refined is not None:
        fine = _quotients(refined)
        ratios = []
        for coarse_q, fine_q in zip(
            base["state_quotients"] + [base["margin_quotient"]],
            fine["state_quotients"] + [fine["margin_quotient"]],
        ):
            if coarse_q > 0.0:
                ratios.append(fine_q / coarse_q)
            else:
                ratios.append(1.0 if fine_q == 0.0 else math.inf)
        slacks.append(fine["margin_quotient"] - (1.0 + margin_tol))
        slacks.append(max(ratios) - ratio_bound)
        details["refined"] = fine
        details["ratios"] = ratios
        details["ratio_bound"] = ratio_bound
    return make_report("lipschitz-quotients", max(slacks), 0.0, details)


# ---------------------------------------------------------------------------
# sign equivalence of the eigenvalue form
# ---------------------------------------------------------------------------

def sign_equivalence_suite(
    n_instances: int = 1000, seed: int = 0, *, agreement: float = 0.99
) -> DiagnosticReport:
    """Random-stencil audit of the hedged supremum's eigenvalue form.

    Draws margin-convex stencils (concave hedge quadratics, so the raw
    supremum is the finite closed form corner + cross^2 / (2 hess_margin))
    and checks that the arrowhead top eigenvalue has the same sign.
    Instances with |eigenvalue| below 1e-8 are too close to the boundary to
    classify and are skipped.  The residual is the disagreement fraction.
    """
    if n_instances < 1:
        raise ValueError("need at least one instance")
    rng = np.random.default_rng(seed)
    considered = 0
    agree = 0
    disagreements: list[dict[str, float]] = []
    for _ in range(n_instances):
        stencil = Stencil(
            time_slope=float(rng.normal()),
            grad_state=rng.normal(size=1),
            grad_margin=float(rng.normal()),
            hess_state=rng.normal(size=(1, 1)),
            hess_cross=rng.normal(size=1),
            hess_margin=float(rng.uniform(0.1, 3.0)),
        )
        coeffs = Coefficients(
            drift=rng.normal(size=1),
            diffusion=rng.normal(size=(1, 1)),
            jump_sizes=np.zeros((0, 1)),
            running=float(rng.uniform(0.0, 1.0)),
            terminal=0.0,
        )
        dist = float(rng.uniform(0.0, 1.0))
        b = float(rng.uniform(0.0, 5.0))
        head = assemble_arrowhead(stencil, coeffs, dist, b)
        eig = top_eigenvalue(head)
        if abs(eig) < 1e-8:
            continue
        considered += 1
        cross = float(coeffs.diffusion[0, 0] * stencil.hess_cross[0])
        exact_sup = head.corner + cross**2 / (2.0 * stencil.hess_margin)
        if math.copysign(1.0, exact_sup) == math.copysign(1.0, eig):
            agree += 1
        elif len(disagreements) < 5:
            disagreements.append({
                "eigenvalue": eig, "exact_sup": exact_sup, "margin": b,
            })
    fraction = agree / considered if considered else 1.0
    details = {
        "n_instances": n_instances,
        "considered": considered,
        "agree": agree,
        "disagreements": disagreements,
    }
    return make_report("sign-equivalence", 1.0 - fraction, 1.0 - agreement, details)
