"""Local subproblem solver: box bounds handled by projection, smooth equality
constraints by an augmented-Lagrangian outer loop.

The inner loop is monotone projected descent along the box-projection arc
with Armijo backtracking: a two-metric Newton direction (Gauss-Newton model
of the augmented objective on the free coordinates) where available, a
Barzilai-Borwein scaled gradient step otherwise. Everything is
deterministic: identical inputs produce bitwise-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .problem import Array, RegionSpec

_ARMIJO = 1e-4
_STEP_MIN = 1e-14
_STEP_MAX = 1e12
_PENALTY_MAX = 1e12
_PROGRESS_WINDOW = 50


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and loop caps for the local solver."""

    max_iters: int = 60
    grad_tol: float = 1e-6
    constraint_tol: float = 1e-6
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    inner_max_iters: int = 3000

    def __post_init__(self):
        if self.grad_tol <= 0 or self.constraint_tol <= 0 or self.penalty_init <= 0:
            raise ValueError("tolerances and penalty_init must be positive")
        if self.penalty_growth <= 1:
            raise ValueError("penalty_growth must exceed 1")
        if self.max_iters < 1 or self.inner_max_iters < 1:
            raise ValueError("iteration caps must be at least 1")


@dataclass
class SolveResult:
    x: Array
    grad_norm: float
    constraint_norm: float
    outer_iters: int
    inner_iters: int
    eq_multipliers: Array
    penalty: float = 0.0
    # (merit at stage start, merit at stage end) for each outer stage;
    # the inner loop is monotone, so end <= start holds per stage.
    merit_path: list[tuple[float, float]] = field(default_factory=list)
    # the line search hit double-precision resolution before reaching the
    # gradient tolerance; grad_norm then reports the achieved floor
    at_numeric_floor: bool = False

    @property
    def warm_state(self) -> tuple[Array, float]:
        """Carry (equality multipliers, penalty) into the next similar solve."""
        return self.eq_multipliers, self.penalty


class SolveError(RuntimeError):
    """Raised when the solver exhausts its caps with residuals above
    tolerance; carries the best iterate found so the caller may retry."""

    def __init__(self, message: str, best_x: Array, grad_norm: float, constraint_norm: float):
        super().__init__(message)
        self.best_x = best_x
        self.grad_norm = grad_norm
        self.constraint_norm = constraint_norm


def _projected_gradient_norm(x: Array, g: Array, lo: Array, hi: Array) -> float:
    return float(np.max(np.abs(x - np.clip(x - g, lo, hi)), initial=0.0))


def _safe_metric(raw: Array | None, n: int) -> Array:
    """Positive diagonal metric from a raw curvature estimate."""
    if raw is None:
        return np.ones(n)
    raw = np.asarray(raw, dtype=float)
    top = float(np.max(raw, initial=0.0))
    if top <= 0.0:
        return np.ones(n)
    return np.maximum(raw, 1e-8 * top)


def _newton_direction(H, g, x, lo, hi, D):
    """Two-metric descent direction: a damped Newton step on the free
    coordinates, a metric-scaled gradient step on the ones pinned at an
    active bound; returns None when the Newton system is unusable."""
    eps = 1e-10
    free = ~(((x <= lo + eps) & (g > 0)) | ((x >= hi - eps) & (g < 0)))
    d = -g / D
    if not np.any(free):
        return d
    Hf = H[np.ix_(free, free)]
    reg = 1e-9 * max(float(np.trace(Hf)) / Hf.shape[0], 1.0)
    for _ in range(6):
        try:
            step = np.linalg.solve(Hf + reg * np.eye(Hf.shape[0]), -g[free])
        except np.linalg.LinAlgError:
            step = None
        if step is not None and np.all(np.isfinite(step)) and float(g[free] @ step) < 0:
            d = d.copy()
            d[free] = step
            return d
        reg *= 100.0
    return None


def _pg_minimize(value, grad, x, lo, hi, tol, max_iters, metric=None, hess=None):
    """Monotone projected descent with backtracking Armijo line search along
    the box-projection arc.

    The search direction is a two-metric Newton step (free coordinates take
    a damped Newton step from ``hess``, bound-pinned coordinates a scaled
    gradient step) when a Hessian model is available, otherwise a
    Barzilai-Borwein scaled gradient step under the diagonal ``metric``.
    The stopping norm is the plain (unscaled) projected gradient. Returns
    (x, value, grad, pg_norm, iterations, stalled) where ``stalled`` means
    the line search could not certify any further decrease."""
    x = np.clip(x, lo, hi)
    D = _safe_metric(metric, x.size)
    v = value(x)
    g = grad(x)
    t = 1.0 if metric is not None else 1.0 / max(float(np.max(np.abs(g), initial=0.0)), 1.0)
    prev_x = prev_g = None
    it = 0
    stalled = False
    checkpoint = (0, v)  # (iteration, value) for progress tracking
    while it < max_iters:
        pgn = _projected_gradient_norm(x, g, lo, hi)
        if pgn <= tol:
            break
        direction = None
        if hess is not None:
            direction = _newton_direction(np.asarray(hess(x), dtype=float), g, x, lo, hi, D)
        accepted = False
        if direction is not None:
            step = 1.0
            for _ in range(30):
                xn = np.clip(x + step * direction, lo, hi)
                d = xn - x
                if not np.any(d):
                    break
                vn = value(xn)
                if np.isfinite(vn) and vn <= v + _ARMIJO * float(g @ d):
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            # scaled-gradient step with BB seed
            if prev_x is not None:
                s = x - prev_x
                yg = g - prev_g
                sty = float(s @ yg)
                if sty > 0.0:
                    t = float(s @ (D * s)) / sty
                else:
                    t = min(t * 2.0, _STEP_MAX)
            t = min(max(t, _STEP_MIN), _STEP_MAX)
            step = t
            for _ in range(60):
                xn = np.clip(x - (step / D) * g, lo, hi)
                d = xn - x
                if not np.any(d):
                    break
                vn = value(xn)
                if np.isfinite(vn) and vn <= v + _ARMIJO * float(g @ d):
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            stalled = True
            break  # projection arc exhausted: cannot certify further descent
        prev_x, prev_g = x, g
        x, v = xn, vn
        g = grad(x)
        it += 1
        if it - checkpoint[0] >= _PROGRESS_WINDOW:
            if checkpoint[1] - v <= 1e-12 * max(1.0, abs(v)):
                stalled = True
                break  # descent continues only below value resolution
            checkpoint = (it, v)
    pgn = _projected_gradient_norm(x, g, lo, hi)
    return x, v, g, pgn, it, stalled and pgn > tol


def solve_local(
    region: RegionSpec,
    extra,
    x_start,
    config: SolverConfig,
    eq_multipliers: Array | None = None,
    penalty_start: float | None = None,
) -> SolveResult:
    """Find a local minimiser of f_k(x) + extra(x) over the region's box and
    equality constraints.

    ``extra`` is any object with ``value(x)`` and ``grad(x)`` (or None);
    an optional ``hess_diag(x)`` improves the inner metric. The start point
    is clamped into the box. ``eq_multipliers`` warm-starts the equality
    multiplier estimates; repeated similar solves (as in an ADMM loop)
    finish in very few outer stages when they are carried over.

    On success the returned point satisfies the box exactly, the equality
    constraints to ``constraint_tol`` (infinity norm), and the projected
    gradient of the local Lagrangian is below the gradient tolerance. The
    gradient tolerance is relative to the objective's gradient magnitude at
    the start point (floored at 1), so problems stated in large units are
    not held to an absolute cutoff below floating-point resolution. Cap
    exhaustion raises :class:`SolveError` carrying the best iterate.
    """
    lo, hi = region.lower, region.upper
    x = np.clip(np.asarray(x_start, dtype=float), lo, hi)

    def phi(xv):
        val = region.objective(xv)
        if extra is not None:
            val += extra.value(xv)
        return float(val)

    def phi_grad(xv):
        g = np.asarray(region.gradient(xv), dtype=float)
        if extra is not None:
            g = g + extra.grad(xv)
        return g

    def region_hess_diag(xv):
        if region.hessian_diag is None:
            return np.zeros(region.dim_x)
        return np.asarray(region.hessian_diag(xv), dtype=float)

    def phi_hess_diag(xv):
        d = region_hess_diag(xv)
        if extra is not None and hasattr(extra, "hess_diag"):
            d = d + np.asarray(extra.hess_diag(xv), dtype=float)
        return d

    def phi_hess(xv):
        # negative objective curvature is clamped out of the Newton model
        H = np.diag(np.maximum(region_hess_diag(xv), 0.0))
        if extra is not None and hasattr(extra, "hess"):
            H = H + np.asarray(extra.hess(xv), dtype=float)
        return H

    grad_scale = max(1.0, float(np.max(np.abs(phi_grad(x)), initial=0.0)))
    grad_tol = config.grad_tol * grad_scale

    if region.equality is None:
        x, _, g, pgn, it, stalled = _pg_minimize(phi, phi_grad, x, lo, hi, grad_tol,
                                                 config.inner_max_iters,
                                                 metric=phi_hess_diag(x),
                                                 hess=phi_hess)
        if pgn > grad_tol and not stalled:
            raise SolveError(
                f"projected gradient stopped at |pg|={pgn:.3e} > {grad_tol:.1e}",
                x, pgn, 0.0,
            )
        return SolveResult(x, pgn, 0.0, 1, it, np.zeros(0),
                           penalty=0.0, at_numeric_floor=stalled)

    h_fun = region.equality
    jac = region.equality_jacobian
    y = (np.asarray(eq_multipliers, dtype=float).copy()
         if eq_multipliers is not None else np.zeros(region.eq_dim))
    mu = float(penalty_start) if penalty_start else config.penalty_init
    merit_path: list[tuple[float, float]] = []
    total_inner = 0
    inner_budget = 4 * config.inner_max_iters
    best = (np.inf, x, np.inf)  # (constraint norm, x, pg norm)
    prev_hnorm = math.inf
    stalls = 0

    for outer in range(1, config.max_iters + 1):

        def al_value(xv, y=y, mu=mu):
            h = np.asarray(h_fun(xv), dtype=float)
            return phi(xv) + float(y @ h) + 0.5 * mu * float(h @ h)

        def al_grad(xv, y=y, mu=mu):
            h = np.asarray(h_fun(xv), dtype=float)
            return phi_grad(xv) + np.asarray(jac(xv), dtype=float).T @ (y + mu * h)

        def al_hess(xv, mu=mu):
            # Gauss-Newton model: constraint curvature enters through J^T J
            J = np.asarray(jac(xv), dtype=float)
            return phi_hess(xv) + mu * (J.T @ J)

        J0 = np.asarray(jac(x), dtype=float)
        metric = phi_hess_diag(x) + mu * np.sum(J0 * J0, axis=0)
        start_val = al_value(x)
        x, end_val, g, pgn, it, stalled = _pg_minimize(
            al_value, al_grad, x, lo, hi, grad_tol,
            config.inner_max_iters, metric=metric, hess=al_hess,
        )
        merit_path.append((start_val, end_val))
        total_inner += it
        h = np.asarray(h_fun(x), dtype=float)
        hnorm = float(np.max(np.abs(h), initial=0.0))
        if hnorm < best[0]:
            best = (hnorm, x.copy(), pgn)
        if hnorm <= config.constraint_tol and pgn <= grad_tol:
            return SolveResult(x, pgn, hnorm, outer, total_inner, y + mu * h,
                               penalty=mu, merit_path=merit_path)
        if hnorm <= config.constraint_tol and (stalled or total_inner >= inner_budget):
            # feasible, and descent is no longer certifiable at this
            # precision (or the iteration budget is spent): report the
            # achieved floor instead of spinning
            return SolveResult(x, pgn, hnorm, outer, total_inner, y + mu * h,
                               penalty=mu, merit_path=merit_path,
                               at_numeric_floor=True)
        stalls = stalls + 1 if stalled else 0
        if stalls >= 4 or total_inner >= inner_budget:
            break
        # first-order multiplier step every stage; grow the penalty when
        # feasibility is not improving fast enough, and always out of a
        # stall (a sharper feasibility valley restores resolvable descent)
        y = y + mu * h
        if hnorm > config.constraint_tol and (stalled or hnorm > 0.25 * prev_hnorm):
            mu = min(mu * config.penalty_growth, _PENALTY_MAX)
        prev_hnorm = hnorm

    raise SolveError(
        f"local solve stopped after {len(merit_path)} stages: "
        f"|h|={best[0]:.3e}, |pg|={best[2]:.3e}",
        best[1], best[2], best[0],
    )
