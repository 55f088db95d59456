"""The algebra of one ADMM step.

All functions here are pure: x-subproblem assembly, the multiplier update,
the closed-form proximal consensus update for one edge, the per-worker
residue, the augmented Lagrangian value, and the multiplier box projection.
Synchronous and asynchronous drivers share these primitives so their
iterates can be compared bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .localsolver import SolverConfig, solve_local
from .problem import Array, CouplingEdge, PartitionedProblem, RegionSpec
from .problem import box_violation, equality_violation


@dataclass(frozen=True)
class AdmmParams:
    """Penalty weight rho, proximal weight alpha on the consensus update,
    waiting threshold p, and the multiplier projection box.

    The projection box defaults to [-1e6, 1e6] per coordinate: wide enough to
    stay inactive on all shipped fixtures, present so the multipliers are
    bounded by construction.
    """

    rho: float
    alpha: float = 0.0
    p: float = 1.0
    lambda_min: float = -1.0e6
    lambda_max: float = 1.0e6

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("p must lie in (0, 1]")
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda box is empty")


@dataclass
class WorkerState:
    """One region's mutable iterate: x, multipliers, consensus snapshot.

    ``z`` is the snapshot of this worker's boundary blocks taken at the start
    of its current x-update; ``ax`` caches A_k x for the current x. ``lam``
    and ``z`` always have as many entries as A_k has rows. ``local_iter``
    counts completed local cycles and never decreases.
    """

    region_index: int
    x: Array
    lam: Array
    z: Array
    ax: Array
    local_iter: int = 0
    last_update_global_iter: int = -1
    residue: float | None = None
    constraint_violation: float = 0.0

    @classmethod
    def initial(cls, problem: PartitionedProblem, k: int, x0: Array, z_global: Array):
        region = problem.region(k)
        x0 = np.asarray(x0, dtype=float)
        z = problem.region_z(z_global, k)
        return cls(
            region_index=k,
            x=x0,
            lam=np.zeros(region.boundary_rows),
            z=z,
            ax=region.boundary_map @ x0,
        )


@dataclass(frozen=True)
class BoundaryPenalty:
    """The linear-plus-quadratic coupling term of the x-subproblem:

        g(x) = lam . (A x) + (rho / 2) ||A x - z||^2

    with gradient A^T lam + rho A^T (A x - z).
    """

    A: Array
    lam: Array
    z: Array
    rho: float

    def value(self, x: Array) -> float:
        ax = self.A @ x
        r = ax - self.z
        return float(self.lam @ ax + 0.5 * self.rho * (r @ r))

    def grad(self, x: Array) -> Array:
        r = self.A @ x - self.z
        return self.A.T @ (self.lam + self.rho * r)

    def hess_diag(self, x: Array) -> Array:
        return self.rho * np.sum(self.A * self.A, axis=0)

    def hess(self, x: Array) -> Array:
        return self.rho * (self.A.T @ self.A)


def project_lambda(lam: Array, lower, upper) -> Array:
    """Coordinatewise clamp onto the multiplier box; idempotent."""
    return np.clip(lam, lower, upper)


def x_update(
    region: RegionSpec,
    state: WorkerState,
    params: AdmmParams,
    solver: SolverConfig,
    warm_state: tuple | None = None,
):
    """Solve the local x-subproblem

        argmin_x  f_k(x) + lam . (A x) + (rho / 2) ||A x - state.z||^2

    over the region's feasible set, warm-started from the current x (and,
    optionally, from the previous solve's equality multipliers and penalty).
    ``state.z`` must be the snapshot taken at the start of this update.
    Returns the solver result (minimiser plus diagnostics).
    """
    penalty = BoundaryPenalty(region.boundary_map, state.lam, state.z, params.rho)
    eq_mult, pen = warm_state if warm_state is not None else (None, None)
    return solve_local(region, penalty, state.x, solver,
                       eq_multipliers=eq_mult, penalty_start=pen)


def lambda_update(state: WorkerState, ax_new: Array, z_snapshot: Array, params: AdmmParams) -> Array:
    """lam + rho (A x_new - z_snapshot), projected onto the multiplier box."""
    ax_new = np.asarray(ax_new, dtype=float)
    z_snapshot = np.asarray(z_snapshot, dtype=float)
    if ax_new.shape != state.lam.shape or z_snapshot.shape != state.lam.shape:
        raise ValueError("lambda update: vector lengths differ")
    return project_lambda(
        state.lam + params.rho * (ax_new - z_snapshot), params.lambda_min, params.lambda_max
    )


def z_update(
    edge: CouplingEdge,
    lam_kl: Array,
    lam_lk: Array,
    ax_k: Array,
    ax_l: Array,
    z_prev: Array,
    params: AdmmParams,
) -> Array:
    """Closed-form proximal consensus update for one edge block:

        z = (lam_kl + lam_lk + rho ax_k + rho ax_l + alpha z_prev) / (2 rho + alpha)

    The same value serves as both regions' copy of the block. The output
    satisfies the stationarity identity

        lam_kl + lam_lk + rho (ax_k - z) + rho (ax_l - z) - alpha (z - z_prev) = 0

    to floating-point accuracy.
    """
    vecs = [np.asarray(v, dtype=float) for v in (lam_kl, lam_lk, ax_k, ax_l, z_prev)]
    if any(v.shape != (edge.dim,) for v in vecs):
        raise ValueError(f"z update on edge ({edge.k},{edge.l}): expected length {edge.dim}")
    lam_kl, lam_lk, ax_k, ax_l, z_prev = vecs
    return (lam_kl + lam_lk + params.rho * ax_k + params.rho * ax_l + params.alpha * z_prev) / (
        2.0 * params.rho + params.alpha
    )


def residue(state: WorkerState, z_prev: Array) -> float:
    """Infinity norm of the stacked primal (A x - z) and dual (z - z_prev)
    residuals of one worker."""
    z_prev = np.asarray(z_prev, dtype=float)
    if z_prev.shape != state.z.shape:
        raise ValueError("residue: z_prev length differs from state.z")
    if state.z.size == 0:
        return 0.0
    primal = state.ax - state.z
    dual = state.z - z_prev
    return float(max(np.max(np.abs(primal)), np.max(np.abs(dual))))


@dataclass(frozen=True)
class LagrangianValue:
    feasible: bool
    value: float | None
    max_violation: float


def augmented_lagrangian(
    problem: PartitionedProblem,
    x_all: list[Array],
    z_global: Array,
    lam_all: list[Array],
    params: AdmmParams,
    feas_tol: float = 1e-6,
) -> LagrangianValue:
    """Sum over regions of f_k + lam_k.(A_k x_k - z_k) + (rho/2)||A_k x_k - z_k||^2.

    The consensus constraint on z holds by construction (one block per edge).
    If any x_k violates its box or equality constraints beyond ``feas_tol``
    the value is undefined: the result carries ``feasible=False`` and no
    scalar, never a synthetic large number.
    """
    worst = 0.0
    for k in range(1, problem.num_regions + 1):
        region = problem.region(k)
        x = np.asarray(x_all[k - 1], dtype=float)
        worst = max(worst, box_violation(region, x), equality_violation(region, x))
    if worst > feas_tol:
        return LagrangianValue(feasible=False, value=None, max_violation=worst)
    total = 0.0
    for k in range(1, problem.num_regions + 1):
        region = problem.region(k)
        x = np.asarray(x_all[k - 1], dtype=float)
        z_k = problem.region_z(z_global, k)
        r = region.boundary_map @ x - z_k
        total += region.objective(x) + float(lam_all[k - 1] @ r) + 0.5 * params.rho * float(r @ r)
    return LagrangianValue(feasible=True, value=total, max_violation=worst)


def initial_z(problem: PartitionedProblem, x_all: list[Array]) -> Array:
    """Edge-wise average of the two regions' boundary values at x_all.

    This is the consensus minimiser for zero multipliers, so a first
    consensus update from the same data leaves it unchanged; both drivers
    initialise z this way.
    """
    z = np.zeros(problem.boundary_dim)
    for i, e in enumerate(problem.edges):
        ax_k = problem.region(e.k).boundary_map @ np.asarray(x_all[e.k - 1], dtype=float)
        ax_l = problem.region(e.l).boundary_map @ np.asarray(x_all[e.l - 1], dtype=float)
        z[problem.edge_slice(i)] = 0.5 * (ax_k[e.block_of(e.k)] + ax_l[e.block_of(e.l)])
    return z
