"""AC optimal power flow as a partitioned problem.

A case (buses, branches, generators, quadratic costs) plus a region
partition compiles into one :class:`~asyncadmm.problem.PartitionedProblem`
region per partition class. Voltages are kept in rectangular coordinates
(V = e + jf) so the boundary coupling is linear; voltage magnitude limits
become box bounds on an auxiliary variable u with the smooth equality
u = e^2 + f^2.

For every tie line between two regions the endpoint voltages are duplicated
into both regions, and the shared consensus block carries the scaled
difference and sum of the two endpoint voltages,

    z_minus = beta_minus (V_from - V_to),   z_plus = beta_plus (V_from + V_to),

two real coordinates each, so each tie line contributes a block of four.
The difference weight should exceed the sum weight (it tracks the line
flow); the builder warns, but does not fail, when that is violated.

Everything is in per unit internally.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .localsolver import SolverConfig, SolveResult, solve_local
from .problem import Array, CouplingEdge, PartitionedProblem, RegionSpec, flat_start

DEFAULT_BETA_MINUS = 2.0
DEFAULT_BETA_PLUS = 0.5


class BuildError(ValueError):
    """A case/partition pair that cannot be compiled; names the offender."""


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float = 0.0
    q_load: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    gs: float = 0.0
    bs: float = 0.0

    def __post_init__(self):
        if not 0 <= self.v_min <= self.v_max:
            raise ValueError(f"bus {self.id}: voltage bounds 0 <= {self.v_min} <= {self.v_max} violated")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    charging: float = 0.0
    tap: float = 0.0  # 0 means no transformer (ratio 1)

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: self-loop")
        if self.r == 0 and self.x == 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: zero impedance")

    @property
    def ratio(self) -> float:
        return self.tap if self.tap != 0.0 else 1.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_a: float = 0.0
    cost_b: float = 0.0
    cost_c: float = 0.0

    def __post_init__(self):
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise ValueError(f"generator at bus {self.bus}: empty P or Q box")

    def cost(self, p_mw: float) -> float:
        return self.cost_a * p_mw * p_mw + self.cost_b * p_mw + self.cost_c


@dataclass(frozen=True)
class OpfCase:
    """Bus/branch/generator tables with a common MVA base. Loads, shunts and
    generator limits are in MW/MVAr in the tables and converted to per unit
    internally; costs apply to MW."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        if self.base_mva <= 0:
            raise ValueError("base MVA must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate bus id {dup[0]}")
        known = set(ids)
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise ValueError(f"branch {br.from_bus}-{br.to_bus}: dangling endpoint {end}")
        for g in self.generators:
            if g.bus not in known:
                raise ValueError(f"generator references unknown bus {g.bus}")
        if len(self.buses) > 1 and not _connected(known, self.branches):
            raise ValueError("network graph is not connected")

    @property
    def bus_ids(self) -> list[int]:
        return sorted(b.id for b in self.buses)

    def bus_index(self) -> dict[int, int]:
        return {bid: i for i, bid in enumerate(self.bus_ids)}

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)


def _connected(ids: set[int], branches) -> bool:
    if not ids:
        return True
    adj: dict[int, set[int]] = {i: set() for i in ids}
    for br in branches:
        if br.from_bus in ids and br.to_bus in ids:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    start = next(iter(sorted(ids)))
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen == ids


def admittance_matrix(case: OpfCase) -> Array:
    """Dense complex bus admittance matrix (pi branch model with tap ratio,
    bus shunts on the diagonal)."""
    idx = case.bus_index()
    n = len(case.buses)
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.charging / 2.0
        t = br.ratio
        f, to = idx[br.from_bus], idx[br.to_bus]
        Y[f, f] += (ys + bc) / (t * t)
        Y[to, to] += ys + bc
        Y[f, to] += -ys / t
        Y[to, f] += -ys / t
    for b in case.buses:
        Y[idx[b.id], idx[b.id]] += complex(b.gs, b.bs) / case.base_mva
    return Y


def power_flow_residual(case: OpfCase, V, P, Q) -> Array:
    """Per-bus complex power mismatch split into real and imaginary parts.

    ``V`` is the complex bus voltage vector, ``P``/``Q`` the net generation
    injection per bus in per unit (bus order = sorted ids). Zero iff the
    AC power flow equations hold.
    """
    n = len(case.buses)
    V = np.asarray(V, dtype=complex)
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if V.shape != (n,) or P.shape != (n,) or Q.shape != (n,):
        raise ValueError(f"expected vectors of length {n}")
    load = np.array(
        [complex(case.bus(bid).p_load, case.bus(bid).q_load) / case.base_mva
         for bid in case.bus_ids]
    )
    Y = admittance_matrix(case)
    S = (P - load.real) + 1j * (Q - load.imag)
    mismatch = S - V * np.conj(Y @ V)
    return np.concatenate([mismatch.real, mismatch.imag])


# --------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class Partition:
    """Bus-to-region assignment; regions must be 1..R, non-empty, and
    internally connected. Tie lines (branches crossing regions) are derived."""

    assignment: dict

    def __post_init__(self):
        object.__setattr__(self, "assignment", dict(self.assignment))

    def validate(self, case: OpfCase) -> None:
        regions = sorted(set(self.assignment.values()))
        for bid in case.bus_ids:
            if bid not in self.assignment:
                raise BuildError(f"bus {bid} unassigned")
        for bid in self.assignment:
            if case is not None and bid not in set(case.bus_ids):
                raise BuildError(f"partition references unknown bus {bid}")
        if regions != list(range(1, len(regions) + 1)):
            raise BuildError(f"region indices must be 1..R with no gaps, got {regions}")
        for r in regions:
            members = {b for b, reg in self.assignment.items() if reg == r}
            if not members:
                raise BuildError(f"region {r} is empty")
            internal = [br for br in case.branches
                        if self.assignment[br.from_bus] == r and self.assignment[br.to_bus] == r]
            if len(members) > 1 and not _connected(members, internal):
                raise BuildError(f"region {r} is not internally connected")

    @property
    def num_regions(self) -> int:
        return max(self.assignment.values())

    def buses_of(self, region: int) -> list[int]:
        return sorted(b for b, r in self.assignment.items() if r == region)

    def tie_lines(self, case: OpfCase) -> list[int]:
        """Indices into case.branches of branches crossing regions."""
        return [i for i, br in enumerate(case.branches)
                if self.assignment[br.from_bus] != self.assignment[br.to_bus]]


def single_region_partition(case: OpfCase) -> Partition:
    return Partition({bid: 1 for bid in case.bus_ids})


# --------------------------------------------------------------------------
# compiled layout


@dataclass
class RegionLayout:
    """Index bookkeeping for one compiled region's variable vector.

    Layout: [e(own) | f(own) | u(own) | P(gens) | Q(gens) | e(dup) | f(dup)].
    """

    index: int
    own_bus_ids: list[int]
    dup_bus_ids: list[int]
    gen_indices: list[int]

    @property
    def n_own(self) -> int:
        return len(self.own_bus_ids)

    @property
    def n_dup(self) -> int:
        return len(self.dup_bus_ids)

    @property
    def n_gen(self) -> int:
        return len(self.gen_indices)

    @property
    def dim(self) -> int:
        return 3 * self.n_own + 2 * self.n_gen + 2 * self.n_dup

    def e_slice(self) -> slice:
        return slice(0, self.n_own)

    def f_slice(self) -> slice:
        return slice(self.n_own, 2 * self.n_own)

    def u_slice(self) -> slice:
        return slice(2 * self.n_own, 3 * self.n_own)

    def p_slice(self) -> slice:
        return slice(3 * self.n_own, 3 * self.n_own + self.n_gen)

    def q_slice(self) -> slice:
        return slice(3 * self.n_own + self.n_gen, 3 * self.n_own + 2 * self.n_gen)

    def e_dup_slice(self) -> slice:
        base = 3 * self.n_own + 2 * self.n_gen
        return slice(base, base + self.n_dup)

    def f_dup_slice(self) -> slice:
        base = 3 * self.n_own + 2 * self.n_gen + self.n_dup
        return slice(base, base + self.n_dup)

    def local_voltage_column(self, bus_id: int, component: str) -> int:
        """Column of the e or f coordinate of ``bus_id`` (own or duplicate)."""
        if bus_id in self.own_bus_ids:
            pos = self.own_bus_ids.index(bus_id)
            return pos if component == "e" else self.n_own + pos
        pos = self.dup_bus_ids.index(bus_id)
        base = 3 * self.n_own + 2 * self.n_gen
        if component == "e":
            return base + pos
        return base + self.n_dup + pos

    def voltages(self, x: Array) -> dict[int, complex]:
        """Complex voltage per own bus from a solution vector."""
        e, f = x[self.e_slice()], x[self.f_slice()]
        return {bid: complex(e[i], f[i]) for i, bid in enumerate(self.own_bus_ids)}

    def dispatch(self, x: Array) -> dict[int, tuple[float, float]]:
        """(P, Q) in per unit per owned generator index."""
        p, q = x[self.p_slice()], x[self.q_slice()]
        return {g: (float(p[i]), float(q[i])) for i, g in enumerate(self.gen_indices)}


@dataclass
class EdgeLayout:
    """Tie lines carried by one coupling edge, in block order: each tie line
    contributes four rows (difference re/im, then sum re/im)."""

    region_k: int
    region_l: int
    tie_branches: list[int]


@dataclass
class OpfLayout:
    case: OpfCase
    partition: Partition
    beta_minus: float
    beta_plus: float
    regions: list[RegionLayout]
    edges: list[EdgeLayout]
    ref_bus: int

    def region(self, k: int) -> RegionLayout:
        return self.regions[k - 1]

    def assemble_network_solution(self, x_all: list[Array]):
        """Stitch regional solutions into full-network (V, P, Q) per-bus
        vectors (per unit, bus order = sorted ids)."""
        idx = self.case.bus_index()
        n = len(self.case.buses)
        V = np.zeros(n, dtype=complex)
        P = np.zeros(n)
        Q = np.zeros(n)
        for lay, x in zip(self.regions, x_all):
            for bid, v in lay.voltages(x).items():
                V[idx[bid]] = v
            for g, (p, q) in lay.dispatch(x).items():
                P[idx[self.case.generators[g].bus]] += p
                Q[idx[self.case.generators[g].bus]] += q
        return V, P, Q

    def total_cost(self, x_all: list[Array]) -> float:
        total = 0.0
        for lay, x in zip(self.regions, x_all):
            for g, (p, _) in lay.dispatch(x).items():
                total += self.case.generators[g].cost(p * self.case.base_mva)
        return total


# --------------------------------------------------------------------------
# compilation


def _region_functions(case: OpfCase, layout: RegionLayout, Y: Array):
    """Objective/gradient and power-balance equality closures for one region."""
    base = case.base_mva
    idx = case.bus_index()
    own = layout.own_bus_ids
    local_ids = own + layout.dup_bus_ids
    rows = [idx[b] for b in own]
    cols = [idx[b] for b in local_ids]
    Yloc = Y[np.ix_(rows, cols)]
    n_own, n_dup, n_gen = layout.n_own, layout.n_dup, layout.n_gen
    p_load = np.array([case.bus(b).p_load for b in own]) / base
    q_load = np.array([case.bus(b).q_load for b in own]) / base
    gen_pos = np.array(
        [own.index(case.generators[g].bus) for g in layout.gen_indices], dtype=int
    )
    a = np.array([case.generators[g].cost_a for g in layout.gen_indices])
    b_lin = np.array([case.generators[g].cost_b for g in layout.gen_indices])
    c_const = float(sum(case.generators[g].cost_c for g in layout.gen_indices))
    e_sl, f_sl, u_sl = layout.e_slice(), layout.f_slice(), layout.u_slice()
    p_sl, q_sl = layout.p_slice(), layout.q_slice()
    ed_sl, fd_sl = layout.e_dup_slice(), layout.f_dup_slice()

    def local_voltage(x):
        e = np.concatenate([x[e_sl], x[ed_sl]])
        f = np.concatenate([x[f_sl], x[fd_sl]])
        return e + 1j * f

    def objective(x) -> float:
        p_mw = x[p_sl] * base
        return float(np.sum(a * p_mw * p_mw + b_lin * p_mw) + c_const)

    def gradient(x) -> Array:
        g = np.zeros(layout.dim)
        p_mw = x[p_sl] * base
        g[p_sl] = (2.0 * a * p_mw + b_lin) * base
        return g

    def hessian_diag(x) -> Array:
        d = np.zeros(layout.dim)
        d[p_sl] = 2.0 * a * base * base
        return d

    def equality(x) -> Array:
        V = local_voltage(x)
        I = Yloc @ V
        p_bus = np.zeros(n_own)
        q_bus = np.zeros(n_own)
        np.add.at(p_bus, gen_pos, x[p_sl])
        np.add.at(q_bus, gen_pos, x[q_sl])
        S = (p_bus - p_load) + 1j * (q_bus - q_load)
        mism = S - V[:n_own] * np.conj(I)
        u_gap = x[e_sl] ** 2 + x[f_sl] ** 2 - x[u_sl]
        return np.concatenate([mism.real, mism.imag, u_gap])

    def jacobian(x) -> Array:
        V = local_voltage(x)
        I = Yloc @ V
        Vown = V[:n_own]
        # d(V_i conj(I_i))/de_m = delta_im conj(I_i) + V_i conj(Y_im)
        dV = np.conj(Yloc) * Vown[:, None]
        dSdE = dV.copy()
        dSdE[np.arange(n_own), np.arange(n_own)] += np.conj(I)
        dSdF = -1j * dV
        dSdF[np.arange(n_own), np.arange(n_own)] += 1j * np.conj(I)
        J = np.zeros((3 * n_own, layout.dim))
        re, im, uu = slice(0, n_own), slice(n_own, 2 * n_own), slice(2 * n_own, 3 * n_own)
        J[re, e_sl] = -dSdE.real[:, :n_own]
        J[re, ed_sl] = -dSdE.real[:, n_own:]
        J[re, f_sl] = -dSdF.real[:, :n_own]
        J[re, fd_sl] = -dSdF.real[:, n_own:]
        J[im, e_sl] = -dSdE.imag[:, :n_own]
        J[im, ed_sl] = -dSdE.imag[:, n_own:]
        J[im, f_sl] = -dSdF.imag[:, :n_own]
        J[im, fd_sl] = -dSdF.imag[:, n_own:]
        for j, pos in enumerate(gen_pos):
            J[pos, p_sl.start + j] = 1.0
            J[n_own + pos, q_sl.start + j] = 1.0
        rng = np.arange(n_own)
        J[uu.start + rng, e_sl.start + rng] = 2.0 * x[e_sl]
        J[uu.start + rng, f_sl.start + rng] = 2.0 * x[f_sl]
        J[uu.start + rng, u_sl.start + rng] = -1.0
        return J

    return objective, gradient, equality, jacobian, hessian_diag


def _region_bounds(case: OpfCase, layout: RegionLayout, ref_bus: int):
    base = case.base_mva
    lo = np.zeros(layout.dim)
    hi = np.zeros(layout.dim)
    for i, bid in enumerate(layout.own_bus_ids):
        bus = case.bus(bid)
        lo[layout.e_slice()][i] = bus.v_min
        hi[layout.e_slice()][i] = bus.v_max
        # the angle reference bus is pinned through a degenerate box on f
        if bid == ref_bus:
            lo[layout.f_slice().start + i] = 0.0
            hi[layout.f_slice().start + i] = 0.0
        else:
            lo[layout.f_slice().start + i] = -bus.v_max
            hi[layout.f_slice().start + i] = bus.v_max
        lo[layout.u_slice().start + i] = bus.v_min**2
        hi[layout.u_slice().start + i] = bus.v_max**2
    for j, g in enumerate(layout.gen_indices):
        gen = case.generators[g]
        lo[layout.p_slice().start + j] = gen.p_min / base
        hi[layout.p_slice().start + j] = gen.p_max / base
        lo[layout.q_slice().start + j] = gen.q_min / base
        hi[layout.q_slice().start + j] = gen.q_max / base
    for i, bid in enumerate(layout.dup_bus_ids):
        bus = case.bus(bid)
        lo[layout.e_dup_slice().start + i] = bus.v_min
        hi[layout.e_dup_slice().start + i] = bus.v_max
        lo[layout.f_dup_slice().start + i] = -bus.v_max
        hi[layout.f_dup_slice().start + i] = bus.v_max
    return lo, hi


def reference_bus(case: OpfCase) -> int:
    """The angle reference: the first generator's bus (ties broken by table
    order); a case without generators uses the lowest bus id."""
    if case.generators:
        return case.generators[0].bus
    return case.bus_ids[0]


def build_regional_subproblems(
    case: OpfCase,
    partition: Partition,
    beta_minus: float = DEFAULT_BETA_MINUS,
    beta_plus: float = DEFAULT_BETA_PLUS,
) -> tuple[PartitionedProblem, OpfLayout]:
    """Compile the case under the partition into a partitioned problem.

    Each region's variables are its buses' rectangular voltages plus the
    magnitude-squared slack u, its generators' P and Q, and duplicated
    voltages for the far ends of its tie lines. The boundary map carries the
    beta-scaled difference/sum rows per tie line; regional equalities are
    the power-balance equations at owned buses (tie-line flows expressed
    through the duplicates) and the u definition. Rebuilding is
    deterministic.
    """
    partition.validate(case)
    if beta_minus <= 0 or beta_plus <= 0:
        raise BuildError("beta weights must be positive")
    if beta_minus <= beta_plus:
        warnings.warn(
            "difference weight beta_minus should exceed sum weight beta_plus",
            stacklevel=2,
        )
    R = partition.num_regions
    ref = reference_bus(case)
    ties = partition.tie_lines(case)
    # group tie branches per region pair
    pair_ties: dict[tuple[int, int], list[int]] = {}
    for t in ties:
        br = case.branches[t]
        rk = partition.assignment[br.from_bus]
        rl = partition.assignment[br.to_bus]
        pair = (min(rk, rl), max(rk, rl))
        pair_ties.setdefault(pair, []).append(t)
    pairs = sorted(pair_ties)

    layouts = []
    for k in range(1, R + 1):
        own = partition.buses_of(k)
        dup = sorted({
            (case.branches[t].to_bus if partition.assignment[case.branches[t].from_bus] == k
             else case.branches[t].from_bus)
            for pair in pairs if k in pair for t in pair_ties[pair]
        })
        gens = [i for i, g in enumerate(case.generators) if partition.assignment[g.bus] == k]
        layouts.append(RegionLayout(index=k, own_bus_ids=own, dup_bus_ids=dup,
                                    gen_indices=gens))

    # boundary maps: edges in sorted pair order, four rows per tie line
    row_cursor = {k: 0 for k in range(1, R + 1)}
    a_rows: dict[int, list[np.ndarray]] = {k: [] for k in range(1, R + 1)}
    edges: list[CouplingEdge] = []
    edge_layouts: list[EdgeLayout] = []
    for pair in pairs:
        k, l = pair
        tie_list = sorted(pair_ties[pair])
        block = {}
        for side in (k, l):
            lay = layouts[side - 1]
            start = row_cursor[side]
            for t in tie_list:
                br = case.branches[t]
                for weight, sign_to in ((beta_minus, -1.0), (beta_plus, 1.0)):
                    for comp in ("e", "f"):
                        row = np.zeros(lay.dim)
                        row[lay.local_voltage_column(br.from_bus, comp)] = weight
                        row[lay.local_voltage_column(br.to_bus, comp)] = weight * sign_to
                        a_rows[side].append(row)
            row_cursor[side] += 4 * len(tie_list)
            block[side] = (start, row_cursor[side])
        edges.append(CouplingEdge(k=k, l=l, block_k=block[k], block_l=block[l]))
        edge_layouts.append(EdgeLayout(region_k=k, region_l=l, tie_branches=tie_list))

    Y = admittance_matrix(case)
    regions = []
    for k in range(1, R + 1):
        lay = layouts[k - 1]
        objective, gradient, equality, jacobian, hessian_diag = _region_functions(case, lay, Y)
        lo, hi = _region_bounds(case, lay, ref)
        A = (np.vstack(a_rows[k]) if a_rows[k] else np.zeros((0, lay.dim)))
        regions.append(RegionSpec(
            dim_x=lay.dim,
            objective=objective,
            gradient=gradient,
            boundary_map=A,
            lower=lo,
            upper=hi,
            equality=equality,
            equality_jacobian=jacobian,
            eq_dim=3 * lay.n_own,
            name=f"region-{k}",
            hessian_diag=hessian_diag,
        ))
    problem = PartitionedProblem(regions=tuple(regions), edges=tuple(edges))
    layout = OpfLayout(case=case, partition=partition, beta_minus=beta_minus,
                       beta_plus=beta_plus, regions=layouts, edges=edge_layouts,
                       ref_bus=ref)
    return problem, layout


# --------------------------------------------------------------------------
# centralized reference and starts


@dataclass
class CentralizedResult:
    objective: float
    x: Array
    layout: OpfLayout
    V: Array
    P: Array
    Q: Array
    diagnostics: SolveResult


def centralized_reference_solve(
    case: OpfCase, config: SolverConfig | None = None, x0: Array | None = None
) -> CentralizedResult:
    """Solve the undecomposed problem (single region, no coupling); used as
    the baseline for objective-gap reporting. Solver failures propagate."""
    problem, layout = build_regional_subproblems(case, single_region_partition(case))
    region = problem.region(1)
    start = flat_start(region) if x0 is None else np.asarray(x0, dtype=float)
    result = solve_local(region, None, start, config or SolverConfig())
    V, P, Q = layout.assemble_network_solution([result.x])
    return CentralizedResult(
        objective=layout.total_cost([result.x]),
        x=result.x, layout=layout, V=V, P=P, Q=Q, diagnostics=result,
    )


def newton_power_flow(case: OpfCase, tol: float = 1e-10, max_iters: int = 60):
    """Newton-Raphson power flow used for warm starts.

    The first generator's bus is slack, other generator buses hold voltage
    magnitude at the midpoint of their band with P fixed at the midpoint of
    their box; load buses start flat. Returns (V, P_bus, Q_bus) in per unit,
    where the slack bus absorbs the network imbalance.
    """
    if not case.generators:
        raise BuildError("power flow warm start needs at least one generator")
    base = case.base_mva
    idx = case.bus_index()
    n = len(case.buses)
    Y = admittance_matrix(case)
    slack = idx[reference_bus(case)]
    gen_buses = sorted({idx[g.bus] for g in case.generators})
    pv = [b for b in gen_buses if b != slack]
    pq = [b for b in range(n) if b not in gen_buses]
    vm = np.empty(n)
    for bid, i in idx.items():
        bus = case.bus(bid)
        vm[i] = 0.5 * (bus.v_min + bus.v_max)
    va = np.zeros(n)
    p_sched = np.zeros(n)
    q_sched = np.zeros(n)
    for g in case.generators:
        i = idx[g.bus]
        if i != slack:
            p_sched[i] += 0.5 * (g.p_min + g.p_max) / base
    for bid, i in idx.items():
        bus = case.bus(bid)
        p_sched[i] -= bus.p_load / base
        q_sched[i] -= bus.q_load / base
    non_slack = [b for b in range(n) if b != slack]
    for _ in range(max_iters):
        V = vm * np.exp(1j * va)
        I = Y @ V
        S = V * np.conj(I)
        dp = p_sched[non_slack] - S.real[non_slack]
        dq = q_sched[pq] - S.imag[pq]
        mismatch = np.concatenate([dp, dq])
        if np.max(np.abs(mismatch), initial=0.0) < tol:
            break
        diag_v = np.diag(V)
        diag_i = np.diag(I)
        diag_vn = np.diag(V / np.abs(V))
        ds_dvm = diag_v @ np.conj(Y @ diag_vn) + np.conj(diag_i) @ diag_vn
        ds_dva = 1j * diag_v @ np.conj(diag_i - Y @ diag_v)
        J = np.block([
            [ds_dva.real[np.ix_(non_slack, non_slack)], ds_dvm.real[np.ix_(non_slack, pq)]],
            [ds_dva.imag[np.ix_(pq, non_slack)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            step = np.linalg.solve(J, mismatch)
        except np.linalg.LinAlgError as err:
            raise BuildError(f"power flow Jacobian is singular: {err}") from err
        va[non_slack] += step[: len(non_slack)]
        vm[pq] += step[len(non_slack):]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0):
            raise BuildError("power flow diverged")
    else:
        raise BuildError(f"power flow did not converge in {max_iters} iterations")
    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    p_bus = S.real.copy()
    q_bus = S.imag.copy()
    for bid, i in idx.items():
        bus = case.bus(bid)
        p_bus[i] += bus.p_load / base
        q_bus[i] += bus.q_load / base
    return V, p_bus, q_bus


def warm_start(case: OpfCase, layout: OpfLayout) -> list[Array]:
    """Regional start vectors from a power-flow solution: voltages (own and
    duplicated) from the solved state, generator dispatch from the flow
    solution clipped into its boxes."""
    V, p_bus, q_bus = newton_power_flow(case)
    idx = case.bus_index()
    base = case.base_mva
    gens_at_bus: dict[int, list[int]] = {}
    for g, gen in enumerate(case.generators):
        gens_at_bus.setdefault(gen.bus, []).append(g)
    starts = []
    for lay in layout.regions:
        x = np.zeros(lay.dim)
        for i, bid in enumerate(lay.own_bus_ids):
            v = V[idx[bid]]
            x[lay.e_slice().start + i] = v.real
            x[lay.f_slice().start + i] = v.imag
            x[lay.u_slice().start + i] = abs(v) ** 2
        for j, g in enumerate(lay.gen_indices):
            gen = case.generators[g]
            share = len(gens_at_bus[gen.bus])
            x[lay.p_slice().start + j] = np.clip(
                p_bus[idx[gen.bus]] / share, gen.p_min / base, gen.p_max / base)
            x[lay.q_slice().start + j] = np.clip(
                q_bus[idx[gen.bus]] / share, gen.q_min / base, gen.q_max / base)
        for i, bid in enumerate(lay.dup_bus_ids):
            v = V[idx[bid]]
            x[lay.e_dup_slice().start + i] = v.real
            x[lay.f_dup_slice().start + i] = v.imag
        region_lo, region_hi = _region_bounds(case, lay, layout.ref_bus)
        starts.append(np.clip(x, region_lo, region_hi))
    return starts
