"""Event-driven execution of partially asynchronous ADMM.

K simulated workers advance a shared virtual clock. Each worker cycles
through: local x-solve (takes a sampled compute delay), multiplier update,
sending its boundary values to every neighbour (each message takes a sampled
link delay), then waiting until enough neighbours have arrived, closing the
cycle with a consensus update on the arrived edges. Setting the waiting
threshold p = 1 yields lockstep synchronous execution.

The simulation is deterministic: delays are drawn from per-worker and
per-link substreams of a single seed, and events at equal times are ordered
by creation. Two runs with the same configuration produce identical traces.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import (
    AdmmParams,
    WorkerState,
    initial_z,
    lambda_update,
    residue,
    x_update,
    z_update,
)
from .localsolver import SolveError, SolverConfig
from .problem import Array, PartitionedProblem, flat_start


# --------------------------------------------------------------------------
# delay models


@dataclass(frozen=True)
class DelaySpec:
    """One delay distribution over milliseconds: constant, uniform(lo, hi)
    or lognormal(mean_of_log, sigma_of_log)."""

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind == "constant":
            if len(self.params) != 1 or self.params[0] < 0:
                raise ValueError("constant delay needs one nonnegative value")
        elif self.kind == "uniform":
            if len(self.params) != 2 or not 0 <= self.params[0] <= self.params[1]:
                raise ValueError("uniform delay needs 0 <= lo <= hi")
        elif self.kind == "lognormal":
            if len(self.params) != 2 or self.params[1] < 0:
                raise ValueError("lognormal delay needs (mean_log, sigma_log >= 0)")
        else:
            raise ValueError(f"unknown delay kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float) -> "DelaySpec":
        return cls("constant", (float(value),))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "DelaySpec":
        return cls("uniform", (float(lo), float(hi)))

    @classmethod
    def lognormal(cls, mean_log: float, sigma_log: float) -> "DelaySpec":
        return cls("lognormal", (float(mean_log), float(sigma_log)))

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "uniform":
            return float(rng.uniform(self.params[0], self.params[1]))
        return float(rng.lognormal(self.params[0], self.params[1]))

    def describe(self) -> str:
        return f"{self.kind}:" + ",".join(repr(p) for p in self.params)


@dataclass(frozen=True)
class DelayModel:
    """Per-worker compute delays and per-edge link delays, with a seed.

    ``compute_overrides`` maps a worker index to its own spec;
    ``link_overrides`` maps an edge (k, l) with k < l. The same seed always
    reproduces the same sample streams, independent of event interleaving,
    because every worker and every directed link draws from its own
    substream.
    """

    compute: DelaySpec = DelaySpec.constant(1.0)
    link: DelaySpec = DelaySpec.constant(0.1)
    compute_overrides: dict = field(default_factory=dict)
    link_overrides: dict = field(default_factory=dict)
    seed: int = 0

    def compute_spec(self, k: int) -> DelaySpec:
        return self.compute_overrides.get(k, self.compute)

    def link_spec(self, k: int, l: int) -> DelaySpec:
        key = (min(k, l), max(k, l))
        return self.link_overrides.get(key, self.link)

    def describe(self) -> dict:
        return {
            "compute": self.compute.describe(),
            "link": self.link.describe(),
            "compute_overrides": {str(k): s.describe() for k, s in
                                  sorted(self.compute_overrides.items())},
            "link_overrides": {f"{k}-{l}": s.describe() for (k, l), s in
                               sorted(self.link_overrides.items())},
            "seed": self.seed,
        }


# --------------------------------------------------------------------------
# trace structures


def _canonical(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_canonical(v) for v in value) + "]"
    if isinstance(value, np.ndarray):
        return _canonical([float(v) for v in value])
    if isinstance(value, dict):
        return "{" + ",".join(f"{k}:{_canonical(v)}" for k, v in sorted(value.items())) + "}"
    return repr(value)


def payload_digest(payload: dict) -> str:
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()[:12]


@dataclass
class TraceEvent:
    """One simulator event: kind, worker, the worker's local iteration at the
    time, the virtual timestamp, a digest of the payload, and the payload."""

    kind: str
    worker: int
    local_iter: int
    time: float
    payload: dict
    digest: str = ""

    def __post_init__(self):
        if not self.digest:
            self.digest = payload_digest(self.payload)


@dataclass
class BoundaryMessage:
    """The only inter-worker data: one edge's boundary value and multiplier
    block, stamped with send and arrival times."""

    sender: int
    receiver: int
    edge_index: int
    ax_block: Array
    lam_block: Array
    sender_iter: int
    sent_at: float
    arrives_at: float
    digest: str = ""

    def __post_init__(self):
        if self.arrives_at < self.sent_at:
            raise ValueError("message arrival precedes its send time")


@dataclass
class EventTrace:
    """Globally ordered event log of one run plus final states."""

    meta: dict
    events: list[TraceEvent] = field(default_factory=list)
    final_x: list = field(default_factory=list)
    final_lam: list = field(default_factory=list)
    final_z: Array | None = None
    status: str = "incomplete"
    end_time: float = 0.0

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]


@dataclass(frozen=True)
class StoppingRule:
    """Run until every worker's residue and constraint mismatch fall below
    ``tol``, or a cap is hit."""

    tol: float = 1e-3
    max_local_iters: int = 1000
    time_cap_ms: float = 1e12

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("stopping tolerance must be positive")
        if self.max_local_iters < 1 or self.time_cap_ms <= 0:
            raise ValueError("caps must be positive")


def ready_to_update(num_neighbors: int, fresh_neighbors: int, p: float) -> bool:
    """Waiting rule: a worker may update once at least ceil(p * |N_k|)
    distinct neighbours have fresh, unconsumed messages — and never with
    zero arrivals when it has neighbours at all."""
    if num_neighbors == 0:
        return True
    needed = max(1, math.ceil(p * num_neighbors))
    return fresh_neighbors >= needed


class EngineAbort(RuntimeError):
    """A local solve failed mid-run; carries the partial trace."""

    def __init__(self, message: str, trace: EventTrace, cause: SolveError):
        super().__init__(message)
        self.trace = trace
        self.cause = cause


@dataclass
class WorkerTiming:
    compute_ms: float = 0.0
    wait_ms: float = 0.0

    @property
    def wait_fraction(self) -> float:
        total = self.compute_ms + self.wait_ms
        return self.wait_ms / total if total > 0 else 0.0


@dataclass
class RunResult:
    trace: EventTrace
    states: list[WorkerState]
    z: Array
    converged: bool
    status: str
    end_time: float
    iteration_log: list[tuple]
    timing: dict[int, WorkerTiming]

    @property
    def x(self) -> list[Array]:
        return [s.x for s in self.states]

    def max_residue(self) -> float:
        vals = [s.residue for s in self.states if s.residue is not None]
        return max(vals) if vals else math.inf


# --------------------------------------------------------------------------
# the simulator


class _Simulator:
    def __init__(self, problem, params, delays, stop, solver_config, x0, descriptor):
        self.problem = problem
        self.params = params
        self.delays = delays
        self.stop = stop
        self.solver_config = solver_config
        K = problem.num_regions
        if x0 is None:
            x0 = [flat_start(problem.region(k)) for k in range(1, K + 1)]
        self.z_global = initial_z(problem, x0)
        self.states = [WorkerState.initial(problem, k, x0[k - 1], self.z_global)
                       for k in range(1, K + 1)]
        self.inbox: dict[int, dict[int, BoundaryMessage]] = {k: {} for k in range(1, K + 1)}
        self.consumed_iter: dict[int, dict[int, int]] = {k: {} for k in range(1, K + 1)}
        self.solver_warm: dict[int, tuple | None] = {k: None for k in range(1, K + 1)}
        self.snapshot_prev = [s.z.copy() for s in self.states]
        # streams: one per worker, then two per edge (k->l, l->k), in order
        ss = np.random.SeedSequence(delays.seed)
        children = ss.spawn(K + 2 * len(problem.edges))
        self.compute_rng = {k: np.random.default_rng(children[k - 1]) for k in range(1, K + 1)}
        self.link_rng = {}
        for i, e in enumerate(problem.edges):
            self.link_rng[(i, e.k)] = np.random.default_rng(children[K + 2 * i])
            self.link_rng[(i, e.l)] = np.random.default_rng(children[K + 2 * i + 1])
        self.heap: list = []
        self.seq = 0
        self.timing = {k: WorkerTiming() for k in range(1, K + 1)}
        self.phase = {k: "idle" for k in range(1, K + 1)}
        self.phase_since = {k: 0.0 for k in range(1, K + 1)}
        self.iteration_log: list[tuple] = []
        self.cycles_closed = 0
        self.status = "running"
        self.now = 0.0
        meta = {
            "version": 1,
            "k": K,
            "edges": [
                {"k": e.k, "l": e.l, "dim": e.dim,
                 "block_k": list(e.block_k), "block_l": list(e.block_l)}
                for e in problem.edges
            ],
            "x0": [[float(v) for v in x] for x in x0],
            "z0": [float(v) for v in self.z_global],
            "params": {"rho": params.rho, "alpha": params.alpha, "p": params.p,
                       "lambda_min": params.lambda_min, "lambda_max": params.lambda_max},
            "stop": {"tol": stop.tol, "max_local_iters": stop.max_local_iters,
                     "time_cap_ms": stop.time_cap_ms},
            "delays": delays.describe(),
            "problem": descriptor or {"kind": "opaque"},
        }
        self.trace = EventTrace(meta=meta)

    # -- helpers ----------------------------------------------------------

    def _push(self, time: float, kind: str, data):
        heapq.heappush(self.heap, (time, self.seq, kind, data))
        self.seq += 1

    def _log(self, kind, worker, local_iter, time, payload, digest=""):
        self.trace.events.append(
            TraceEvent(kind, worker, local_iter, time, payload, digest)
        )

    def _set_phase(self, k: int, phase: str, t: float):
        prev = self.phase[k]
        span = t - self.phase_since[k]
        if prev == "computing":
            self.timing[k].compute_ms += span
        elif prev == "waiting":
            self.timing[k].wait_ms += span
        self.phase[k] = phase
        self.phase_since[k] = t

    def _threshold_met(self, k: int) -> bool:
        return ready_to_update(
            len(self.problem.neighbors(k)), len(self.inbox[k]), self.params.p
        )

    def _start_compute(self, k: int, t: float):
        state = self.states[k - 1]
        self._log("compute_start", k, state.local_iter, t,
                  {"z": [float(v) for v in state.z]})
        self._set_phase(k, "computing", t)
        delay = self.delays.compute_spec(k).sample(self.compute_rng[k])
        self._push(t + delay, "done", k)

    def _finish_compute(self, k: int, t: float):
        state = self.states[k - 1]
        region = self.problem.region(k)
        try:
            result = x_update(region, state, self.params, self.solver_config,
                              warm_state=self.solver_warm[k])
        except SolveError as err:
            self.status = "aborted"
            self.trace.status = "aborted"
            self.trace.end_time = t
            # close the log so the partial trace stays readable post mortem
            self._log("end", 0, 0, t, {"status": "aborted", "converged": False,
                                       "error": str(err)})
            raise EngineAbort(
                f"worker {k} local solve failed at cycle {state.local_iter}: {err}",
                self.trace, err,
            ) from err
        self.solver_warm[k] = result.warm_state
        state.x = result.x
        state.ax = region.boundary_map @ result.x
        state.lam = lambda_update(state, state.ax, state.z, self.params)
        state.constraint_violation = result.constraint_norm
        self._log("compute_end", k, state.local_iter, t, {
            "x": [float(v) for v in state.x],
            "lam": [float(v) for v in state.lam],
            "ax": [float(v) for v in state.ax],
            "feas": float(result.constraint_norm),
        })
        for i, e in self.problem.edges_of(k):
            neighbor = e.other(k)
            blk = e.block_of(k)
            link_delay = self.delays.link_spec(k, neighbor).sample(self.link_rng[(i, k)])
            msg = BoundaryMessage(
                sender=k, receiver=neighbor, edge_index=i,
                ax_block=state.ax[blk].copy(), lam_block=state.lam[blk].copy(),
                sender_iter=state.local_iter, sent_at=t, arrives_at=t + link_delay,
            )
            payload = {
                "to": neighbor, "edge": i, "sender_iter": state.local_iter,
                "ax": [float(v) for v in msg.ax_block],
                "lam": [float(v) for v in msg.lam_block],
            }
            msg.digest = payload_digest(payload)
            self._log("send", k, state.local_iter, t, payload, digest=msg.digest)
            self._push(msg.arrives_at, "arrival", msg)
        self._try_close_cycle(k, t)

    def _try_close_cycle(self, k: int, t: float):
        if not self._threshold_met(k):
            self._set_phase(k, "waiting", t)
            return
        state = self.states[k - 1]
        # consensus update on every arrived edge, freshest message per edge;
        # the proximal centre is this worker's own snapshot of the block
        # (its previous local iterate), which also makes simultaneous
        # duplicate updates of a shared block bitwise identical
        for i in sorted(self.inbox[k]):
            msg = self.inbox[k].pop(i)
            self.consumed_iter[k][i] = msg.sender_iter
            e = self.problem.edges[i]
            own_blk = e.block_of(k)
            z_prev_blk = state.z[own_blk].copy()
            if k == e.k:
                args = (state.lam[own_blk], msg.lam_block, state.ax[own_blk], msg.ax_block)
            else:
                args = (msg.lam_block, state.lam[own_blk], msg.ax_block, state.ax[own_blk])
            z_new = z_update(e, args[0], args[1], args[2], args[3], z_prev_blk, self.params)
            self.z_global[self.problem.edge_slice(i)] = z_new
            self._log("z_update", k, state.local_iter, t, {
                "edge": i, "with": msg.sender, "sender_iter": msg.sender_iter,
                "z": [float(v) for v in z_new],
            })
        prev = self.snapshot_prev[k - 1]
        state.z = self.problem.region_z(self.z_global, k)
        state.residue = residue(state, prev)
        self.snapshot_prev[k - 1] = state.z.copy()
        state.local_iter += 1
        self.cycles_closed += 1
        state.last_update_global_iter = self.cycles_closed
        self._record_iteration(t)
        if self._global_stop():
            self.status = "converged"
            return
        if state.local_iter >= self.stop.max_local_iters:
            self._set_phase(k, "idle", t)
            return
        self._start_compute(k, t)

    def _record_iteration(self, t: float):
        residues = [s.residue for s in self.states]
        max_res = max((r for r in residues if r is not None), default=math.inf)
        if any(r is None for r in residues):
            max_res = math.inf
        mismatch = max(s.constraint_violation for s in self.states)
        objective = self.problem.total_objective([s.x for s in self.states])
        self.iteration_log.append(
            (self.cycles_closed, t, float(max_res), objective, float(mismatch))
        )

    def _global_stop(self) -> bool:
        for s in self.states:
            if s.residue is None or s.residue > self.stop.tol:
                return False
            if s.constraint_violation > self.stop.tol:
                return False
        return True

    # -- main loop ---------------------------------------------------------

    def run(self) -> RunResult:
        for k in range(1, self.problem.num_regions + 1):
            self._start_compute(k, 0.0)
        while self.heap and self.status == "running":
            t, _, kind, data = heapq.heappop(self.heap)
            if t > self.stop.time_cap_ms:
                self.status = "time_cap"
                break
            self.now = t
            if kind == "done":
                self._finish_compute(data, t)
            else:
                msg: BoundaryMessage = data
                k = msg.receiver
                self._log("receive", k, self.states[k - 1].local_iter, t, {
                    "from": msg.sender, "edge": msg.edge_index,
                    "sender_iter": msg.sender_iter,
                }, digest=msg.digest)
                held = self.inbox[k].get(msg.edge_index)
                superseded = msg.sender_iter <= self.consumed_iter[k].get(msg.edge_index, -1)
                if not superseded and (held is None or msg.sender_iter >= held.sender_iter):
                    self.inbox[k][msg.edge_index] = msg
                if self.phase[k] == "waiting":
                    self._try_close_cycle(k, t)
        if self.status == "running":
            self.status = "iteration_cap"
        end = self.now
        for k in range(1, self.problem.num_regions + 1):
            self._set_phase(k, "ended", end)
        for s in self.states:
            self._log("final", s.region_index, s.local_iter, end, {
                "x": [float(v) for v in s.x],
                "lam": [float(v) for v in s.lam],
                "z": [float(v) for v in s.z],
                "residue": float(s.residue) if s.residue is not None else math.inf,
                "feas": float(s.constraint_violation),
            })
        self._log("final_z", 0, 0, end, {"z": [float(v) for v in self.z_global]})
        converged = self.status == "converged"
        self._log("end", 0, 0, end, {"status": self.status, "converged": converged})
        self.trace.status = self.status
        self.trace.end_time = end
        self.trace.final_x = [[float(v) for v in s.x] for s in self.states]
        self.trace.final_lam = [[float(v) for v in s.lam] for s in self.states]
        self.trace.final_z = self.z_global.copy()
        return RunResult(
            trace=self.trace, states=self.states, z=self.z_global,
            converged=converged, status=self.status, end_time=end,
            iteration_log=self.iteration_log, timing=self.timing,
        )


def run(
    problem: PartitionedProblem,
    params: AdmmParams,
    delays: DelayModel,
    stop: StoppingRule,
    solver_config: SolverConfig | None = None,
    x0: list[Array] | None = None,
    problem_descriptor: dict | None = None,
) -> RunResult:
    """Execute the asynchronous loop under the given delay model.

    Returns the trace, final states and per-worker timing. Identical
    arguments (including the seed) produce a bitwise-identical trace. A local
    solver failure raises :class:`EngineAbort` carrying the partial trace;
    cap exhaustion returns normally with ``converged=False``.
    """
    sim = _Simulator(problem, params, delays, stop,
                     solver_config or SolverConfig(), x0, problem_descriptor)
    return sim.run()


# --------------------------------------------------------------------------
# straight-line synchronous reference


@dataclass
class SyncIterate:
    """One synchronous iteration: the consensus vector used by the local
    solves, the new local iterates and multipliers, and the residue."""

    z: Array
    x: list[Array]
    lam: list[Array]
    residue: float
    mismatch: float


@dataclass
class SyncRun:
    iterates: list[SyncIterate]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.iterates)


def run_sync_reference(
    problem: PartitionedProblem,
    params: AdmmParams,
    solver_config: SolverConfig | None = None,
    x0: list[Array] | None = None,
    tol: float = 1e-3,
    max_iters: int = 1000,
) -> SyncRun:
    """Plain synchronous loop (consensus step, then every region's local
    solve and multiplier step, each iteration); ground truth for equivalence
    tests. With one region and no edges the first local solve is the
    centralized problem."""
    solver_config = solver_config or SolverConfig()
    K = problem.num_regions
    if x0 is None:
        x0 = [flat_start(problem.region(k)) for k in range(1, K + 1)]
    x = [np.asarray(v, dtype=float).copy() for v in x0]
    lam = [np.zeros(problem.region(k).boundary_rows) for k in range(1, K + 1)]
    z = initial_z(problem, x)
    solver_warm: dict[int, tuple | None] = {k: None for k in range(1, K + 1)}
    iterates: list[SyncIterate] = []
    converged = False
    for _ in range(max_iters):
        z_prev = z.copy()
        for i, e in enumerate(problem.edges):
            sl = problem.edge_slice(i)
            ax_k = problem.region(e.k).boundary_map @ x[e.k - 1]
            ax_l = problem.region(e.l).boundary_map @ x[e.l - 1]
            z[sl] = z_update(
                e,
                lam[e.k - 1][e.block_of(e.k)], lam[e.l - 1][e.block_of(e.l)],
                ax_k[e.block_of(e.k)], ax_l[e.block_of(e.l)],
                z_prev[sl], params,
            )
        max_res = 0.0
        mismatch = 0.0
        new_x, new_lam = [], []
        for k in range(1, K + 1):
            region = problem.region(k)
            z_k = problem.region_z(z, k)
            state = WorkerState(
                region_index=k, x=x[k - 1], lam=lam[k - 1], z=z_k,
                ax=region.boundary_map @ x[k - 1],
            )
            result = x_update(region, state, params, solver_config,
                              warm_state=solver_warm[k])
            solver_warm[k] = result.warm_state
            ax_new = region.boundary_map @ result.x
            lam_new = lambda_update(state, ax_new, z_k, params)
            z_k_prev = problem.region_z(z_prev, k)
            if z_k.size:
                gamma = max(
                    float(np.max(np.abs(ax_new - z_k))),
                    float(np.max(np.abs(z_k - z_k_prev))),
                )
            else:
                gamma = 0.0
            max_res = max(max_res, gamma)
            mismatch = max(mismatch, result.constraint_norm)
            new_x.append(result.x)
            new_lam.append(lam_new)
        x, lam = new_x, new_lam
        iterates.append(SyncIterate(
            z=z.copy(), x=[v.copy() for v in x], lam=[v.copy() for v in lam],
            residue=max_res, mismatch=mismatch,
        ))
        if max_res <= tol and mismatch <= tol:
            converged = True
            break
    return SyncRun(iterates=iterates, converged=converged)
