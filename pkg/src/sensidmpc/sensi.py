"""Sensitivity-based distributed solution of the central OCP and the MPC loop.

Every agent solves a local OCP in which the states of its sending neighbors
are frozen at their last exchanged values and the running cost is tilted by
the first-order sensitivities ``g_ji`` of its receiving neighbors' costs.
After each local solve the agents exchange state trajectories with all
neighbors and adjoint trajectories with their senders.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .bus import CommBus, coordinator_reduce, exchange_round, outgoing_messages, STATE, ADJOINT
from .errors import (
    AgentSolveError,
    Divergence,
    LineSearchFailure,
    MissingNeighborState,
    NotAReceiver,
    OracleFailure,
)
from .network import unstack
from .ocp import (
    ALL,
    OcpProblem,
    SolverConfig,
    TimeGrid,
    plant_step,
    projected_gradient_solve,
    solve_central_ocp,
)

MODES = ("criterion", "fixed", "both")


@dataclass(frozen=True)
class AlgorithmConfig:
    """Settings of the distributed iteration and the MPC loop.

    In ``criterion`` mode ``q_max`` only acts as a safety cap; reaching it is
    recorded in the diagnostics.
    """

    T: float = 3.0
    n_disc: int = 21
    dt: float = 0.05
    mode: str = "criterion"
    d: float = 0.1
    q_max: int = 100
    damping: float = 0.0
    inner: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 < self.dt < self.T:
            raise ValueError("sampling time must satisfy 0 < dt < T")
        if self.n_disc < 2:
            raise ValueError("n_disc must be at least 2")
        if self.mode != "fixed" and not self.d > 0:
            raise ValueError("d must be positive in criterion mode")
        if self.q_max < 1:
            raise ValueError("q_max must be positive")
        if not 0 <= self.damping < 1:
            raise ValueError("damping must lie in [0, 1)")

    @property
    def grid(self):
        return TimeGrid(self.T, self.n_disc)


@dataclass
class AgentIterate:
    """Trajectories held by one agent after iteration ``q``.

    ``recv_x`` holds neighbor states from all of ``N_i``; ``recv_lam`` the
    adjoints of the receivers ``N_i^->``.
    """

    u: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    recv_x: dict = field(default_factory=dict)
    recv_lam: dict = field(default_factory=dict)
    step: Optional[float] = None
    inner_iterations: int = 0


@dataclass
class IterateState:
    agents: list
    q: int = 0

    def stacked(self, attr):
        return np.concatenate([getattr(a, attr) for a in self.agents], axis=-1)


# ---------------------------------------------------------------------------
# algorithm building blocks
# ---------------------------------------------------------------------------

def compute_coupling_gradient(network, i, j, x_i, x_j, lam_j):
    """Sensitivity ``g_ji`` of agent ``j``'s cost w.r.t. the state of ``i``.

    ``g_ji = dl_ji/dx_i(x_j, x_i) + (df_ji/dx_i(x_j, x_i))' lam_j`` at every
    node, evaluated with agent ``j``'s coupling functions.
    """
    if j not in network.graph.receivers[i]:
        raise NotAReceiver(f"agent {j} is not influenced by agent {i}")
    c = network.agents[j].couplings[i]
    x_i, x_j, lam_j = (np.asarray(a, float) for a in (x_i, x_j, lam_j))
    return c.cost_xj(x_j, x_i) + np.einsum("...ab,...a->...b", c.dynamics_xj(x_j, x_i), lam_j)


def local_problem(network, i, x0_i, x_prev, recv_x, tilt, grid):
    """Local OCP of agent ``i`` with frozen sender trajectories and a tilt."""
    agent = network.agents[i]
    senders = network.graph.senders[i]
    missing = [j for j in senders if j not in recv_x]
    if missing:
        raise MissingNeighborState(f"agent {i} has no trajectory of senders {missing}")
    Xn = {j: np.asarray(recv_x[j], float) for j in senders}

    def nb(k):
        return {j: Xn[j][k] for j in senders}

    return OcpProblem(
        f=lambda x, u, k=ALL: agent.f(x, u, nb(k)),
        f_x=lambda x, u, k=ALL: agent.f_x(x, u, nb(k)),
        f_u=lambda x, u, k=ALL: agent.dynamics_u(x, u),
        l=lambda x, u, k=ALL: agent.l(x, u, nb(k)),
        l_x=lambda x, u, k=ALL: agent.l_x(x, u, nb(k)),
        l_u=lambda x, u, k=ALL: agent.cost_u(x, u),
        V=agent.terminal,
        V_x=agent.terminal_x,
        u_lower=agent.u_lower,
        u_upper=agent.u_upper,
        x0=x0_i,
        grid=grid,
        tilt=tilt,
        x_ref=x_prev if tilt is not None else None,
    )


def local_step(network, i, x0_i, it, config, grid=None):
    """Steps 1 and 2 of the iteration for agent ``i``.

    Returns a new :class:`AgentIterate` (received trajectories not yet
    updated) and the local solver result.
    """
    grid = grid or config.grid
    receivers = network.graph.receivers[i]
    missing = [j for j in receivers if j not in it.recv_x or j not in it.recv_lam]
    if missing:
        raise MissingNeighborState(f"agent {i} lacks trajectories of receivers {missing}")
    tilt = None
    if receivers:
        tilt = sum(compute_coupling_gradient(network, i, j, it.x, it.recv_x[j], it.recv_lam[j])
                   for j in receivers)
    problem = local_problem(network, i, x0_i, it.x, it.recv_x, tilt, grid)
    try:
        sol = projected_gradient_solve(problem, it.u, config.inner, x_guess=it.x, step=it.step)
    except (Divergence, LineSearchFailure) as exc:
        raise AgentSolveError(i, exc) from exc
    new = AgentIterate(sol.u, sol.x, sol.lam, it.recv_x, it.recv_lam, sol.step, sol.iterations)
    return new, sol


def damping_step(current, previous, eps):
    """Convex combination ``(1 - eps) current + eps previous`` of trajectories."""
    if eps == 0:
        return current
    return (1 - eps) * np.asarray(current) + eps * np.asarray(previous)


def criterion_value(x_new, lam_new, x_old, lam_old):
    """Max over nodes of the Euclidean norm of ``[dx; dlam]``."""
    dev = np.concatenate([x_new - x_old, lam_new - lam_old], axis=-1)
    return float(np.max(np.linalg.norm(dev, axis=-1)))


def stopping_check(new, old, plant_states, d):
    """Per-agent stopping tests and their conjunction.

    ``new`` and ``old`` are sequences of ``(x_i, lam_i)`` pairs.  Agent ``i``
    passes iff its deviation is at most ``d |x_i(t_k)|``.
    """
    values = [criterion_value(xn, ln, xo, lo) for (xn, ln), (xo, lo) in zip(new, old)]
    passes = [v <= d * np.linalg.norm(xk) for v, xk in zip(values, plant_states)]
    return values, passes, all(passes)


# ---------------------------------------------------------------------------
# iteration driver
# ---------------------------------------------------------------------------

def _apply_inbox(network, agents, inbox):
    for i, a in enumerate(agents):
        a.recv_x = {m.sender: m.payload for m in inbox[i] if m.kind == STATE}
        a.recv_lam = {m.sender: m.payload for m in inbox[i] if m.kind == ADJOINT}


def cold_start(network, x_k, config, bus, grid=None):
    """Iteration-0 data: constant states, terminal-gradient adjoints, zero inputs."""
    grid = grid or config.grid
    N = grid.point_count
    agents = []
    for a, xi in zip(network.agents, unstack(x_k, network.state_dims)):
        x = np.tile(xi, (N, 1))
        lam = np.tile(a.terminal_x(xi), (N, 1))
        agents.append(AgentIterate(np.zeros((N, a.input_dim)), x, lam))
    out = {i: outgoing_messages(network.graph, i, 0, a.x, a.lam) for i, a in enumerate(agents)}
    _apply_inbox(network, agents, exchange_round(bus, out, setup=True))
    return IterateState(agents, 0)


def warm_start(state):
    """Unshifted reuse of the last iterates as iteration 0 of the next step."""
    return IterateState([replace(a) for a in state.agents], 0)


@dataclass
class IterationDiagnostics:
    criteria: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    capped: bool = False


def dmpc_iterate(network, x_k, init, config, bus, executor=None, callback=None, grid=None):
    """Run the distributed iteration at plant state ``x_k``.

    Returns the final :class:`IterateState`, the number of iterations ``q_k``
    and :class:`IterationDiagnostics`.  ``callback(q, state)`` is invoked after
    every exchange.
    """
    grid = grid or config.grid
    x_parts = unstack(np.asarray(x_k, float), network.state_dims)
    state = init
    diag = IterationDiagnostics()
    q = 0
    while True:
        q += 1
        prev = state.agents

        def work(i):
            new, _ = local_step(network, i, x_parts[i], prev[i], config, grid)
            new.x = damping_step(new.x, prev[i].x, config.damping)
            new.lam = damping_step(new.lam, prev[i].lam, config.damping)
            return new

        if executor is None:
            agents = [work(i) for i in range(network.agent_count)]
        else:
            agents = list(executor.map(work, range(network.agent_count)))
        values, passes, _ = stopping_check([(a.x, a.lam) for a in agents],
                                           [(a.x, a.lam) for a in prev], x_parts, config.d)
        out = {i: outgoing_messages(network.graph, i, q, a.x, a.lam) for i, a in enumerate(agents)}
        _apply_inbox(network, agents, exchange_round(bus, out))
        state = IterateState(agents, q)
        diag.criteria.append(values)
        diag.inner_iterations.append([a.inner_iterations for a in agents])
        if callback is not None:
            callback(q, state)
        stop = coordinator_reduce(dict(enumerate(passes)), network.agent_count,
                                  fixed=config.mode == "fixed")
        if stop:
            break
        if q >= config.q_max:
            diag.capped = config.mode == "criterion"
            break
    return state, q, diag


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

@dataclass
class MpcTrace:
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    q: list = field(default_factory=list)
    J_oracle: list = field(default_factory=list)
    suboptimality: list = field(default_factory=list)
    stage_cost: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    components: list = field(default_factory=list)
    bytes: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    criteria: list = field(default_factory=list)
    capped: list = field(default_factory=list)
    predictions: list = field(default_factory=list, repr=False)
    controls: list = field(default_factory=list, repr=False)
    x_final: Optional[np.ndarray] = None
    unstable: bool = False
    failure: str = ""

    @property
    def steps(self):
        return len(self.q)

    @property
    def cost_accumulated(self):
        return float(np.sum(self.stage_cost))


def step_count(t_final, dt):
    return int(round(t_final / dt))


def mpc_closed_loop(network, x0, config, steps, bus=None, oracle=False, executor=None,
                    oracle_config=None):
    """Suboptimal distributed MPC in closed loop with the RK4 plant.

    Step ``k`` runs the distributed iteration at ``x(t_k)``, applies the
    resulting control trajectory on ``[0, dt)`` and warm starts step ``k+1``
    with the unshifted final iterates.  With ``oracle`` the central optimum
    ``J*(x(t_k))`` and the state suboptimality ``max_t |x* - x^{q_k}|`` are
    recorded as well.  Solver breakdowns end the run with ``unstable`` set.
    """
    grid = config.grid
    bus = bus or CommBus(network.graph, network.state_dims)
    trace = MpcTrace()
    x = np.asarray(x0, float).copy()
    state = None
    oracle_u = None
    for k in range(steps):
        start = time.perf_counter()
        try:
            init = cold_start(network, x, config, bus, grid) if state is None else warm_start(state)
            state, q, diag = dmpc_iterate(network, x, init, config, bus, executor, grid=grid)
            u_traj = state.stacked("u")
            x_next, stage = plant_step(network, x, grid, u_traj, config.dt, config.inner.substeps)
        except (AgentSolveError, Divergence) as exc:
            trace.unstable, trace.failure = True, str(exc)
            bus.close_step()
            break
        comm = bus.close_step()
        wall = (time.perf_counter() - start) * 1e3
        trace.t.append(k * config.dt)
        trace.x.append(x)
        trace.u.append(u_traj[0].copy())
        trace.q.append(q)
        trace.stage_cost.append(stage)
        trace.messages.append(comm.messages)
        trace.components.append(comm.components)
        trace.bytes.append(comm.bytes)
        trace.rounds.append(comm.rounds)
        trace.wall_ms.append(wall)
        trace.criteria.append(diag.criteria)
        trace.capped.append(diag.capped)
        trace.predictions.append(state.stacked("x"))
        trace.controls.append(u_traj)
        if oracle:
            sol = solve_central_ocp(network, x, grid, oracle_config, u_init=oracle_u)
            oracle_u = sol.u
            trace.J_oracle.append(sol.cost)
            trace.suboptimality.append(float(np.max(np.linalg.norm(sol.x - state.stacked("x"), axis=-1))))
        x = x_next
        if not np.all(np.isfinite(x)):
            trace.unstable, trace.failure = True, "non-finite plant state"
            break
    trace.x_final = x
    return trace


def central_closed_loop(network, x0, config, steps, oracle_config=None):
    """Centralized optimal MPC on its own plant, the reference of comparisons.

    Returns ``(x, u, J)`` with the plant states, applied controls and optimal
    costs of every step.  Each solve is warm started from the previous one.
    """
    grid = config.grid
    x = np.asarray(x0, float).copy()
    xs, us, Js = [], [], []
    u_prev = None
    for _ in range(steps):
        sol = solve_central_ocp(network, x, grid, oracle_config, u_init=u_prev)
        u_prev = sol.u
        xs.append(x)
        us.append(sol.u[0].copy())
        Js.append(sol.cost)
        x, _ = plant_step(network, x, grid, sol.u, config.dt, config.inner.substeps)
    return np.array(xs), np.array(us), np.array(Js)


# ---------------------------------------------------------------------------
# convergence measurement
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceTable:
    err_total: np.ndarray
    err_state: np.ndarray
    err_adjoint: np.ndarray
    p_hat: float


def _sup_norm(a):
    return float(np.max(np.linalg.norm(a, axis=-1)))


def contraction_ratio(errors):
    """Geometric mean of ``E_q / E_{q-1}`` over ``q = 2..``."""
    e = np.asarray(errors, float)
    if e.size < 2 or e[0] <= 0:
        return 0.0
    if e[-1] <= 0:
        return 0.0
    return float((e[-1] / e[0]) ** (1.0 / (e.size - 1)))


def measure_convergence(network, x0, config, q_probe, reference=None, oracle_config=None):
    """Distance of the first ``q_probe`` iterates to the central optimum.

    ``reference`` may hold a precomputed central solution at ``x0``.
    """
    grid = config.grid
    if reference is None:
        reference = solve_central_ocp(network, x0, grid, oracle_config)
    x_star, lam_star = reference.x, reference.lam
    cfg = replace(config, mode="fixed", q_max=q_probe)
    bus = CommBus(network.graph, network.state_dims)
    tot, st, ad = [], [], []

    def record(q, state):
        dx = x_star - state.stacked("x")
        dl = lam_star - state.stacked("lam")
        tot.append(_sup_norm(np.concatenate([dx, dl], axis=-1)))
        st.append(_sup_norm(dx))
        ad.append(_sup_norm(dl))

    init = cold_start(network, x0, cfg, bus, grid)
    dmpc_iterate(network, x0, init, cfg, bus, callback=record, grid=grid)
    return ConvergenceTable(np.array(tot), np.array(st), np.array(ad), contraction_ratio(tot))
