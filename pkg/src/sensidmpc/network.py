"""Coupled multi-agent system description.

A network consists of a directed coupling graph and one :class:`AgentModel`
per vertex.  Agent dynamics and running costs are *neighbor-affine*: the
influence of every sending neighbor ``j`` enters additively through a pair
term that depends only on ``(x_i, x_j)``.

All model callables are vectorized: they accept arrays with arbitrary
leading batch dimensions and operate on the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DerivativeMismatch,
    DimensionMismatch,
    InconsistentTopology,
    InvalidConstraint,
    MissingNeighborState,
    MissingTerminalWeights,
    NotEquilibrium,
)

FD_STEP = 1e-6


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingGraph:
    """Directed coupling graph.

    An edge ``(j, i)`` means that agent ``j`` influences agent ``i``.
    Agents are numbered ``0 .. agent_count-1``.
    """

    agent_count: int
    edges: frozenset
    senders: tuple = field(init=False)
    receivers: tuple = field(init=False)
    neighbors: tuple = field(init=False)

    def __post_init__(self):
        if self.agent_count < 1:
            raise InconsistentTopology("agent_count must be positive")
        edges = frozenset((int(j), int(i)) for j, i in self.edges)
        for j, i in edges:
            if i == j:
                raise InconsistentTopology(f"self-edge ({j}, {i})")
            if not (0 <= i < self.agent_count and 0 <= j < self.agent_count):
                raise InconsistentTopology(f"edge ({j}, {i}) references unknown agent")
        snd = tuple(tuple(sorted(j for j, k in edges if k == i)) for i in range(self.agent_count))
        rcv = tuple(tuple(sorted(k for j, k in edges if j == i)) for i in range(self.agent_count))
        nbr = tuple(tuple(sorted(set(snd[i]) | set(rcv[i]))) for i in range(self.agent_count))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "senders", snd)
        object.__setattr__(self, "receivers", rcv)
        object.__setattr__(self, "neighbors", nbr)
        self.check_duality()

    def check_duality(self):
        for i in range(self.agent_count):
            for j in range(self.agent_count):
                if (j in self.senders[i]) != (i in self.receivers[j]):
                    raise InconsistentTopology(f"sender/receiver sets disagree for ({j}, {i})")


# ---------------------------------------------------------------------------
# finite-difference helpers
# ---------------------------------------------------------------------------

def fd_jacobian(func, argnum, step=FD_STEP):
    """Central-difference Jacobian of ``func`` w.r.t. positional ``argnum``.

    For vector-valued ``func`` the result has shape ``(..., p, d)``; for
    scalar-valued ``func`` it is the gradient with shape ``(..., d)``.
    """

    def jac(*args):
        args = [np.asarray(a, dtype=float) for a in args]
        a = args[argnum]
        cols = []
        for k in range(a.shape[-1]):
            e = np.zeros(a.shape[-1])
            e[k] = step
            hi = list(args)
            lo = list(args)
            hi[argnum] = a + e
            lo[argnum] = a - e
            cols.append((np.asarray(func(*hi)) - np.asarray(func(*lo))) / (2 * step))
        return np.stack(cols, axis=-1)

    return jac


def _zero_cost(*args):
    return np.zeros(np.shape(args[0])[:-1])


def _zero_grad(argnum):
    def g(*args):
        return np.zeros_like(np.asarray(args[argnum], dtype=float))
    return g


# ---------------------------------------------------------------------------
# agent description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Coupling:
    """Pair terms ``f_ij(x_i, x_j)`` and ``l_ij(x_i, x_j)`` for one sender ``j``.

    Missing derivatives are replaced by central finite differences; a missing
    ``cost`` means the pair does not couple through the running cost.
    """

    dynamics: Callable
    dynamics_xi: Optional[Callable] = None
    dynamics_xj: Optional[Callable] = None
    cost: Optional[Callable] = None
    cost_xi: Optional[Callable] = None
    cost_xj: Optional[Callable] = None

    def __post_init__(self):
        if self.dynamics_xi is None:
            object.__setattr__(self, "dynamics_xi", fd_jacobian(self.dynamics, 0))
        if self.dynamics_xj is None:
            object.__setattr__(self, "dynamics_xj", fd_jacobian(self.dynamics, 1))
        if self.cost is None:
            object.__setattr__(self, "cost", _zero_cost)
            object.__setattr__(self, "cost_xi", _zero_grad(0))
            object.__setattr__(self, "cost_xj", _zero_grad(1))
        else:
            if self.cost_xi is None:
                object.__setattr__(self, "cost_xi", fd_jacobian(self.cost, 0))
            if self.cost_xj is None:
                object.__setattr__(self, "cost_xj", fd_jacobian(self.cost, 1))


@dataclass(frozen=True)
class AgentModel:
    """Local dynamics, costs and input box of one agent.

    ``dynamics(x, u)``, ``cost(x, u)`` and ``terminal(x)`` are the local
    parts ``f_ii``, ``l_ii`` and ``V_i``.  ``couplings`` maps every sending
    neighbor ``j`` to its :class:`Coupling`.
    """

    state_dim: int
    input_dim: int
    dynamics: Callable
    cost: Callable
    terminal: Callable
    u_lower: np.ndarray
    u_upper: np.ndarray
    couplings: Mapping[int, Coupling] = field(default_factory=dict)
    dynamics_x: Optional[Callable] = None
    dynamics_u: Optional[Callable] = None
    cost_x: Optional[Callable] = None
    cost_u: Optional[Callable] = None
    terminal_x: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "u_lower", np.broadcast_to(np.asarray(self.u_lower, float), (self.input_dim,)).copy())
        object.__setattr__(self, "u_upper", np.broadcast_to(np.asarray(self.u_upper, float), (self.input_dim,)).copy())
        object.__setattr__(self, "couplings", dict(self.couplings))
        for name, fn, arg in (("dynamics_x", self.dynamics, 0), ("dynamics_u", self.dynamics, 1),
                              ("cost_x", self.cost, 0), ("cost_u", self.cost, 1),
                              ("terminal_x", self.terminal, 0)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, fd_jacobian(fn, arg))

    # full neighbor-affine evaluations ------------------------------------
    def f(self, x, u, xn):
        out = self.dynamics(x, u)
        for j, c in self.couplings.items():
            out = out + c.dynamics(x, xn[j])
        return out

    def f_x(self, x, u, xn):
        out = self.dynamics_x(x, u)
        for j, c in self.couplings.items():
            out = out + c.dynamics_xi(x, xn[j])
        return out

    def l(self, x, u, xn):
        out = self.cost(x, u)
        for j, c in self.couplings.items():
            out = out + c.cost(x, xn[j])
        return out

    def l_x(self, x, u, xn):
        out = self.cost_x(x, u)
        for j, c in self.couplings.items():
            out = out + c.cost_xi(x, xn[j])
        return out


@dataclass(frozen=True)
class QuadraticCostSpec:
    """Per-agent weights of ``l_i = x'Q x + u'R u`` and ``V_i = x'P x``."""

    Q: tuple
    R: tuple
    P: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "Q", tuple(_check_pd(np.atleast_2d(q), "Q") for q in self.Q))
        object.__setattr__(self, "R", tuple(_check_pd(np.atleast_2d(r), "R") for r in self.R))
        if self.P is not None:
            object.__setattr__(self, "P", tuple(_check_pd(np.atleast_2d(p), "P") for p in self.P))


def _check_pd(M, name):
    M = np.array(M, dtype=float)
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got {M.shape}")
    if np.max(np.abs(M - M.T), initial=0.0) > 1e-12:
        raise ValueError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} is not positive definite")
    return M


def quadratic_costs(Q, R, P):
    """Vectorized ``(cost, cost_x, cost_u, terminal, terminal_x)`` for one agent."""
    Q, R, P = (np.atleast_2d(np.asarray(a, float)) for a in (Q, R, P))

    def cost(x, u):
        return np.einsum("...i,ij,...j->...", x, Q, x) + np.einsum("...i,ij,...j->...", u, R, u)

    def cost_x(x, u):
        return 2.0 * x @ Q

    def cost_u(x, u):
        return 2.0 * u @ R

    def terminal(x):
        return np.einsum("...i,ij,...j->...", x, P, x)

    def terminal_x(x):
        return 2.0 * x @ P

    return cost, cost_x, cost_u, terminal, terminal_x


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkModel:
    graph: CouplingGraph
    agents: tuple
    quadratic_spec: Optional[QuadraticCostSpec] = None

    @property
    def agent_count(self):
        return self.graph.agent_count

    @property
    def state_dims(self):
        return tuple(a.state_dim for a in self.agents)

    @property
    def input_dims(self):
        return tuple(a.input_dim for a in self.agents)

    @property
    def n(self):
        return sum(self.state_dims)

    @property
    def m(self):
        return sum(self.input_dims)

    @property
    def u_lower(self):
        return np.concatenate([a.u_lower for a in self.agents])

    @property
    def u_upper(self):
        return np.concatenate([a.u_upper for a in self.agents])

    def state_slices(self):
        return _slices(self.state_dims)

    def input_slices(self):
        return _slices(self.input_dims)

    def with_terminal_weights(self, P_blocks):
        """Return a copy whose terminal costs are ``V_i = x_i' P_i x_i``."""
        P_blocks = [np.atleast_2d(np.asarray(p, float)) for p in P_blocks]
        agents = []
        for a, P in zip(self.agents, P_blocks):
            if P.shape != (a.state_dim, a.state_dim):
                raise DimensionMismatch(f"terminal weight shape {P.shape} for state_dim {a.state_dim}")
            _, _, _, V, Vx = quadratic_costs(np.eye(a.state_dim), np.eye(a.input_dim), P)
            agents.append(replace(a, terminal=V, terminal_x=Vx))
        spec = self.quadratic_spec
        if spec is not None:
            spec = QuadraticCostSpec(spec.Q, spec.R, tuple(P_blocks))
        return NetworkModel(self.graph, tuple(agents), spec)

    # central (stacked) evaluations, all vectorized -----------------------
    def split_states(self, x):
        return unstack(x, self.state_dims)

    def split_inputs(self, u):
        return unstack(u, self.input_dims)

    def f(self, x, u):
        xs, us = self.split_states(x), self.split_inputs(u)
        return np.concatenate([a.f(xs[i], us[i], xs) for i, a in enumerate(self.agents)], axis=-1)

    def f_x(self, x, u):
        xs, us = self.split_states(x), self.split_inputs(u)
        sl = self.state_slices()
        out = np.zeros(np.shape(x)[:-1] + (self.n, self.n))
        for i, a in enumerate(self.agents):
            out[..., sl[i], sl[i]] = a.f_x(xs[i], us[i], xs)
            for j, c in a.couplings.items():
                out[..., sl[i], sl[j]] += c.dynamics_xj(xs[i], xs[j])
        return out

    def f_u(self, x, u):
        xs, us = self.split_states(x), self.split_inputs(u)
        sl, su = self.state_slices(), self.input_slices()
        out = np.zeros(np.shape(x)[:-1] + (self.n, self.m))
        for i, a in enumerate(self.agents):
            out[..., sl[i], su[i]] = a.dynamics_u(xs[i], us[i])
        return out

    def l(self, x, u):
        xs, us = self.split_states(x), self.split_inputs(u)
        return sum(a.l(xs[i], us[i], xs) for i, a in enumerate(self.agents))

    def l_x(self, x, u):
        xs, us = self.split_states(x), self.split_inputs(u)
        sl = self.state_slices()
        out = np.zeros(np.shape(x))
        for i, a in enumerate(self.agents):
            out[..., sl[i]] += a.l_x(xs[i], us[i], xs)
            for j, c in a.couplings.items():
                out[..., sl[j]] += c.cost_xj(xs[i], xs[j])
        return out

    def l_u(self, x, u):
        xs, us = self.split_states(x), self.split_inputs(u)
        return np.concatenate([a.cost_u(xs[i], us[i]) for i, a in enumerate(self.agents)], axis=-1)

    def V(self, x):
        xs = self.split_states(x)
        return sum(a.terminal(xs[i]) for i, a in enumerate(self.agents))

    def V_x(self, x):
        xs = self.split_states(x)
        return np.concatenate([a.terminal_x(xs[i]) for i, a in enumerate(self.agents)], axis=-1)


def _slices(dims):
    out, o = [], 0
    for d in dims:
        out.append(slice(o, o + d))
        o += d
    return out


def stack(parts):
    """Concatenate per-agent vectors (last axis) into the central vector."""
    return np.concatenate([np.asarray(p, float) for p in parts], axis=-1)


def unstack(v, dims):
    """Inverse of :func:`stack` for the given per-agent dimensions."""
    v = np.asarray(v, float)
    if v.shape[-1] != sum(dims):
        raise DimensionMismatch(f"vector of length {v.shape[-1]} does not match dims {tuple(dims)}")
    return [v[..., s] for s in _slices(dims)]


def build_network(graph, agents, quadratic_spec=None, tol=1e-9):
    """Validate ``agents`` against ``graph`` and return a :class:`NetworkModel`.

    ``graph`` may be a :class:`CouplingGraph` or an iterable of ``(j, i)``
    edges, in which case the agent count is ``len(agents)``.
    """
    agents = tuple(agents)
    if not isinstance(graph, CouplingGraph):
        graph = CouplingGraph(len(agents), frozenset(graph))
    if graph.agent_count != len(agents):
        raise DimensionMismatch(f"graph has {graph.agent_count} agents, got {len(agents)} models")
    for i, a in enumerate(agents):
        if set(a.couplings) != set(graph.senders[i]):
            raise InconsistentTopology(
                f"agent {i} couplings {sorted(a.couplings)} differ from senders {list(graph.senders[i])}")
        if not np.all((a.u_lower < 0) & (a.u_upper > 0)):
            raise InvalidConstraint(f"origin is not interior to the input box of agent {i}")
        xi, ui = np.zeros(a.state_dim), np.zeros(a.input_dim)
        if np.shape(a.dynamics(xi, ui)) != (a.state_dim,):
            raise DimensionMismatch(f"f_{i}{i} returns shape {np.shape(a.dynamics(xi, ui))}")
        for j, c in a.couplings.items():
            xj = np.zeros(agents[j].state_dim)
            try:
                out = np.asarray(c.dynamics(xi, xj))
            except (ValueError, IndexError) as exc:
                raise DimensionMismatch(f"f_{i}{j} rejects x_{j} of dimension {xj.size}: {exc}") from exc
            if out.shape != (a.state_dim,):
                raise DimensionMismatch(f"f_{i}{j} returns shape {out.shape}, expected ({a.state_dim},)")
    if quadratic_spec is not None:
        for i, a in enumerate(agents):
            if quadratic_spec.Q[i].shape[0] != a.state_dim or quadratic_spec.R[i].shape[0] != a.input_dim:
                raise DimensionMismatch(f"quadratic weights of agent {i} do not match its dimensions")
    net = NetworkModel(graph, agents, quadratic_spec)
    x0, u0 = np.zeros(net.n), np.zeros(net.m)
    if np.linalg.norm(net.f(x0, u0)) > tol:
        raise NotEquilibrium(f"|f(0,0)| = {np.linalg.norm(net.f(x0, u0)):.3e}")
    if abs(float(net.l(x0, u0))) > tol or abs(float(net.V(x0))) > tol:
        raise NotEquilibrium("running or terminal cost nonzero at the origin")
    return net


# ---------------------------------------------------------------------------
# agent-level evaluations
# ---------------------------------------------------------------------------

def _neighbor_states(model, i, x_neighbors):
    missing = [j for j in model.graph.senders[i] if j not in x_neighbors]
    if missing:
        raise MissingNeighborState(f"agent {i} lacks states of senders {missing}")
    return {j: np.asarray(x_neighbors[j], float) for j in model.graph.senders[i]}


def eval_agent_dynamics(model, i, x_i, u_i, x_neighbors):
    """``f_ii(x_i, u_i) + sum_j f_ij(x_i, x_j)`` over the senders of ``i``."""
    xn = _neighbor_states(model, i, x_neighbors)
    return model.agents[i].f(np.asarray(x_i, float), np.asarray(u_i, float), xn)


def eval_stage_cost(model, i, x_i, u_i, x_neighbors):
    xn = _neighbor_states(model, i, x_neighbors)
    return model.agents[i].l(np.asarray(x_i, float), np.asarray(u_i, float), xn)


def compute_cost_bounds(spec):
    """Eigenvalue bounds ``(m_l, M_l, m_V, M_V)`` of block-diagonal quadratic costs."""
    if spec is None or spec.P is None:
        raise MissingTerminalWeights("terminal weights P_i are not set")
    lw = np.concatenate([np.linalg.eigvalsh(M) for M in (*spec.Q, *spec.R)])
    vw = np.concatenate([np.linalg.eigvalsh(M) for M in spec.P])
    return float(lw.min()), float(lw.max()), float(vw.min()), float(vw.max())


# ---------------------------------------------------------------------------
# derivative validation
# ---------------------------------------------------------------------------

def _rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b)), initial=0.0))


def validate_derivatives(model, sample_count=100, seed=0, box=1.0, rtol=1e-5, step=FD_STEP):
    """Compare every supplied derivative against central differences.

    States are drawn uniformly from ``[-box, box]`` and inputs from the input
    box.  Returns a dict mapping a function name to its worst relative error
    (``|a - fd| / (1 + |fd|)``); raises :class:`DerivativeMismatch` when any
    exceeds ``rtol``.
    """
    rng = np.random.default_rng(seed)
    worst = {}

    def check(name, analytic, func, argnum, args):
        fd = fd_jacobian(func, argnum, step)(*args)
        err = _rel_err(analytic(*args), fd)
        if err > worst.get(name, (-1.0, None))[0]:
            worst[name] = (err, args)

    for _ in range(sample_count):
        xs = [rng.uniform(-box, box, a.state_dim) for a in model.agents]
        us = [rng.uniform(a.u_lower, a.u_upper) for a in model.agents]
        for i, a in enumerate(model.agents):
            xi, ui = xs[i], us[i]
            check(f"f_{i}{i}/x", a.dynamics_x, a.dynamics, 0, (xi, ui))
            check(f"f_{i}{i}/u", a.dynamics_u, a.dynamics, 1, (xi, ui))
            check(f"l_{i}{i}/x", a.cost_x, a.cost, 0, (xi, ui))
            check(f"l_{i}{i}/u", a.cost_u, a.cost, 1, (xi, ui))
            check(f"V_{i}/x", a.terminal_x, a.terminal, 0, (xi,))
            for j, c in a.couplings.items():
                args = (xi, xs[j])
                check(f"f_{i}{j}/x_{i}", c.dynamics_xi, c.dynamics, 0, args)
                check(f"f_{i}{j}/x_{j}", c.dynamics_xj, c.dynamics, 1, args)
                check(f"l_{i}{j}/x_{i}", c.cost_xi, c.cost, 0, args)
                check(f"l_{i}{j}/x_{j}", c.cost_xj, c.cost, 1, args)

    for name, (err, args) in worst.items():
        if err > rtol:
            raise DerivativeMismatch(name, args, err)
    return {name: err for name, (err, _) in worst.items()}
