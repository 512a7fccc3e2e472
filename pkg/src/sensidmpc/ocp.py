"""Optimal control kernel on a uniform time grid.

Dynamics are discretized with the implicit trapezoidal rule

    x_{k+1} = x_k + h/2 (f(x_k, u_k) + f(x_{k+1}, u_{k+1})),

controls are piecewise linear between nodes, and integrals use trapezoidal
weights.  The adjoint is the exact discrete adjoint of this scheme, so the
reduced gradient returned here is the true gradient of the discrete cost.
Couplings between subsystems only ever see node values, which makes a
stacked central problem and the set of local problems share one and the
same discretization.

Model callables of an :class:`OcpProblem` have the signature
``func(x, u, k)`` where ``x`` and ``u`` carry a leading node axis and ``k``
indexes the nodes they refer to (a slice or an index array).  Time-varying
data, such as frozen neighbor trajectories, is looked up with ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import Divergence, LineSearchFailure, OracleFailure

ALL = slice(None)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``tau_j = j h`` on ``[0, T]`` with ``point_count`` nodes."""

    T: float
    point_count: int = 21

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.point_count < 2:
            raise ValueError("point_count must be at least 2")

    @property
    def h(self):
        return self.T / (self.point_count - 1)

    @property
    def nodes(self):
        return np.linspace(0.0, self.T, self.point_count)

    @property
    def weights(self):
        w = np.full(self.point_count, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def interpolate(self, values, t):
        """Piecewise-linear interpolation of node ``values`` at times ``t``."""
        values = np.asarray(values, float)
        t = np.clip(np.asarray(t, float), 0.0, self.T)
        s = t / self.h
        k = np.minimum(np.floor(s).astype(int), self.point_count - 2)
        a = (s - k)[..., None]
        return (1 - a) * values[k] + a * values[k + 1]


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 100
    tol_u: float = 1e-6
    backtrack: float = 0.5
    armijo: float = 1e-4
    initial_step: float = 1.0
    max_backtracks: int = 40
    substeps: int = 10

    def __post_init__(self):
        if self.max_iter < 1 or self.substeps < 1 or self.max_backtracks < 1:
            raise ValueError("iteration counts must be positive")
        if not 0 < self.tol_u < 1:
            raise ValueError("tol_u must lie in (0, 1)")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo < 1:
            raise ValueError("line-search constants must lie in (0, 1)")
        if not self.initial_step > 0:
            raise ValueError("initial_step must be positive")


CENTRAL_CONFIG = SolverConfig(max_iter=2000, tol_u=1e-8)

# relative cost change below which Armijo tests are swamped by rounding
ROUNDING = 1e-12
# approximate Wolfe constant 1 - 2 delta with delta = 0.1
WOLFE = 0.8


def invariant(func):
    """Lift a time-invariant ``func(x, u)`` to the node-indexed signature."""
    return lambda x, u, k=ALL: func(x, u)


@dataclass(frozen=True)
class OcpProblem:
    """Box-constrained OCP with an optional linear running-cost tilt.

    The discrete cost is

        J = sum_k w_k [l(x_k, u_k) + g_k'(x_k - x_ref_k)] + V(x_{N-1}).
    """

    f: Callable
    f_x: Callable
    f_u: Callable
    l: Callable
    l_x: Callable
    l_u: Callable
    V: Callable
    V_x: Callable
    u_lower: np.ndarray
    u_upper: np.ndarray
    x0: np.ndarray
    grid: TimeGrid
    tilt: Optional[np.ndarray] = None
    x_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        x0 = np.asarray(self.x0, float).ravel()
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "u_lower", np.asarray(self.u_lower, float).reshape(-1))
        object.__setattr__(self, "u_upper", np.asarray(self.u_upper, float).reshape(-1))
        if self.u_lower.shape != self.u_upper.shape:
            raise ValueError("input bounds differ in shape")
        if self.tilt is not None:
            g = np.asarray(self.tilt, float)
            ref = np.zeros_like(g) if self.x_ref is None else np.asarray(self.x_ref, float)
            if g.shape != (self.grid.point_count, x0.size) or ref.shape != g.shape:
                raise ValueError("tilt and reference must be node trajectories of the state dimension")
            object.__setattr__(self, "tilt", g)
            object.__setattr__(self, "x_ref", ref)

    @property
    def n(self):
        return self.x0.size

    @property
    def m(self):
        return self.u_lower.size

    def project(self, u):
        return np.clip(u, self.u_lower, self.u_upper)

    def cost(self, x, u):
        w = self.grid.weights
        run = self.l(x, u, ALL)
        if self.tilt is not None:
            run = run + np.einsum("ki,ki->k", self.tilt, x - self.x_ref)
        return float(w @ run + self.V(x[-1]))


def make_problem(f, f_x, f_u, l, l_x, l_u, V, V_x, u_lower, u_upper, x0, grid, tilt=None, x_ref=None):
    """Build an :class:`OcpProblem` from time-invariant ``func(x, u)`` callables."""
    return OcpProblem(invariant(f), invariant(f_x), invariant(f_u), invariant(l), invariant(l_x),
                      invariant(l_u), V, V_x, u_lower, u_upper, x0, grid, tilt, x_ref)


# ---------------------------------------------------------------------------
# forward / adjoint sweeps
# ---------------------------------------------------------------------------

def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise Divergence(f"non-finite {what}")


def _step_newton(problem, x, u, k, h, I, max_iter=30):
    # one implicit trapezoidal step from node k to k+1
    s0, s1 = slice(k, k + 1), slice(k + 1, k + 2)
    xk = x[s0]
    base = xk + 0.5 * h * problem.f(xk, u[s0], s0)
    z = xk + h * problem.f(xk, u[s0], s0)
    for _ in range(max_iter):
        r = z - base - 0.5 * h * problem.f(z, u[s1], s1)
        _check_finite(r, "state")
        if np.max(np.abs(r)) <= 1e-13 * (1 + np.max(np.abs(z))):
            return z[0]
        A = I - 0.5 * h * problem.f_x(z, u[s1], s1)[0]
        try:
            z = z - np.linalg.solve(A, r[0])[None]
        except np.linalg.LinAlgError:
            break
    raise Divergence(f"implicit step {k} did not converge")


def integrate_forward(problem, u, x_guess=None, max_iter=40):
    """State trajectory ``(N, n)`` for controls ``u`` ``(N, m)``.

    All implicit steps are solved simultaneously by Newton's method on the
    stacked residual, starting from ``x_guess`` (constant ``x0`` if absent);
    a step-by-step Newton sweep is the fallback.
    """
    grid = problem.grid
    N, h, n = grid.point_count, grid.h, problem.n
    u = np.asarray(u, float)
    x = np.empty((N, n))
    if x_guess is None:
        x[:] = problem.x0
    else:
        x[:] = x_guess
        x[0] = problem.x0
    if not np.all(np.isfinite(x)):
        x[:] = problem.x0
    I = np.eye(n)
    for _ in range(max_iter):
        fv = problem.f(x, u, ALL)
        r = x[1:] - x[:-1] - 0.5 * h * (fv[:-1] + fv[1:])
        if not np.all(np.isfinite(r)):
            break
        if np.max(np.abs(r)) <= 1e-13 * (1 + np.max(np.abs(x))):
            return x
        F = problem.f_x(x, u, ALL)
        try:
            Ainv = np.linalg.inv(I - 0.5 * h * F[1:])
        except np.linalg.LinAlgError:
            break
        C = Ainv @ (I + 0.5 * h * F[:-1])
        d = -np.einsum("kij,kj->ki", Ainv, r)
        delta = np.zeros(n)
        for k in range(N - 1):
            delta = C[k] @ delta + d[k]
            x[k + 1] += delta
    # fallback: sequential Newton
    x[0] = problem.x0
    for k in range(N - 1):
        x[k + 1] = _step_newton(problem, x, u, k, h, I)
    _check_finite(x, "state")
    return x


def _multipliers(problem, x, u):
    # nu[m] for m = 1..N-1 are the multipliers of the trapezoidal steps
    grid = problem.grid
    N, h, n = grid.point_count, grid.h, problem.n
    w = grid.weights
    I = np.eye(n)
    F = problem.f_x(x, u, ALL)
    c = problem.l_x(x, u, ALL)
    if problem.tilt is not None:
        c = c + problem.tilt
    rhs = w[:, None] * c
    rhs[-1] += problem.V_x(x[-1])
    At = np.swapaxes(I - 0.5 * h * F, -1, -2)
    Bt = np.swapaxes(I + 0.5 * h * F, -1, -2)
    try:
        Minv = np.linalg.inv(At[1:])
    except np.linalg.LinAlgError as exc:
        raise Divergence("singular adjoint step") from exc
    C = Minv @ Bt[1:]
    d = np.einsum("kij,kj->ki", Minv, rhs[1:])
    nu = np.zeros((N + 1, n))
    for m in range(N - 1, 0, -1):
        nu[m] = C[m - 1] @ nu[m + 1] + d[m - 1]
    _check_finite(nu, "adjoint")
    return nu


def _nodal(nu):
    lam = np.empty((nu.shape[0] - 1, nu.shape[1]))
    lam[1:-1] = 0.5 * (nu[1:-2] + nu[2:-1])
    # nu_m approximates the adjoint at the step midpoint, so extrapolate to
    # the first node with second order; the last node keeps nu_{N-1}, which
    # is what neighbors need for the exact coupling gradient
    lam[0] = 1.5 * nu[1] - 0.5 * nu[2] if lam.shape[0] > 2 else nu[1]
    lam[-1] = nu[-2]
    return lam


def _adjoint_and_gradient(problem, x, u):
    nu = _multipliers(problem, x, u)
    lam = _nodal(nu)
    # the first control only acts through the first step, whose multiplier is nu_1
    lam_u = lam.copy()
    lam_u[0] = nu[1]
    return lam, hamiltonian_gradient(problem, x, u, lam_u)


def _adjoint_sweep(problem, x, u):
    return _nodal(_multipliers(problem, x, u))


def integrate_adjoint_backward(problem, x, u):
    """Nodal adjoint trajectory ``(N, n)``.

    Interior nodes carry the mean of the two neighboring step multipliers,
    the last node the multiplier of the last step (``V_x`` up to ``O(h)``) and
    the first node a second-order extrapolation of the first two.
    """
    return _adjoint_sweep(problem, np.asarray(x, float), np.asarray(u, float))


def hamiltonian_gradient(problem, x, u, lam):
    """``dH/du = l_u + f_u' lambda`` at every node."""
    G = problem.f_u(x, u, ALL)
    return problem.l_u(x, u, ALL) + np.einsum("kij,ki->kj", G, lam)


def cost_gradient(problem, u, x=None):
    """Exact gradient of the discrete cost w.r.t. nodal controls."""
    u = np.asarray(u, float)
    if x is None:
        x = integrate_forward(problem, u)
    _, dH = _adjoint_and_gradient(problem, x, u)
    return problem.grid.weights[:, None] * dH


# ---------------------------------------------------------------------------
# projected gradient
# ---------------------------------------------------------------------------

@dataclass
class OcpSolution:
    u: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    cost: float
    iterations: int
    pg_norm: float
    step: float
    costs: list = field(default_factory=list, repr=False)
    steps: list = field(default_factory=list, repr=False)

    def __iter__(self):
        return iter((self.u, self.x, self.lam, self.cost, self.iterations))


def _pg_norm(problem, u, dHdu):
    return float(np.max(np.abs(u - problem.project(u - dHdu)), initial=0.0))


def projected_gradient_solve(problem, u_init, config=None, x_guess=None, step=None):
    """Projected gradient method with Barzilai-Borwein trial steps.

    Each iteration takes the trial step (BB, safeguarded, else the last
    accepted step) along ``-dH/du`` and backtracks until the Armijo
    condition on the discrete cost holds.  Once cost differences reach
    rounding level the Armijo test is meaningless; a step is then accepted
    under the approximate Wolfe condition, which only uses the exact
    gradient, so the cost sequence is non-increasing up to ``ROUNDING``
    relative.  Iteration stops once the relative control change falls below
    ``tol_u`` (never on the first iteration, whose step is not yet curvature
    informed).
    """
    cfg = config or SolverConfig()
    w = problem.grid.weights[:, None]
    u = problem.project(np.broadcast_to(np.asarray(u_init, float), (problem.grid.point_count, problem.m)).copy())
    x = integrate_forward(problem, u, x_guess)
    J = problem.cost(x, u)
    _check_finite(J, "cost")
    lam, dH = _adjoint_and_gradient(problem, x, u)
    alpha = cfg.initial_step if step is None else step
    costs = [J]
    steps = []
    prev = None
    it = 0
    while it < cfg.max_iter:
        it += 1
        if prev is not None:
            s, y = u - prev[0], dH - prev[1]
            sy = float(np.sum(w * s * y))
            if sy > 0:
                alpha = min(max(float(np.sum(w * s * s)) / sy, 1e-10), 1e10)
        trial = alpha
        for _ in range(cfg.max_backtracks):
            u_new = problem.project(u - trial * dH)
            du = u_new - u
            decrease = float(np.sum(w * dH * du))
            lam_new = None
            try:
                x_new = integrate_forward(problem, u_new, x)
                J_new = problem.cost(x_new, u_new)
                ok = np.isfinite(J_new) and J_new <= J + cfg.armijo * decrease
                if not ok and np.isfinite(J_new) and abs(J_new - J) <= ROUNDING * (1 + abs(J)):
                    lam_new, dH_new = _adjoint_and_gradient(problem, x_new, u_new)
                    ok = float(np.sum(w * dH_new * du)) <= WOLFE * abs(decrease)
            except Divergence:
                ok = False
            if ok:
                break
            trial *= cfg.backtrack
        else:
            change = np.max(np.abs(du), initial=0.0) / max(1.0, np.max(np.abs(u), initial=0.0))
            if change <= cfg.tol_u or abs(decrease) <= 1e-15 * (1 + abs(J)):
                break
            raise LineSearchFailure(f"no sufficient decrease after {cfg.max_backtracks} backtracks")
        alpha = trial
        change = np.max(np.abs(du), initial=0.0) / max(1.0, np.max(np.abs(u), initial=0.0))
        prev = (u, dH)
        u, x, J = u_new, x_new, J_new
        if lam_new is None:
            lam, dH = _adjoint_and_gradient(problem, x, u)
        else:
            lam, dH = lam_new, dH_new
        costs.append(J)
        steps.append(alpha)
        if change <= cfg.tol_u and (it > 1 or cfg.max_iter == 1):
            break
    return OcpSolution(u, x, lam, J, it, _pg_norm(problem, u, dH), alpha, costs, steps)


# ---------------------------------------------------------------------------
# central problem and plant
# ---------------------------------------------------------------------------

def central_problem(network, x0, grid):
    """Stacked OCP of the whole network (no tilt)."""
    return make_problem(network.f, network.f_x, network.f_u, network.l, network.l_x, network.l_u,
                        network.V, network.V_x, network.u_lower, network.u_upper, x0, grid)


def solve_central_ocp(network, x0, grid, config=None, u_init=None, x_guess=None, step=None):
    """Central oracle: tight projected-gradient solve of the stacked OCP."""
    problem = central_problem(network, x0, grid)
    if u_init is None:
        u_init = np.zeros((grid.point_count, network.m))
    try:
        return projected_gradient_solve(problem, u_init, config or CENTRAL_CONFIG, x_guess, step)
    except (Divergence, LineSearchFailure) as exc:
        raise OracleFailure(str(exc)) from exc


def rk4_rollout(f, x0, u_of_t, dt, substeps=10, return_path=False):
    """Integrate ``dx = f(x, u(t))`` over ``[0, dt]`` with classical RK4.

    With ``return_path`` the states at the ``substeps + 1`` sub-grid points
    are returned as well.
    """
    x = np.asarray(x0, float).copy()
    h = dt / substeps
    path = [x]
    for s in range(substeps):
        t = s * h
        um = u_of_t(t + 0.5 * h)
        k1 = f(x, u_of_t(t))
        k2 = f(x + 0.5 * h * k1, um)
        k3 = f(x + 0.5 * h * k2, um)
        k4 = f(x + h * k3, u_of_t(t + h))
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(x, "plant state")
        path.append(x)
    if return_path:
        return x, np.array(path)
    return x


def plant_step(network, x0, grid, u_traj, dt, substeps=10):
    """Apply the first ``dt`` seconds of a nodal control trajectory to the plant.

    Returns the successor state and the running cost accumulated on the
    way (trapezoidal rule on the RK4 sub-grid).
    """
    u_of_t = lambda t: grid.interpolate(u_traj, t)
    x, path = rk4_rollout(network.f, x0, u_of_t, dt, substeps, return_path=True)
    t = np.linspace(0.0, dt, substeps + 1)
    run = network.l(path, u_of_t(t))
    return x, float(np.sum(0.5 * (run[1:] + run[:-1])) * dt / substeps)
