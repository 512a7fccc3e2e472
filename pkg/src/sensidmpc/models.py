"""Built-in benchmark networks with analytic derivatives.

``coupled_vdp``
    Three coupled Van der Pol type oscillators with states ``(theta, omega)``.
    Oscillator 0 drives both others through ``0.057 theta_0 omega_0``;
    oscillators 1 and 2 are coupled through a velocity difference damper.
``scalar_coupled``
    Two scalar agents ``dx_i = (mu_i + (1 - mu_i) x_i) u_i + sum_j eps_ij x_j``.

Agents are numbered from zero.
"""
import numpy as np

from .network import AgentModel, Coupling, QuadraticCostSpec, build_network, quadratic_costs

VDP_PARAMS = (
    # (a, b, c, d): omega_dot = a (1 - b theta^2) omega - c theta + d omega + u
    (0.1, 5.25, 1.0, 0.0),
    (0.001, 6070.0, 4.0, 0.1),
    (0.001, 192.0, 4.0, 0.1),
)
VDP_EDGES = {(0, 1), (0, 2), (1, 2), (2, 1)}
VDP_Q = np.diag([30.0, 30.0])
VDP_R = np.array([[0.1]])
VDP_X0 = np.array([0.7, 0.0, 0.28, 0.0, -0.61, 0.0])

# reference terminal ingredients of the benchmark
VDP_P_REF = (
    np.array([[37.4, 2.0], [2.0, 2.2]]),
    np.array([[38.8, 1.7], [1.7, 2.2]]),
    np.array([[38.8, 1.7], [1.7, 2.2]]),
)
VDP_K_REF = np.array([
    [-16.3, -18.3, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, -13.8, -15.3, 0.02, 0.04],
    [0.0, 0.0, 0.02, 0.04, -13.8, -15.3],
])


def _vdp_local(a, b, c, d):
    def f(x, u):
        th, om = x[..., 0], x[..., 1]
        return np.stack([om, a * (1 - b * th**2) * om - c * th + d * om + u[..., 0]], axis=-1)

    def f_x(x, u):
        th, om = x[..., 0], x[..., 1]
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = -2 * a * b * th * om - c
        out[..., 1, 1] = a * (1 - b * th**2) + d
        return out

    def f_u(x, u):
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = 1.0
        return out

    return f, f_x, f_u


def _vdp_drive():
    # 0.057 theta_j omega_j acting on omega_i
    def f(xi, xj):
        out = np.zeros(np.broadcast_shapes(xi.shape, xj.shape))
        out[..., 1] = 0.057 * xj[..., 0] * xj[..., 1]
        return out

    def f_xi(xi, xj):
        return np.zeros(np.broadcast_shapes(xi.shape, xj.shape)[:-1] + (2, 2))

    def f_xj(xi, xj):
        out = np.zeros(np.broadcast_shapes(xi.shape, xj.shape)[:-1] + (2, 2))
        out[..., 1, 0] = 0.057 * xj[..., 1]
        out[..., 1, 1] = 0.057 * xj[..., 0]
        return out

    return Coupling(f, f_xi, f_xj)


def _vdp_damper():
    # -0.1 omega_j acting on omega_i; the +0.1 omega_i part sits in f_ii
    def f(xi, xj):
        out = np.zeros(np.broadcast_shapes(xi.shape, xj.shape))
        out[..., 1] = -0.1 * xj[..., 1]
        return out

    def f_xi(xi, xj):
        return np.zeros(np.broadcast_shapes(xi.shape, xj.shape)[:-1] + (2, 2))

    def f_xj(xi, xj):
        out = np.zeros(np.broadcast_shapes(xi.shape, xj.shape)[:-1] + (2, 2))
        out[..., 1, 1] = -0.1
        return out

    return Coupling(f, f_xi, f_xj)


def _agent(n, m, dyn, Q, R, P, lo, hi, couplings):
    f, f_x, f_u = dyn
    P_eff = np.zeros((n, n)) if P is None else P
    l, l_x, l_u, V, V_x = quadratic_costs(Q, R, P_eff)
    return AgentModel(n, m, f, l, V, lo, hi, couplings,
                      dynamics_x=f_x, dynamics_u=f_u, cost_x=l_x, cost_u=l_u, terminal_x=V_x)


def coupled_vdp(P=None, Q=VDP_Q, R=VDP_R, u_max=1.0):
    """Three coupled oscillators with inputs in ``[-u_max, u_max]``.

    ``P`` is an optional sequence of terminal weights; without it the
    terminal cost is zero and must be set via ``with_terminal_weights``.
    """
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    couplings = ({}, {0: _vdp_drive(), 2: _vdp_damper()}, {0: _vdp_drive(), 1: _vdp_damper()})
    agents = [
        _agent(2, 1, _vdp_local(*VDP_PARAMS[i]), Q, R, None if P is None else P[i],
               -u_max, u_max, couplings[i])
        for i in range(3)
    ]
    spec = QuadraticCostSpec((Q,) * 3, (R,) * 3, None if P is None else tuple(P))
    return build_network(VDP_EDGES, agents, spec)


def _scalar_local(mu):
    def f(x, u):
        return (mu + (1 - mu) * x) * u

    def f_x(x, u):
        return ((1 - mu) * u)[..., None]

    def f_u(x, u):
        return (mu + (1 - mu) * x)[..., None]

    return f, f_x, f_u


def _scalar_link(eps):
    def f(xi, xj):
        return eps * xj + 0.0 * xi

    def f_xi(xi, xj):
        return np.zeros(np.broadcast_shapes(xi.shape, xj.shape)[:-1] + (1, 1))

    def f_xj(xi, xj):
        return np.full(np.broadcast_shapes(xi.shape, xj.shape)[:-1] + (1, 1), float(eps))

    return Coupling(f, f_xi, f_xj)


def scalar_coupled(mu=(0.5, 0.5), eps=((0.0, 2.0), (2.0, 0.0)), P=None, q=10.0, r=1.0, u_max=2.0):
    """Scalar agents with input-affine nonlinearity and linear state coupling.

    ``eps[i][j]`` is the gain with which agent ``j`` drives agent ``i``; a
    zero entry means no edge.  ``mu`` may be scalar or per agent.
    """
    eps = np.atleast_2d(np.asarray(eps, float))
    N = eps.shape[0]
    mu = np.broadcast_to(np.asarray(mu, float), (N,))
    edges = {(j, i) for i in range(N) for j in range(N) if i != j and eps[i, j] != 0.0}
    Q, R = np.array([[q]]), np.array([[r]])
    agents = []
    for i in range(N):
        couplings = {j: _scalar_link(eps[i, j]) for j in range(N) if (j, i) in edges}
        agents.append(_agent(1, 1, _scalar_local(mu[i]), Q, R, None if P is None else P[i],
                             -u_max, u_max, couplings))
    spec = QuadraticCostSpec((Q,) * N, (R,) * N, None if P is None else tuple(P))
    return build_network(edges, agents, spec)


BUILTINS = {"coupled-vdp": coupled_vdp, "scalar-coupled": scalar_coupled}


def builtin_network(name, params=None, P=None):
    """Construct a built-in network by its config name."""
    params = dict(params or {})
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin system {name!r}; choose from {sorted(BUILTINS)}")
    return BUILTINS[name](P=P, **params)
