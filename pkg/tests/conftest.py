"""Shared fixtures.

Worked examples elsewhere number agents from one; :func:`a` converts such an
index to the package's zero-based numbering.
"""
import numpy as np
import pytest

from sensidmpc.models import VDP_P_REF, coupled_vdp, scalar_coupled
from sensidmpc.network import AgentModel, Coupling, build_network, quadratic_costs

# terminal weights of the asymmetric two-agent setup, structured SDP at gamma 1.1
PAIR_P = (np.array([[8.056472]]), np.array([[10.116963]]))
PAIR_MU = (1.0, 0.5)
PAIR_EPS = ((0.0, 0.5), (2.0, 0.0))


def a(k):
    """One-based agent label to zero-based index."""
    return k - 1


@pytest.fixture(scope="session")
def vdp():
    return coupled_vdp(P=VDP_P_REF)


@pytest.fixture(scope="session")
def vdp_bare():
    return coupled_vdp()


@pytest.fixture(scope="session")
def pair():
    return scalar_coupled(mu=PAIR_MU, eps=PAIR_EPS, P=PAIR_P)


def linear_agent(n, A, B, Q, R, P, u_max=1.0, couplings=None):
    """Agent with ``dx = A x + B u`` and quadratic costs."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    l, l_x, l_u, V, V_x = quadratic_costs(np.atleast_2d(Q), np.atleast_2d(R), np.atleast_2d(P))
    return AgentModel(n, B.shape[1], lambda x, u: x @ A.T + u @ B.T, l, V, -u_max, u_max,
                      couplings or {},
                      dynamics_x=lambda x, u: np.broadcast_to(A, x.shape[:-1] + A.shape),
                      dynamics_u=lambda x, u: np.broadcast_to(B, x.shape[:-1] + B.shape),
                      cost_x=l_x, cost_u=l_u, terminal_x=V_x)


def decoupled_network(count=2, P=1.0):
    agents = [linear_agent(1, [[0.5 * (k + 1)]], [[1.0]], [[1.0]], [[1.0]], [[P]], u_max=2.0)
              for k in range(count)]
    return build_network(set(), agents)


def nonlinear_pair(seed=0):
    """Two scalar agents with nonlinear dynamic and cost couplings in both directions."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.2, 0.8, size=4)

    def link(k):
        return Coupling(
            lambda xi, xj: c[k] * np.sin(xj) * (1 + 0.3 * xi**2),
            None, None,
            lambda xi, xj: 0.5 * c[k + 2] * (xi[..., 0] - xj[..., 0]) ** 2,
        )

    agents = []
    for i in range(2):
        l, l_x, l_u, V, V_x = quadratic_costs(np.eye(1), np.eye(1), 2 * np.eye(1))
        agents.append(AgentModel(1, 1, lambda x, u: -x + x**3 / 3 + u, l, V, -1.0, 1.0,
                                 {1 - i: link(i)}, cost_x=l_x, cost_u=l_u, terminal_x=V_x))
    return build_network({(0, 1), (1, 0)}, agents)
