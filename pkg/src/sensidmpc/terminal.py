"""Offline design of separable terminal costs and structured terminal gains.

The terminal weights solve the log-det problem

    min  -log det E
    s.t. [[A E + E A' + B Y + Y' B',  E Q^1/2,   Y' R^1/2],
          [Q^1/2 E,                   -I/gamma,  0       ],
          [R^1/2 Y,                   0,         -I/gamma]]  <= 0,
         E block diagonal,  Y_ij = 0 outside the neighborhood pattern,

with ``P = E^-1`` and ``K = Y P``.  It is solved by a dense barrier method
with Newton steps on the free entries of ``(E, Y)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import Infeasible, MissingTerminalWeights, NoFeasibleLevel, NumericalFailure
from .network import compute_cost_bounds

E_MARGIN = 1e-6
LMI_MARGIN = 1e-8


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Linearization:
    A: np.ndarray
    B: np.ndarray
    state_dims: tuple
    input_dims: tuple


def _blocks(dims):
    out, o = [], 0
    for d in dims:
        out.append(slice(o, o + d))
        o += d
    return out


def linearize_at_origin(network):
    """Jacobians of the central dynamics at the origin."""
    x0, u0 = np.zeros(network.n), np.zeros(network.m)
    A, B = network.f_x(x0, u0), network.f_u(x0, u0)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericalFailure("non-finite Jacobian at the origin")
    sx, su = _blocks(network.state_dims), _blocks(network.input_dims)
    g = network.graph
    for i in range(network.agent_count):
        for j in range(network.agent_count):
            if j != i and j not in g.senders[i] and np.any(A[sx[i], sx[j]] != 0):
                raise NumericalFailure(f"A_{i}{j} nonzero although {j} does not send to {i}")
            if j != i and np.any(B[sx[i], su[j]] != 0):
                raise NumericalFailure(f"B_{i}{j} nonzero: inputs must act locally")
    return Linearization(A, B, network.state_dims, network.input_dims)


def coupling_components(lin, tol=0.0):
    """Groups of agents connected through nonzero blocks of ``A`` at the origin."""
    sx = _blocks(lin.state_dims)
    N = len(sx)
    label = list(range(N))

    def find(a):
        while label[a] != a:
            label[a] = label[label[a]]
            a = label[a]
        return a

    for i in range(N):
        for j in range(N):
            if i != j and np.max(np.abs(lin.A[sx[i], sx[j]])) > tol:
                label[find(i)] = find(j)
    roots = [find(i) for i in range(N)]
    return [sorted(i for i in range(N) if roots[i] == r) for r in sorted(set(roots))]


def gain_pattern(graph, lin, split_components=True):
    """Agent-level mask of admissible gain blocks ``K_ij``.

    Blocks are allowed for ``j`` in ``N_i`` and ``j = i``.  With
    ``split_components`` blocks between agents whose linearizations are
    decoupled are removed as well; this does not change the optimal ``E``
    because the LMI splits into independent principal blocks.
    """
    N = graph.agent_count
    mask = np.eye(N, dtype=bool)
    for i in range(N):
        for j in graph.neighbors[i]:
            mask[i, j] = True
    if split_components:
        comp = {i: c for c, members in enumerate(coupling_components(lin)) for i in members}
        for i in range(N):
            for j in range(N):
                if comp[i] != comp[j]:
                    mask[i, j] = False
    return mask


# ---------------------------------------------------------------------------
# generic dense barrier machinery
# ---------------------------------------------------------------------------

class _AffineMatrix:
    """``S(w) = S0 + sum_k w_k S_k`` with log-det barrier derivatives."""

    def __init__(self, S0, Sk):
        self.S0 = np.asarray(S0, float)
        self.Sk = np.asarray(Sk, float)

    def value(self, w):
        return self.S0 + np.tensordot(w, self.Sk, axes=1)

    def logdet(self, w):
        # returns None outside the positive definite cone
        try:
            L = np.linalg.cholesky(self.value(w))
        except np.linalg.LinAlgError:
            return None
        return 2.0 * np.sum(np.log(np.diag(L)))

    def derivatives(self, w):
        """Gradient and Hessian of ``-log det S(w)``."""
        W = np.linalg.inv(self.value(w))
        T = np.einsum("ij,kjl->kil", W, self.Sk)
        g = -np.einsum("kii->k", T)
        H = np.einsum("kij,lji->kl", T, T)
        return g, H


def _phi(terms, c, w):
    val = float(c @ w)
    for weight, S in terms:
        ld = S.logdet(w)
        if ld is None:
            return np.inf
        val -= weight * ld
    return val


def _newton(terms, c, w, max_iter=200, tol=1e-11, stop=None):
    """Damped Newton minimization of ``c'w - sum weight log det S(w)``."""
    val = _phi(terms, c, w)
    for _ in range(max_iter):
        if stop is not None and stop(w):
            return w
        g, H = c.astype(float).copy(), np.zeros((w.size, w.size))
        for weight, S in terms:
            gs, Hs = S.derivatives(w)
            g += weight * gs
            H += weight * Hs
        scale = np.sqrt(np.maximum(np.diag(H), 1e-300))
        Hs = H / np.outer(scale, scale)
        try:
            dw = -np.linalg.solve(Hs, g / scale) / scale
        except np.linalg.LinAlgError:
            dw = -np.linalg.lstsq(Hs, g / scale, rcond=None)[0] / scale
        dec = -float(g @ dw)
        if not np.isfinite(dec):
            raise NumericalFailure("non-finite Newton step")
        if dec <= 2 * tol:
            return w
        t = 1.0
        for _ in range(80):
            w_new = w + t * dw
            v_new = _phi(terms, c, w_new)
            if v_new <= val - 0.25 * t * dec:
                break
            t *= 0.5
        else:
            if dec <= 1e-8 * (1 + abs(val)):
                return w
            raise NumericalFailure("barrier Newton iteration stagnated")
        w, val = w_new, v_new
    raise NumericalFailure("barrier Newton iteration did not converge")


# ---------------------------------------------------------------------------
# structured SDP
# ---------------------------------------------------------------------------

@dataclass
class SdpResult:
    P: np.ndarray
    K: np.ndarray
    E: np.ndarray
    Y: np.ndarray
    objective: float
    lmi_residual: float
    gap: float
    iterations: int


def _sqrtm_psd(M):
    w, V = np.linalg.eigh(np.atleast_2d(M))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def _variables(state_dims, input_dims, e_mask, y_mask):
    # unit bases of the free entries of E (symmetric) and Y
    n, m = sum(state_dims), sum(input_dims)
    sx, su = _blocks(state_dims), _blocks(input_dims)
    Eb, Yb = [], []
    for a in range(n):
        for b in range(a, n):
            if e_mask[a, b]:
                E = np.zeros((n, n))
                E[a, b] = E[b, a] = 1.0
                Eb.append(E)
                Yb.append(np.zeros((m, n)))
    for r in range(m):
        for col in range(n):
            if y_mask[r, col]:
                Y = np.zeros((m, n))
                Y[r, col] = 1.0
                Eb.append(np.zeros((n, n)))
                Yb.append(Y)
    return np.array(Eb), np.array(Yb)


def _lmi(A, B, Qh, Rh, gamma, E, Y, constant=True):
    n, m = A.shape[0], B.shape[1]
    top = A @ E + E @ A.T + B @ Y + Y.T @ B.T
    c = 1.0 / gamma if constant else 0.0
    return np.block([
        [top, E @ Qh, Y.T @ Rh],
        [Qh @ E, -c * np.eye(n), np.zeros((n, m))],
        [Rh @ Y, np.zeros((m, n)), -c * np.eye(m)],
    ])


def clf_matrix(A, B, Q, R, P, K, gamma):
    """Left-hand side of the linear CLF condition for ``u = K x``."""
    Acl = A + B @ K
    return Acl.T @ P + P @ Acl + gamma * (Q + K.T @ R @ K)


def solve_structured_sdp(lin, Q, R, gamma, pattern=None, structured=True, mu0=1.0,
                         mu_factor=0.2, gap_tol=1e-7, e_bound=1e6):
    """Barrier method for the structured log-det problem.

    Parameters
    ----------
    lin : Linearization
    Q, R : array_like
        Central (block-diagonal) weights.
    gamma : float
        CLF scaling, must exceed one.
    pattern : ndarray of bool, optional
        Agent-level mask of admissible gain blocks; all blocks if omitted.
    structured : bool
        If False, ``E`` and ``Y`` are unconstrained (non-separable design).

    Returns
    -------
    SdpResult
    """
    if not gamma > 1:
        raise ValueError("gamma must exceed 1")
    A, B = np.asarray(lin.A, float), np.asarray(lin.B, float)
    n, m = B.shape
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    Qh, Rh = _sqrtm_psd(Q), _sqrtm_psd(R)
    sx, su = _blocks(lin.state_dims), _blocks(lin.input_dims)
    N = len(sx)
    e_mask = np.zeros((n, n), dtype=bool)
    y_mask = np.zeros((m, n), dtype=bool)
    if structured:
        if pattern is None:
            pattern = np.ones((N, N), dtype=bool)
        for i in range(N):
            e_mask[sx[i], sx[i]] = True
            for j in range(N):
                if pattern[i, j]:
                    y_mask[su[i], sx[j]] = True
    else:
        e_mask[:] = True
        y_mask[:] = True
    Eb, Yb = _variables(lin.state_dims, lin.input_dims, e_mask, y_mask)
    nv = len(Eb)
    dim_m = 2 * n + m
    Mk = np.array([_lmi(A, B, Qh, Rh, gamma, Eb[k], Yb[k], constant=False) for k in range(nv)])
    M0 = _lmi(A, B, Qh, Rh, gamma, np.zeros((n, n)), np.zeros((m, n)))
    In, Im = np.eye(n), np.eye(dim_m)

    # phase I over (w, t): t I - M(w) - margin I > 0, E > margin I, E < e_bound I
    Mk1 = np.concatenate([-Mk, Im[None]], axis=0)
    Ek1 = np.concatenate([Eb, np.zeros((1, n, n))], axis=0)
    slack = _AffineMatrix(-M0 - LMI_MARGIN * Im, Mk1)
    lower = _AffineMatrix(-E_MARGIN * In, Ek1)
    upper = _AffineMatrix(e_bound * In, -Ek1)
    w = np.zeros(nv + 1)
    w[:nv] = np.array([np.sum(Eb[k] * In) / max(np.sum(Eb[k] * Eb[k]), 1.0) for k in range(nv)])
    w[-1] = max(np.linalg.eigvalsh(M0 + np.tensordot(w[:nv], Mk, axes=1)).max(), 0.0) + 1.0
    c = np.zeros(nv + 1)
    c[-1] = 1.0
    mu = mu0
    iterations = 0
    feasible = lambda z: z[-1] < 0
    while not feasible(w):
        w = _newton([(mu, slack), (mu, lower), (mu, upper)], c, w, stop=feasible)
        iterations += 1
        if feasible(w):
            break
        if mu * (dim_m + 2 * n) < 1e-9:
            raise Infeasible(f"phase I stalls at t = {w[-1]:.3e} >= 0")
        mu *= mu_factor
    z = w[:nv]

    # phase II: central path of -log det E
    lmi = _AffineMatrix(-M0 - LMI_MARGIN * Im, -Mk)
    E_aff = _AffineMatrix(np.zeros((n, n)), Eb)
    E_lo = _AffineMatrix(-E_MARGIN * In, Eb)
    zero = np.zeros(nv)
    mu = mu0
    while True:
        z = _newton([(1.0, E_aff), (mu, lmi), (mu, E_lo)], zero, z)
        iterations += 1
        gap = mu * (dim_m + n)
        if gap < gap_tol:
            break
        mu *= mu_factor

    E = np.tensordot(z, Eb, axes=1)
    Y = np.tensordot(z, Yb, axes=1)
    if structured:
        P = np.zeros((n, n))
        for s in sx:
            P[s, s] = np.linalg.inv(E[s, s])
            P[s, s] = 0.5 * (P[s, s] + P[s, s].T)
        K = np.zeros((m, n))
        for i in range(N):
            for j in range(N):
                if pattern[i, j]:
                    K[su[i], sx[j]] = Y[su[i], sx[j]] @ P[sx[j], sx[j]]
    else:
        P = np.linalg.inv(E)
        P = 0.5 * (P + P.T)
        K = Y @ P
    residual = float(np.linalg.eigvalsh(clf_matrix(A, B, Q, R, P, K, gamma)).max())
    objective = -float(np.linalg.slogdet(E)[1])
    return SdpResult(P, K, E, Y, objective, residual, gap, iterations)


# ---------------------------------------------------------------------------
# terminal region
# ---------------------------------------------------------------------------

def _central_weights(network):
    spec = network.quadratic_spec
    if spec is None:
        raise MissingTerminalWeights("network has no quadratic cost specification")
    from scipy.linalg import block_diag
    return block_diag(*spec.Q), block_diag(*spec.R)


def clf_margin(network, P, K, x):
    """``dV/dx f(x, Kx) + l(x, Kx)`` for ``V = x'Px`` at points ``x`` (rows)."""
    u = x @ K.T
    return 2.0 * np.einsum("...i,ij,...j->...", x, P, network.f(x, u)) + network.l(x, u)


def _boundary_points(P, level, directions):
    w, V = np.linalg.eigh(P)
    P_isqrt = (V / np.sqrt(w)) @ V.T
    return np.sqrt(level) * directions @ P_isqrt


def compute_terminal_level(network, P, K, beta_max=100.0, samples=2000, seed=0, iterations=30):
    """Largest ``beta <= beta_max`` passing the input and sampled CLF tests.

    The input test is exact (support function of the ellipsoid); the CLF
    inequality is checked at ``samples`` points of the level surface
    ``x'Px = beta``.  Directions are drawn once so that the bisection is
    deterministic.
    """
    P, K = np.asarray(P, float), np.asarray(K, float)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((samples, P.shape[0]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    Pinv = np.linalg.inv(P)
    support = np.einsum("ri,ij,rj->r", K, Pinv, K)
    bound = np.minimum(-network.u_lower, network.u_upper) ** 2

    def ok(beta):
        if np.any(beta * support > bound):
            return False
        return bool(np.all(clf_margin(network, P, K, _boundary_points(P, beta, d)) <= 0.0))

    if ok(beta_max):
        return float(beta_max)
    lo, hi = 0.0, float(beta_max)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    if lo < 1e-9:
        raise NoFeasibleLevel("no positive level passes the CLF test")
    return lo


def compute_attraction_level(beta, m_l, m_V, T):
    """``alpha = beta (1 + m_l T / m_V)``."""
    return beta * (1.0 + m_l * T / m_V)


@dataclass
class ClfReport:
    passed: bool
    worst_margin: float
    worst_point: np.ndarray
    inputs_feasible: bool
    samples: int


def sample_ellipsoid(P, beta, count, rng, batch=4096):
    """Uniform samples of ``{x : x'Px <= beta}`` by rejection from its bounding box."""
    P = np.asarray(P, float)
    half = np.sqrt(beta * np.diag(np.linalg.inv(P)))
    out, have = [], 0
    while have < count:
        x = rng.uniform(-half, half, (batch, P.shape[0]))
        x = x[np.einsum("ki,ij,kj->k", x, P, x) <= beta]
        out.append(x)
        have += len(x)
    return np.concatenate(out)[:count]


def verify_clf(network, P, K, beta, sample_count=10000, seed=0, tol=1e-8):
    """Sample-based check of the CLF inequality and input feasibility in the level set."""
    P, K = np.asarray(P, float), np.asarray(K, float)
    x = sample_ellipsoid(P, beta, sample_count, np.random.default_rng(seed))
    x = np.vstack([np.zeros(P.shape[0]), x])
    margin = clf_margin(network, P, K, x)
    u = x @ K.T
    inputs_ok = bool(np.all((u >= network.u_lower - 1e-12) & (u <= network.u_upper + 1e-12)))
    k = int(np.argmax(margin))
    worst = float(margin[k])
    return ClfReport(worst <= tol and inputs_ok, worst, x[k], inputs_ok, len(x))


# ---------------------------------------------------------------------------
# ingredients
# ---------------------------------------------------------------------------

@dataclass
class TerminalIngredients:
    P_blocks: list
    K: np.ndarray
    gamma: float
    beta: float
    alpha: Optional[float] = None
    objective: Optional[float] = None
    lmi_residual: Optional[float] = None
    structured: bool = True
    certificate: dict = field(default_factory=dict)

    @property
    def P(self):
        from scipy.linalg import block_diag
        return block_diag(*self.P_blocks)

    def to_dict(self):
        return {
            "gamma": float(self.gamma),
            "beta": float(self.beta),
            "alpha": None if self.alpha is None else float(self.alpha),
            "objective": None if self.objective is None else float(self.objective),
            "lmi_residual": None if self.lmi_residual is None else float(self.lmi_residual),
            "structured": bool(self.structured),
            "P_blocks": [np.asarray(p).tolist() for p in self.P_blocks],
            "K": np.asarray(self.K).tolist(),
            "certificate": self.certificate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(p, float) for p in d["P_blocks"]], np.array(d["K"], float),
                   float(d["gamma"]), float(d["beta"]), d.get("alpha"), d.get("objective"),
                   d.get("lmi_residual"), bool(d.get("structured", True)), d.get("certificate", {}))


def save_ingredients(ingredients, path):
    path = Path(path)
    data = ingredients.to_dict()
    if path.suffix == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(yaml.safe_dump(data, sort_keys=True))
    return path


def load_ingredients(path):
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return TerminalIngredients.from_dict(data)


def synthesize(network, gamma, T, beta="auto", structured=True, beta_max=100.0,
               level_samples=2000, verify_samples=10000, seed=0):
    """Linearize, solve the SDP, pick the terminal level and certify it."""
    lin = linearize_at_origin(network)
    Q, R = _central_weights(network)
    pattern = gain_pattern(network.graph, lin) if structured else None
    sdp = solve_structured_sdp(lin, Q, R, gamma, pattern, structured=structured)
    sx = _blocks(network.state_dims)
    if structured:
        blocks = [sdp.P[s, s] for s in sx]
        net = network.with_terminal_weights(blocks)
    else:
        blocks = [sdp.P]
        net = network
    if beta == "auto":
        beta = compute_terminal_level(net, sdp.P, sdp.K, beta_max, level_samples, seed)
    report = verify_clf(net, sdp.P, sdp.K, beta, verify_samples, seed + 1)
    alpha = None
    if structured:
        m_l, _, m_V, _ = compute_cost_bounds(net.quadratic_spec)
        alpha = compute_attraction_level(beta, m_l, m_V, T)
    cert = {"clf_passed": report.passed, "clf_worst_margin": report.worst_margin,
            "clf_samples": report.samples, "inputs_feasible": report.inputs_feasible,
            "sdp_gap": sdp.gap}
    return TerminalIngredients(blocks, sdp.K, gamma, float(beta), alpha, sdp.objective,
                               sdp.lmi_residual, structured, cert)
