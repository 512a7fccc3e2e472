"""Independent reference for the structured terminal-weight SDP.

The linearizations are written down by hand and the log-det problem with
block-diagonal ``E`` and masked ``Y`` is handed to cvxpy (Clarabel), so
neither the package's linearization nor its barrier solver is involved.

Run ``python3 tests/oracles/terminal_sdp.py`` to reprint the values frozen in
``tests/test_terminal.py``.
"""
import numpy as np
import cvxpy as cp


def vdp_linearization():
    A = np.zeros((6, 6))
    A[0:2, 0:2] = [[0, 1], [-1, 0.1]]
    A[2:4, 2:4] = [[0, 1], [-4, 0.101]]
    A[2:4, 4:6] = [[0, 0], [0, -0.1]]
    A[4:6, 4:6] = [[0, 1], [-4, 0.101]]
    A[4:6, 2:4] = [[0, 0], [0, -0.1]]
    B = np.zeros((6, 3))
    B[1, 0] = B[3, 1] = B[5, 2] = 1.0
    mask = np.zeros((3, 6), bool)
    for i, nbrs in {0: [0], 1: [1, 2], 2: [1, 2]}.items():
        for j in nbrs:
            mask[i, 2 * j:2 * j + 2] = True
    return A, B, 30 * np.eye(6), 0.1 * np.eye(3), [2, 2, 2], mask


def scalar_linearization(eps, mu):
    A = np.array([[0.0, eps], [eps, 0.0]])
    B = np.diag([mu, mu])
    return A, B, 10 * np.eye(2), np.eye(2), [1, 1], np.ones((2, 2), bool)


def solve(A, B, Q, R, gamma, dims, mask, structured=True):
    n, m = B.shape
    if structured:
        Es = [cp.Variable((d, d), symmetric=True) for d in dims]
        E = cp.bmat([[Es[i] if i == j else np.zeros((dims[i], dims[j])) for j in range(len(dims))]
                     for i in range(len(dims))])
        Y = cp.Variable((m, n))
        cons = [Y[r, c] == 0 for r in range(m) for c in range(n) if not mask[r, c]]
        obj = -sum(cp.log_det(e) for e in Es)
        pos = [e >> 1e-6 * np.eye(e.shape[0]) for e in Es]
    else:
        E = cp.Variable((n, n), symmetric=True)
        Y = cp.Variable((m, n))
        cons, obj, pos = [], -cp.log_det(E), [E >> 1e-6 * np.eye(n)]
    Qh, Rh = np.sqrt(Q), np.sqrt(R)
    M = cp.bmat([[A @ E + E @ A.T + B @ Y + Y.T @ B.T, E @ Qh, Y.T @ Rh],
                 [Qh @ E, -np.eye(n) / gamma, np.zeros((n, m))],
                 [Rh @ Y, np.zeros((m, n)), -np.eye(m) / gamma]])
    cons += [(M + M.T) / 2 << -1e-8 * np.eye(2 * n + m)] + pos
    cp.Problem(cp.Minimize(obj), cons).solve(solver="CLARABEL")
    Ev = np.array(E.value) if not structured else np.block(
        [[Es[i].value if i == j else np.zeros((dims[i], dims[j])) for j in range(len(dims))]
         for i in range(len(dims))])
    P = np.linalg.inv(Ev)
    return P, Y.value @ P


if __name__ == "__main__":
    np.set_printoptions(precision=10, suppress=True)
    P, K = solve(*vdp_linearization()[:4], 1.2, *vdp_linearization()[4:])
    print("vdp P1 =", P[0:2, 0:2].tolist())
    print("vdp P2 =", P[2:4, 2:4].tolist())
    print("vdp logdet P =", np.linalg.slogdet(P)[1])
    for eps in (0.5, 1.0, 2.0):
        for mu in (0.5, 1.0):
            A, B, Q, R, dims, mask = scalar_linearization(eps, mu)
            Pd, _ = solve(A, B, Q, R, 1.1, dims, mask, True)
            Pc, _ = solve(A, B, Q, R, 1.1, dims, mask, False)
            print(f"eps={eps} mu={mu} det(Pd^-1)={1 / np.linalg.det(Pd):.10g} "
                  f"det(Pc^-1)={1 / np.linalg.det(Pc):.10g}")
