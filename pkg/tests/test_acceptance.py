"""Acceptance criteria, one test each, run through the command line where possible.

Every test prints a single ``criterion N: PASS|FAIL`` line with the measured
quantities and then asserts at the stated tolerance.
"""
import time

import numpy as np
import pytest
import yaml

from sensidmpc.cli import EXIT_OK, main, read_csv
from sensidmpc.models import VDP_K_REF, VDP_P_REF, VDP_X0, coupled_vdp, scalar_coupled
from sensidmpc.ocp import TimeGrid, cost_gradient, integrate_adjoint_backward, integrate_forward
from sensidmpc.sensi import compute_coupling_gradient, local_problem
from sensidmpc.terminal import (
    gain_pattern, linearize_at_origin, load_ingredients, solve_structured_sdp, synthesize, verify_clf,
)

from conftest import PAIR_EPS, PAIR_MU, PAIR_P, nonlinear_pair
from test_ocp import random_problem
from test_sensi import fixed_point_error

VDP = "configs/vdp.yaml"
PAIR = "configs/scalar_region.yaml"
# the convergence probe resolves errors far below the default inner tolerance
CONVERGE_TOL = ["--override", "algorithm.inner.tol_u=1e-12", "--override", "algorithm.inner.max_iter=20000"]


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def _run(verb, out, *extra):
    start = time.perf_counter()
    code = main([verb, "--out-dir", str(out), *extra])
    return code, time.perf_counter() - start


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    code, elapsed = _run("simulate", out, "--config", VDP)
    assert code == EXIT_OK
    manifest = yaml.safe_load((out / "manifest.yaml").read_text())
    return read_csv(out / "trace.csv"), read_csv(out / "comm.csv"), manifest, elapsed


@pytest.fixture(scope="module")
def plain_run(tmp_path_factory):
    # the same closed loop without the central twin plant; timing excludes the oracle
    out = tmp_path_factory.mktemp("plain")
    code, elapsed = _run("simulate", out, "--config", VDP, "--override", "simulation.oracle=false")
    assert code == EXIT_OK
    return out / "trace.csv", elapsed


def test_criterion_1_terminal_weights(tmp_path, report):
    code, elapsed = _run("synthesize", tmp_path, "--config", VDP)
    assert code == EXIT_OK
    ing = load_ingredients(tmp_path / "ingredients.yaml")
    p_err = max(float(np.max(np.abs(p - r) / np.abs(r))) for p, r in zip(ing.P_blocks, VDP_P_REF))
    zero = VDP_K_REF == 0.0
    zeros_exact = bool(np.all(ing.K[zero] == 0.0))
    k_err = float(np.max(np.abs(ing.K[~zero] - VDP_K_REF[~zero]) / np.abs(VDP_K_REF[~zero])))
    ok = p_err <= 0.05 and zeros_exact and k_err <= 0.10 and elapsed < 30
    report(1, ok, f"P rel err {p_err:.3f} (<=0.05), K zeros exact {zeros_exact}, "
                  f"K rel err {k_err:.2f} (<=0.10), {elapsed:.1f} s (<30)")
    assert ok


def test_criterion_2_iteration_counts(plain_run, benchmark_run, report):
    path, elapsed = plain_run
    q = [int(r["q_k"]) for r in read_csv(path)]
    same = q == [int(r["q_k"]) for r in benchmark_run[0]]
    ok = q[0] in (3, 4, 5) and all(v in (1, 2, 3) for v in q[5:]) and elapsed < 120 and same
    report(2, ok, f"q_0 = {q[0]}, q_k for k>=5 in {sorted(set(q[5:]))}, {elapsed:.0f} s (<120), "
                  f"identical to the oracle run {same}")
    assert ok


def test_criterion_3_communication(benchmark_run, report):
    _, comm, _, _ = benchmark_run
    net = coupled_vdp()
    g = net.graph
    per_iter = sum(n * (len(g.senders[i]) + len(g.neighbors[i])) for i, n in enumerate(net.state_dims))
    steps = [r for r in comm if r["k"] != "setup"]
    q = [int(r["q_k"]) for r in steps]
    comps = [int(r["components"]) for r in steps]
    formula = all(c == qk * per_iter for c, qk in zip(comps, q))
    first = q[0] != 4 or comps[0] == 80
    later = all(c == 40 for c, qk in zip(comps[1:], q[1:]) if qk == 2)
    ok = formula and first and later
    report(3, ok, f"{per_iter} components per iteration, step 0: q = {q[0]} -> {comps[0]}, "
                  f"q_k = 2 -> 40 at every such step {later}")
    assert ok


def test_criterion_4_closed_loop(benchmark_run, report):
    trace, _, manifest, _ = benchmark_run
    J = np.array([float(r["J_oracle"]) for r in trace])
    x = np.array([[float(v) for k, v in r.items() if k.startswith("x")] for r in trace])
    small = np.nonzero(np.linalg.norm(x, axis=1) < 1e-3)[0]
    stop = small[0] if len(small) else len(J) - 1
    decreasing = bool(np.all(np.diff(J[:stop + 1]) < 0))
    x_end = float(np.linalg.norm(manifest["x_final"]))
    ok = decreasing and x_end < 1e-2
    report(4, ok, f"J* strictly decreasing over steps 0..{stop}: {decreasing}, "
                  f"|x(6 s)| = {x_end:.2e} (<1e-2)")
    assert ok


def test_criterion_5_linear_convergence(tmp_path, report):
    code, elapsed = _run("converge", tmp_path, "--config", VDP, "--samples", "50", "--q-probe", "8",
                         *CONVERGE_TOL)
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "convergence.csv")
    curves = {}
    for r in rows:
        if r["sample_id"].isdigit() and r["q"] != "failed":
            curves.setdefault(r["sample_id"], []).append(r)
    monotone = [all(float(b["err_total"]) < float(a["err_total"]) for a, b in zip(c, c[1:]))
                for c in curves.values()]
    adjoint_first = np.mean([float(c[0]["err_adjoint"]) >= float(c[0]["err_state"])
                             for c in curves.values()])
    p_hat = float(next(r for r in rows if r["sample_id"] == "p_hat")["err_total"])
    ok = len(curves) == 50 and all(monotone) and p_hat < 1 and adjoint_first >= 0.9
    report(5, ok, f"{sum(monotone)}/{len(curves)} curves strictly decreasing, p_hat = {p_hat:.3f}, "
                  f"adjoint dominates at q=1 in {adjoint_first:.0%}, {elapsed:.0f} s")
    assert ok


def test_criterion_6_central_consistency(tmp_path, report):
    code, _ = _run("compare-central", tmp_path, "--config", VDP, "--override", "algorithm.d=1e-6",
                   "--override", "simulation.t_final=1.0")
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "compare.csv")[:20]
    dev = max(float(r["control_dev"]) for r in rows)
    ok = len(rows) == 20 and dev <= 1e-3
    report(6, ok, f"max |u_dist - u_central| over {len(rows)} steps = {dev:.2e} (<=1e-3)")
    assert ok


def _adjoint_gradient_error(seed):
    rng = np.random.default_rng(seed)
    p = random_problem(rng)
    u = rng.uniform(-1, 1, (21, 1))
    du = rng.normal(size=(21, 1))
    adj = float(np.sum(cost_gradient(p, u) * du))
    eps = 1e-6
    fd = (p.cost(integrate_forward(p, u + eps * du), u + eps * du)
          - p.cost(integrate_forward(p, u - eps * du), u - eps * du)) / (2 * eps)
    return abs(adj - fd) / abs(fd)


def _sensitivity_error(seed):
    rng = np.random.default_rng(seed)
    net = nonlinear_pair(seed)
    i, j = 0, 1
    grid = TimeGrid(1.5, 31)
    t = grid.nodes[:, None]
    x_i = 0.6 * np.cos(2 * t + seed) * (1 - t / 3)
    u_j = rng.uniform(-0.8, 0.8, (31, 1))
    x0_j = rng.uniform(-0.5, 0.5, 1)

    def cost_j(xi):
        p = local_problem(net, j, x0_j, None, {i: xi}, None, grid)
        return p.cost(integrate_forward(p, u_j), u_j), p

    _, p = cost_j(x_i)
    x_j = integrate_forward(p, u_j)
    g = compute_coupling_gradient(net, i, j, x_i, x_j, integrate_adjoint_backward(p, x_j, u_j))
    d = rng.normal(size=(31, 1))
    d[0] = 0.0
    eps = 1e-6
    fd = (cost_j(x_i + eps * d)[0] - cost_j(x_i - eps * d)[0]) / (2 * eps)
    return abs(float(np.sum(grid.weights[:, None] * g * d)) - fd) / abs(fd)


def test_criterion_7_oracle_suites(report):
    grad = max(_adjoint_gradient_error(s) for s in range(20))
    sens = max(_sensitivity_error(s) for s in range(20))
    rng = np.random.default_rng(7)
    fp_vdp = fixed_point_error(coupled_vdp(P=VDP_P_REF), VDP_X0 + rng.uniform(-0.5, 0.5, 6),
                               TimeGrid(3.0, 21))
    fp_fig5 = fixed_point_error(scalar_coupled(mu=PAIR_MU, eps=PAIR_EPS, P=PAIR_P),
                                rng.uniform(-1.5, 1.5, 2), TimeGrid(0.5, 21))
    ok = grad < 1e-4 and sens < 1e-4 and fp_vdp <= 1e-5 and fp_fig5 <= 1e-5
    report(7, ok, f"(a) gradient rel err {grad:.1e}, (b) sensitivity rel err {sens:.1e} (<1e-4), "
                  f"(c) fixed point {fp_vdp:.1e} / {fp_fig5:.1e} (<=1e-5)")
    assert ok


def test_criterion_8_end_regions(report):
    ordered = []
    for eps in (0.5, 1.0, 2.0):
        for mu in (0.5, 1.0):
            net = scalar_coupled(mu=(mu, mu), eps=((0.0, eps), (eps, 0.0)))
            lin = linearize_at_origin(net)
            Q, R = np.diag([10.0, 10.0]), np.eye(2)
            Pd = solve_structured_sdp(lin, Q, R, 1.1, gain_pattern(net.graph, lin)).P
            Pc = solve_structured_sdp(lin, Q, R, 1.1, structured=False).P
            ordered.append(1 / np.linalg.det(Pd) <= 1 / np.linalg.det(Pc))
    vdp = synthesize(coupled_vdp(), 1.2, 3.0)
    vdp_net = coupled_vdp(P=vdp.P_blocks)
    vdp_cert = verify_clf(vdp_net, vdp.P, vdp.K, 0.9, 10000).passed
    pair = synthesize(scalar_coupled(mu=PAIR_MU, eps=PAIR_EPS), 1.1, 0.5)
    pair_net = scalar_coupled(mu=PAIR_MU, eps=PAIR_EPS, P=pair.P_blocks)
    pair_cert = verify_clf(pair_net, pair.P, pair.K, 1.05, 10000).passed
    ok = all(ordered) and vdp.beta >= 0.9 and vdp_cert and pair.beta >= 1.05 and pair_cert
    report(8, ok, f"det ordering {sum(ordered)}/6, coupled-vdp beta {vdp.beta:.4g} (>=0.9) "
                  f"certified at 0.9 {vdp_cert}, pair beta {pair.beta:.3g} (>=1.05) "
                  f"certified at 1.05 {pair_cert}")
    assert ok


def test_criterion_9_robustness(tmp_path, report):
    code, elapsed = _run("region", tmp_path, "--config", PAIR, "--point=-1.3,1.4")
    assert code == EXIT_OK
    row = read_csv(tmp_path / "region.csv")[0]
    stabilized, inside = row["stabilized"] == "1", row["endpoint_in_terminal"] == "1"
    ok = stabilized and not inside and elapsed < 30
    report(9, ok, f"stabilized {stabilized}, step-0 prediction ends outside the terminal set "
                  f"{not inside}, {elapsed:.1f} s (<30)")
    assert ok


def test_criterion_10_determinism(tmp_path, plain_run, report):
    outs = [plain_run[0].read_bytes()]
    for name, extra in (("repeat", []), ("parallel", ["--parallel", "3"])):
        code, _ = _run("simulate", tmp_path / name, "--config", VDP,
                       "--override", "simulation.oracle=false", *extra)
        assert code == EXIT_OK
        outs.append((tmp_path / name / "trace.csv").read_bytes())
    repeat, parallel = outs[0] == outs[1], outs[0] == outs[2]
    ok = repeat and parallel
    report(10, ok, f"repeat byte-identical {repeat}, parallel matches sequential {parallel}")
    assert ok
