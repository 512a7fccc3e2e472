"""Command line harness: one verb per benchmark experiment, CSV output.

Exit codes: 0 success, 2 configuration error, 3 infeasible synthesis,
4 runtime divergence.
"""
import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .bus import CommBus
from .config import load_config
from .errors import (
    ConfigError,
    DmpcError,
    Divergence,
    Infeasible,
    NoFeasibleLevel,
    NumericalFailure,
    OracleFailure,
)
from .ocp import CENTRAL_CONFIG, SolverConfig, solve_central_ocp
from .sensi import central_closed_loop, contraction_ratio, measure_convergence, mpc_closed_loop
from .terminal import load_ingredients, save_ingredients, synthesize

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_DIVERGENCE = 0, 2, 3, 4
STABLE_TOL = 1e-2


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _num(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _num(v) for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _write_manifest(out_dir, data):
    path = Path(out_dir) / "manifest.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data, sort_keys=True))
    return path


def _out_dir(args, cfg):
    return Path(args.out_dir if args.out_dir is not None else cfg.output["dir"])


def _optimal_config(inner):
    # oracle tolerance two decades below the agents' inner tolerance
    return SolverConfig(max_iter=max(CENTRAL_CONFIG.max_iter, 25 * inner.max_iter),
                        tol_u=min(CENTRAL_CONFIG.tol_u, inner.tol_u / 100))


def terminal_ingredients(cfg, structured=True, certify=True):
    """Ingredients from the configured file, or synthesized on the fly."""
    term = cfg.terminal
    if term["ingredients_file"] is not None and structured:
        return load_ingredients(term["ingredients_file"])
    net = cfg.network()
    T = float(cfg.raw["horizon"]["T"])
    return synthesize(net, float(term["gamma"]), T, beta=term["beta"], structured=structured,
                      seed=cfg.seed, verify_samples=10000 if certify else 1)


def _x_names(net, prefix="x"):
    return [f"{prefix}{i + 1}_{c}" for i, n in enumerate(net.state_dims) for c in range(n)]


def _u_names(net, prefix="u"):
    return [f"{prefix}{i + 1}_{c}" for i, m in enumerate(net.input_dims) for c in range(m)]


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

TRACE_FIXED = ["q_k", "J_oracle", "stage_cost", "msgs", "bytes", "wall_ms"]
COMM_HEADER = ["k", "q_k", "messages", "components", "bytes", "rounds"]


def run_simulate(cfg, out_dir, parallel=0, timing=False):
    ing = terminal_ingredients(cfg, certify=False)
    net = cfg.network(ing.P_blocks)
    alg = cfg.algorithm()
    oracle = bool(cfg.simulation["oracle"])
    bus = CommBus(net.graph, net.state_dims)
    executor = ThreadPoolExecutor(parallel) if parallel > 1 else None
    try:
        trace = mpc_closed_loop(net, cfg.x0, alg, cfg.step_count(), bus=bus, oracle=oracle,
                                executor=executor, oracle_config=_optimal_config(alg.inner))
    finally:
        if executor is not None:
            executor.shutdown()
    emit = cfg.output["emit"]
    files = []
    if "trace" in emit:
        header = ["k", "t"] + _x_names(net) + _u_names(net) + TRACE_FIXED
        rows = []
        for k in range(len(trace.q)):
            J = trace.J_oracle[k] if oracle else None
            wall = trace.wall_ms[k] if timing else None
            rows.append([k, trace.t[k], *trace.x[k], *trace.u[k], trace.q[k], J,
                         trace.stage_cost[k], trace.messages[k], trace.bytes[k], wall])
        files.append(write_csv(out_dir / "trace.csv", header, rows))
    if "comm" in emit:
        st = bus.setup
        comm_rows = [["setup", 0, st.messages, st.components, st.bytes, st.rounds]]
        comm_rows += [[k, trace.q[k], trace.messages[k], trace.components[k], trace.bytes[k],
                       trace.rounds[k]] for k in range(len(trace.q))]
        files.append(write_csv(out_dir / "comm.csv", COMM_HEADER, comm_rows))
    return trace, bus, files


def run_compare(cfg, out_dir, parallel=0):
    ing = terminal_ingredients(cfg, certify=False)
    net = cfg.network(ing.P_blocks)
    alg = cfg.algorithm()
    steps = cfg.step_count()
    executor = ThreadPoolExecutor(parallel) if parallel > 1 else None
    try:
        trace = mpc_closed_loop(net, cfg.x0, alg, steps, executor=executor)
    finally:
        if executor is not None:
            executor.shutdown()
    xc, uc, Jc = central_closed_loop(net, cfg.x0, alg, len(trace.q), _optimal_config(alg.inner))
    xd, ud = np.array(trace.x), np.array(trace.u)
    dx = np.max(np.abs(xd - xc), axis=1) if len(xd) else np.zeros(0)
    du = np.max(np.abs(ud - uc), axis=1) if len(ud) else np.zeros(0)
    header = (["k", "t"] + _x_names(net, "xd") + _x_names(net, "xc") + _u_names(net, "ud")
              + _u_names(net, "uc") + ["J_central", "state_dev", "control_dev"])
    rows = [[k, trace.t[k], *xd[k], *xc[k], *ud[k], *uc[k], Jc[k], dx[k], du[k]]
            for k in range(len(trace.q))]
    path = write_csv(out_dir / "compare.csv", header, rows)
    summary = {"max_state_dev": float(dx.max(initial=0.0)),
               "max_control_dev": float(du.max(initial=0.0))}
    return trace, summary, path


def convergence_samples(cfg, samples, box):
    """Seeded initial conditions drawn uniformly around the configured ``x0``."""
    rng = np.random.default_rng(cfg.seed)
    x0 = cfg.x0
    if samples == 1 and box == 0:
        return x0[None]
    return x0 + rng.uniform(-box, box, size=(samples, x0.size))


def _converge_one(raw, P_blocks, x0, q_probe):
    from .config import ScenarioConfig
    cfg = ScenarioConfig(raw)
    net = cfg.network(P_blocks)
    alg = cfg.algorithm()
    try:
        tab = measure_convergence(net, x0, alg, q_probe, oracle_config=_optimal_config(alg.inner))
    except (OracleFailure, DmpcError) as exc:
        return None, str(exc)
    return tab, ""


def run_converge(cfg, out_dir, samples=50, q_probe=8, box=1.0, parallel=0):
    ing = terminal_ingredients(cfg, certify=False)
    P_blocks = [np.asarray(p) for p in ing.P_blocks]
    xs = convergence_samples(cfg, samples, box)
    jobs = [(cfg.raw, P_blocks, x0, q_probe) for x0 in xs]
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as ex:
            results = list(ex.map(_converge_one, *zip(*jobs)))
    else:
        results = [_converge_one(*job) for job in jobs]
    rows, tables, failures = [], [], []
    for s, (tab, err) in enumerate(results):
        if tab is None:
            rows.append([s, "failed", None, None, None])
            failures.append({"sample": s, "error": err})
            continue
        tables.append(tab)
        for q in range(q_probe):
            rows.append([s, q + 1, tab.err_total[q], tab.err_state[q], tab.err_adjoint[q]])
    if tables:
        stack = {k: np.array([getattr(t, k) for t in tables]) for k in
                 ("err_total", "err_state", "err_adjoint")}
        for name, red in (("max", np.max), ("median", np.median)):
            for q in range(q_probe):
                rows.append([name, q + 1] + [red(stack[k][:, q]) for k in stack])
        rows.append(["p_hat", ""] + [contraction_ratio(stack[k].max(axis=0)) for k in stack])
    path = None
    if "convergence" in cfg.output["emit"]:
        path = write_csv(out_dir / "convergence.csv",
                         ["sample_id", "q", "err_total", "err_state", "err_adjoint"], rows)
    meta = {"samples": samples, "q_probe": q_probe, "box": box, "seed": cfg.seed,
            "x0_center": cfg.x0.tolist(), "failures": failures,
            "p_hat": [float(t.p_hat) for t in tables]}
    return tables, meta, path


def run_synthesize(cfg, out_dir, variant="structured"):
    out = {}
    variants = ("structured", "unstructured") if variant == "both" else (variant,)
    for v in variants:
        ing = terminal_ingredients(cfg, structured=v == "structured")
        name = "ingredients.yaml" if v == "structured" else "ingredients_unstructured.yaml"
        out_dir.mkdir(parents=True, exist_ok=True)
        save_ingredients(ing, out_dir / name)
        out[v] = ing
    return out


def parse_axis(spec):
    """``start:stop:num`` to a grid axis."""
    try:
        a, b, n = spec.split(":")
        return np.linspace(float(a), float(b), int(n))
    except ValueError:
        raise ConfigError(f"grid axis {spec!r} is not of the form start:stop:num") from None


def endpoint_in_terminal(net, x0, grid, P, beta, oracle_config=None):
    sol = solve_central_ocp(net, x0, grid, oracle_config)
    e = sol.x[-1]
    return bool(e @ P @ e <= beta), float(e @ P @ e)


def run_region(cfg, out_dir, points):
    ing = terminal_ingredients(cfg, certify=False)
    net = cfg.network(ing.P_blocks)
    alg = cfg.algorithm()
    P, beta = ing.P, ing.beta
    rows, failures = [], []
    for x0 in points:
        x0 = np.asarray(x0, float)
        try:
            inside, _ = endpoint_in_terminal(net, x0, alg.grid, P, beta)
        except OracleFailure as exc:
            inside = None
            failures.append({"x0": x0.tolist(), "error": str(exc)})
        tr = mpc_closed_loop(net, x0, alg, cfg.step_count())
        stable = (not tr.unstable) and float(np.linalg.norm(tr.x_final)) < STABLE_TOL
        if tr.unstable:
            failures.append({"x0": x0.tolist(), "error": tr.failure})
        rows.append([*x0, stable, "" if inside is None else inside])
    header = [f"x0_{c}" for c in range(net.n)] + ["stabilized", "endpoint_in_terminal"]
    path = write_csv(out_dir / "region.csv", header, rows)
    return rows, {"beta": float(beta), "failures": failures}, path


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sensidmpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="scenario YAML file")
        sp.add_argument("--out-dir", help="output directory (overrides output.dir)")
        sp.add_argument("--seed", type=int, help="overrides simulation.seed")
        sp.add_argument("--parallel", type=int, default=0, metavar="N",
                        help="worker count; results match the sequential run")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a dotted config key, e.g. algorithm.d=1e-6")
        return sp

    s = common(sub.add_parser("simulate", help="distributed MPC closed loop"))
    s.add_argument("--timing", action="store_true", help="fill the wall_ms column")
    c = common(sub.add_parser("converge", help="convergence of the distributed iteration"))
    c.add_argument("--samples", type=int, default=50)
    c.add_argument("--q-probe", type=int, default=8)
    c.add_argument("--box", type=float, default=1.0, help="half width of the sampling box")
    y = common(sub.add_parser("synthesize", help="terminal weights, gain and level"))
    y.add_argument("--variant", choices=("structured", "unstructured", "both"), default="structured")
    r = common(sub.add_parser("region", help="classify initial conditions on a grid"))
    r.add_argument("--grid-x", default="-2:2:9", help="first state axis start:stop:num")
    r.add_argument("--grid-y", default="-2:2:9", help="second state axis start:stop:num")
    r.add_argument("--point", action="append", default=[], metavar="X,Y",
                   help="explicit initial condition; replaces the grid")
    common(sub.add_parser("compare-central", help="distributed versus central MPC"))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"simulation.seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = _out_dir(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"verb": args.verb, "config": cfg.raw, "status": "ok"}
    code = EXIT_OK
    try:
        if args.verb == "simulate":
            trace, bus, _ = run_simulate(cfg, out_dir, args.parallel, args.timing)
            manifest.update(steps=len(trace.q), x_final=np.asarray(trace.x_final).tolist(),
                            setup_messages=bus.setup.messages)
            if trace.unstable:
                manifest.update(status="divergence", failure=trace.failure)
                code = EXIT_DIVERGENCE
            print(f"simulate: {len(trace.q)} steps, |x_final| = {np.linalg.norm(trace.x_final):.3g}")
        elif args.verb == "compare-central":
            trace, summary, _ = run_compare(cfg, out_dir, args.parallel)
            manifest.update(summary)
            if trace.unstable:
                manifest.update(status="divergence", failure=trace.failure)
                code = EXIT_DIVERGENCE
            print(f"compare-central: max state deviation {summary['max_state_dev']:.3g}, "
                  f"max control deviation {summary['max_control_dev']:.3g}")
        elif args.verb == "converge":
            _, meta, _ = run_converge(cfg, out_dir, args.samples, args.q_probe, args.box,
                                      args.parallel)
            manifest["convergence"] = meta
            print(f"converge: {args.samples} samples, {len(meta['failures'])} failed")
        elif args.verb == "synthesize":
            res = run_synthesize(cfg, out_dir, args.variant)
            manifest["synthesis"] = {k: {"beta": v.beta, "logdet_P": float(np.linalg.slogdet(v.P)[1]),
                                         "clf_passed": bool(v.certificate.get("clf_passed"))}
                                     for k, v in res.items()}
            for k, v in res.items():
                print(f"synthesize ({k}): beta = {v.beta:.4g}, "
                      f"certified = {bool(v.certificate.get('clf_passed'))}")
        elif args.verb == "region":
            if args.point:
                points = [[float(v) for v in p.split(",")] for p in args.point]
            else:
                gx, gy = parse_axis(args.grid_x), parse_axis(args.grid_y)
                points = [[a, b] for a in gx for b in gy]
            rows, meta, _ = run_region(cfg, out_dir, points)
            manifest["region"] = meta
            print(f"region: {len(rows)} points, {sum(bool(r[-2]) for r in rows)} stabilized")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        manifest.update(status="config error", failure=str(exc))
        code = EXIT_CONFIG
    except (Infeasible, NoFeasibleLevel, NumericalFailure) as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        manifest.update(status="infeasible", failure=str(exc))
        code = EXIT_INFEASIBLE
    except (Divergence, DmpcError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        manifest.update(status="divergence", failure=str(exc))
        code = EXIT_DIVERGENCE
    _write_manifest(out_dir, _plain(manifest))
    return code


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


if __name__ == "__main__":
    sys.exit(main())
