"""Command-line entry point: ``triangular <command> INSTANCE [options]``.

Every command writes its results under an output prefix (``--out``, else
``$TRIANGULAR_OUT/<command>``, else ``./<command>``) together with a
``<prefix>_manifest.json`` that ``triangular rerun`` replays.

Exit codes: 0 success, 2 invalid instance or missing input, 3 solver did
not converge, 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from functools import cached_property
from pathlib import Path

import numpy as np

from . import __version__, des
from ._io import dumps, sha256_file, write_csv, write_json
from .hjb import HJBNonConvergence, solve_bellman, value_at
from .holding_cost import accumulation_order, gamma_curve, h_bar, rejection_rule
from .model import InvalidSpec, SystemSpec, derive, dump_spec, load_spec, table1_spec, validate
from .policy import _represent, build_policy, gamma_a, margins
from .reflect import NORMAL_METHOD, default_dt, horizon_for, rbm_cost_mc, tail_bound

log = logging.getLogger("triangular")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_USAGE = 0, 2, 3, 64
OUT_ENV = "TRIANGULAR_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class Problem:
    """Lazily built chain instance -> derived -> order -> h_bar -> HJB solution."""

    def __init__(self, spec: SystemSpec, args: argparse.Namespace):
        self.spec = spec
        self.args = args

    @cached_property
    def derived(self):
        return derive(self.spec)

    @cached_property
    def order(self):
        return accumulation_order(self.spec, self.derived)

    @cached_property
    def rule(self):
        return rejection_rule(self.spec, self.derived)

    @cached_property
    def hbar(self):
        return h_bar(self.spec, self.derived, self.order)

    @cached_property
    def solution(self):
        a = self.args
        return solve_bellman(
            self.derived,
            self.hbar,
            getattr(a, "r_bar", None) or self.rule.r_bar,
            self.spec.alpha,
            N=getattr(a, "N", 4096),
            tol=getattr(a, "tol", 1e-8),
            sigma2_bar=getattr(a, "sigma2_bar", None),
            m_bar=getattr(a, "m_bar", None),
            x_max=getattr(a, "x_max", None),
        )

    def x_star(self) -> float:
        xs = getattr(self.args, "x_star", "from-solve")
        if xs in (None, "from-solve"):
            return self.solution.x_star
        return float(xs)

    def policy(self, epsilon=None):
        return build_policy(self.spec, self.derived, self.order, self.rule, self.x_star(), epsilon)


def _prefix(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    base = os.environ.get(OUT_ENV)
    return Path(base) / command if base else Path(command)


def _versions() -> dict:
    import scipy

    return {"triangular": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def _manifest(args, argv, prefix: Path, outputs: list[str]) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("func",)}
    inst = getattr(args, "instance", None)
    return {
        "command": args.command,
        "argv": list(argv),
        "instance": inst,
        "instance_sha256": sha256_file(inst) if inst and Path(inst).exists() else None,
        "params": params,
        "seed": args.seed,
        "versions": _versions(),
        "outputs": outputs,
    }



# ---- commands -------------------------------------------------------------


def cmd_derive(pb: Problem, prefix: Path):
    d = pb.derived
    out = {
        "labels": pb.spec.labels,
        "theta": d.theta,
        "rho": d.rho,
        "rho_sum": float(d.rho.sum()),
        "m": d.m,
        "sigma2": d.sigma2,
        "m_bar": d.m_bar,
        "sigma2_bar": d.sigma2_bar,
        "x_max": d.x_max,
        "i_star": pb.spec.labels[pb.rule.i_star],
        "r_bar": pb.rule.r_bar,
    }
    path = prefix.with_suffix(".json")
    write_json(path, out)
    return out, [str(path)]


def cmd_order(pb: Problem, prefix: Path):
    o, labels = pb.order, pb.spec.labels
    rows = [(j, labels[i], o.w_hat[j], o.ratios[j - 1]) for j, i in enumerate(o.p, start=1)]
    comments = [
        f"never accumulated: {' '.join(labels[i] for i in sorted(o.D)) or '-'}",
        f"breakpoints: {' '.join(format(w, '.17g') for w in o.w_hat[1:])}",
    ]
    for j, cand in enumerate(o.table, start=1):
        prev = "origin" if j == 1 else labels[o.p[j - 2]]
        comments.append(
            f"step {j} from {prev}: " + " ".join(f"{labels[i]}={format(v, '.17g')}" for i, v in sorted(cand.items()))
        )
    path = prefix.with_suffix(".csv")
    write_csv(path, ["j", "class_label", "w_hat_j", "ratio"], rows, comments)
    return {"p": [labels[i] for i in o.p], "D": [labels[i] for i in sorted(o.D)], "ratios": o.ratios}, [str(path)]


def cmd_hbar(pb: Problem, prefix: Path):
    d, labels = pb.derived, pb.spec.labels
    grid = np.linspace(0.0, d.x_max, pb.args.grid_points)
    hv = pb.hbar.evaluate(grid)
    gv = gamma_curve(pb.spec, d, pb.order).evaluate(grid)
    rows = [(w, hb, *g) for w, hb, g in zip(grid, hv, gv)]
    bps = pb.order.w_hat[1:]
    comments = [f"breakpoints: {' '.join(format(w, '.17g') for w in bps)}", f"x_max: {format(d.x_max, '.17g')}"]
    path = prefix.with_suffix(".csv")
    write_csv(path, ["w", "h_bar"] + [f"gamma_{l}" for l in labels], rows, comments)
    return {"breakpoints": bps, "x_max": d.x_max}, [str(path)]


def cmd_gamma_a(pb: Problem, prefix: Path):
    cfg = pb.policy(pb.args.epsilon)
    labels = pb.spec.labels
    grid = np.linspace(0.0, pb.derived.x_max, pb.args.grid_points)
    rows = []
    for w in grid:
        mg = margins(cfg, w)
        rep = _represent(cfg, w)
        rows.append((w, *gamma_a(cfg, w), mg.eps_l, mg.eps_h, rep.j))
    comments = [f"epsilon: {format(cfg.epsilon, '.17g')}", f"a_star: {format(cfg.a_star, '.17g')}"]
    path = prefix.with_suffix(".csv")
    write_csv(path, ["w"] + [f"gamma_a_{l}" for l in labels] + ["eps_l", "eps_h", "j"], rows, comments)
    return {"epsilon": cfg.epsilon, "a_star": cfg.a_star, "x_star": cfg.x_star}, [str(path)]


def _interval_of(order, w):
    j = int(np.searchsorted(order.w_hat, w, side="left"))
    return max(1, min(j, order.J))


def cmd_solve(pb: Problem, prefix: Path):
    sol = pb.solution
    labels = pb.spec.labels
    xs = min(sol.x_star, pb.hbar.domain[1])
    out = {
        "x_star": sol.x_star,
        "x_star_uncertainty": sol.dw,
        "r_bar": sol.r_bar,
        "residual": sol.residual,
        "N": sol.N,
        "tol": sol.tol,
        "V0": float(sol.V[0]),
        "iterations": sol.iterations,
        "sigma2_bar": sol.sigma2_bar,
        "m_bar": sol.m_bar,
        "alpha": sol.alpha,
        "x_max": sol.x_max,
        "x_star_interval": _interval_of(pb.order, xs),
        "gamma_at_x_star": dict(zip(labels, gamma_curve(pb.spec, pb.derived, pb.order)(xs))),
        "warnings": list(sol.warnings),
    }
    files = []
    path = prefix.with_suffix(".json")
    write_json(path, out)
    files.append(str(path))
    if pb.args.csv:
        cpath = Path(str(prefix) + "_values.csv")
        write_csv(cpath, ["w", "V", "Vp"], zip(sol.grid, sol.V, sol.Vp))
        files.append(str(cpath))
    return out, files


def _rbm(pb: Problem):
    a = pb.args
    d = pb.derived
    sol = pb.solution
    x_star = pb.x_star()
    s2 = sol.sigma2_bar
    dt = a.dt if a.dt else default_dt(s2, x_star)
    T = a.horizon if a.horizon else horizon_for(pb.spec.alpha)
    res = rbm_cost_mc(
        pb.hbar,
        sol.r_bar,
        pb.spec.alpha,
        sol.m_bar,
        s2,
        x_star,
        x0=a.x0,
        replications=a.replications,
        dt=dt,
        T=T,
        seed=a.seed,
        scheme=a.scheme,
        threads=a.threads,
    )
    V0 = value_at(sol, a.x0)
    return res, {
        "mean_cost": res.mean,
        "se": res.se,
        "replications": res.replications,
        "V0": V0,
        "z_score": (res.mean - V0) / res.se if res.se > 0 else float("nan"),
        "x0": a.x0,
        "x_star": x_star,
        "dt": dt,
        "T": T,
        "tail_bound": tail_bound(pb.hbar, x_star, sol.r_bar, pb.spec.alpha, T),
        "scheme": a.scheme,
        "normal_method": NORMAL_METHOD,
        "seed": a.seed,
        "N": sol.N,
    }


def cmd_rbm(pb: Problem, prefix: Path):
    res, out = _rbm(pb)
    files = []
    path = prefix.with_suffix(".json")
    write_json(path, out)
    files.append(str(path))
    if pb.args.paths_csv:
        cpath = Path(str(prefix) + "_costs.csv")
        write_csv(cpath, ["replication", "cost"], enumerate(res.costs))
        files.append(str(cpath))
    return out, files


def _start_state(kind: str, cfg, spec, derived, order, n: int):
    if kind == "empty":
        return None
    if kind == "policy-curve":
        target = gamma_a(cfg, cfg.a_star)
    elif kind == "full-curve":
        target = gamma_curve(spec, derived, order)(cfg.a_star)
    else:
        raise ValueError(kind)
    return np.floor(target * math.sqrt(n) + 1e-9).astype(np.int64)


def _sim_block(pb: Problem, n: int, seeds: list[int], epsilon):
    a = pb.args
    cfg = pb.policy(epsilon)
    x0 = _start_state(a.start, cfg, pb.spec, pb.derived, pb.order, n)
    ce = des.cost_estimate(
        pb.spec, cfg, n, seeds, a.horizon, sample_dt=a.sample_dt, threads=a.threads, x0=x0, derived=pb.derived
    )
    labels = pb.spec.labels
    ssc = np.array([r.ssc_max for r in ce.results])
    pol = np.array([r.policy_rejections for r in ce.results])
    frc = np.array([r.forced_rejections for r in ce.results])
    summary = {
        "n": n,
        "epsilon": cfg.epsilon,
        "a_star": cfg.a_star,
        "horizon": a.horizon,
        "start": a.start,
        "seeds": seeds,
        "J_n_mean": ce.mean,
        "J_n_se": ce.se,
        "ssc_max_mean": float(ssc.mean()),
        "ssc_max_se": float(ssc.std(ddof=1) / math.sqrt(ssc.size)) if ssc.size > 1 else float("nan"),
        "ssc_max_min": float(ssc.min()),
        "ssc_max_max": float(ssc.max()),
        "policy_rejections_mean": dict(zip(labels, pol.mean(axis=0))),
        "forced_rejections_mean": dict(zip(labels, frc.mean(axis=0))),
        "forced_share_mean": ce.forced_share_mean,
        "per_seed": [
            {
                "seed": r.seed,
                "J_n": r.J_n,
                "ssc_max": r.ssc_max,
                "policy_rejections": int(r.policy_rejections.sum()),
                "forced_rejections": int(r.forced_rejections.sum()),
                "events": r.events,
            }
            for r in ce.results
        ],
    }
    return ce, summary


def cmd_simulate(pb: Problem, prefix: Path):
    a = pb.args
    seeds = [a.seed + k for k in range(a.seeds)]
    ce, summary = _sim_block(pb, a.n, seeds, a.epsilon)
    spath = Path(str(prefix) + "_summary.json")
    write_json(spath, summary)
    r0 = ce.results[0]
    tr = r0.trace
    labels = pb.spec.labels
    tpath = Path(str(prefix) + "_trace.csv")
    write_csv(
        tpath,
        ["t"] + [f"Xhat_{l}" for l in labels] + ["workload", "delta_l1"],
        ((t, *x, w, s) for t, x, w, s in zip(tr.t, tr.Xhat, tr.w, r0.ssc)),
        [f"seed: {r0.seed}", f"n: {r0.n}"],
    )
    return {k: summary[k] for k in ("J_n_mean", "J_n_se", "ssc_max_mean", "forced_share_mean")}, [
        str(spath),
        str(tpath),
    ]


def cmd_instance(args, prefix: Path):
    path = prefix.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_spec(table1_spec(), path)
    return {"written": str(path)}, [str(path)]


# ---- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base RNG seed")
    common.add_argument("--threads", type=int, default=1, help="worker count for replications")
    common.add_argument("--out", default=None, help=f"output prefix (default ${OUT_ENV}/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    solver = _Parser(add_help=False)
    solver.add_argument("--N", type=int, default=4096, help="grid intervals for the HJB solve")
    solver.add_argument("--tol", type=float, default=1e-8)
    solver.add_argument("--sigma2-bar", type=float, default=None, help="override the workload variance")
    solver.add_argument("--m-bar", type=float, default=None, help="override the workload drift")
    solver.add_argument("--x-max", type=float, default=None, help="override the domain end")
    solver.add_argument("--r-bar", type=float, default=None, help="override the boundary gradient")

    sim = _Parser(add_help=False)
    sim.add_argument("--horizon", type=float, default=3.0)
    sim.add_argument("--seeds", type=int, default=20, help="number of seeds, counted up from --seed")
    sim.add_argument("--epsilon", type=float, default=None, help="buffer margin (default b/25)")
    sim.add_argument("--sample-dt", type=float, default=None)
    sim.add_argument("--start", choices=["empty", "policy-curve", "full-curve"], default="empty")
    sim.add_argument("--x-star", default="from-solve")

    rbm = _Parser(add_help=False)
    rbm.add_argument("--replications", type=int, default=10_000)
    rbm.add_argument("--dt", type=float, default=None)
    rbm.add_argument("--rbm-horizon", dest="rbm_horizon", type=float, default=None)
    rbm.add_argument("--x0", type=float, default=0.0)
    rbm.add_argument("--scheme", choices=["bridge", "euler"], default="bridge")

    p = _Parser(prog="triangular", description="Shared-buffer heavy-traffic control toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, parents, help_):
        sp = sub.add_parser(name, parents=[common] + parents, help=help_)
        sp.set_defaults(func=func)
        if name not in ("rerun", "instance"):
            sp.add_argument("instance", help="instance JSON file")
        return sp

    add("derive", cmd_derive, [], "derived heavy-traffic parameters")
    add("order", cmd_order, [], "order of accumulation as CSV")
    sp = add("hbar", cmd_hbar, [], "h_bar and gamma on a grid as CSV")
    sp.add_argument("--grid-points", type=int, default=512)
    sp = add("gamma-a", cmd_gamma_a, [solver], "margin curve gamma_a as CSV")
    sp.add_argument("--grid-points", type=int, default=512)
    sp.add_argument("--epsilon", type=float, default=None)
    sp.add_argument("--x-star", default="from-solve")
    sp = add("solve", cmd_solve, [solver], "solve the free-boundary problem")
    sp.add_argument("--csv", action="store_true", help="also write (w, V, Vp)")
    sp = add("rbm", cmd_rbm, [solver, rbm], "Monte Carlo cost of the reflected workload")
    sp.add_argument("--x-star", default="from-solve")
    sp.add_argument("--paths-csv", action="store_true", help="also write per-replication costs")
    sp = add("simulate", cmd_simulate, [solver, sim], "discrete-event simulation under the policy")
    sp.add_argument("--n", type=int, default=400)
    sp = add("compare", None, [solver, sim, rbm], "HJB vs Monte Carlo vs simulation report")
    sp.add_argument("--ns", default="100,400,1600")
    sp.add_argument("--full", action="store_true", help="compute every ingredient in-line")
    sp = add("rerun", None, [], "replay a manifest")
    sp.add_argument("manifest")
    add("instance", cmd_instance, [], "write the three-class example instance")
    return p


def _execute(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"triangular: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "rerun":
        man = json.loads(Path(args.manifest).read_text())
        replay = list(man["argv"])
        if args.out:
            replay = _replace_out(replay, args.out)
        return _execute(replay)

    if args.command == "rbm":
        args.horizon = args.rbm_horizon
    prefix = _prefix(args, args.command)
    try:
        if args.command == "instance":
            out, files = cmd_instance(args, prefix)
        else:
            spec = load_spec(args.instance)
            problems = validate(spec)
            if problems:
                for msg in problems:
                    print(f"invalid instance: {msg}", file=sys.stderr)
                return EXIT_INVALID
            pb = Problem(spec, args)
            if args.command == "compare":
                out, files = _compare(pb, prefix, args.rbm_horizon)
            else:
                out, files = args.func(pb, prefix)
    except json.JSONDecodeError as e:
        print(f"malformed instance JSON at line {e.lineno}, column {e.colno}: {e.msg}", file=sys.stderr)
        return EXIT_INVALID
    except (InvalidSpec, FileNotFoundError, KeyError, ValueError) as e:
        print(f"triangular: {e}", file=sys.stderr)
        return EXIT_INVALID
    except HJBNonConvergence as e:
        print(f"triangular: {e} (residual {e.residual:.3g})", file=sys.stderr)
        return EXIT_NONCONVERGED
    mpath = Path(str(prefix) + "_manifest.json")
    write_json(mpath, _manifest(args, argv, prefix, files))
    print(dumps(out))
    return EXIT_OK


def _compare(pb: Problem, prefix: Path, rbm_horizon):
    # _rbm reads args.horizon; swap in the rbm horizon for that part only
    sim_h = pb.args.horizon
    pb.args.horizon = rbm_horizon
    if not pb.args.full:
        raise FileNotFoundError("compare needs --full (prior artifacts are not reused)")
    _, rbm = _rbm(pb)
    pb.args.horizon = sim_h
    a = pb.args
    sol = pb.solution
    ns = [int(s) for s in a.ns.split(",")]
    seeds = [a.seed + k for k in range(a.seeds)]
    blocks = []
    for n in ns:
        _, s = _sim_block(pb, n, seeds, a.epsilon)
        s.pop("per_seed")
        blocks.append(s)
    ssc = [b["ssc_max_mean"] for b in blocks]
    report = {
        "V0": float(value_at(sol, a.x0)),
        "x_star": pb.x_star(),
        "rbm": {"mean": rbm["mean_cost"], "se": rbm["se"], "z_score": rbm["z_score"], "replications": rbm["replications"]},
        "ns": ns,
        "J_n": [{"n": b["n"], "mean": b["J_n_mean"], "se": b["J_n_se"]} for b in blocks],
        "ssc_max": [{"n": b["n"], "mean": b["ssc_max_mean"], "se": b["ssc_max_se"]} for b in blocks],
        "rejections": [
            {
                "n": b["n"],
                "policy": b["policy_rejections_mean"],
                "forced": b["forced_rejections_mean"],
                "forced_share": b["forced_share_mean"],
            }
            for b in blocks
        ],
        "ssc_monotone_decreasing": bool(all(x > y for x, y in zip(ssc, ssc[1:]))),
    }
    path = prefix.with_suffix(".json")
    write_json(path, report)
    return report, [str(path)]


def _replace_out(argv: list[str], out: str) -> list[str]:
    res, skip = [], False
    for k, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        res.append(tok)
    return res + ["--out", out]


def main(argv: list[str] | None = None) -> int:
    return _execute(list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
