"""Command-line entry point: ``distgtd {solve,run,compare,design-net}``.

Exit codes: 0 success, 1 unreadable or invalid config / bad arguments,
2 infeasible model (singular system, coverage, network), 3 divergence.
Progress goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import backend as _backend
from .config import ConfigError, apply_overrides, load_config, load_raw, resolve
from .consensus import InfeasibleNetworkError, NonConvergenceError, Topology, design_weights, left_perron
from .exact import ReducibleChainError, SingularSystemError, reset_stationary_dist
from .harness import (COMPARE_ARMS, STREAM_MDP, STREAM_NETWORK, STREAM_NOISE, STREAM_TOPOLOGY, build_plan,
                      limit_points, run_experiment, sparse_topology)
from .io import atomic_dir, write_matrix, write_result_log, write_table
from .learners import DivergenceError
from .mdp import CoverageError

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 1, 2, 3
INFEASIBLE = (CoverageError, SingularSystemError, ReducibleChainError, InfeasibleNetworkError, NonConvergenceError)
OUTPUT_ENV = "DISTGTD_OUTPUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _default_out(sub: str) -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "distgtd-results")) / sub


def _manifest(raw: dict, cfg, command: str) -> dict:
    net = cfg.network
    return {
        "artifact_version": __version__,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "command": command,
        "backend": _backend.BACKEND,
        "seeds": {"master": cfg.seed, "replications": list(range(cfg.replications)),
                  "streams": {"topology": STREAM_TOPOLOGY, "mdp": STREAM_MDP, "noise": STREAM_NOISE,
                              "network": STREAM_NETWORK},
                  "scheme": "SeedSequence([master, stream, replication, agent])"},
        "network_edges": None if net is None else sorted([list(e) for e in net.topology.edges]),
        "config": raw,
    }


def _write_manifest(path, manifest):
    with open(path, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)


def _overrides(a) -> dict:
    keys = ("seed", "iters", "replications", "algo", "timescales", "network", "agents", "lam", "alpha", "beta",
            "log_every")
    return {k: getattr(a, k, None) for k in keys}


def cmd_solve(a) -> int:
    raw, cfg = load_config(a.config, **_overrides(a))
    plan = build_plan(cfg)
    orc = limit_points(cfg, plan)
    M, N = plan.Phi.shape[0], cfg.N
    with atomic_dir(a.out or _default_out("solve")) as tmp:
        write_table(tmp / "v_pi.csv", ["state", "v_pi"], [[s, v] for s, v in enumerate(plan.v_pi)])
        xi = np.column_stack([reset_stationary_dist(plan.behaviors[i], int(plan.start[i]),
                                                    plan.reset[i].astype(bool)).xi for i in range(N)])
        write_table(tmp / "xi.csv", ["state"] + [f"agent_{i}" for i in range(N)],
                    [[s] + xi[s].tolist() for s in range(M)])
        for i, m in enumerate(orc.mats):
            write_matrix(tmp / f"G_{i}.csv", m.G)
            write_matrix(tmp / f"H_{i}.csv", m.H)
            write_table(tmp / f"b_{i}.csv", ["b"], [[x] for x in m.b])
        for kind in ("d1", "d2"):
            pt = orc.point(kind)
            write_table(tmp / f"theta_bar_{kind}.csv", ["theta"], [[x] for x in pt.theta_bar])
            write_matrix(tmp / f"w_bar_{kind}.csv", pt.w_bars, "w_")
        write_table(tmp / "psi_bar.csv", ["agent", "psi_bar"], [[i, x] for i, x in enumerate(orc.psi_bar)])
        _write_manifest(tmp / "manifest.yaml", _manifest(raw, cfg, "solve"))
    print(f"solve: wrote {M}-state solution for {N} agent(s)")
    return EXIT_OK


def cmd_run(a) -> int:
    raw, cfg = load_config(a.config, **_overrides(a))
    res = run_experiment(cfg, jobs=a.jobs, backend=a.backend)
    with atomic_dir(a.out or _default_out("run")) as tmp:
        write_result_log(tmp / "result_log.csv", res)
        _write_manifest(tmp / "manifest.yaml", _manifest(raw, cfg, "run"))
    fin = res.mse()[:, -1, :].mean()
    print(f"run: {cfg.replications} replication(s) x {cfg.iterations} iterations, final mean MSE {fin:.6g}")
    return EXIT_OK


def compare_arms(raw: dict, jobs: int = 1, backend=None):
    """Run the eight comparison arms on identical seeds.

    Returns (names, iterations, curves (arms, R, L), finals (arms, R)). One-time-scale
    arms use alpha for both steps; two-time-scale arms use (alpha, beta).
    """
    if raw["algorithm"].get("beta") is None:
        raise ConfigError("compare needs algorithm.beta for the two-time-scale arms")
    names, curves = [], []
    its = None
    for name, cons, kind, lam, two in COMPARE_ARMS:
        arm = apply_overrides(raw, algo=f"{cons}-{kind}", timescales=2 if two else 1, lam=lam)
        cfg = resolve(arm)
        res = run_experiment(cfg, jobs=jobs, backend=backend, on_divergence="record")
        mse = res.mse().mean(axis=2)
        for r, run in enumerate(res.runs):
            if run.diverged_at is not None:
                print(f"compare: {name} replication {r} diverged at iteration {run.diverged_at}", file=sys.stderr)
                mse[r] = np.inf
        names.append(name)
        curves.append(mse)
        its = res.iterations
        print(f"compare: {name} done")
    curves = np.array(curves)
    return names, its, curves, curves[:, :, -1]


def ranking(names, finals):
    """Rows (rank, arm, mean, median, best-win-rate, worst-win-rate), best first."""
    best = np.argmin(finals, axis=0)
    worst = np.argmax(finals, axis=0)
    mean = np.mean(finals, axis=1)
    order = np.argsort(mean, kind="stable")
    return [[r + 1, names[k], float(mean[k]), float(np.median(finals[k])), float(np.mean(best == k)),
             float(np.mean(worst == k))] for r, k in enumerate(order)]


def cmd_compare(a) -> int:
    raw = apply_overrides(load_raw(a.config), **_overrides(a))
    cfg = resolve(raw)
    names, its, curves, finals = compare_arms(raw, a.jobs, a.backend)
    with atomic_dir(a.out or _default_out("compare")) as tmp:
        write_table(tmp / "curves.csv", ["arm", "replication", "iteration", "mse"],
                    ([names[k], r, int(it), curves[k, r, l]] for k in range(len(names))
                     for r in range(curves.shape[1]) for l, it in enumerate(its)))
        write_table(tmp / "final.csv", ["arm", "replication", "final_mse"],
                    ([names[k], r, finals[k, r]] for k in range(len(names)) for r in range(finals.shape[1])))
        write_table(tmp / "ranking.csv", ["rank", "arm", "mean_final_mse", "median_final_mse", "best_rate",
                                          "worst_rate"], ranking(names, finals))
        _write_manifest(tmp / "manifest.yaml", _manifest(raw, cfg, "compare"))
    return EXIT_OK


def cmd_design_net(a) -> int:
    N = a.agents
    if a.topology == "ring":
        top = Topology.ring(N, directed=a.directed)
    elif a.topology == "complete":
        top = Topology.complete(N)
    elif a.topology == "star":
        top = Topology.star(N)
    elif a.topology == "sparse":
        top = sparse_topology(N, a.seed, a.neighbors)
    else:
        if not a.edges:
            raise ConfigError("--topology edges needs --edges FILE")
        top = Topology.from_edge_list(a.edges, N)
    W = design_weights(top, self_weight=a.self_weight, alpha0=a.alpha0)
    out = Path(a.out) if a.out else _default_out("design-net") / "weights.csv"
    with atomic_dir(out.parent) as tmp:
        write_matrix(tmp / out.name, W, "a_")
    psi = left_perron(W)
    print("design-net: psi_bar = " + " ".join(f"{x:.6g}" for x in psi))
    return EXIT_OK


def _common(p, with_algo=True):
    p.add_argument("config", help="config file, run manifest, or preset:<name>")
    p.add_argument("--seed", type=int)
    p.add_argument("--agents", type=int)
    p.add_argument("--network", choices=("none", "sparse", "full", "gossip", "dropout"))
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<command>)")
    if with_algo:
        p.add_argument("--algo", choices=("d1-gtd2", "d2-gtd2", "d1-tdc", "d2-tdc"))
        p.add_argument("--timescales", type=int, choices=(1, 2))
        p.add_argument("--lambda", dest="lam", type=float)


def _runlike(p):
    p.add_argument("--iters", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--log-every", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--backend", choices=("python", "cython"))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="distgtd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("solve", help="exact value function, limit matrices and limit points")
    _common(p)
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("run", help="simulate and write the per-iteration result log")
    _common(p)
    _runlike(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", help="the eight-arm algorithm comparison")
    _common(p, with_algo=False)
    _runlike(p)
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("design-net", help="row-stochastic weights for a topology")
    p.add_argument("--topology", choices=("ring", "complete", "star", "sparse", "edges"), default="sparse")
    p.add_argument("--edges")
    p.add_argument("--agents", type=int, default=10)
    p.add_argument("--neighbors", type=int, default=3)
    p.add_argument("--directed", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha0", type=float, default=0.0)
    p.add_argument("--self-weight", type=float)
    p.add_argument("--out", help="weights CSV path")
    p.set_defaults(func=cmd_design_net)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"distgtd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except INFEASIBLE as exc:
        print(f"distgtd: infeasible model: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergenceError as exc:
        print(f"distgtd: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as exc:
        print(f"distgtd: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
