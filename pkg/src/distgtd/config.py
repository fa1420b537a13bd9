"""YAML experiment configuration: parsing, validation and resolution into an
``ExperimentConfig``.

Sections: ``environment``, ``agents``, ``network``, ``algorithm``, ``run``.
Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .consensus import InfeasibleNetworkError, NetworkModel, Topology, design_weights
from .envs import (HIGHWAY_BEHAVIOR_EXIT, HIGHWAY_INTERVALS, HIGHWAY_LAMBDAS, TEST_CHAIN_BEHAVIOR_A0,
                   Environment, build_highway_env, build_test_chain, restricted_agent_policy)
from .harness import AgentSpec, ExperimentConfig, highway_network
from .io import read_matrix, read_tensor
from .mdp import CoverageError, DiscountSpec, FeatureMap, MDPModel, Policy


class ConfigError(ValueError):
    pass


ENV_KEYS = {"name", "gamma", "exit_stay", "target_exit", "with_absorb", "reward_std", "transitions",
            "rewards", "target", "features", "gamma_zero_at", "start"}
AGENT_KEYS = {"action_probs", "policy", "lambda", "q", "interval", "start", "reward_scale", "reward_shift",
              "reward_std"}
TEMPLATE_KEYS = {"template", "count", "lambda", "restricted", "action_probs", "q"}
NETWORK_KEYS = {"kind", "neighbors", "drop_prob", "kappa", "p_active", "edges", "weights", "alpha0",
                "topology_seed"}
ALGO_KEYS = {"kind", "consensus", "alpha", "beta", "timescales", "theta_radius", "w_radius"}
RUN_KEYS = {"seed", "iterations", "replications", "log_every", "shared_stream", "chunk"}
SECTIONS = {"environment": ENV_KEYS, "agents": None, "network": NETWORK_KEYS, "algorithm": ALGO_KEYS,
            "run": RUN_KEYS}
NETWORK_KINDS = ("none", "sparse", "full", "gossip", "dropout", "ring", "static", "iid-random")

DEFAULTS = {
    "network": {"kind": "none"},
    "algorithm": {"kind": "gtd2", "consensus": "d2", "alpha": 0.03, "beta": None, "timescales": None},
    "run": {"seed": 0, "iterations": 10000, "replications": 1, "log_every": 100},
}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {sorted(extra)}")


def preset_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("distgtd.presets").iterdir() if p.name.endswith(".yaml"))


def load_raw(source) -> dict:
    """Read a config file, a run manifest (its ``config`` entry) or ``preset:<name>``."""
    src = str(source)
    if src.startswith("preset:"):
        name = src.split(":", 1)[1]
        path = resources.files("distgtd.presets") / f"{name}.yaml"
        if not path.is_file():
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
        text, base = path.read_text(), None
    else:
        p = Path(src)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        base = p.resolve().parent
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if isinstance(raw, dict) and "config" in raw and "artifact_version" in raw:
        raw = raw["config"]
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    _check_keys(raw, SECTIONS, "config")
    if "environment" not in raw or "agents" not in raw:
        raise ConfigError("config needs 'environment' and 'agents' sections")
    raw = copy.deepcopy(raw)
    for sec, vals in DEFAULTS.items():
        merged = dict(vals)
        merged.update(raw.get(sec) or {})
        raw[sec] = merged
    for sec in ("environment", "network", "algorithm", "run"):
        _check_keys(raw[sec], SECTIONS[sec], sec)
    _absolutize(raw, base)
    return raw


def _absolutize(raw, base: Optional[Path]):
    def fix(d, key):
        v = d.get(key)
        if isinstance(v, str) and v not in ("tabular",) and base is not None and not Path(v).is_absolute():
            d[key] = str((base / v).resolve())

    for key in ("transitions", "rewards", "target", "features", "reward_std"):
        fix(raw["environment"], key)
    for key in ("edges", "weights"):
        fix(raw["network"], key)
    if isinstance(raw["agents"], list):
        for a in raw["agents"]:
            if isinstance(a, dict):
                fix(a, "policy")


def apply_overrides(raw: dict, seed=None, iters=None, replications=None, algo=None, timescales=None,
                    network=None, agents=None, lam=None, alpha=None, beta=None, log_every=None) -> dict:
    raw = copy.deepcopy(raw)
    run, alg = raw["run"], raw["algorithm"]
    if seed is not None:
        run["seed"] = seed
    if iters is not None:
        run["iterations"] = iters
        if log_every is None and run.get("log_every", 1) > iters:
            run["log_every"] = iters
    if log_every is not None:
        run["log_every"] = log_every
    if replications is not None:
        run["replications"] = replications
    if algo is not None:
        cons, kind = algo.split("-", 1)
        alg["consensus"], alg["kind"] = cons, kind
    if timescales is not None:
        alg["timescales"] = timescales
    if alpha is not None:
        alg["alpha"] = alpha
    if beta is not None:
        alg["beta"] = beta
    if network is not None:
        raw["network"] = {"kind": network, **{k: v for k, v in raw["network"].items()
                                              if k in ("neighbors", "drop_prob", "kappa", "topology_seed")}}
    ag = raw["agents"]
    if agents is not None:
        if isinstance(ag, dict):
            ag["count"] = agents
        else:
            if agents > len(ag):
                raise ConfigError(f"config lists only {len(ag)} agents")
            raw["agents"] = ag = ag[:agents]
    if lam is not None:
        if isinstance(ag, dict):
            ag["lambda"] = lam
        else:
            for a in ag:
                a["lambda"] = lam
    return raw


# ---------------------------------------------------------------- resolution

def _num(d, key, where, lo=None, hi=None, integer=False, default=None):
    v = d.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{where}.{key}: expected an integer")
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ConfigError(f"{where}.{key}: {v} out of range")
    return int(v) if integer else float(v)


def build_env(e: dict) -> Environment:
    name = e.get("name", "highway")
    if name == "highway":
        kw = {}
        for key in ("gamma", "exit_stay", "target_exit"):
            if key in e:
                kw[key] = _num(e, key, "environment", 0, 1)
        return build_highway_env(with_absorb=bool(e.get("with_absorb", False)), **kw)
    if name == "testchain":
        kw = {}
        if "gamma" in e:
            kw["gamma"] = _num(e, "gamma", "environment", 0, 1)
        if "reward_std" in e:
            kw["reward_std"] = _num(e, "reward_std", "environment", 0)
        return build_test_chain(**kw)
    if name != "custom":
        raise ConfigError(f"environment.name: unknown environment {name!r}")
    for key in ("transitions", "target", "gamma"):
        if key not in e:
            raise ConfigError(f"environment.{key} is required for a custom MDP")
    p = read_tensor(e["transitions"])
    M, A = p.shape[:2]
    rew = e.get("rewards", 0.0)
    r = read_tensor(rew) if isinstance(rew, str) else float(rew)
    std = e.get("reward_std", 0.0)
    std = read_tensor(std) if isinstance(std, str) else float(std)
    tgt = e["target"]
    target = read_matrix(tgt) if isinstance(tgt, str) else np.tile(np.asarray(tgt, float), (M, 1))
    feats = e.get("features", "tabular")
    Phi = np.eye(M) if feats == "tabular" else read_matrix(feats)
    zero_at = e.get("gamma_zero_at", [])
    disc = DiscountSpec.constant(_num(e, "gamma", "environment", 0, 1), M, zero_at=zero_at)
    start = _num(e, "start", "environment", 0, M - 1, integer=True, default=0)
    return Environment("custom", MDPModel(p, r, std), Policy(target), FeatureMap(Phi), disc, start, {})


def _agent_from_dict(a: dict, env: Environment, where: str) -> AgentSpec:
    _check_keys(a, AGENT_KEYS, where)
    M, A = env.M, env.mdp.A
    if "policy" in a:
        probs = read_matrix(a["policy"])
    elif "action_probs" in a:
        row = np.asarray(a["action_probs"], float)
        if row.shape != (A,):
            raise ConfigError(f"{where}.action_probs: expected {A} entries")
        probs = np.tile(row, (M, 1))
    else:
        raise ConfigError(f"{where}: needs 'action_probs' or 'policy'")
    policy = Policy(probs)
    start = _num(a, "start", where, 0, M - 1, integer=True, default=env.start)
    interval = a.get("interval")
    if interval is not None:
        if not (isinstance(interval, list) and len(interval) == 2):
            raise ConfigError(f"{where}.interval: expected [start, stop] (1-based)")
        policy = restricted_agent_policy(policy, int(interval[0]), int(interval[1]), env.mdp)
        start = int(interval[0]) - 1
        interval = (int(interval[0]), int(interval[1]))
    lam = a.get("lambda", 0.0)
    lam = np.asarray(lam, float)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ConfigError(f"{where}.lambda: values must lie in [0, 1]")
    q = _num(a, "q", where, default=1.0)
    if q <= 0:
        raise ConfigError(f"{where}.q must be positive")
    mean = std = None
    if "reward_scale" in a or "reward_shift" in a:
        mean = env.mdp.reward_mean * _num(a, "reward_scale", where, default=1.0) + _num(a, "reward_shift", where,
                                                                                         default=0.0)
    if "reward_std" in a:
        std = np.full(env.mdp.p.shape, _num(a, "reward_std", where, 0))
    return AgentSpec(policy, lam, q, start, interval, mean, std)


def expand_agents(spec, env: Environment) -> list:
    if isinstance(spec, list):
        if not spec:
            raise ConfigError("agents: empty list")
        return [_agent_from_dict(a, env, f"agents[{i}]") for i, a in enumerate(spec)]
    _check_keys(spec, TEMPLATE_KEYS, "agents")
    tpl = spec.get("template")
    n = _num(spec, "count", "agents", 1, integer=True, default=10)
    restricted = bool(spec.get("restricted", False))
    lam = spec.get("lambda")
    lams = HIGHWAY_LAMBDAS if lam is None else (lam if isinstance(lam, list) else [lam])
    rows = []
    for i in range(n):
        a = {"lambda": lams[i % len(lams)]}
        if "q" in spec:
            a["q"] = spec["q"]
        if "action_probs" in spec:
            a["action_probs"] = spec["action_probs"]
        elif tpl == "highway":
            x = HIGHWAY_BEHAVIOR_EXIT[i % 10]
            a["action_probs"] = [x, 1 - x] + [0.0] * (env.mdp.A - 2)
            if restricted:
                a["interval"] = list(HIGHWAY_INTERVALS[i % 10])
        elif tpl == "testchain":
            x = TEST_CHAIN_BEHAVIOR_A0[i % 10]
            a["action_probs"] = [x, 1 - x]
        else:
            raise ConfigError("agents.template must be 'highway' or 'testchain' unless action_probs is given")
        rows.append(a)
    return [_agent_from_dict(a, env, f"agents[{i}]") for i, a in enumerate(rows)]


def build_network(net: dict, N: int, seed: int) -> Optional[NetworkModel]:
    kind = net.get("kind", "none")
    if kind not in NETWORK_KINDS:
        raise ConfigError(f"network.kind: expected one of {NETWORK_KINDS}")
    tseed = _num(net, "topology_seed", "network", integer=True, default=seed)
    alpha0 = _num(net, "alpha0", "network", 0, 1, default=0.0)
    if kind == "none" or N == 1:
        return None
    if kind in ("sparse", "full", "gossip", "dropout"):
        return highway_network(kind, N, tseed, drop_prob=_num(net, "drop_prob", "network", 0, 1, default=0.3),
                               kappa=_num(net, "kappa", "network", 0, 1, default=0.5),
                               neighbors=_num(net, "neighbors", "network", 1, integer=True, default=3),
                               alpha0=alpha0)
    if kind == "ring":
        return NetworkModel("static", Topology.ring(N), None, alpha0)
    if kind == "iid-random":
        top = Topology.from_edge_list(net["edges"], N) if "edges" in net else Topology.complete(N)
        return NetworkModel("iid-random", top, alpha0=alpha0, p_active=_num(net, "p_active", "network", 0, 1, default=0.5))
    # static: explicit weights or an edge list with designed weights
    if "weights" in net:
        W = read_matrix(net["weights"])
        top = Topology(N, frozenset((int(j), int(i)) for i, j in zip(*np.nonzero(W)) if i != j))
        return NetworkModel("static", top, W, alpha0)
    if "edges" in net:
        top = Topology.from_edge_list(net["edges"], N)
        return NetworkModel("static", top, design_weights(top, alpha0=alpha0), alpha0)
    raise ConfigError("network.kind 'static' needs 'weights' or 'edges'")


def resolve(raw: dict) -> ExperimentConfig:
    env = build_env(raw["environment"])
    agents = expand_agents(raw["agents"], env)
    run, alg = raw["run"], raw["algorithm"]
    seed = _num(run, "seed", "run", 0, integer=True)
    if seed is None:
        raise ConfigError("run.seed must be set explicitly")
    net = build_network(raw["network"], len(agents), seed)
    kind, cons = alg.get("kind"), alg.get("consensus")
    if kind not in ("gtd2", "tdc"):
        raise ConfigError("algorithm.kind must be 'gtd2' or 'tdc'")
    if cons not in ("d1", "d2"):
        raise ConfigError("algorithm.consensus must be 'd1' or 'd2'")
    alpha = _num(alg, "alpha", "algorithm", 0)
    beta = _num(alg, "beta", "algorithm", 0)
    ts = alg.get("timescales")
    if ts is None:
        ts = 2 if beta is not None else 1
    if ts not in (1, 2):
        raise ConfigError("algorithm.timescales must be 1 or 2")
    if ts == 1:
        beta = None
    elif beta is None or beta <= alpha:
        raise ConfigError("two time scales need algorithm.beta > algorithm.alpha")
    iters = _num(run, "iterations", "run", 1, integer=True)
    log_every = _num(run, "log_every", "run", 1, integer=True)
    if log_every > iters:
        raise ConfigError("run.log_every exceeds run.iterations")
    return ExperimentConfig(
        env, agents, net, kind, cons, alpha, beta, iters,
        _num(run, "replications", "run", 1, integer=True), seed, log_every,
        _num(alg, "theta_radius", "algorithm", 0), _num(alg, "w_radius", "algorithm", 0),
        bool(run.get("shared_stream", False)), None, True,
        _num(run, "chunk", "run", 1, integer=True, default=4096), {"timescales": ts})


def load_config(source, **overrides) -> tuple[dict, ExperimentConfig]:
    raw = apply_overrides(load_raw(source), **overrides)
    try:
        return raw, resolve(raw)
    except (CoverageError, InfeasibleNetworkError):
        raise
    except (ValueError, TypeError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from None
