"""Synchronized multi-agent experiment driver.

Each round every agent draws one transition from its own behavior chain, takes
a local GTD2/TDC step, and then the primed parameters are mixed through A(n).
Agents that land on a state their behavior chain cannot leave restart from
their start state with a fresh trace.

Random streams are split from one master seed as
``SeedSequence([seed, stream, replication, agent])`` with the stream ids below,
so replications and arms with the same seed see identical environment noise.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import backend as _backend
from .consensus import InfeasibleNetworkError, NetworkModel, Topology, equal_weights
from .envs import (HIGHWAY_BEHAVIOR_EXIT, HIGHWAY_INTERVALS, HIGHWAY_LAMBDAS, Environment,
                   build_highway_env, highway_policy, restricted_agent_policy)
from .exact import (LimitMatrices, LimitPoint, aggregate_matrices, covariance_factor, lambda_operator,
                    limit_matrices, limit_point_d1, limit_point_d2, mean_increments, reset_stationary_dist,
                    solve_value)
from .learners import DivergenceError
from .mdp import CoverageError, InducedChain, MDPModel, Policy, as_vector, cumulative_rows, induce_chain

STREAM_TOPOLOGY, STREAM_MDP, STREAM_NOISE, STREAM_NETWORK = 0, 1, 2, 3
KIND_CODES = {"gtd2": 0, "tdc": 1}


def stream(seed: int, kind: int, rep: int = 0, agent: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), kind, int(rep), int(agent)]))


@dataclass(frozen=True)
class AgentSpec:
    """One learner: behavior policy, trace parameter, weight, start state (0-based).

    ``reward_mean`` / ``reward_std`` optionally replace the environment's reward
    law for this agent only.
    """

    behavior: Policy
    lam: object = 0.0
    q: float = 1.0
    start: int = 0
    interval: Optional[tuple] = None
    reward_mean: Optional[np.ndarray] = None
    reward_std: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ExperimentConfig:
    env: Environment
    agents: tuple
    network: Optional[NetworkModel] = None  # None: no communication
    kind: str = "gtd2"
    consensus: str = "d2"
    alpha: float = 0.01
    beta: Optional[float] = None  # None: one time scale with beta = alpha
    iterations: int = 10_000
    replications: int = 1
    seed: int = 0
    log_every: int = 1
    theta_radius: Optional[float] = None
    w_radius: Optional[float] = None
    shared_stream: bool = False
    theta0: Optional[np.ndarray] = None
    check_coverage: bool = True
    chunk: int = 4096
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if not self.agents:
            raise ValueError("at least one agent is required")
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown algorithm kind {self.kind!r}")
        if self.consensus not in ("d1", "d2"):
            raise ValueError(f"unknown consensus mode {self.consensus!r}")
        if self.network is not None and self.network.N != len(self.agents):
            raise ValueError("network size does not match the number of agents")
        if self.alpha <= 0 or (self.beta is not None and self.beta <= 0):
            raise ValueError("step sizes must be positive")
        if self.iterations < 1 or self.replications < 1 or self.log_every < 1:
            raise ValueError("iterations, replications and log_every must be positive")
        if self.seed is None:
            raise ValueError("an explicit seed is required")

    @property
    def N(self) -> int:
        return len(self.agents)

    @property
    def step_beta(self) -> float:
        return self.alpha if self.beta is None else self.beta

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class Plan:
    """Per-agent arrays consumed by the kernels, plus what the oracles need."""

    cum_p: np.ndarray
    rho: np.ndarray
    r_exp: np.ndarray
    r_std: np.ndarray
    reset: np.ndarray
    start: np.ndarray
    lam: np.ndarray  # zero at reset states
    gamma: np.ndarray
    Phi: np.ndarray
    q: np.ndarray
    v_pi: np.ndarray
    target: InducedChain
    behaviors: tuple
    aligned_targets: tuple
    occupied: np.ndarray

    @property
    def N(self) -> int:
        return self.cum_p.shape[0]


def _agent_mdp(env: Environment, spec: AgentSpec) -> MDPModel:
    if spec.reward_mean is None and spec.reward_std is None:
        return env.mdp
    shape = env.mdp.p.shape
    mean = env.mdp.reward_mean if spec.reward_mean is None else np.broadcast_to(spec.reward_mean, shape)
    std = env.mdp.reward_std if spec.reward_std is None else np.broadcast_to(spec.reward_std, shape)
    return MDPModel(env.mdp.p, mean, std)


def occupied_states(P: np.ndarray, start: int, reset: np.ndarray) -> np.ndarray:
    """States from which an update is ever taken: reachable from ``start`` without
    passing through a reset state."""
    M = P.shape[0]
    seen = np.zeros(M, dtype=bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        nxt = np.flatnonzero((P[frontier] > 0).any(axis=0) & ~seen & ~reset)
        seen[nxt] = True
        frontier = list(nxt)
    return seen


def build_plan(cfg: ExperimentConfig) -> Plan:
    env = cfg.env
    M = env.M
    target = induce_chain(env.mdp, env.target)
    v_pi = solve_value(target, env.disc).v_pi
    fields_ = {k: [] for k in ("cum_p", "rho", "r_exp", "r_std", "reset", "lam", "occ", "beh", "tgt")}
    for i, spec in enumerate(cfg.agents):
        if not 0 <= spec.start < M:
            raise ValueError(f"agent {i}: start state {spec.start} out of range")
        mdp_i = _agent_mdp(env, spec)
        beh = induce_chain(mdp_i, spec.behavior)
        tgt = induce_chain(mdp_i, env.target)
        reset = np.isclose(np.diag(beh.P), 1.0)
        occ = occupied_states(beh.P, spec.start, reset)
        support = beh.P > 0
        if cfg.check_coverage:
            bad = (tgt.P > 0) & ~support & occ[:, None]
            if bad.any():
                s, s2 = np.argwhere(bad)[0]
                raise CoverageError(f"agent {i}: target transition {s}->{s2} never taken by the behavior policy")
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(support, target.P / np.where(support, beh.P, 1.0), 0.0)
        lam = as_vector(spec.lam, M, "lambda").copy()
        lam[reset] = 0.0
        # the target's expected reward for (s, s') as seen through this agent's behavior stream
        aligned = InducedChain(tgt.P, np.where(support, beh.r_exp, tgt.r_exp), tgt.r_std)
        for k, v in zip(fields_, (cumulative_rows(beh.P), rho, beh.r_exp, beh.r_std, reset, lam, occ, beh, aligned)):
            fields_[k].append(v)
    if cfg.shared_stream:
        b0 = cfg.agents[0]
        for spec in cfg.agents[1:]:
            if spec.start != b0.start or not np.array_equal(spec.behavior.probs, b0.behavior.probs):
                raise ValueError("a shared transition stream needs identical behavior policies and start states")
    arr = lambda k, dt=float: np.ascontiguousarray(np.array(fields_[k], dtype=dt))
    return Plan(arr("cum_p"), arr("rho"), arr("r_exp"), arr("r_std"), arr("reset", np.uint8),
                np.array([a.start for a in cfg.agents], dtype=np.int64), arr("lam"),
                np.ascontiguousarray(env.disc.gamma, dtype=float), np.ascontiguousarray(env.features.Phi),
                np.array([a.q for a in cfg.agents], dtype=float), v_pi, target,
                tuple(fields_["beh"]), tuple(fields_["tgt"]), arr("occ", bool))


# ---------------------------------------------------------------- oracles

def agent_limit_matrices(cfg: ExperimentConfig, plan: Optional[Plan] = None) -> list:
    """G_i, b_i, H_i matched to what each agent's episodic stream actually averages."""
    plan = plan or build_plan(cfg)
    out = []
    for i in range(plan.N):
        op = lambda_operator(plan.aligned_targets[i], cfg.env.disc, plan.lam[i])
        xi = reset_stationary_dist(plan.behaviors[i], int(plan.start[i]), plan.reset[i].astype(bool))
        out.append(limit_matrices(plan.Phi, xi, op))
    return out


def network_weights(cfg: ExperimentConfig) -> Optional[np.ndarray]:
    """psi_bar of the configured network, or None when agents do not communicate."""
    if cfg.N == 1:
        return np.ones(1)
    if cfg.network is None or not cfg.network.topology.is_strongly_connected():
        return None
    return cfg.network.psi_bar()


@dataclass(frozen=True)
class Oracle:
    mats: list
    psi_bar: np.ndarray
    d1: LimitPoint
    d2: LimitPoint

    def point(self, consensus: str) -> LimitPoint:
        return self.d1 if consensus == "d1" else self.d2


def limit_points(cfg: ExperimentConfig, plan: Optional[Plan] = None, psi_bar=None) -> Oracle:
    plan = plan or build_plan(cfg)
    psi = network_weights(cfg) if psi_bar is None else np.asarray(psi_bar, float)
    if psi is None:
        raise InfeasibleNetworkError("limit points need a strongly connected network (or a single agent)")
    mats = agent_limit_matrices(cfg, plan)
    d1 = limit_point_d1(mats, psi, plan.q)
    d2 = limit_point_d2(aggregate_matrices(mats, psi, plan.q))
    return Oracle(mats, psi, d1, d2)


def weak_isc_value(cfg: ExperimentConfig, plan: Optional[Plan] = None, psi_bar=None) -> np.ndarray:
    """Value of the fictitious reward sum_i psi_i q_i R_i under the target policy."""
    plan = plan or build_plan(cfg)
    psi = network_weights(cfg) if psi_bar is None else np.asarray(psi_bar, float)
    c = psi * plan.q
    c = c / c.sum()
    r = sum(ci * t.r_exp for ci, t in zip(c, plan.aligned_targets))
    chain = InducedChain(plan.target.P, r, plan.target.r_std)
    return solve_value(chain, cfg.env.disc).v_pi


# ---------------------------------------------------------------- running

@dataclass
class RunResult:
    replication: int
    iterations: np.ndarray  # 1-based round counts at which theta was logged
    theta_log: np.ndarray  # (L, N, p)
    theta: np.ndarray
    w: np.ndarray
    visits: np.ndarray
    next_visits: np.ndarray
    episodes: np.ndarray
    episode_steps: np.ndarray  # steps in completed episodes
    open_episode: np.ndarray  # steps in the running episode
    diverged_at: Optional[int] = None


def _network_draws(cfg: ExperimentConfig, count: int, rng) -> np.ndarray:
    N = cfg.N
    if cfg.network is None:
        return np.eye(N)[None]
    if cfg.network.is_static:
        return np.ascontiguousarray(cfg.network.base, dtype=float)[None]
    return np.ascontiguousarray(cfg.network.generate(count, rng))


def run_replication(cfg: ExperimentConfig, rep: int = 0, plan: Optional[Plan] = None,
                    backend: Optional[str] = None, on_divergence: str = "raise") -> RunResult:
    plan = plan or build_plan(cfg)
    kern = _backend.get(backend)
    N, p = cfg.N, plan.Phi.shape[1]
    theta = np.zeros((N, p))
    if cfg.theta0 is not None:
        theta[:] = np.asarray(cfg.theta0, float)
    w = np.zeros((N, p))
    e = np.zeros((N, p))
    prev_rho = np.zeros(N)
    state = plan.start.copy()
    ep_len = np.zeros(N, np.int64)
    ep_done = np.zeros(N, np.int64)
    ep_count = np.zeros(N, np.int64)
    M = plan.Phi.shape[0]
    visits = np.zeros((N, M), np.int64)
    next_visits = np.zeros((N, M), np.int64)
    L = cfg.iterations // cfg.log_every
    log_theta = np.full((L, N, p), np.nan)
    log_pos = 0

    q = plan.q
    alpha = np.full(N, float(cfg.alpha))
    beta = np.full(N, float(cfg.step_beta))
    kind = np.full(N, KIND_CODES[cfg.kind], np.int64)
    d2 = 1 if cfg.consensus == "d2" else 0
    tr = -1.0 if cfg.theta_radius is None else float(cfg.theta_radius)
    wr = -1.0 if cfg.w_radius is None else float(cfg.w_radius)

    n_mdp = 1 if cfg.shared_stream else N
    mdp_rngs = [stream(cfg.seed, STREAM_MDP, rep, i) for i in range(n_mdp)]
    noise_rngs = [stream(cfg.seed, STREAM_NOISE, rep, i) for i in range(N)]
    net_rng = stream(cfg.seed, STREAM_NETWORK, rep)

    diverged = None
    n0 = 0
    while n0 < cfg.iterations:
        C = min(cfg.chunk, cfg.iterations - n0)
        U = np.empty((C, N))
        if cfg.shared_stream:
            U[:] = mdp_rngs[0].random(C)[:, None]
        else:
            for i, g in enumerate(mdp_rngs):
                U[:, i] = g.random(C)
        Z = np.empty((C, N))
        for i, g in enumerate(noise_rngs):
            Z[:, i] = g.standard_normal(C)
        A = _network_draws(cfg, C, net_rng)
        at, log_pos = kern.run_rounds(theta, w, e, prev_rho, state, ep_len, ep_done, ep_count, visits, next_visits,
                                      plan.cum_p, plan.rho, plan.r_exp, plan.r_std, plan.reset, plan.start,
                                      plan.Phi, plan.gamma, plan.lam, q, alpha, beta, kind, d2, A, U, Z,
                                      tr, wr, n0, cfg.log_every, log_theta, log_pos)
        if at >= 0:
            diverged = int(at)
            break
        n0 += C

    if diverged is not None and on_divergence == "raise":
        ctx = {"seed": cfg.seed, "replication": rep, "algo": f"{cfg.consensus}-{cfg.kind}",
               "alpha": cfg.alpha, "beta": cfg.step_beta}
        raise DivergenceError(diverged, context=ctx)
    return RunResult(rep, np.arange(1, L + 1) * cfg.log_every, log_theta, theta, w, visits, next_visits,
                     ep_count, ep_done, ep_len, diverged)


def _run_one(args):
    cfg, rep, plan, backend, on_div = args
    return run_replication(cfg, rep, plan, backend, on_div)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    plan: Plan
    runs: list

    def theta_logs(self) -> np.ndarray:
        return np.stack([r.theta_log for r in self.runs])

    def final_thetas(self) -> np.ndarray:
        return np.stack([r.theta for r in self.runs])

    def mse(self, v_ref: Optional[np.ndarray] = None, states=None) -> np.ndarray:
        """(R, L, N) MSE curves."""
        v = self.plan.v_pi if v_ref is None else v_ref
        return np.stack([mse_curve(r.theta_log, self.plan.Phi, v, states) for r in self.runs])

    def disagreement(self) -> np.ndarray:
        return np.stack([disagreement_curve(r.theta_log) for r in self.runs])

    @property
    def iterations(self) -> np.ndarray:
        return self.runs[0].iterations


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, backend: Optional[str] = None,
                   on_divergence: str = "raise", plan: Optional[Plan] = None) -> ExperimentResult:
    plan = plan or build_plan(cfg)
    tasks = [(cfg, rep, plan, backend, on_divergence) for rep in range(cfg.replications)]
    if jobs > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            runs = list(ex.map(_run_one, tasks))
    else:
        runs = [_run_one(t) for t in tasks]
    return ExperimentResult(cfg, plan, runs)


def weak_isc_mode(cfg: ExperimentConfig, **kw):
    """Run with one transition stream shared by all agents and agent-local rewards.

    Returns the result and the value of the psi*q-weighted average reward.
    """
    cfg = cfg.replace(shared_stream=True)
    res = run_experiment(cfg, **kw)
    return res, weak_isc_value(cfg, res.plan)


# ---------------------------------------------------------------- metrics

def mse_curve(theta_log, Phi, v_pi, states=None) -> np.ndarray:
    """(1/|S|) sum_s (phi(s)' theta - v(s))^2 for every logged theta; shape theta_log.shape[:-1]."""
    theta_log = np.asarray(theta_log, float)
    Phi = np.asarray(Phi, float)
    v = np.asarray(v_pi, float)
    if states is not None:
        Phi, v = Phi[states], v[states]
    err = theta_log @ Phi.T - v
    return np.mean(err * err, axis=-1)


def disagreement_curve(theta_log) -> np.ndarray:
    """max_{i,j} ||theta_i - theta_j|| per logged iteration."""
    t = np.asarray(theta_log, float)
    diff = t[..., :, None, :] - t[..., None, :, :]
    return np.sqrt((diff * diff).sum(-1)).max(axis=(-1, -2))


@dataclass(frozen=True)
class VarianceReport:
    networked: float
    single: float
    ratio: float
    predicted: float
    per_component: np.ndarray


MIN_VARIANCE_REPLICATIONS = 30


def steady_state_variance(theta_logs: np.ndarray, tail: float = 0.1, agent: int = 0) -> np.ndarray:
    """Across-replication variance per theta component over the last ``tail`` of the log."""
    R, L = theta_logs.shape[:2]
    if R < MIN_VARIANCE_REPLICATIONS:
        raise ValueError(f"need at least {MIN_VARIANCE_REPLICATIONS} replications, got {R}")
    k = max(1, int(round(tail * L)))
    window = theta_logs[:, L - k:, agent, :]
    return window.var(axis=0, ddof=1).mean(axis=0)


def variance_report(networked: ExperimentResult, single: ExperimentResult, tail: float = 0.1,
                    psi_samples=None) -> VarianceReport:
    vn = steady_state_variance(networked.theta_logs(), tail)
    vs = steady_state_variance(single.theta_logs(), tail)
    if psi_samples is None:
        psi = network_weights(networked.config)
        predicted = float(np.sum(psi ** 2)) if psi is not None else float("nan")
    else:
        predicted = covariance_factor(psi_samples)
    a, b = float(vn.mean()), float(vs.mean())
    ratio = a / b if b > 0 else (0.0 if a == 0 else float("inf"))
    return VarianceReport(a, b, ratio, predicted, vn / np.where(vs > 0, vs, np.nan))


def frozen_mean_check(cfg: ExperimentConfig, theta, w, steps: int, agent: int = 0, rep: int = 0,
                      plan: Optional[Plan] = None, backend: Optional[str] = None) -> dict:
    """Ergodic averages of the increments at frozen (theta, w) next to their stationary means."""
    plan = plan or build_plan(cfg)
    kern = _backend.get(backend)
    theta = np.ascontiguousarray(theta, float)
    w = np.ascontiguousarray(w, float)
    U = stream(cfg.seed, STREAM_MDP, rep, agent).random(steps)
    Z = stream(cfg.seed, STREAM_NOISE, rep, agent).standard_normal(steps)
    s0 = int(plan.start[agent])
    sums = kern.frozen_increments(theta, w, plan.cum_p[agent], plan.rho[agent], plan.r_exp[agent],
                                  plan.r_std[agent], plan.reset[agent], s0, s0, plan.Phi, plan.gamma,
                                  plan.lam[agent], U, Z)
    mats = agent_limit_matrices(cfg, plan)[agent]
    g2, k_bar = mean_increments(mats, theta, w, "gtd2")
    gt, _ = mean_increments(mats, theta, w, "tdc")
    emp = [s / steps for s in sums]
    return {"gtd2": (emp[0], g2), "tdc": (emp[1], gt), "w": (emp[2], k_bar)}


def episode_accounting_ok(run: RunResult, plan: Plan, iterations: int) -> bool:
    total = run.episode_steps + run.open_episode
    resets_hit = (run.next_visits * plan.reset).sum(axis=1)
    return bool(np.all(total == iterations) and np.array_equal(resets_hit, run.episodes))


# ---------------------------------------------------------------- highway scenarios

def sparse_topology(N: int, seed: int, k: int = 3) -> Topology:
    return Topology.random_neighbors(N, k, stream(seed, STREAM_TOPOLOGY))


def highway_network(kind: str, N: int, seed: int, drop_prob: float = 0.3, kappa: float = 0.5,
                    neighbors: int = 3, alpha0: float = 0.0) -> Optional[NetworkModel]:
    """'none', 'sparse' (three random neighbours, equal weights, fixed per seed), 'full',
    'gossip' (broadcast on the sparse graph) or 'dropout' (link failures on the sparse graph)."""
    if kind == "none" or N == 1:
        return None
    if kind == "full":
        return NetworkModel("static", Topology.complete(N), alpha0=alpha0)
    top = sparse_topology(N, seed, neighbors)
    if kind == "sparse":
        return NetworkModel("static", top, equal_weights(top), alpha0)
    if kind == "gossip":
        return NetworkModel("broadcast-gossip", top, alpha0=alpha0, kappa=kappa)
    if kind == "dropout":
        return NetworkModel("dropout", top, equal_weights(top), alpha0, drop_prob=drop_prob)
    raise ValueError(f"unknown network {kind!r}")


def highway_agents(N: int = 10, lam=None, restricted: bool = False, env: Optional[Environment] = None) -> list:
    env = env or build_highway_env(with_absorb=restricted)
    lams = HIGHWAY_LAMBDAS if lam is None else (lam,) * N
    specs = []
    for i in range(N):
        base = highway_policy(env.M, HIGHWAY_BEHAVIOR_EXIT[i % 10], with_absorb=restricted)
        if restricted:
            a, b = HIGHWAY_INTERVALS[i % 10]
            specs.append(AgentSpec(restricted_agent_policy(base, a, b, env.mdp), lams[i % len(lams)],
                                   start=a - 1, interval=(a, b)))
        else:
            specs.append(AgentSpec(base, lams[i % len(lams)]))
    return specs


# (name, consensus, kind, lambda or None for the per-agent list, two time scales)
COMPARE_ARMS = (
    ("D2-GTD(0) 1TS", "d2", "gtd2", 0.0, False),
    ("D2-GTD(0) 2TS", "d2", "gtd2", 0.0, True),
    ("D2-GTD(lambda) 1TS", "d2", "gtd2", 0.6, False),
    ("D2-GTD(lambda) 2TS", "d2", "gtd2", 0.6, True),
    ("D2-TDC(0) 2TS", "d2", "tdc", 0.0, True),
    ("D2-TDC(lambda) 2TS", "d2", "tdc", 0.6, True),
    ("D1-TDC(lambda) 2TS", "d1", "tdc", 0.6, True),
    ("D1-GTD(lambda) 1TS", "d1", "gtd2", 0.6, False),
)
