"""Finite MDPs, policy-induced chains, importance ratios and feature maps.

States and actions are 0-based array indices. Where a model talks about
"state numbers" (the highway chain, RBF centres) those are 1-based labels and
row ``k`` of every matrix corresponds to label ``k + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

STOCHASTIC_TOL = 1e-12


class CoverageError(ValueError):
    """Target chain puts mass on a transition the behavior chain never takes."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_stochastic(rows: np.ndarray, what: str) -> None:
    if np.any(rows < 0) or np.any(~np.isfinite(rows)):
        raise ValueError(f"{what} has negative or non-finite entries")
    dev = np.abs(rows.sum(axis=-1) - 1.0)
    if np.any(dev > STOCHASTIC_TOL):
        raise ValueError(f"{what} rows do not sum to 1 (max deviation {dev.max():.3e})")


@dataclass(frozen=True)
class MDPModel:
    """Transition tensor ``p[s, a, s']`` with reward mean and noise std-dev per (s, a, s')."""

    p: np.ndarray
    reward_mean: np.ndarray
    reward_std: Optional[np.ndarray] = None

    def __post_init__(self):
        p = _frozen(self.p)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"transition tensor must have shape (M, A, M), got {p.shape}")
        _check_stochastic(p, "transition tensor")
        rm = _frozen(np.broadcast_to(self.reward_mean, p.shape))
        rs = np.zeros(p.shape) if self.reward_std is None else np.broadcast_to(self.reward_std, p.shape)
        rs = _frozen(rs)
        if np.any(rs < 0) or not np.all(np.isfinite(rs)) or not np.all(np.isfinite(rm)):
            raise ValueError("reward std-devs must be finite and >= 0, means finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "reward_mean", rm)
        object.__setattr__(self, "reward_std", rs)

    @property
    def M(self) -> int:
        return self.p.shape[0]

    @property
    def A(self) -> int:
        return self.p.shape[1]


@dataclass(frozen=True)
class Policy:
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise ValueError("policy must be an M x A matrix")
        _check_stochastic(probs, "policy")
        if np.any(probs > 1.0):
            raise ValueError("policy entries must lie in [0, 1]")
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class InducedChain:
    """State chain of an MDP under a fixed policy.

    ``r_exp[s, s']`` is the expected reward given the transition, ``r_std`` the
    conditional reward std-dev (within-action noise plus spread across actions).
    """

    P: np.ndarray
    r_exp: np.ndarray
    r_std: Optional[np.ndarray] = None

    def __post_init__(self):
        P = _frozen(self.P)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        _check_stochastic(P, "P")
        r = _frozen(np.broadcast_to(self.r_exp, P.shape))
        if not np.all(np.isfinite(r)):
            raise ValueError("r_exp must be finite")
        rs = _frozen(np.zeros(P.shape) if self.r_std is None else np.broadcast_to(self.r_std, P.shape))
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r_exp", r)
        object.__setattr__(self, "r_std", rs)

    @property
    def M(self) -> int:
        return self.P.shape[0]

    @property
    def r_pi(self) -> np.ndarray:
        """Expected one-step reward per state."""
        return (self.P * self.r_exp).sum(axis=1)


@dataclass(frozen=True)
class DiscountSpec:
    gamma: np.ndarray

    def __post_init__(self):
        g = _frozen(np.atleast_1d(self.gamma))
        if g.ndim != 1 or np.any(g < 0) or np.any(g > 1):
            raise ValueError("discount factors must lie in [0, 1]")
        object.__setattr__(self, "gamma", g)

    @classmethod
    def constant(cls, gamma: float, M: int, zero_at: Sequence[int] = ()) -> "DiscountSpec":
        g = np.full(M, float(gamma))
        g[list(zero_at)] = 0.0
        return cls(g)


@dataclass(frozen=True)
class LambdaSpec:
    lam: np.ndarray

    def __post_init__(self):
        lam = _frozen(np.atleast_1d(self.lam))
        if lam.ndim != 1 or np.any(lam < 0) or np.any(lam > 1):
            raise ValueError("lambda parameters must lie in [0, 1]")
        object.__setattr__(self, "lam", lam)

    @classmethod
    def constant(cls, lam: float, M: int) -> "LambdaSpec":
        return cls(np.full(M, float(lam)))


@dataclass(frozen=True)
class FeatureMap:
    Phi: np.ndarray

    def __post_init__(self):
        Phi = _frozen(self.Phi)
        if Phi.ndim != 2 or Phi.shape[1] > Phi.shape[0]:
            raise ValueError(f"feature matrix must be M x p with p <= M, got {Phi.shape}")
        if not np.all(np.isfinite(Phi)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "Phi", Phi)

    @property
    def p(self) -> int:
        return self.Phi.shape[1]

    @classmethod
    def tabular(cls, M: int) -> "FeatureMap":
        return cls(np.eye(M))


def as_vector(x, M: int, name: str) -> np.ndarray:
    """Accept a spec object, scalar or sequence and return a length-M float vector."""
    for attr in ("gamma", "lam"):
        if hasattr(x, attr):
            x = getattr(x, attr)
    v = np.broadcast_to(np.asarray(x, dtype=float), (M,))
    return np.array(v)


def induce_chain(mdp: MDPModel, policy: Policy) -> InducedChain:
    pi = policy.probs
    if pi.shape != (mdp.M, mdp.A):
        raise ValueError(f"policy shape {pi.shape} does not match MDP ({mdp.M}, {mdp.A})")
    joint = pi[:, :, None] * mdp.p  # (s, a, s')
    P = joint.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r_exp = np.where(P > 0, (joint * mdp.reward_mean).sum(axis=1) / P, 0.0)
        second = (joint * (mdp.reward_std**2 + mdp.reward_mean**2)).sum(axis=1)
        var = np.where(P > 0, second / P - r_exp**2, 0.0)
    # row sums of P are exact up to rounding of the mixture
    P = P / P.sum(axis=1, keepdims=True)
    return InducedChain(P, r_exp, np.sqrt(np.clip(var, 0.0, None)))


def is_irreducible(P: np.ndarray) -> bool:
    n, _ = connected_components(np.asarray(P) > 0, directed=True, connection="strong")
    return n == 1


def reachable_from(P: np.ndarray, start: int) -> np.ndarray:
    """Boolean mask of states reachable from ``start`` (including itself)."""
    adj = np.asarray(P) > 0
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        nxt = np.flatnonzero(adj[frontier].any(axis=0) & ~seen)
        seen[nxt] = True
        frontier = list(nxt)
    return seen


def check_coverage(target: InducedChain, behavior: InducedChain) -> bool:
    if target.P.shape != behavior.P.shape:
        raise ValueError("chains have different dimensions")
    uncovered = (behavior.P == 0) & (target.P > 0)
    return not uncovered.any() and is_irreducible(behavior.P)


def importance_ratio(target: InducedChain, behavior: InducedChain, s: int, s_next: int) -> float:
    num, den = target.P[s, s_next], behavior.P[s, s_next]
    if den == 0:
        if num == 0:
            return 0.0
        raise CoverageError(f"transition {s}->{s_next} has target mass {num} but behavior never takes it")
    return float(num / den)


def importance_ratios(target: InducedChain, behavior: InducedChain,
                      rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Full ratio table; coverage is enforced only on ``rows`` (default: all)."""
    Pt, Pb = target.P, behavior.P
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(Pb > 0, Pt / Pb, 0.0)
    bad = (Pb == 0) & (Pt > 0)
    if rows is not None:
        bad &= np.asarray(rows, dtype=bool)[:, None]
    if bad.any():
        s, s2 = np.argwhere(bad)[0]
        raise CoverageError(f"transition {s}->{s2} has target mass but behavior never takes it")
    return rho


def cumulative_rows(P: np.ndarray) -> np.ndarray:
    """Row-wise CDFs with the tail pinned to exactly 1 from the last support point on."""
    cum = np.cumsum(P, axis=-1)
    flat = cum.reshape(-1, P.shape[-1])
    src = np.asarray(P).reshape(-1, P.shape[-1])
    for row, prow in zip(flat, src):
        last = np.flatnonzero(prow > 0)
        if last.size:
            row[last[-1]:] = 1.0
    return flat.reshape(cum.shape)


def sample_next(cum_row: np.ndarray, u: float) -> int:
    """Inverse-CDF draw shared with the compiled kernels: count of CDF entries <= u."""
    k = int(np.count_nonzero(cum_row <= u))
    return min(k, cum_row.shape[0] - 1)


def sample_transition(chain: InducedChain, s: int, rng: np.random.Generator,
                      noise_rng: Optional[np.random.Generator] = None) -> tuple[int, float]:
    if not 0 <= s < chain.M:
        raise IndexError(f"state {s} out of range for a {chain.M}-state chain")
    noise_rng = rng if noise_rng is None else noise_rng
    cum = cumulative_rows(chain.P[s][None, :])[0]
    s_next = sample_next(cum, rng.random())
    reward = chain.r_exp[s, s_next] + chain.r_std[s, s_next] * noise_rng.standard_normal()
    return s_next, float(reward)


def build_rbf_features(M: int, centers: Sequence[float], sigma2: float,
                       states: Optional[Sequence[float]] = None) -> FeatureMap:
    """Gaussian radial basis features exp(-(s - z)^2 / (2 sigma2)) over states labelled 1..M."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    centers = np.asarray(centers, dtype=float)
    if centers.size == 0:
        raise ValueError("at least one centre is required")
    s = np.arange(1, M + 1, dtype=float) if states is None else np.asarray(states, dtype=float)
    return FeatureMap(np.exp(-((s[:, None] - centers[None, :]) ** 2) / (2.0 * sigma2)))
