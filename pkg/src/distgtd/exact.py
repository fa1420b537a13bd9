"""Closed-form oracles: Bellman and lambda-operator solutions, stationary
distributions, the mean-ODE matrices and their stationary points.

All solves are dense; the state and feature counts this is meant for are small.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .mdp import FeatureMap, InducedChain, as_vector, is_irreducible

PIVOT_TOL = 1e-12
SPAN_TOL = 1e-12


class SingularSystemError(np.linalg.LinAlgError):
    pass


class ReducibleChainError(ValueError):
    pass


def _solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    """LU solve that refuses near-singular systems (relative pivot threshold)."""
    with warnings.catch_warnings():
        # exact zero pivots are reported below as SingularSystemError
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    scale = max(pivots.max(), 1.0)
    if pivots.min() <= PIVOT_TOL * scale:
        raise SingularSystemError(f"{what} is singular (smallest pivot {pivots.min():.3e})")
    return sla.lu_solve((lu, piv), b)


def span_pinv(H: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric PSD matrix restricted to its range."""
    vals, vecs = np.linalg.eigh((H + H.T) / 2.0)
    top = vals.max() if vals.size else 0.0
    if top <= 0:
        raise SingularSystemError("matrix has no positive eigenvalue")
    keep = vals > SPAN_TOL * top
    V = vecs[:, keep]
    return (V / vals[keep]) @ V.T


@dataclass(frozen=True)
class BellmanSolution:
    v_pi: np.ndarray
    r_pi: np.ndarray

    def residual(self, target: InducedChain, gamma) -> float:
        g = as_vector(gamma, target.M, "gamma")
        return float(np.abs(self.v_pi - (self.r_pi + target.P @ (g * self.v_pi))).max())


@dataclass(frozen=True)
class LambdaOperator:
    P_lambda: np.ndarray
    r_lambda: np.ndarray

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.r_lambda + self.P_lambda @ v


@dataclass(frozen=True)
class StationaryDist:
    xi: np.ndarray

    @property
    def Xi(self) -> np.ndarray:
        return np.diag(self.xi)


@dataclass(frozen=True)
class LimitMatrices:
    """G = Phi' Xi (P_lam - I) Phi, b = Phi' Xi r_lam, H = Phi' Xi Phi."""

    G: np.ndarray
    b: np.ndarray
    H: np.ndarray

    @property
    def C(self) -> np.ndarray:
        """Phi' Xi P_lam Phi, the matrix in the TDC correction term."""
        return self.G + self.H

    @property
    def p(self) -> int:
        return self.b.shape[0]


@dataclass(frozen=True)
class LimitPoint:
    theta_bar: np.ndarray
    w_bars: np.ndarray  # (N, p) for D1, (1, p) for D2
    kind: str

    def residuals(self, mats: Sequence[LimitMatrices], psi_bar, q) -> tuple[float, float]:
        """Max-abs residuals of (sum_j psi_j q_j G_j' w_j, G_i theta + b_i - H_i w_i)."""
        weights = np.asarray(psi_bar, float) * np.asarray(q, float)
        if self.kind == "d1":
            first = sum(c * m.G.T @ w for c, m, w in zip(weights, mats, self.w_bars))
            second = max(np.abs(m.G @ self.theta_bar + m.b - m.H @ w).max()
                         for m, w in zip(mats, self.w_bars))
        else:
            agg = mats[0] if len(mats) == 1 else aggregate_matrices(mats, psi_bar, q)
            w = self.w_bars[0]
            first = agg.G.T @ w
            second = np.abs(agg.G @ self.theta_bar + agg.b - agg.H @ w).max()
        return float(np.abs(first).max()), float(second)


def solve_value(target: InducedChain, disc) -> BellmanSolution:
    M = target.M
    g = as_vector(disc, M, "gamma")
    r_pi = target.r_pi
    v = _solve(np.eye(M) - target.P * g[None, :], r_pi, "I - P Gamma")
    return BellmanSolution(v, r_pi)


def lambda_operator(target: InducedChain, disc, lam, r_pi: Optional[np.ndarray] = None) -> LambdaOperator:
    """P_lam = I - (I - P Gamma Lam)^-1 (I - P Gamma),  r_lam = (I - P Gamma Lam)^-1 r_pi."""
    M = target.M
    g = as_vector(disc, M, "gamma")
    lv = as_vector(lam, M, "lambda")
    PG = target.P * g[None, :]
    inner = np.eye(M) - PG * lv[None, :]
    rhs = np.column_stack([np.eye(M) - PG, target.r_pi if r_pi is None else r_pi])
    sol = _solve(inner, rhs, "I - P Gamma Lambda")
    return LambdaOperator(np.eye(M) - sol[:, :M], sol[:, M])


def stationary_dist(behavior) -> StationaryDist:
    P = behavior.P if isinstance(behavior, InducedChain) else np.asarray(behavior, float)
    if not is_irreducible(P):
        raise ReducibleChainError("stationary distribution requires an irreducible chain")
    M = P.shape[0]
    A = P.T - np.eye(M)
    A[-1, :] = 1.0
    rhs = np.zeros(M)
    rhs[-1] = 1.0
    xi = _solve(A, rhs, "stationary balance system")
    xi = np.clip(xi, 0.0, None)
    return StationaryDist(xi / xi.sum())


def reset_stationary_dist(behavior, start: int, resets: np.ndarray) -> StationaryDist:
    """Occupation measure of an episodic behavior stream.

    Transitions into a reset state send the agent back to ``start`` without an
    update being taken from the reset state, so reset states carry zero mass and
    the remaining reachable states form an irreducible closed chain.
    """
    P = behavior.P if isinstance(behavior, InducedChain) else np.asarray(behavior, float)
    resets = np.asarray(resets, dtype=bool)
    M = P.shape[0]
    Q = P.copy()
    Q[:, start] += Q[:, resets].sum(axis=1)
    Q[:, resets] = 0.0
    if resets[start]:
        Q[start] = 0.0
        Q[start, start] = 1.0
    # states the stream can actually be in
    seen = np.zeros(M, dtype=bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        nxt = np.flatnonzero((Q[frontier] > 0).any(axis=0) & ~seen)
        seen[nxt] = True
        frontier = list(nxt)
    idx = np.flatnonzero(seen)
    sub = stationary_dist(Q[np.ix_(idx, idx)])
    xi = np.zeros(M)
    xi[idx] = sub.xi
    return StationaryDist(xi)


def limit_matrices(Phi, xi, op: LambdaOperator) -> LimitMatrices:
    Phi = Phi.Phi if isinstance(Phi, FeatureMap) else np.asarray(Phi, float)
    x = xi.xi if isinstance(xi, StationaryDist) else np.asarray(xi, float)
    M = Phi.shape[0]
    if x.shape != (M,) or op.P_lambda.shape != (M, M):
        raise ValueError("feature, distribution and operator dimensions disagree")
    XPhi = Phi * x[:, None]
    G = XPhi.T @ (op.P_lambda - np.eye(M)) @ Phi
    b = XPhi.T @ op.r_lambda
    H = XPhi.T @ Phi
    return LimitMatrices(G, b, (H + H.T) / 2.0)


def _weights(n: int, psi_bar, q) -> np.ndarray:
    psi = np.asarray(psi_bar, float).ravel()
    qq = np.broadcast_to(np.asarray(q, float), (n,))
    if psi.shape != (n,):
        raise ValueError(f"expected {n} weights, got {psi.shape[0]}")
    if np.any(psi < 0) or np.any(qq <= 0):
        raise ValueError("psi_bar must be nonnegative and q positive")
    if abs(psi.sum() - 1.0) > 1e-6:
        raise ValueError(f"psi_bar must sum to 1 (got {psi.sum():.8f})")
    return psi * qq


def aggregate_matrices(per_agent: Sequence[LimitMatrices], psi_bar, q) -> LimitMatrices:
    c = _weights(len(per_agent), psi_bar, q)
    G = sum(ci * m.G for ci, m in zip(c, per_agent))
    b = sum(ci * m.b for ci, m in zip(c, per_agent))
    H = sum(ci * m.H for ci, m in zip(c, per_agent))
    return LimitMatrices(G, b, H)


def _stationary_theta(terms) -> tuple[np.ndarray, list[np.ndarray]]:
    """Solve sum_i c_i G_i' H_i^+ (G_i theta + b_i) = 0 for theta."""
    p = terms[0][1].p
    normal = np.zeros((p, p))
    rhs = np.zeros(p)
    pinvs = []
    for c, m in terms:
        Hp = span_pinv(m.H)
        pinvs.append(Hp)
        GtH = m.G.T @ Hp
        normal += c * (GtH @ m.G)
        rhs -= c * (GtH @ m.b)
    try:
        theta = _solve(normal, rhs, "aggregated stationarity system")
    except SingularSystemError as exc:
        raise SingularSystemError(f"degenerate limit set (theta not unique): {exc}") from None
    return theta, pinvs


def limit_point_d1(per_agent: Sequence[LimitMatrices], psi_bar, q) -> LimitPoint:
    c = _weights(len(per_agent), psi_bar, q)
    theta, pinvs = _stationary_theta(list(zip(c, per_agent)))
    ws = np.array([Hp @ (m.G @ theta + m.b) for Hp, m in zip(pinvs, per_agent)])
    return LimitPoint(theta, ws, "d1")


def limit_point_d2(agg: LimitMatrices) -> LimitPoint:
    theta, (Hp,) = _stationary_theta([(1.0, agg)])
    w = Hp @ (agg.G @ theta + agg.b)
    return LimitPoint(theta, w[None, :], "d2")


def objective(theta, per_agent: Sequence[LimitMatrices], psi_bar, q) -> float:
    """Weighted projected Bellman error sum_i psi_i q_i (G_i th + b_i)' H_i^+ (G_i th + b_i)."""
    c = _weights(len(per_agent), psi_bar, q)
    theta = np.asarray(theta, float)
    total = 0.0
    for ci, m in zip(c, per_agent):
        res = m.G @ theta + m.b
        total += ci * float(res @ span_pinv(m.H) @ res)
    return total


def gradient(theta, per_agent: Sequence[LimitMatrices], psi_bar, q) -> np.ndarray:
    c = _weights(len(per_agent), psi_bar, q)
    theta = np.asarray(theta, float)
    return 2.0 * sum(ci * (m.G.T @ span_pinv(m.H) @ (m.G @ theta + m.b)) for ci, m in zip(c, per_agent))


def mean_increments(mats: LimitMatrices, theta, w, kind: str = "gtd2") -> tuple[np.ndarray, np.ndarray]:
    """Stationary means of the theta and w increments at frozen (theta, w), without q or step sizes."""
    theta = np.asarray(theta, float)
    w = np.asarray(w, float)
    k_bar = mats.G @ theta + mats.b - mats.H @ w
    if kind == "gtd2":
        g_bar = -mats.G.T @ w
    elif kind == "tdc":
        g_bar = mats.G @ theta + mats.b - mats.C.T @ w
    else:
        raise ValueError(f"unknown algorithm kind {kind!r}")
    return g_bar, k_bar


def ode_rhs_d1(theta, ws, per_agent: Sequence[LimitMatrices], psi_bar, q):
    """Mean ODE with consensus on theta only: returns (theta_dot, w_dots)."""
    c = _weights(len(per_agent), psi_bar, q)
    theta_dot = -sum(ci * m.G.T @ w for ci, m, w in zip(c, per_agent, ws))
    w_dots = np.array([m.G @ theta + m.b - m.H @ w for m, w in zip(per_agent, ws)])
    return theta_dot, w_dots


def ode_rhs_d2(theta, w, agg: LimitMatrices):
    return -agg.G.T @ w, agg.G @ theta + agg.b - agg.H @ w


def lyapunov_d1(theta, ws, point: LimitPoint, psi_bar, q) -> float:
    c = np.asarray(psi_bar, float) * np.asarray(q, float)
    v = 0.5 * float(np.sum((theta - point.theta_bar) ** 2))
    return v + 0.5 * float(sum(ci * np.sum((w - wb) ** 2) for ci, w, wb in zip(c, ws, point.w_bars)))


def covariance_factor(psi_samples) -> float:
    """Mean of sum_i psi_i^2 over sampled limit rows: the predicted variance ratio vs one agent."""
    rows = np.atleast_2d(np.asarray(psi_samples, float))
    if rows.size == 0:
        raise ValueError("no samples")
    if np.any(rows < -1e-12) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("each sample must be a probability vector")
    return float(np.mean(np.sum(rows**2, axis=1)))
