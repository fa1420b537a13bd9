"""Single-agent GTD2(lambda) / TDC(lambda) recursions with eligibility traces.

These are the per-agent building blocks; the batched kernels in
``distgtd._pykernels`` / ``distgtd._kernels`` run the same arithmetic for all
agents of a network at once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

DIVERGENCE_NORM = 1e8


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, message: str = "", context: Optional[dict] = None):
        self.iteration = iteration
        self.context = context or {}
        msg = message or f"parameters diverged at iteration {iteration}"
        if self.context:
            msg += " (" + ", ".join(f"{k}={v}" for k, v in self.context.items()) + ")"
        super().__init__(msg)


class OneTimeScaleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StepSizes:
    alpha: float
    beta: float
    two_time_scale: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("step sizes must be positive")
        if self.two_time_scale and not self.beta > self.alpha:
            raise ValueError("two-time-scale mode requires beta > alpha")

    @classmethod
    def one(cls, alpha: float) -> "StepSizes":
        return cls(alpha, alpha, False)

    @classmethod
    def two(cls, alpha: float, beta: float) -> "StepSizes":
        return cls(alpha, beta, True)


@dataclass(frozen=True)
class AlgoConfig:
    kind: str = "gtd2"
    q: float = 1.0
    lam: Optional[np.ndarray] = None
    theta_radius: Optional[float] = None
    w_radius: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("gtd2", "tdc"):
            raise ValueError(f"unknown algorithm kind {self.kind!r}")
        if self.q <= 0:
            raise ValueError("agent weight q must be positive")
        for r in (self.theta_radius, self.w_radius):
            if r is not None and r <= 0:
                raise ValueError("projection radii must be positive")


@dataclass
class AgentState:
    theta: np.ndarray
    w: np.ndarray
    e: np.ndarray
    prev_rho: float = 0.0
    step: int = 0

    @classmethod
    def zeros(cls, p: int) -> "AgentState":
        return cls(np.zeros(p), np.zeros(p), np.zeros(p))

    def copy(self) -> "AgentState":
        return AgentState(self.theta.copy(), self.w.copy(), self.e.copy(), self.prev_rho, self.step)


class Transition(NamedTuple):
    """One observed step: features of S(n) and S(n+1), reward, ratio, gamma(S(n+1)), lambda(S(n+1))."""

    phi: np.ndarray
    phi_next: np.ndarray
    reward: float
    rho: float
    gamma_next: float
    lam_next: float = 0.0


def span_residual(Phi: np.ndarray, x: np.ndarray) -> float:
    """Distance of x from span{phi(s)} (the row space of Phi)."""
    coef, *_ = np.linalg.lstsq(Phi.T, x, rcond=None)
    return float(np.linalg.norm(Phi.T @ coef - x))


def update_trace(state: AgentState, lam_s: float, gam_s: float, phi_s: np.ndarray) -> np.ndarray:
    """e <- lambda(s) gamma(s) rho(n-1) e + phi(s); mutates and returns ``state.e``."""
    c = lam_s * gam_s * state.prev_rho
    if not np.isfinite(c) or not np.all(np.isfinite(phi_s)):
        raise ValueError("non-finite trace inputs")
    state.e = c * state.e + phi_s
    return state.e


def td_error(theta: np.ndarray, rho: float, reward: float, gam_next: float,
             phi_s: np.ndarray, phi_next: np.ndarray) -> float:
    return rho * (reward + gam_next * (phi_next @ theta) - phi_s @ theta)


def project(x: np.ndarray, radius: Optional[float]) -> np.ndarray:
    """Euclidean projection onto the ball of the given radius."""
    if radius is None:
        return x
    if radius <= 0:
        raise ValueError("radius must be positive")
    norm = np.linalg.norm(x)
    return x if norm <= radius else x * (radius / norm)


def _w_update(state: AgentState, tr: Transition, delta: float, beta: float) -> np.ndarray:
    return state.w + beta * (delta * state.e - (tr.phi @ state.w) * tr.phi)


def _guard(theta: np.ndarray, w: np.ndarray, step: int) -> None:
    if not (np.linalg.norm(theta) <= DIVERGENCE_NORM and np.linalg.norm(w) <= DIVERGENCE_NORM):
        raise DivergenceError(step)


def gtd2_local_step(state: AgentState, tr: Transition, cfg: AlgoConfig,
                    steps: StepSizes) -> tuple[np.ndarray, np.ndarray]:
    """Primed (theta', w') of GTD2(lambda); the trace must already be updated for this step."""
    delta = td_error(state.theta, tr.rho, tr.reward, tr.gamma_next, tr.phi, tr.phi_next)
    ew = state.e @ state.w
    theta = state.theta + (steps.alpha * cfg.q * tr.rho * ew) * (tr.phi - tr.gamma_next * tr.phi_next)
    w = _w_update(state, tr, delta, steps.beta)
    theta, w = project(theta, cfg.theta_radius), project(w, cfg.w_radius)
    _guard(theta, w, state.step)
    return theta, w


def tdc_local_step(state: AgentState, tr: Transition, cfg: AlgoConfig,
                   steps: StepSizes) -> tuple[np.ndarray, np.ndarray]:
    if not steps.two_time_scale:
        warnings.warn("TDC(lambda) is only reliable with two time scales", OneTimeScaleWarning, stacklevel=2)
    delta = td_error(state.theta, tr.rho, tr.reward, tr.gamma_next, tr.phi, tr.phi_next)
    ew = state.e @ state.w
    aq = steps.alpha * cfg.q
    corr = aq * tr.rho * (1.0 - tr.lam_next) * tr.gamma_next * ew
    theta = state.theta + (aq * delta) * state.e - corr * tr.phi_next
    w = _w_update(state, tr, delta, steps.beta)
    theta, w = project(theta, cfg.theta_radius), project(w, cfg.w_radius)
    _guard(theta, w, state.step)
    return theta, w


def local_step(state: AgentState, tr: Transition, cfg: AlgoConfig, steps: StepSizes):
    fn = gtd2_local_step if cfg.kind == "gtd2" else tdc_local_step
    return fn(state, tr, cfg, steps)
