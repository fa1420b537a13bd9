"""Built-in environments: the 15-state highway chain and a small 5-state ring
used for limit-point and variance checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mdp import DiscountSpec, FeatureMap, MDPModel, Policy, build_rbf_features

HIGHWAY_STATES = 15
HIGHWAY_CENTERS = (1, 3, 5, 7, 9, 11, 13)
HIGHWAY_BEHAVIOR_EXIT = (0.64, 0.75, 0.5, 0.81, 0.85, 0.8, 0.3, 0.55, 0.45, 0.6)
HIGHWAY_LAMBDAS = (0.6, 0.1, 0.25, 0.5, 0.05, 0.01, 0.3, 0.5, 0.4, 0.7)
HIGHWAY_INTERVALS = ((1, 3), (2, 4), (4, 7), (5, 15), (5, 14), (3, 14), (8, 14), (1, 6), (5, 10), (6, 11))

EXIT, HIGHWAY, ABSORB = 0, 1, 2


@dataclass(frozen=True)
class Environment:
    """An MDP with the target policy, features, discounts and episode start state."""

    name: str
    mdp: MDPModel
    target: Policy
    features: FeatureMap
    disc: DiscountSpec
    start: int = 0
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        # (mdp, target, features, discount)
        return iter((self.mdp, self.target, self.features, self.disc))

    @property
    def M(self) -> int:
        return self.mdp.M

    @property
    def absorbing(self) -> np.ndarray:
        """States every action keeps in place."""
        return np.all(np.isclose(self.mdp.p[np.arange(self.M), :, np.arange(self.M)], 1.0), axis=1)


def build_highway_env(gamma: float = 0.85, exit_stay: float = 0.2, exit_reward: float = -4.0,
                      highway_reward: float = -1.0, target_exit: float = 0.8,
                      centers: Sequence[float] = HIGHWAY_CENTERS, sigma2: float = 2.0,
                      n_states: int = HIGHWAY_STATES, with_absorb: bool = False) -> Environment:
    """Highway chain: state s (1-based) either jams in place or advances to s + 1.

    ``exit``: jams w.p. ``exit_stay``, advances otherwise, reward ``exit_reward``.
    ``highway``: jams w.p. 1 - 1/s, advances w.p. 1/s, reward ``highway_reward``.
    The last state is absorbing with zero reward and zero discount. With
    ``with_absorb`` a third action keeps the agent where it is (reward 0).
    """
    M = n_states
    A = 3 if with_absorb else 2
    p = np.zeros((M, A, M))
    r = np.zeros((M, A, M))
    for k in range(M - 1):
        s = k + 1
        p[k, EXIT, k] = exit_stay
        p[k, EXIT, k + 1] = 1.0 - exit_stay
        r[k, EXIT, :] = exit_reward
        p[k, HIGHWAY, k] = 1.0 - 1.0 / s
        p[k, HIGHWAY, k + 1] = 1.0 / s
        r[k, HIGHWAY, :] = highway_reward
    p[M - 1, :, M - 1] = 1.0
    if with_absorb:
        p[np.arange(M), ABSORB, np.arange(M)] = 1.0
    mdp = MDPModel(p, r)
    target = highway_policy(M, target_exit, with_absorb)
    features = build_rbf_features(M, centers, sigma2)
    disc = DiscountSpec.constant(gamma, M, zero_at=[M - 1])
    meta = {"exit_successor": "s+1", "exit_stay": exit_stay, "absorbing_reward": 0.0}
    return Environment("highway", mdp, target, features, disc, 0, meta)


def highway_policy(M: int, exit_prob: float, with_absorb: bool = False) -> Policy:
    probs = np.zeros((M, 3 if with_absorb else 2))
    probs[:, EXIT] = exit_prob
    probs[:, HIGHWAY] = 1.0 - exit_prob
    return Policy(probs)


def restricted_agent_policy(base: Policy, start: int, stop: int, mdp: MDPModel,
                            absorb_action: int = ABSORB) -> Policy:
    """Behavior confined to states start..stop (1-based labels).

    The base policy is followed from ``start`` up to ``stop - 1``; at ``stop`` and
    everywhere outside the interval the absorbing action is taken, which ends the
    agent's episode. When ``stop`` is already absorbing under the base policy its
    row is left untouched.
    """
    M = mdp.M
    if not 1 <= start <= stop <= M:
        raise ValueError(f"invalid interval ({start}, {stop}) for {M} states")
    if mdp.A <= absorb_action or not np.allclose(mdp.p[np.arange(M), absorb_action, np.arange(M)], 1.0):
        raise ValueError("MDP has no absorbing action at the given index")
    probs = np.array(base.probs)
    absorb_row = np.zeros(mdp.A)
    absorb_row[absorb_action] = 1.0
    lo, hi = start - 1, stop - 1
    stop_chain = probs[hi] @ mdp.p[hi]
    for k in range(M):
        if k < lo or k > hi:
            probs[k] = absorb_row
    if start == stop or not np.isclose(stop_chain[hi], 1.0):
        probs[hi] = absorb_row
    return Policy(probs)


def build_test_chain(gamma: float = 0.9, reward_std: float = 0.5, target_a0: float = 0.7) -> Environment:
    """Five-state ring with two actions that differ in drift.

    Jam probabilities grow along the ring so stationary distributions depend on
    the policy. Rewards depend on (s, s') only, so every behavior policy sees the
    target's expected rewards.
    """
    M = 5
    p = np.zeros((M, 2, M))
    for s in range(M):
        stay = 0.1 + 0.15 * s
        # action 0 drifts right, action 1 drifts left
        for a, (right, left) in enumerate(((0.8, 0.2), (0.15, 0.85))):
            p[s, a, s] += stay
            p[s, a, (s + 1) % M] += (1 - stay) * right
            p[s, a, (s - 1) % M] += (1 - stay) * left
    landing = np.array([0.0, 1.0, -1.0, 2.0, 0.5])
    step = np.zeros((M, M))
    step[np.arange(M), (np.arange(M) + 1) % M] = 0.5
    r = np.broadcast_to((landing[None, :] + step)[:, None, :], (M, 2, M))
    mdp = MDPModel(p, r, np.full((M, 2, M), reward_std))
    ang = 2 * np.pi * np.arange(M) / M
    Phi = np.column_stack([np.ones(M), np.cos(ang), np.sin(ang)])
    target = Policy(np.tile([target_a0, 1 - target_a0], (M, 1)))
    return Environment("testchain", mdp, target, FeatureMap(Phi), DiscountSpec.constant(gamma, M), 0, {})


TEST_CHAIN_BEHAVIOR_A0 = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.35, 0.45, 0.55, 0.65)


def test_chain_policy(a0: float) -> Policy:
    return Policy(np.tile([a0, 1 - a0], (5, 1)))


BUILTIN = {"highway": build_highway_env, "testchain": build_test_chain}
