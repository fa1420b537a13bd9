"""Small random-model builders shared by the test modules."""

import numpy as np

from distgtd.mdp import InducedChain, MDPModel, Policy


def random_mdp(rng, M, A, noise=0.0):
    p = rng.random((M, A, M)) + 0.05
    p /= p.sum(axis=2, keepdims=True)
    return MDPModel(p, rng.normal(size=(M, A, M)), np.full((M, A, M), noise))


def random_policy(rng, M, A):
    pi = rng.random((M, A)) + 0.01
    return Policy(pi / pi.sum(axis=1, keepdims=True))


def random_chain(rng, M, density=1.0):
    """Irreducible chain: a random cycle plus random extra edges."""
    P = rng.random((M, M)) * (rng.random((M, M)) < density)
    perm = rng.permutation(M)
    P[perm, np.roll(perm, 1)] += 0.2
    P /= P.sum(axis=1, keepdims=True)
    return InducedChain(P, rng.normal(size=(M, M)) * (P > 0))


def random_features(rng, M, p):
    while True:
        Phi = rng.normal(size=(M, p))
        if np.linalg.matrix_rank(Phi) == p:
            return Phi
