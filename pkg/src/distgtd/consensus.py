"""Mixing matrices for consensus: topologies, random network models, backward
products and the limiting row weights psi_bar.

Convention: ``A[i, j] > 0`` means agent i listens to agent j (edge j -> i), so
mixing a stack ``X`` of per-agent rows is ``A @ X``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.sparse.csgraph import connected_components

ROW_TOL = 1e-12
KINDS = ("static", "iid-random", "broadcast-gossip", "dropout")


class InfeasibleNetworkError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Topology:
    """Directed graph on N agents; ``edges`` holds (j, i) pairs meaning j -> i."""

    N: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        edges = frozenset((int(j), int(i)) for j, i in self.edges if j != i)
        for j, i in edges:
            if not (0 <= j < self.N and 0 <= i < self.N):
                raise ValueError(f"edge {j}->{i} outside 0..{self.N - 1}")
        object.__setattr__(self, "edges", edges)

    def support(self) -> np.ndarray:
        """Boolean N x N pattern with self-loops: support[i, j] iff j -> i or i == j."""
        S = np.eye(self.N, dtype=bool)
        for j, i in self.edges:
            S[i, j] = True
        return S

    def is_strongly_connected(self) -> bool:
        n, _ = connected_components(self.support(), directed=True, connection="strong")
        return n == 1

    @classmethod
    def complete(cls, N: int) -> "Topology":
        return cls(N, frozenset((j, i) for i in range(N) for j in range(N) if i != j))

    @classmethod
    def empty(cls, N: int) -> "Topology":
        return cls(N, frozenset())

    @classmethod
    def ring(cls, N: int, directed: bool = False) -> "Topology":
        edges = {(i, (i + 1) % N) for i in range(N)}
        if not directed:
            edges |= {((i + 1) % N, i) for i in range(N)}
        return cls(N, frozenset(edges))

    @classmethod
    def star(cls, N: int, hub: int = 0) -> "Topology":
        edges = {(hub, i) for i in range(N) if i != hub} | {(i, hub) for i in range(N) if i != hub}
        return cls(N, frozenset(edges))

    @classmethod
    def random_neighbors(cls, N: int, k: int, rng: np.random.Generator,
                         max_tries: int = 1000) -> "Topology":
        """Each agent listens to k distinct random others; redrawn until strongly connected."""
        k = min(k, N - 1)
        for _ in range(max_tries):
            edges = set()
            for i in range(N):
                others = [j for j in range(N) if j != i]
                for j in rng.choice(others, size=k, replace=False):
                    edges.add((int(j), i))
            topo = cls(N, frozenset(edges))
            if topo.is_strongly_connected():
                return topo
        raise InfeasibleNetworkError(f"no strongly connected {k}-neighbour graph found for N={N}")

    @classmethod
    def from_edge_list(cls, path, N: Optional[int] = None) -> "Topology":
        """Read ``j i`` pairs (0-based, j -> i), one per line; '#' starts a comment.

        A line ``N <count>`` fixes the agent count when isolated agents exist.
        """
        edges, n_decl = [], None
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].replace(",", " ").split()
            if not line:
                continue
            if line[0].upper() == "N":
                n_decl = int(line[1])
                continue
            if len(line) != 2:
                raise ValueError(f"bad edge line: {raw!r}")
            edges.append((int(line[0]), int(line[1])))
        n = N or n_decl or (1 + max(max(e) for e in edges) if edges else 1)
        return cls(n, frozenset(edges))


@dataclass(frozen=True)
class MixingMatrix:
    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def N(self) -> int:
        return self.A.shape[0]

    def check(self, alpha0: float = 0.0, topology: Optional[Topology] = None) -> None:
        check_matrices(self.A[None], alpha0, None if topology is None else topology.support())


def check_matrices(stack: np.ndarray, alpha0: float = 0.0, support: Optional[np.ndarray] = None) -> None:
    """Row-stochasticity, diagonal/off-diagonal lower bound and zero pattern of a stack of matrices."""
    stack = np.asarray(stack)
    if np.any(stack < 0) or not np.all(np.isfinite(stack)):
        raise AssertionError("negative or non-finite mixing weight")
    dev = np.abs(stack.sum(axis=-1) - 1.0).max()
    if dev > ROW_TOL:
        raise AssertionError(f"rows not stochastic (deviation {dev:.3e})")
    diag = np.diagonal(stack, axis1=-2, axis2=-1)
    if diag.min() < alpha0 - ROW_TOL:
        raise AssertionError(f"diagonal weight {diag.min()} below alpha0={alpha0}")
    pos = stack[stack > 0]
    if pos.size and pos.min() < alpha0 - ROW_TOL:
        raise AssertionError(f"positive weight {pos.min()} below alpha0={alpha0}")
    if support is not None and np.any((stack > 0) & ~support[None]):
        raise AssertionError("mixing weight outside the topology")


def equal_weights(topology: Topology) -> np.ndarray:
    """Each agent averages itself and its in-neighbours with equal weights."""
    S = topology.support().astype(float)
    return S / S.sum(axis=1, keepdims=True)


def design_weights(topology: Topology, self_weight: Optional[float] = None, alpha0: float = 0.0,
                   tol: float = 1e-13, max_iter: int = 100000) -> np.ndarray:
    """Doubly stochastic weights on the topology pattern by alternating row/column scaling.

    The initial matrix puts ``self_weight`` on the diagonal (equal weights when None)
    and spreads the rest evenly over in-neighbours.
    """
    if not topology.is_strongly_connected():
        raise InfeasibleNetworkError("weight design needs a strongly connected topology")
    S = topology.support()
    N = topology.N
    if self_weight is None:
        A = equal_weights(topology)
    else:
        if not 0 < self_weight <= 1:
            raise ValueError("self_weight must lie in (0, 1]")
        deg = S.sum(axis=1) - 1
        A = np.where(S, (1.0 - self_weight) / np.maximum(deg, 1)[:, None], 0.0)
        A[np.diag_indices(N)] = np.where(deg > 0, self_weight, 1.0)
    for _ in range(max_iter):
        A = A / A.sum(axis=1, keepdims=True)
        colsum = A.sum(axis=0)
        if np.abs(colsum - 1.0).max() < tol:
            break
        A = A / colsum[None, :]
    else:
        raise InfeasibleNetworkError("alternating normalisation did not converge")
    A = A / A.sum(axis=1, keepdims=True)
    pos = A[A > 0]
    if pos.min() < alpha0:
        raise InfeasibleNetworkError(f"designed weight {pos.min():.3g} falls below alpha0={alpha0}")
    return A


def left_perron(A: np.ndarray) -> np.ndarray:
    """Normalised left eigenvector of a row-stochastic matrix at eigenvalue 1."""
    A = np.asarray(A, float)
    N = A.shape[0]
    M = A.T - np.eye(N)
    M[-1, :] = 1.0
    rhs = np.zeros(N)
    rhs[-1] = 1.0
    v = np.linalg.solve(M, rhs)
    v = np.clip(v, 0.0, None)
    return v / v.sum()


@dataclass(frozen=True)
class NetworkModel:
    """Generator of random mixing matrices A(n), i.i.d. across n.

    kinds:
      static            ``base`` every iteration
      iid-random        each edge active w.p. ``p_active``; equal weights over active in-neighbours and self
      broadcast-gossip  one uniformly drawn agent broadcasts; its out-neighbours mix with weight ``kappa``
      dropout           each off-diagonal weight of ``base`` drops w.p. ``drop_prob`` into the diagonal
    """

    kind: str
    topology: Topology
    base: Optional[np.ndarray] = None
    alpha0: float = 0.0
    p_active: float = 0.5
    drop_prob: float = 0.0
    kappa: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network model {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("static", "dropout"):
            base = equal_weights(self.topology) if self.base is None else np.array(self.base, float)
            if base.shape != (self.N, self.N):
                raise ValueError("base matrix does not match the topology size")
            check_matrices(base[None], 0.0, self.topology.support())
            base.setflags(write=False)
            object.__setattr__(self, "base", base)
        if not 0 <= self.drop_prob <= 1 or not 0 < self.p_active <= 1 or not 0 < self.kappa < 1:
            raise ValueError("probability parameters out of range")
        if self.alpha0 > self.weight_floor() + 1e-15:
            raise InfeasibleNetworkError(
                f"alpha0={self.alpha0} cannot be met; smallest weight this model produces is {self.weight_floor():.4g}")

    @property
    def N(self) -> int:
        return self.topology.N

    @property
    def is_static(self) -> bool:
        return self.kind == "static" or (self.kind == "dropout" and self.drop_prob == 0.0)

    def weight_floor(self) -> float:
        """Smallest positive weight any generated matrix can contain."""
        if self.kind in ("static", "dropout"):
            return float(self.base[self.base > 0].min())
        if self.kind == "broadcast-gossip":
            return min(self.kappa, 1.0 - self.kappa)
        deg = self.topology.support().sum(axis=1)
        return 1.0 / float(deg.max())

    def uniforms_per_draw(self) -> int:
        if self.kind == "broadcast-gossip":
            return 1
        if self.kind == "static":
            return 0
        return int(self._edge_index()[0].size)

    def _edge_index(self):
        S = self.topology.support().copy()
        np.fill_diagonal(S, False)
        return np.nonzero(S)

    def _gossip_matrices(self) -> np.ndarray:
        """The N possible broadcast matrices, indexed by broadcaster."""
        N = self.N
        S = self.topology.support()
        mats = np.broadcast_to(np.eye(N), (N, N, N)).copy()
        for src in range(N):
            rec = np.flatnonzero(S[:, src])
            rec = rec[rec != src]
            mats[src, rec, rec] = 1.0 - self.kappa
            mats[src, rec, src] = self.kappa
        return mats

    def generate(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``count`` matrices as a (count, N, N) stack.

        Every draw consumes a fixed number of uniforms, so chunked generation
        reproduces one long generation exactly.
        """
        N = self.N
        if self.kind == "static":
            return np.broadcast_to(self.base, (count, N, N)).copy()
        if self.kind == "broadcast-gossip":
            u = rng.random(count)
            k = np.minimum((u * N).astype(np.int64), N - 1)
            return self._gossip_matrices()[k]
        rows, cols = self._edge_index()
        u = rng.random((count, rows.size))
        if self.kind == "dropout":
            stack = np.broadcast_to(self.base, (count, N, N)).copy()
            dropped = u < self.drop_prob
            lost = np.where(dropped, self.base[rows, cols][None, :], 0.0)
            stack[:, rows, cols] = np.where(dropped, 0.0, self.base[rows, cols][None, :])
            extra = np.zeros((count, N))
            np.add.at(extra, (slice(None), rows), lost)
            idx = np.arange(N)
            stack[:, idx, idx] += extra
            return stack
        # iid-random
        active = u < self.p_active
        stack = np.zeros((count, N, N))
        stack[:, rows, cols] = active
        idx = np.arange(N)
        stack[:, idx, idx] = 1.0
        return stack / stack.sum(axis=2, keepdims=True)

    def mean_matrix(self) -> np.ndarray:
        """E[A(n)] in closed form."""
        N = self.N
        if self.kind == "static":
            return np.array(self.base)
        if self.kind == "dropout":
            d = self.drop_prob
            A = np.array(self.base) * (1 - d)
            np.fill_diagonal(A, np.diag(self.base) + d * (self.base.sum(axis=1) - np.diag(self.base)))
            return A
        S = self.topology.support()
        if self.kind == "broadcast-gossip":
            return self._gossip_matrices().mean(axis=0)
        p = self.p_active
        A = np.zeros((N, N))
        for i in range(N):
            nbrs = [j for j in range(N) if S[i, j] and j != i]
            d = len(nbrs)
            # E[1/(1+K)], K ~ Bin(d, p)  and  E[1/(2+K')], K' ~ Bin(d-1, p)
            self_w = sum(comb(d, k) * p**k * (1 - p) ** (d - k) / (1 + k) for k in range(d + 1))
            nb_w = p * sum(comb(d - 1, k) * p**k * (1 - p) ** (d - 1 - k) / (2 + k) for k in range(d))
            A[i, i] = self_w
            A[i, nbrs] = nb_w
        return A

    def psi_bar(self) -> np.ndarray:
        """Limiting row weights; for i.i.d. A(n) this is the left Perron vector of E[A]."""
        return left_perron(self.mean_matrix())


def generate_matrix(model: NetworkModel, n: int, rng: np.random.Generator) -> MixingMatrix:
    """One draw of A(n). Matrices are i.i.d. in n, so ``n`` only documents the call site."""
    return MixingMatrix(model.generate(1, rng)[0])


def _check_stacks(thetas, ws, A):
    A = A.A if isinstance(A, MixingMatrix) else np.asarray(A, float)
    thetas, ws = np.asarray(thetas, float), np.asarray(ws, float)
    if A.shape != (thetas.shape[0], thetas.shape[0]) or ws.shape[0] != thetas.shape[0]:
        raise ValueError("mixing matrix and parameter stacks disagree in size")
    return thetas, ws, A


def mix_d1(thetas, ws, A):
    thetas, ws, A = _check_stacks(thetas, ws, A)
    return A @ thetas, ws.copy()


def mix_d2(thetas, ws, A):
    thetas, ws, A = _check_stacks(thetas, ws, A)
    return A @ thetas, A @ ws


def max_spread(X) -> float:
    X = np.asarray(X, float)
    diff = X[:, None, :] - X[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=-1)).max())


def row_disagreement(Psi: np.ndarray) -> float:
    """max_{i,j} ||row_i - row_j||_1."""
    Psi = np.asarray(Psi)
    return float(np.abs(Psi[:, None, :] - Psi[None, :, :]).sum(axis=-1).max())


def backward_product(model: NetworkModel, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Psi(n|k) = A(n) ... A(k), with Psi(k-1|k) = I."""
    if n < k - 1:
        raise ValueError("need n >= k - 1")
    Psi = np.eye(model.N)
    if n < k:
        return Psi
    for A in model.generate(n - k + 1, rng):
        Psi = A @ Psi
    return Psi


def backward_disagreement_curve(model: NetworkModel, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Row disagreement of Psi(k+m|k) for m = 0..horizon-1 along one sampled sequence."""
    Psi = np.eye(model.N)
    out = np.empty(horizon)
    for m, A in enumerate(model.generate(horizon, rng)):
        Psi = A @ Psi
        out[m] = row_disagreement(Psi)
    return out


@dataclass(frozen=True)
class PsiEstimate:
    psi_bar: np.ndarray
    samples: int
    rows: np.ndarray  # one limit row per replication

    @property
    def sq_sums(self) -> np.ndarray:
        return np.sum(self.rows**2, axis=1)


def estimate_psi_bar(model: NetworkModel, horizon: int, replications: int,
                     rng: np.random.Generator, tol: float = 1e-6) -> PsiEstimate:
    """Monte Carlo average of the (rank-one) limit of backward products."""
    rows = np.empty((replications, model.N))
    for r in range(replications):
        Psi = backward_product(model, 0, horizon - 1, rng)
        dis = row_disagreement(Psi)
        if dis > tol:
            raise NonConvergenceError(f"row disagreement {dis:.3e} > {tol} after {horizon} products")
        rows[r] = Psi.mean(axis=0)
    return PsiEstimate(rows.mean(axis=0), replications, rows)
