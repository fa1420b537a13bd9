import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distgtd.consensus import (InfeasibleNetworkError, MixingMatrix, NetworkModel, NonConvergenceError, Topology,
                               backward_disagreement_curve, backward_product, check_matrices, design_weights,
                               equal_weights, estimate_psi_bar, generate_matrix, left_perron, max_spread, mix_d1,
                               mix_d2, row_disagreement)


def models(N=6, seed=0):
    top = Topology.random_neighbors(N, 2, np.random.default_rng(seed))
    W = design_weights(top)
    return [
        NetworkModel("static", top, W),
        NetworkModel("iid-random", top, p_active=0.4),
        NetworkModel("broadcast-gossip", top, kappa=0.5),
        NetworkModel("dropout", top, W, drop_prob=0.3),
    ]


# ---------------------------------------------------------------- topologies

def test_topology_constructors():
    assert Topology.complete(4).is_strongly_connected()
    assert Topology.ring(5).is_strongly_connected()
    assert Topology.ring(5, directed=True).is_strongly_connected()
    assert Topology.star(5).is_strongly_connected()
    assert not Topology.empty(3).is_strongly_connected()
    assert Topology.empty(1).is_strongly_connected()
    with pytest.raises(ValueError):
        Topology(2, frozenset({(0, 5)}))


def test_edge_list_file(tmp_path):
    f = tmp_path / "edges.txt"
    f.write_text("# ring of three plus an isolated agent\nN 4\n0 1\n1 2\n2, 0\n")
    top = Topology.from_edge_list(f)
    assert top.N == 4 and top.edges == {(0, 1), (1, 2), (2, 0)}
    assert not top.is_strongly_connected()
    f.write_text("0 1 2\n")
    with pytest.raises(ValueError):
        Topology.from_edge_list(f)


# ---------------------------------------------------------------- weight design

def test_complete_graph_equal_weights():
    A = design_weights(Topology.complete(5))
    np.testing.assert_allclose(A, np.full((5, 5), 0.2), atol=1e-12)


def test_ring_half_quarter_weights():
    A = design_weights(Topology.ring(4), self_weight=0.5)
    ref = 0.5 * np.eye(4) + 0.25 * (np.roll(np.eye(4), 1, axis=1) + np.roll(np.eye(4), -1, axis=1))
    np.testing.assert_allclose(A, ref, atol=1e-12)
    np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 15), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_designed_weights_doubly_stochastic(N, k, seed):
    top = Topology.random_neighbors(N, k, np.random.default_rng(seed))
    A = design_weights(top)
    assert np.abs(A.sum(axis=0) - 1).max() < 1e-10
    assert np.abs(A.sum(axis=1) - 1).max() < 1e-10
    check_matrices(A[None], 0.0, top.support())
    np.testing.assert_allclose(left_perron(A), 1.0 / N, atol=1e-8)


def test_design_rejects_disconnected_and_alpha0():
    with pytest.raises(InfeasibleNetworkError):
        design_weights(Topology.empty(3))
    with pytest.raises(InfeasibleNetworkError):
        design_weights(Topology.complete(5), alpha0=0.3)


def test_static_alpha0_infeasible():
    with pytest.raises(InfeasibleNetworkError):
        NetworkModel("static", Topology.complete(5), alpha0=0.25)


# ---------------------------------------------------------------- generation

def test_static_model_repeats():
    m = models()[0]
    stack = m.generate(5, np.random.default_rng(0))
    assert np.all(stack == m.base[None])
    assert generate_matrix(m, 3, np.random.default_rng(0)).A.tolist() == m.base.tolist()


def test_dropout_zero_equals_static():
    top = Topology.ring(5)
    W = design_weights(top)
    m = NetworkModel("dropout", top, W, drop_prob=0.0)
    assert m.is_static
    np.testing.assert_array_equal(m.generate(10, np.random.default_rng(1)), np.broadcast_to(W, (10, 5, 5)))


def test_dropout_single_edge_frequency():
    top = Topology(2, frozenset({(0, 1)}))
    base = np.array([[1.0, 0.0], [0.4, 0.6]])
    m = NetworkModel("dropout", top, base, drop_prob=0.5)
    n = 10**5
    stack = m.generate(n, np.random.default_rng(2))
    active = stack[:, 1, 0] > 0
    assert abs(active.mean() - 0.5) < 3 * np.sqrt(0.25 / n)
    np.testing.assert_allclose(stack[~active, 1, 1], 1.0)
    check_matrices(stack, 0.0, top.support())


@pytest.mark.parametrize("idx", range(4))
def test_generated_matrices_valid(idx):
    m = models()[idx]
    stack = m.generate(5000, np.random.default_rng(idx))
    check_matrices(stack, m.weight_floor(), m.topology.support())


@pytest.mark.parametrize("idx", range(4))
def test_mean_matrix_matches_monte_carlo(idx):
    m = models()[idx]
    stack = m.generate(40000, np.random.default_rng(10 + idx))
    np.testing.assert_allclose(stack.mean(axis=0), m.mean_matrix(), atol=0.01)


def test_chunked_generation_matches_single_call():
    for m in models():
        a = m.generate(50, np.random.default_rng(3))
        rng = np.random.default_rng(3)
        b = np.concatenate([m.generate(20, rng), m.generate(30, rng)])
        np.testing.assert_array_equal(a, b)


def test_check_matrices_catches_violations():
    with pytest.raises(AssertionError):
        check_matrices(np.array([[[0.5, 0.6], [0.5, 0.5]]]))
    with pytest.raises(AssertionError):
        check_matrices(np.array([[[0.9, 0.1], [0.5, 0.5]]]), alpha0=0.2)
    with pytest.raises(AssertionError):
        check_matrices(np.array([[[0.5, 0.5], [0.0, 1.0]]]), support=np.eye(2, dtype=bool))


def test_invalid_model_parameters():
    top = Topology.ring(3)
    with pytest.raises(ValueError):
        NetworkModel("smoke-signals", top)
    with pytest.raises(ValueError):
        NetworkModel("broadcast-gossip", top, kappa=1.0)
    with pytest.raises(ValueError):
        NetworkModel("dropout", top, drop_prob=1.5)


# ---------------------------------------------------------------- mixing

def test_mix_examples():
    rng = np.random.default_rng(4)
    th, w = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    for mix in (mix_d1, mix_d2):
        a, b = mix(th, w, np.eye(4))
        np.testing.assert_array_equal(a, th)
        np.testing.assert_array_equal(b, w)
    avg = np.full((4, 4), 0.25)
    a, b = mix_d1(th, w, avg)
    np.testing.assert_allclose(a, np.broadcast_to(th.mean(axis=0), (4, 3)))
    np.testing.assert_array_equal(b, w)
    a, b = mix_d2(th, w, MixingMatrix(avg))
    np.testing.assert_allclose(b, np.broadcast_to(w.mean(axis=0), (4, 3)))
    with pytest.raises(ValueError):
        mix_d1(th, w, np.eye(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_mixing_shrinks_spread_and_keeps_consensus(idx, seed):
    rng = np.random.default_rng(seed)
    m = models()[idx]
    A = m.generate(1, rng)[0]
    X = rng.normal(size=(m.N, 3))
    a, b = mix_d2(X, X, A)
    assert max_spread(a) <= max_spread(X) + 1e-12
    # each mixed row is a convex combination: inside the coordinate-wise hull
    assert np.all(a.min(axis=0) >= X.min(axis=0) - 1e-12) and np.all(a.max(axis=0) <= X.max(axis=0) + 1e-12)
    same = np.broadcast_to(X[0], X.shape)
    np.testing.assert_allclose(mix_d1(same, same, A)[0], same, atol=1e-14)


# ---------------------------------------------------------------- backward products and psi_bar

def test_backward_product_identity_and_order():
    m = models()[1]
    np.testing.assert_array_equal(backward_product(m, 5, 4, np.random.default_rng(0)), np.eye(m.N))
    with pytest.raises(ValueError):
        backward_product(m, 5, 3, np.random.default_rng(0))
    stack = m.generate(3, np.random.default_rng(5))
    np.testing.assert_allclose(backward_product(m, 0, 2, np.random.default_rng(5)),
                               stack[2] @ stack[1] @ stack[0], atol=1e-15)


def test_static_powers_converge_to_uniform():
    m = models()[0]
    Psi = backward_product(m, 0, 999, np.random.default_rng(0))
    np.testing.assert_allclose(Psi, 1.0 / m.N, atol=1e-8)


@pytest.mark.parametrize("N", [2, 8, 20])
def test_static_rank_one_at_horizon_1000(N):
    top = Topology.random_neighbors(N, 2, np.random.default_rng(N))
    m = NetworkModel("static", top, equal_weights(top))
    assert row_disagreement(backward_product(m, 0, 999, np.random.default_rng(0))) < 1e-8


@pytest.mark.parametrize("idx", range(4))
def test_disagreement_decays_geometrically(idx):
    m = models()[idx]
    curves = np.array([backward_disagreement_curve(m, 150, np.random.default_rng(r)) for r in range(20)])
    y = np.log(curves.mean(axis=0) + 1e-300)
    keep = np.isfinite(y) & (curves.mean(axis=0) > 1e-13)
    x = np.arange(150)[keep]
    slope, icpt = np.polyfit(x, y[keep], 1)
    r2 = 1 - np.sum((y[keep] - (slope * x + icpt)) ** 2) / np.sum((y[keep] - y[keep].mean()) ** 2)
    assert slope < 0 and r2 > 0.95


def test_psi_bar_static_uniform_and_single():
    est = estimate_psi_bar(models()[0], 1000, 3, np.random.default_rng(0))
    np.testing.assert_allclose(est.psi_bar, 1 / 6, atol=1e-6)
    one = NetworkModel("static", Topology.empty(1))
    np.testing.assert_array_equal(estimate_psi_bar(one, 1, 2, np.random.default_rng(0)).psi_bar, [1.0])


def test_star_psi_bar_is_left_eigenvector():
    top = Topology.star(5)
    A = equal_weights(top)
    assert np.abs(A.sum(axis=0) - 1).max() > 0.1  # not doubly stochastic
    vals, vecs = np.linalg.eig(A.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    v /= v.sum()
    m = NetworkModel("static", top, A)
    est = estimate_psi_bar(m, 1000, 2, np.random.default_rng(0))
    np.testing.assert_allclose(est.psi_bar, v, atol=1e-6)
    np.testing.assert_allclose(m.psi_bar(), v, atol=1e-10)
    assert est.psi_bar[0] > 0.3  # the hub carries more weight


@pytest.mark.parametrize("idx", [1, 2, 3])
def test_random_models_psi_and_square_sums(idx):
    m = models()[idx]
    est = estimate_psi_bar(m, 800, 200, np.random.default_rng(idx))
    assert np.all(est.psi_bar >= 0) and abs(est.psi_bar.sum() - 1) < 1e-9
    np.testing.assert_allclose(est.psi_bar, m.psi_bar(), atol=0.03)
    assert np.all(est.sq_sums > 1 / m.N) and np.all(est.sq_sums <= 1 + 1e-12)


def test_psi_estimate_non_convergence():
    with pytest.raises(NonConvergenceError):
        estimate_psi_bar(models()[1], 3, 2, np.random.default_rng(0))
