import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _util import random_chain
from distgtd.exact import solve_value
from distgtd.learners import (AgentState, AlgoConfig, DivergenceError, OneTimeScaleWarning, StepSizes, Transition,
                              gtd2_local_step, local_step, project, span_residual, tdc_local_step, td_error,
                              update_trace)
from distgtd.mdp import cumulative_rows, sample_next

finite = st.floats(-10, 10, allow_nan=False)


def hand_state():
    st_ = AgentState(np.array([1.0, 1.0]), np.array([0.5, -0.2]), np.zeros(2))
    update_trace(st_, 0.7, 0.85, np.array([1.0, 0.0]))  # prev_rho 0 -> e = phi
    return st_


HAND_TR = Transition(np.array([1.0, 0.0]), np.array([0.0, 1.0]), -1.0, 1.6, 0.85, 0.4)


# ---------------------------------------------------------------- trace and TD error

def test_trace_hand_value():
    s = AgentState(np.zeros(2), np.zeros(2), np.array([1.0, 0.0]), prev_rho=1.0)
    np.testing.assert_allclose(update_trace(s, 0.5, 0.85, np.array([0.0, 1.0])), [0.425, 1.0], atol=1e-15)


@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite), st.floats(0, 5))
def test_trace_collapses(e0, phi, rho):
    s = AgentState(np.zeros(3), np.zeros(3), e0.copy(), prev_rho=rho)
    np.testing.assert_array_equal(update_trace(s, 0.0, 0.9, phi), phi)
    s = AgentState(np.zeros(3), np.zeros(3), e0.copy(), prev_rho=0.0)
    np.testing.assert_array_equal(update_trace(s, 0.9, 0.9, phi), phi)


def test_trace_rejects_non_finite():
    s = AgentState.zeros(2)
    with pytest.raises(ValueError):
        update_trace(s, 0.5, 0.9, np.array([np.nan, 0.0]))


def test_td_error_hand_value():
    d = td_error(np.array([1.0, 1.0]), 1.6, -1.0, 0.85, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert d == pytest.approx(-1.84, abs=1e-14)
    assert td_error(np.array([1.0, 1.0]), 0.0, -1.0, 0.85, np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


def test_td_error_mean_zero_at_true_values():
    rng = np.random.default_rng(0)
    ch = random_chain(rng, 5)
    v = solve_value(ch, 0.8).v_pi
    Phi = np.eye(5)
    for s in range(5):
        mean = sum(ch.P[s, s2] * td_error(v, 1.0, ch.r_exp[s, s2], 0.8, Phi[s], Phi[s2]) for s2 in range(5))
        assert abs(mean) < 1e-12


# ---------------------------------------------------------------- single steps

def test_gtd2_hand_step():
    theta, w = gtd2_local_step(hand_state(), HAND_TR, AlgoConfig("gtd2"), StepSizes.two(0.1, 0.2))
    # theta + a q rho (e.w) (phi - g' phi'), e.w = 0.5
    np.testing.assert_allclose(theta, [1.0 + 0.1 * 1.6 * 0.5, 1.0 - 0.1 * 1.6 * 0.5 * 0.85], atol=1e-15)
    # w + b (delta e - (phi.w) phi)
    np.testing.assert_allclose(w, [0.5 + 0.2 * (-1.84 - 0.5), -0.2], atol=1e-15)


def test_tdc_hand_step():
    theta, w = tdc_local_step(hand_state(), HAND_TR, AlgoConfig("tdc", q=2.0), StepSizes.two(0.1, 0.2))
    aq = 0.2
    np.testing.assert_allclose(theta, [1.0 + aq * -1.84, 1.0 - aq * 1.6 * 0.6 * 0.85 * 0.5], atol=1e-15)
    np.testing.assert_allclose(w, [0.5 + 0.2 * (-1.84 - 0.5), -0.2], atol=1e-15)


def test_zero_w_freezes_gtd2_theta():
    s = hand_state()
    s.w = np.zeros(2)
    theta, _ = gtd2_local_step(s, HAND_TR, AlgoConfig(), StepSizes.one(0.3))
    np.testing.assert_array_equal(theta, s.theta)
    theta, _ = tdc_local_step(s, HAND_TR, AlgoConfig("tdc"), StepSizes.two(0.3, 0.5))
    np.testing.assert_allclose(theta, s.theta + 0.3 * -1.84 * s.e, atol=1e-15)


def test_tdc_correction_vanishes_at_full_lambda():
    tr = HAND_TR._replace(lam_next=1.0)
    s = hand_state()
    theta, _ = tdc_local_step(s, tr, AlgoConfig("tdc"), StepSizes.two(0.1, 0.2))
    np.testing.assert_allclose(theta, s.theta + 0.1 * -1.84 * s.e, atol=1e-15)


def test_tdc_one_time_scale_warns():
    with pytest.warns(OneTimeScaleWarning):
        tdc_local_step(hand_state(), HAND_TR, AlgoConfig("tdc"), StepSizes.one(0.1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        local_step(hand_state(), HAND_TR, AlgoConfig("tdc"), StepSizes.two(0.1, 0.2))


def test_step_does_not_mutate_state():
    s = hand_state()
    before = s.copy()
    gtd2_local_step(s, HAND_TR, AlgoConfig(), StepSizes.one(0.1))
    np.testing.assert_array_equal(s.theta, before.theta)
    np.testing.assert_array_equal(s.w, before.w)


def test_divergence_guard_reports_iteration():
    s = hand_state()
    s.w = np.array([1e9, 0.0])
    s.step = 42
    with pytest.raises(DivergenceError) as info:
        gtd2_local_step(s, HAND_TR, AlgoConfig(), StepSizes.one(0.1))
    assert info.value.iteration == 42


def test_config_validation():
    with pytest.raises(ValueError):
        StepSizes(0.0, 0.1)
    with pytest.raises(ValueError):
        StepSizes.two(0.2, 0.1)
    with pytest.raises(ValueError):
        AlgoConfig("td")
    with pytest.raises(ValueError):
        AlgoConfig(q=0.0)
    with pytest.raises(ValueError):
        AlgoConfig(theta_radius=-1.0)


# ---------------------------------------------------------------- projection

def test_project_examples():
    np.testing.assert_allclose(project(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], atol=1e-15)
    x = np.array([0.3, 0.4])
    assert project(x, 1.0) is x
    assert project(x, None) is x
    with pytest.raises(ValueError):
        project(x, 0.0)


@given(arrays(float, 4, elements=st.floats(-1e3, 1e3)), st.floats(0.01, 100))
def test_project_idempotent_and_bounded(x, r):
    y = project(x, r)
    assert np.linalg.norm(y) <= r * (1 + 1e-12)
    np.testing.assert_allclose(project(y, r), y, rtol=1e-12)


# ---------------------------------------------------------------- invariants along a walk

def walk(Phi, kind, steps, seed, radius=None, lam=0.7):
    """Single-agent on-policy run on a random chain, returning the state history."""
    rng = np.random.default_rng(seed)
    Phi = Phi / np.linalg.norm(Phi, axis=1).max()
    M, p = Phi.shape
    ch = random_chain(rng, M)
    cum = cumulative_rows(ch.P)
    cfg = AlgoConfig(kind, theta_radius=radius, w_radius=radius)
    stp = StepSizes.two(0.05, 0.2)
    st_ = AgentState.zeros(p)
    s = 0
    out = []
    for n in range(steps):
        update_trace(st_, lam, 0.9, Phi[s])
        s2 = sample_next(cum[s], rng.random())
        tr = Transition(Phi[s], Phi[s2], ch.r_exp[s, s2], 1.0, 0.9, lam)
        st_.theta, st_.w = local_step(st_, tr, cfg, stp)
        st_.prev_rho, st_.step = 1.0, n + 1
        out.append(st_.copy())
        s = s2
    return out


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["gtd2", "tdc"]), st.integers(0, 2**31 - 1))
def test_trace_and_w_stay_in_feature_span(kind, seed):
    rng = np.random.default_rng(seed)
    # 6 states whose features only span a 2-dim subspace of R^3
    Phi = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 3))
    Phi /= np.linalg.norm(Phi, axis=1).max()
    for st_ in walk(Phi, kind, 200, seed):
        assert span_residual(Phi, st_.e) < 1e-9 * max(1.0, np.linalg.norm(st_.e))
        assert span_residual(Phi, st_.w) < 1e-9 * max(1.0, np.linalg.norm(st_.w))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 2.0))
def test_projection_bounds_hold(seed, radius):
    Phi = np.random.default_rng(seed).normal(size=(5, 3))
    for st_ in walk(Phi, "gtd2", 200, seed, radius=radius):
        assert np.linalg.norm(st_.theta) <= radius * (1 + 1e-12)
        assert np.linalg.norm(st_.w) <= radius * (1 + 1e-12)
