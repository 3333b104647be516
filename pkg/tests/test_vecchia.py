import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuvec.errors import EmptyInput, ShapeMismatch
from neuvec.kernels import FAMILIES, covariance_matrix, table2_spec
from neuvec.linalg import Rng
from neuvec.sim import lhs_sample
from neuvec.vecchia import (ConditionalLaw, ConditioningPlan, SparseInvChol, build_plan,
                            conditional_from_covariance, dense_mvn_nll, exact_conditional, exact_laws,
                            exact_vecchia_nll, factor_to_laws, full_plan, laws_to_factor, vecchia_nll,
                            vecchia_predict)

from conftest import random_spd

HALF_LOG_2PI = 0.918938533204672741780329736406  # mpmath, 30 digits


def dense_conditional(S, i, c):
    """Brute-force kriging via the explicit inverse."""
    c = list(c)
    inv = np.linalg.inv(S[np.ix_(c, c)])
    beta = inv @ S[c, i]
    return beta, math.sqrt(S[i, i] - S[i, c] @ beta)


def laws_from_cov(S, plan):
    laws = []
    for k in range(len(plan)):
        idx = np.append(plan.neighbor_indices(k), plan.order[k])
        beta, sd = conditional_from_covariance(S[np.ix_(idx, idx)])
        laws.append(ConditionalLaw(beta, float(sd)))
    return laws


# -- plans ----------------------------------------------------------------------

def test_plan_single_point():
    plan = build_plan(np.array([[0.3, 0.2]]), m=3)
    assert len(plan) == 1 and len(plan.neighbors[0]) == 0


def test_plan_collinear_nearest_earlier():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    plan = build_plan(X, m=1)
    np.testing.assert_array_equal(plan.order, [0, 1, 2])
    assert plan.neighbors[2].tolist() == [1]


def test_plan_sizes_and_bruteforce():
    X = Rng(2).uniform((100, 3))
    plan = build_plan(X, m=30)
    Xo = X[plan.order]
    for k, c in enumerate(plan.neighbors):
        assert len(c) == min(k, 30)
        if k:
            d = np.sum((Xo[:k] - Xo[k]) ** 2, axis=1)
            expected = np.sort(np.argsort(d, kind="stable")[:30])
            np.testing.assert_array_equal(c, expected)


def test_plan_default_order_is_lexicographic():
    X = Rng(3).uniform((50, 2))
    plan = build_plan(X, m=5)
    assert np.all(np.diff(X[plan.order, 0]) >= 0)


def test_plan_scaling_changes_metric():
    X = np.array([[0.0, 0.0], [0.1, 5.0], [0.5, 0.0], [1.0, 3.0]])
    unscaled = build_plan(X, m=1)
    # a huge second lengthscale leaves only the first coordinate
    scaled = build_plan(X, m=1, lengthscales=[1.0, 1e6])
    assert unscaled.neighbor_indices(3).tolist() == [1]
    assert scaled.neighbor_indices(3).tolist() == [2]


def test_plan_errors():
    with pytest.raises(EmptyInput):
        build_plan(np.zeros((0, 2)), m=2)
    with pytest.raises(ValueError):
        build_plan(np.zeros((3, 2)), m=2, lengthscales=[1.0, 0.0])
    with pytest.raises(ShapeMismatch):
        ConditioningPlan([0, 1], [[], [1]], 2)


def test_plan_text_roundtrip():
    X = Rng(4).uniform((25, 3))
    plan = build_plan(X, m=4)
    text = plan.to_text()
    assert text.splitlines()[1].startswith(f"{plan.order[1]}:")
    back = ConditioningPlan.from_text(text, m=4)
    np.testing.assert_array_equal(back.order, plan.order)
    for a, b in zip(back.neighbors, plan.neighbors):
        np.testing.assert_array_equal(a, b)


# -- exact conditionals -----------------------------------------------------------

def test_exact_conditional_2x2():
    beta, sd = conditional_from_covariance(np.array([[1.0, 0.5], [0.5, 1.0]]))
    np.testing.assert_allclose(beta, [0.5])
    assert sd == pytest.approx(math.sqrt(0.75), rel=1e-15)


def test_exact_conditional_empty_set():
    law = exact_conditional(table2_spec("MT15"), Rng(0).uniform((4, 3)), 2, [])
    assert law.beta.size == 0
    assert law.sigma == pytest.approx(math.sqrt(1.01), rel=1e-15)


def test_exact_conditional_matches_dense_inverse():
    spec = table2_spec("MT15")
    X = lhs_sample(40, 3, Rng(8))
    plan = build_plan(X, m=30, order=np.arange(40))
    c = plan.neighbor_indices(39)
    law = exact_conditional(spec, X, 39, c)
    beta, sd = dense_conditional(covariance_matrix(spec, X), 39, c)
    np.testing.assert_allclose(law.beta, beta, rtol=1e-8, atol=1e-10)
    assert law.sigma == pytest.approx(sd, rel=1e-8)


def test_exact_conditional_permutation_semantics():
    spec = table2_spec("RangeNS")
    X = Rng(10).uniform((12, 3))
    c = np.arange(11)
    perm = Rng(11).permutation(11)
    a = exact_conditional(spec, X, 11, c)
    b = exact_conditional(spec, X, 11, c[perm])
    assert b.sigma == pytest.approx(a.sigma, rel=1e-12)
    np.testing.assert_allclose(b.beta, a.beta[perm], rtol=1e-12, atol=1e-12)


# -- factor <-> laws ------------------------------------------------------------

def two_point():
    plan = ConditioningPlan([0, 1], [[], [0]], 1)
    laws = [ConditionalLaw([], 1.0), ConditionalLaw([0.5], math.sqrt(0.75))]
    return plan, laws


def test_laws_to_factor_two_point():
    plan, laws = two_point()
    V = laws_to_factor(laws, plan).to_dense()
    assert V[1, 1] == pytest.approx(1 / math.sqrt(0.75), rel=1e-15)
    assert V[0, 1] == pytest.approx(-0.5 / math.sqrt(0.75), rel=1e-15)
    assert V[1, 0] == 0.0 and V[0, 0] == 1.0


def test_factor_to_laws_identity_and_two_point():
    plan = ConditioningPlan(np.arange(3), [[], [0], [0, 1]], 2)
    V = SparseInvChol.from_dense(np.eye(3), plan)
    for law in factor_to_laws(V):
        assert law.sigma == 1.0 and np.all(law.beta == 0.0)
    p2, laws = two_point()
    back = factor_to_laws(SparseInvChol.from_dense(laws_to_factor(laws, p2).to_dense(), p2))
    np.testing.assert_allclose(back[1].beta, [0.5], rtol=1e-15)
    assert back[1].sigma == pytest.approx(math.sqrt(0.75), rel=1e-15)


def test_roundtrip_bit_exact():
    S = random_spd(20, 1)
    plan = build_plan(Rng(1).uniform((20, 2)), m=5)
    laws = laws_from_cov(S, plan)
    back = factor_to_laws(laws_to_factor(laws, plan))
    for a, b in zip(laws, back):
        assert a.sigma == b.sigma
        np.testing.assert_array_equal(a.beta, b.beta)
    V = laws_to_factor(laws, plan)
    V2 = laws_to_factor(factor_to_laws(V), plan)
    np.testing.assert_array_equal(V.scales, V2.scales)
    for u, w in zip(V.offdiag, V2.offdiag):
        np.testing.assert_array_equal(u, w)


def test_full_conditioning_reconstructs_covariance():
    S = random_spd(20, 2)
    S = S / np.max(np.diag(S))
    plan = full_plan(20)
    V = laws_to_factor(laws_from_cov(S, plan), plan)
    rec = np.linalg.inv(V.to_dense() @ V.to_dense().T)
    assert np.linalg.norm(rec - S) / np.linalg.norm(S) < 1e-7


def test_dense_roundtrip_within_tolerance():
    S = random_spd(20, 3)
    plan = full_plan(20)
    laws = laws_from_cov(S, plan)
    back = factor_to_laws(SparseInvChol.from_dense(laws_to_factor(laws, plan).to_dense(), plan))
    for a, b in zip(laws, back):
        assert b.sigma == pytest.approx(a.sigma, rel=1e-12)
        np.testing.assert_allclose(b.beta, a.beta, rtol=1e-12, atol=1e-12)


def test_laws_to_factor_shape_mismatch():
    plan, laws = two_point()
    with pytest.raises(ShapeMismatch):
        laws_to_factor(laws[:1], plan)
    with pytest.raises(ShapeMismatch):
        laws_to_factor([laws[0], ConditionalLaw([0.1, 0.2], 1.0)], plan)


# -- likelihood ---------------------------------------------------------------------

def test_nll_standard_normal():
    plan = ConditioningPlan([0], [[]], 1)
    assert vecchia_nll([ConditionalLaw([], 1.0)], plan, [0.0], [0.0]) == pytest.approx(HALF_LOG_2PI, rel=1e-15)


@pytest.mark.parametrize("family", FAMILIES)
def test_nll_full_conditioning_matches_dense(family):
    spec = table2_spec(family)
    r = Rng(21)
    X = r.uniform((15, 3))
    S = covariance_matrix(spec, X)
    y = r.normal(15)
    plan = full_plan(15, order=r.permutation(15))
    laws = exact_laws(spec, X, plan)
    dense = dense_mvn_nll(S, y)
    assert vecchia_nll(laws, plan, y) == pytest.approx(dense, rel=1e-8)
    assert exact_vecchia_nll(spec, X, plan, y) == pytest.approx(dense, rel=1e-8)


def test_nll_scale_identity():
    X = Rng(2).uniform((10, 3))
    plan = build_plan(X, m=3)
    laws = exact_laws(table2_spec("MT15"), X, plan)
    mu = Rng(3).normal(10)
    doubled = [ConditionalLaw(l.beta, 2 * l.sigma) for l in laws]
    diff = vecchia_nll(doubled, plan, mu, mu) - vecchia_nll(laws, plan, mu, mu)
    assert diff == pytest.approx(10 * math.log(2.0), rel=1e-12)


def test_nll_with_mean():
    X = Rng(4).uniform((8, 3))
    spec = table2_spec("MT15")
    plan = build_plan(X, m=3)
    laws = exact_laws(spec, X, plan)
    y, mu = Rng(5).normal(8), Rng(6).normal(8)
    assert vecchia_nll(laws, plan, y, mu) == pytest.approx(vecchia_nll(laws, plan, y - mu, None), rel=1e-14)
    assert exact_vecchia_nll(spec, X, plan, y, mu) == pytest.approx(vecchia_nll(laws, plan, y, mu), rel=1e-12)


def test_nll_shape_mismatch():
    plan, laws = two_point()
    with pytest.raises(ShapeMismatch):
        vecchia_nll(laws, plan, [0.0, 1.0, 2.0])


def test_nll_monotone_in_m():
    spec = table2_spec("MT15")
    r = Rng(31)
    tot = {5: 0.0, 20: 0.0}
    for _ in range(60):
        X = lhs_sample(60, 3, r)
        y = np.linalg.cholesky(covariance_matrix(spec, X)) @ r.normal(60)
        for m in tot:
            tot[m] += exact_vecchia_nll(spec, X, build_plan(X, m), y)
    assert tot[20] <= tot[5]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(2, 30), m=st.integers(1, 6))
def test_factor_covariance_consistency(seed, n, m):
    """(V V^T)^{-1} reproduces the joint covariance implied by the laws."""
    r = Rng(seed)
    X = r.uniform((n, 2))
    plan = build_plan(X, m)
    laws = [ConditionalLaw(r.normal(len(c)) * 0.3, float(0.5 + r.uniform())) for c in plan.neighbors]
    V = laws_to_factor(laws, plan).to_dense()
    # joint covariance by sequential construction y_k = beta^T y_c + sigma e_k
    B = np.zeros((n, n))
    for k, (law, c) in enumerate(zip(laws, plan.neighbors)):
        B[k, c] = law.beta
    D = np.diag([law.sigma for law in laws])
    A = np.linalg.inv(np.eye(n) - B) @ D
    np.testing.assert_allclose(np.linalg.inv(V @ V.T), A @ A.T, rtol=1e-7, atol=1e-9)


# -- prediction -------------------------------------------------------------------------

def test_predict_zero_beta():
    plan = ConditioningPlan([0, 1], [[], [0]], 1)
    laws = [ConditionalLaw([], 1.0), ConditionalLaw([0.0], 0.7)]
    mean, sd = vecchia_predict(laws, plan, [3.0, np.nan], [1.0, 2.0], [1])
    assert mean[0] == 2.0 and sd[0] == 0.7


def test_predict_two_point():
    plan, laws = two_point()
    mean, sd = vecchia_predict(laws, plan, [1.0, np.nan], [0.0, 0.0], [1])
    assert mean[0] == pytest.approx(0.5) and sd[0] == pytest.approx(math.sqrt(0.75))


def test_predict_matches_dense_gp():
    spec = table2_spec("MT15")
    X = lhs_sample(11, 3, Rng(40))
    S = covariance_matrix(spec, X)
    y = Rng(41).normal(11)
    plan = ConditioningPlan(np.arange(11), [np.zeros(0)] * 10 + [np.arange(10)], 10)
    laws = exact_laws(spec, X, plan)
    mean, sd = vecchia_predict(laws, plan, y, None, [10])
    inv = np.linalg.inv(S[:10, :10])
    assert mean[0] == pytest.approx(S[10, :10] @ inv @ y[:10], rel=1e-8)
    assert sd[0] ** 2 == pytest.approx(S[10, 10] - S[10, :10] @ inv @ S[:10, 10], rel=1e-8)


def test_predict_rejects_target_conditioning_on_target():
    plan = ConditioningPlan([0, 1, 2], [[], [0], [1]], 1)
    laws = [ConditionalLaw([], 1.0), ConditionalLaw([0.1], 1.0), ConditionalLaw([0.1], 1.0)]
    with pytest.raises(ShapeMismatch):
        vecchia_predict(laws, plan, np.zeros(3), None, [1, 2])
