from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from rrfda.basis import build_basis, penalty_matrix
from rrfda.errors import ConfigurationError, StructuralError
from rrfda.model import (
    BandPowerDataset,
    DataSummary,
    ModelSpec,
    expected_tau,
    implied_sigma_z,
    loglik,
    mean_curves,
    prior_logdensity,
    sample_prior,
    simulate_data,
    ss_as_ns,
    unvec,
    vec,
)


class PenaltyBasis:
    """Minimal basis stand-in for dimensions below the cubic-spline minimum."""

    def __init__(self, q):
        self.q = q

    def penalty(self, order=2):
        D = np.diff(np.eye(self.q), n=min(order, self.q - 1), axis=0)
        return D.T @ D


def commutation(p, q):
    """Permutation ``K`` with ``K vec(M) = vec(M')`` for ``M`` p x q."""
    K = np.zeros((p * q, p * q))
    for j in range(p):
        for s in range(q):
            K[j * q + s, s * p + j] = 1.0
    return K


@settings(max_examples=30, deadline=None)
@given(p=st.integers(1, 5), q=st.integers(1, 6), n=st.integers(1, 3))
def test_vec_unvec_round_trip(p, q, n):
    M = np.random.default_rng(p * 31 + q).standard_normal((n, p, q))
    v = vec(M)
    assert v.shape == (n, p * q)
    np.testing.assert_array_equal(unvec(v, p, q), M)
    # regions run fastest: index s*p + j
    if q > 1:
        assert v[0, p] == M[0, 0, 1]


def test_vec_of_kronecker_product():
    rng = np.random.default_rng(0)
    A, X, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 4)), rng.standard_normal((4, 4))
    np.testing.assert_allclose(vec((A @ X @ B.T)[None])[0], np.kron(B, A) @ vec(X[None])[0])


@pytest.mark.parametrize("family", ["NB", "SS", "NS"])
def test_sigma_z_row_stacking_equivalence(family):
    """The row-stacked form (spatial factor first) is a permutation of ours."""
    p, q = 3, 4
    rng = np.random.default_rng(5)
    spec = ModelSpec(prior_family=family, k=3, k1=2, k2=2, nb_ridge=0.1)
    st_ = sample_prior(spec, 2, p, q, np.ones((2, 1)), rng, build_basis(q))
    Sz = implied_sigma_z(st_)
    K = commutation(p, q)
    Sz_rows = K @ Sz @ K.T
    if family == "NB":
        np.testing.assert_allclose(Sz_rows, np.kron(st_.S, np.linalg.inv(st_.omega0)), atol=1e-10)
    elif family == "SS":
        ref = np.kron(st_.upsilon @ st_.upsilon.T, st_.gamma @ st_.gamma.T) + np.diag(np.kron(st_.sigma_p, st_.sigma_q))
        np.testing.assert_allclose(Sz_rows, ref, atol=1e-10)
    else:
        # NS is a free low-rank-plus-diagonal matrix in either layout
        xi_rows = K @ st_.xi
        np.testing.assert_allclose(Sz_rows, xi_rows @ xi_rows.T + np.diag(K @ st_.sigma_r), atol=1e-10)


def test_ss_as_ns_same_sigma_z_and_latents():
    rng = np.random.default_rng(2)
    st_ = sample_prior(ModelSpec(prior_family="SS", k1=2, k2=3), 4, 3, 5, np.ones((4, 1)), rng, build_basis(5))
    ns = ss_as_ns(st_)
    np.testing.assert_allclose(implied_sigma_z(ns), implied_sigma_z(st_), atol=1e-12)
    low = np.einsum("pa,iab,qb->ipq", st_.upsilon, st_.H, st_.gamma)
    np.testing.assert_allclose(unvec(ns.eta @ ns.xi.T, 3, 5), low, atol=1e-12)


@pytest.mark.parametrize("family", ["NB", "SS", "NS"])
def test_implied_sigma_z_matches_forward_simulation(family):
    """Entrywise agreement within 3 Monte Carlo standard errors (p=2, q=3)."""
    p, q, n = 2, 3, 40000
    rng = np.random.default_rng(11)
    spec = ModelSpec(prior_family=family, k=3, k1=2, k2=2, nb_ridge=0.5, resid_shape=4.0, resid_rate=3.0)
    st_ = sample_prior(spec, n, p, q, np.zeros((n, 1)), rng, PenaltyBasis(q))
    z = vec(st_.theta)
    Sz = implied_sigma_z(st_)
    C = z.T @ z / n
    prod = z[:, :, None] * z[:, None, :]
    se = prod.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(C - Sz) <= 3 * se + 1e-12)


def test_sample_prior_shapes_and_validity():
    W = np.eye(3)[[0, 1, 2, 0]]
    for fam in ("NB", "SS", "NS"):
        st_ = sample_prior(ModelSpec(prior_family=fam, k=4), 4, 3, 6, W, np.random.default_rng(1), build_basis(6))
        assert st_.theta.shape == (4, 3, 6) and st_.psi.shape == (3, 3, 6)
        st_.validate()
        assert np.isfinite(prior_logdensity(st_, ModelSpec(prior_family=fam, k=4).resolve(3, 6), W))


def test_nb_prior_needs_basis():
    with pytest.raises(ConfigurationError):
        sample_prior(ModelSpec(prior_family="NB"), 2, 2, 4, np.ones((2, 1)), np.random.default_rng(0))


def test_loglik_matches_scipy():
    rng = np.random.default_rng(4)
    basis = build_basis(5)
    st_ = sample_prior(ModelSpec(prior_family="NS", k=2), 3, 2, 5, np.ones((3, 1)), rng, basis)
    times = [np.sort(rng.uniform(0, 1, m)) for m in (4, 0, 7)]
    ds = simulate_data(st_, times, basis, np.ones((3, 1)), rng)
    ref = 0.0
    for i, t in enumerate(times):
        if len(t):
            mu = st_.theta[i] @ basis.evaluate(t).T
            for j in range(2):
                ref += multivariate_normal(mu[j], st_.sigma_eps[j] * np.eye(len(t))).logpdf(ds.Y[i][j])
    assert loglik(st_, ds, basis) == pytest.approx(ref, rel=1e-12)


def test_loglik_dimension_mismatch():
    basis = build_basis(5)
    st_ = sample_prior(ModelSpec(prior_family="NS", k=2), 2, 2, 5, np.ones((2, 1)), np.random.default_rng(0), basis)
    ds = BandPowerDataset([np.linspace(0, 1, 3)] * 2, [np.zeros((2, 3))] * 2, np.ones((2, 1)))
    with pytest.raises(StructuralError):
        loglik(st_, ds, build_basis(6))


def test_dataset_validation():
    with pytest.raises(StructuralError):
        BandPowerDataset([np.arange(3.0)], [np.zeros((2, 4))], np.ones((1, 1)))
    with pytest.raises(StructuralError):
        BandPowerDataset([np.array([0.0, 2.0, 1.0])], [np.zeros((2, 3))], np.ones((1, 1)))
    with pytest.raises(StructuralError):
        BandPowerDataset([np.arange(3.0)], [np.full((2, 3), np.nan)], np.ones((1, 1)))
    with pytest.raises(StructuralError):
        BandPowerDataset([np.arange(3.0)], [np.zeros((2, 3))], np.ones((2, 1)))


def test_data_summary_statistics():
    rng = np.random.default_rng(0)
    basis = build_basis(6)
    t = [np.sort(rng.uniform(0, 1, 9)), np.sort(rng.uniform(0, 1, 5))]
    Y = [rng.standard_normal((2, 9)), rng.standard_normal((2, 5))]
    ds = BandPowerDataset(t, Y, np.ones((2, 1)))
    s = DataSummary.build(ds, basis)
    B0 = basis.evaluate(t[0])
    np.testing.assert_allclose(s.BtB[0], B0.T @ B0)
    np.testing.assert_allclose(s.YB[0], Y[0] @ B0)
    np.testing.assert_allclose(s.yy[1], np.sum(Y[1] ** 2, axis=1))
    np.testing.assert_array_equal(s.m, [9, 5])


def test_spec_defaults_resolve():
    spec = ModelSpec().resolve(4, 12)
    assert spec.nu == 6 and spec.k1 == 4 and spec.k2 == 6
    np.testing.assert_array_equal(np.asarray(spec.S0), np.eye(4))


@pytest.mark.parametrize("kw", [{"prior_family": "XX"}, {"k": 0}, {"a12": 1.0}, {"noise_rate": 0.0},
                                {"nb_ridge": -1.0}, {"S0": ((1.0, 2.0), (2.0, 1.0))}])
def test_spec_validation(kw):
    with pytest.raises(ConfigurationError):
        ModelSpec(**kw)


def test_spec_rejects_low_wishart_df():
    with pytest.raises(ConfigurationError):
        ModelSpec(nu=2.0).resolve(4, 8)


def test_spec_dict_round_trip_and_unknown_keys():
    spec = ModelSpec(prior_family="SS", k1=2, S0=((2.0, 0.0), (0.0, 1.0)), basis={"q": 8, "domain": (0.0, 2.0)})
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec and again.digest() == spec.digest()
    with pytest.raises(ConfigurationError):
        ModelSpec.from_dict({"prior_family": "NS", "bogus": 1})


def test_mean_curves_shape_and_values():
    basis = build_basis(4)
    psi = np.zeros((2, 3, 4))
    psi[1, 2] = 1.0  # constant curve by partition of unity
    mu = mean_curves(psi, basis, np.linspace(0, 1, 7))
    assert mu.shape == (2, 3, 7)
    np.testing.assert_allclose(mu[1, 2], 1.0)
    np.testing.assert_allclose(mu[0], 0.0)


def test_expected_tau():
    np.testing.assert_allclose(expected_tau(2.0, 3.0, 3), [2.0, 6.0, 18.0])


def test_nb_precision_penalty_plus_ridge():
    from rrfda.model import nb_precision

    basis = build_basis(7)
    P = penalty_matrix(basis, 2)
    np.testing.assert_allclose(nb_precision(ModelSpec(nb_ridge=0.1), basis), P + 0.1 * np.trace(P) / 7 * np.eye(7))
