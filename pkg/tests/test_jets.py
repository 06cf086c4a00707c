import math

import numpy as np
import pytest

from covermix.jets import (
    SpectralJet, matrix_jet, matrix_taylor, eigen_jet, clt_matrix, detect_J,
    bm_form, jet_mul, ConditioningError,
)
from covermix.markov import MarkovModel, transfer_matrix, twisted, greenkubo_sigma
from covermix.symtensor import canonical_indices

from _models import pinned_three_state, random_admissible
from _oracles import fd_derivative_tensor


def tracked_leading(model, s):
    """Leading eigentriple at a twist point, for FD oracles."""
    th, xi = s[:-1], s[-1]
    M = twisted(model, th, xi)
    w, vr = np.linalg.eig(M)
    i = int(np.argmax(np.abs(w)))
    lam = w[i]
    v = vr[:, i]
    wl_vals, wl_vecs = np.linalg.eig(M.T)
    j = int(np.argmin(np.abs(wl_vals - lam)))
    u = wl_vecs[:, j]
    return lam, v, u


def tracked_lambda(model):
    def f(s):
        return np.array([tracked_leading(model, s)[0]])
    return f


def tracked_pi(model):
    def f(s):
        lam, v, u = tracked_leading(model, s)
        return np.outer(v, u) / (u @ v)
    return f


class TestMatrixJet:
    def test_zero_order_is_transfer(self):
        m = pinned_three_state()
        assert np.max(np.abs(matrix_jet(m, (0, 0)) - transfer_matrix(m))) < 1e-15

    def test_single_roof_derivative(self):
        m = pinned_three_state()
        got = matrix_jet(m, (0, 1))
        expect = transfer_matrix(m) * (1j * m.tau)[None, :]
        assert np.max(np.abs(got - expect)) < 1e-15

    @pytest.mark.parametrize("alpha", [(3, 0), (2, 1), (1, 2), (0, 3)])
    def test_order_three_against_fd(self, alpha):
        m = pinned_three_state()

        def fn(s):
            return twisted(m, s[:-1], s[-1])

        fd = fd_derivative_tensor(fn, np.zeros(2), sum(alpha), h=5e-3)
        # collapse the direction axes onto the requested multi-index
        idx = tuple()
        for i, a in enumerate(alpha):
            idx += (i,) * a
        sel = fd
        for i in idx:
            sel = sel[i]
        got = matrix_jet(m, alpha)
        rel = np.max(np.abs(got - sel)) / max(1.0, np.max(np.abs(got)))
        assert rel < 1e-6


class TestEigenJet:
    def test_order_zero_values(self):
        m = pinned_three_state()
        jet = eigen_jet(m, 4)
        assert jet.lambda_jet[0].value == pytest.approx(1.0, abs=1e-13)
        pi0 = jet.pi_jet[0][()]
        expect = np.outer(np.ones(3), m.nu)
        assert np.max(np.abs(pi0 - expect)) < 1e-12

    def test_first_recentered_jet_vanishes(self):
        m = pinned_three_state()
        jet = eigen_jet(m, 4)
        assert jet.lambda_tilde_jet[1].norm_inf() < 1e-13

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_lambda_jets_match_fd(self, seed):
        m = random_admissible(seed, n_states=4)
        jet = eigen_jet(m, 4)
        f = tracked_lambda(m)
        for order in range(1, 5):
            step = 0.02 if order < 4 else 0.04
            fd = np.squeeze(fd_derivative_tensor(f, np.zeros(2), order, h=step,
                                                 levels=3), axis=-1)
            got = jet.lambda_jet[order].to_dense()
            scale = max(1.0, np.max(np.abs(got)))
            assert np.max(np.abs(got - fd)) / scale < 1e-6

    @pytest.mark.parametrize("seed", [3, 4])
    def test_pi_jets_match_fd(self, seed):
        m = random_admissible(seed, n_states=4)
        jet = eigen_jet(m, 3)
        f = tracked_pi(m)
        for order in range(1, 4):
            fd = fd_derivative_tensor(f, np.zeros(2), order, h=2e-2, levels=3)
            for key in canonical_indices(order, 2):
                sel = fd
                for i in key:
                    sel = sel[i]
                got = jet.pi_jet[order][key]
                scale = max(1.0, np.max(np.abs(got)))
                assert np.max(np.abs(got - sel)) / scale < 1e-6

    def test_projector_idempotence_jets(self):
        m = pinned_three_state()
        L = 8
        jet = eigen_jet(m, L)
        pic = jet.pi_taylor()
        D = jet.dim
        from covermix.jets import jet_zero, _jet_add
        for order in range(L + 1):
            acc = jet_zero(order, D, pic[0][()].shape)
            for a in range(order + 1):
                acc = _jet_add(acc, jet_mul(pic[a], pic[order - a], a, order - a,
                                            D, lambda X, Y: X @ Y))
            err = max(np.max(np.abs(acc[k] - pic[order][k])) for k in acc)
            assert err < 1e-9

    def test_eigen_relation_jets(self):
        m = pinned_three_state()
        L = 8
        jet = eigen_jet(m, L)
        Pc = matrix_taylor(m, L)
        lamc = jet._lam_taylor
        pic = jet.pi_taylor()
        from covermix.jets import jet_zero, _jet_add
        for order in range(L + 1):
            acc = jet_zero(order, jet.dim, Pc[0][()].shape)
            for a in range(order + 1):
                acc = _jet_add(acc, jet_mul(Pc[a], pic[order - a], a, order - a,
                                            jet.dim, lambda X, Y: X @ Y))
                acc = _jet_add(acc, jet_mul(lamc[a], pic[order - a], a, order - a,
                                            jet.dim, lambda s, Y: s * Y),
                               alpha=-1.0)
            err = max(np.max(np.abs(v)) for v in acc.values())
            assert err < 1e-9

    def test_state_relabeling_invariance(self):
        m = pinned_three_state()
        jet = eigen_jet(m, 4)
        perm = np.array([2, 0, 1])
        m2 = MarkovModel(m.trans[np.ix_(perm, perm)], m.kappa[perm], m.tau[perm])
        jet2 = eigen_jet(m2, 4)
        for order in range(5):
            assert (jet.lambda_jet[order] - jet2.lambda_jet[order]).norm_inf() < 1e-10


class TestCltMatrix:
    def test_iid_model_is_plain_covariance(self):
        nu = np.array([0.5, 0.25, 0.25])
        trans = np.tile(nu, (3, 1))
        m = MarkovModel(trans, np.array([[0], [1], [-1]]), np.array([1.0, 0.8, 1.3]))
        jet = eigen_jet(m, 3)
        v = np.concatenate([m.kappa.astype(float), (m.tau - m.nutau)[:, None]],
                           axis=1)
        v -= nu @ v
        expect = v.T @ (nu[:, None] * v)
        assert np.max(np.abs(clt_matrix(jet).mat - expect)) < 1e-12

    def test_symmetric_marks_kill_cross_terms(self):
        m = random_admissible(7)
        m2 = MarkovModel(*_mark_symmetrized(m))
        jet = eigen_jet(m2, 2)
        sig = clt_matrix(jet).mat
        assert abs(sig[0, 1]) < 1e-10

    @pytest.mark.parametrize("seed", [5, 6, 7])
    def test_matches_greenkubo_series(self, seed):
        m = random_admissible(seed)
        jet = eigen_jet(m, 2)
        gk = greenkubo_sigma(m)
        assert np.max(np.abs(clt_matrix(jet).mat - gk)) < 1e-9


def _mark_symmetrized(m):
    # doubled model whose mark distribution is symmetric and roof copies equal
    S = m.n_states
    eps = 0.35
    big = np.zeros((2 * S, 2 * S))
    big[:S, :S] = (1 - eps) * m.trans
    big[:S, S:] = eps * m.trans
    big[S:, :S] = eps * m.trans
    big[S:, S:] = (1 - eps) * m.trans
    kap = np.concatenate([m.kappa, -m.kappa], axis=0)
    tau = np.concatenate([m.tau, m.tau])
    return big, kap, tau


class TestDetectJ:
    def test_generic_model_is_three(self):
        m = pinned_three_state()
        jet = eigen_jet(m, 6)
        assert jet.J == 3

    def test_symmetric_model_reaches_four(self):
        # marks +-1 with equal weight and constant roof: third cumulant zero
        nu = np.array([0.5, 0.5])
        trans = np.tile(nu, (2, 1))
        m = MarkovModel(trans, np.array([[1], [-1]]), np.array([1.0, 1.0]))
        jet = eigen_jet(m, 6)
        assert jet.J >= 4

    def test_fair_coin_matches_until_fourth_cumulant(self):
        # cos(theta) vs the Gaussian: they split exactly at order 4
        nu = np.array([0.5, 0.5])
        trans = np.tile(nu, (2, 1))
        m = MarkovModel(trans, np.array([[1], [-1]]), np.array([1.0, 1.0]))
        jet = eigen_jet(m, 6)
        assert jet.J == 4


class TestBmForm:
    def test_order_zero_is_product_of_means(self):
        m = pinned_three_state()
        jet = eigen_jet(m, 3)
        rng = np.random.default_rng(9)
        F, G = rng.standard_normal(3), rng.standard_normal(3)
        got = bm_form(m, jet, F, G, 0).value
        assert got == pytest.approx(float((m.nu @ F) * (m.nu @ G)), abs=1e-13)

    def test_unit_left_argument(self):
        m = pinned_three_state()
        jet = eigen_jet(m, 3)
        G = np.array([0.3, -1.0, 0.5])
        got = bm_form(m, jet, np.ones(3), G, 2)
        pi2 = jet.pi_jet[2]
        for key in got.coeffs:
            expect = m.nu @ (G * (pi2[key] @ np.ones(3)))
            assert got[key] == pytest.approx(complex(expect), abs=1e-13)

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_matches_finite_horizon_limit(self, order):
        m = pinned_three_state()
        jet = eigen_jet(m, 4)
        rng = np.random.default_rng(10)
        F, G = rng.standard_normal(3), rng.standard_normal(3)
        got = bm_form(m, jet, F, G, order).to_dense()

        def correlator(n):
            def fn(s):
                th, xi = s[:-1], s[-1]
                phase = np.exp(1j * (m.kappa @ th + xi * m.tau))
                A = phase[:, None] * m.trans
                val = (m.nu * F) @ np.linalg.matrix_power(A, n) @ G
                lam, _, _ = tracked_leading(m, s)
                return np.asarray(val * lam ** (-n))
            return fn

        fd60 = fd_derivative_tensor(correlator(60), np.zeros(2), order, h=2e-2)
        fd120 = fd_derivative_tensor(correlator(120), np.zeros(2), order, h=2e-2)
        scale = max(1.0, np.max(np.abs(got)))
        assert np.max(np.abs(np.asarray(fd60) - np.asarray(fd120))) / scale < 1e-5
        assert np.max(np.abs(got - np.asarray(fd120))) / scale < 1e-5
