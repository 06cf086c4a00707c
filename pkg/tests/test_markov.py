import math

import numpy as np
import pytest

from covermix.markov import (
    MarkovModel, ModelError, GapError, Observable, ObsTerm, FiberProfile,
    stationary, transfer_matrix, twisted, check_gap, oracle_fourier,
    oracle_fourier_batch, oracle_mc, reconstruct, split_window, random_model,
    drift_symmetrize, greenkubo_sigma,
)
from covermix.poly import smooth_bump, smooth_step, PiecewisePoly

from _models import pinned_three_state, bump_observable, two_term_observable, \
    random_admissible
from _oracles import path_enumeration_correlation, path_enumeration_phase_mean


class TestStationary:
    def test_doubly_stochastic_gives_uniform(self):
        t = np.array([[0.2, 0.5, 0.3], [0.5, 0.2, 0.3], [0.3, 0.3, 0.4]])
        nu = stationary(t)
        assert np.max(np.abs(nu - 1 / 3)) < 1e-13

    def test_two_state_switch(self):
        p, q = 0.3, 0.45
        t = np.array([[1 - p, p], [q, 1 - q]])
        nu = stationary(t)
        assert np.allclose(nu, np.array([q, p]) / (p + q), atol=1e-13)

    def test_random_fixed_point_residual(self):
        rng = np.random.default_rng(0)
        t = rng.random((5, 5)) + 0.05
        t /= t.sum(axis=1, keepdims=True)
        nu = stationary(t)
        assert np.max(np.abs(nu @ t - nu)) < 1e-13

    def test_rejects_reducible(self):
        t = np.array([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ModelError):
            stationary(t)

    def test_rejects_periodic(self):
        t = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(ModelError):
            stationary(t)


class TestModelValidation:
    def test_rejects_uncentered_kappa(self):
        t = np.array([[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(ModelError):
            MarkovModel(t, np.array([[1], [2]]), np.array([1.0, 1.0]))

    def test_rejects_nonpositive_tau(self):
        t = np.array([[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(ModelError):
            MarkovModel(t, np.array([[1], [-1]]), np.array([1.0, 0.0]))

    def test_drift_symmetrize_centers(self):
        rng = np.random.default_rng(1)
        trans = rng.random((3, 3)) + 0.1
        trans /= trans.sum(axis=1, keepdims=True)
        m = drift_symmetrize((trans, np.array([[1], [2], [0]]),
                              np.array([0.9, 1.1, 1.0])))
        assert np.max(np.abs(m.nu @ m.kappa)) < 1e-12

    def test_random_model_properties(self):
        for seed in range(5):
            m = random_admissible(seed)
            assert np.max(np.abs(m.nu @ m.trans - m.nu)) < 1e-13
            assert np.max(np.abs(m.nu @ m.kappa)) < 1e-12
            assert m.tau_min > 0


class TestTransferMatrix:
    def test_iid_model_averages(self):
        nu = np.array([0.5, 0.25, 0.25])
        trans = np.tile(nu, (3, 1))
        m = MarkovModel(trans, np.array([[0], [1], [-1]]), np.ones(3))
        P = transfer_matrix(m)
        f = np.array([2.0, -1.0, 3.0])
        assert np.allclose(P @ f, np.full(3, nu @ f), atol=1e-14)

    def test_reversible_chain_is_self_dual(self):
        # detailed balance makes the duality partner equal the chain itself
        nu = np.array([0.5, 0.3, 0.2])
        w = np.array([[0.0, 0.12, 0.08], [0.12, 0.0, 0.05], [0.08, 0.05, 0.0]])
        trans = w / nu[:, None]
        np.fill_diagonal(trans, 1 - trans.sum(axis=1))
        m = MarkovModel(trans, np.array([[1], [-1], [-1]]), np.ones(3) * 0.9)
        assert np.max(np.abs(transfer_matrix(m) - m.trans)) < 1e-13

    def test_duality_identity(self):
        m = pinned_three_state()
        P = transfer_matrix(m)
        rng = np.random.default_rng(2)
        for _ in range(5):
            fv, gv = rng.standard_normal(3), rng.standard_normal(3)
            lhs = float(m.nu @ ((P @ fv) * gv))
            rhs = float(m.nu @ (fv * (m.trans @ gv)))
            assert abs(lhs - rhs) < 1e-13

    def test_rows_sum_to_one(self):
        m = random_admissible(3)
        P = transfer_matrix(m)
        assert np.max(np.abs(P.sum(axis=1) - 1)) < 1e-12


class TestTwisted:
    def test_zero_twist_is_plain(self):
        m = pinned_three_state()
        assert np.max(np.abs(twisted(m, [0.0], 0.0) - transfer_matrix(m))) < 1e-15

    def test_iid_leading_eigenvalue_is_phase_mean(self):
        nu = np.array([0.5, 0.25, 0.25])
        trans = np.tile(nu, (3, 1))
        m = MarkovModel(trans, np.array([[0], [1], [-1]]), np.array([1.0, 0.8, 1.3]))
        th, xi = 0.7, -0.4
        lead = max(np.linalg.eigvals(twisted(m, [th], xi)), key=abs)
        expect = np.sum(nu * np.exp(1j * (th * m.kappa[:, 0] + xi * m.tau)))
        assert abs(lead - expect) < 1e-12

    @pytest.mark.parametrize("n", [1, 3, 6, 8])
    def test_power_identity_against_path_sums(self, n):
        m = pinned_three_state()
        th, xi = 0.9, 0.5
        M = twisted(m, [th], xi)
        # nu-average of P^n applied to 1 equals the path-sum phase mean
        val = m.nu @ (np.linalg.matrix_power(M, n) @ np.ones(3))
        expect = path_enumeration_phase_mean(m, [th], xi, n)
        assert abs(val - expect) < 1e-12

    def test_modulus_bounded_by_one(self):
        m = random_admissible(4)
        rng = np.random.default_rng(5)
        for _ in range(20):
            th = rng.uniform(-math.pi, math.pi, m.d)
            xi = rng.uniform(-3, 3)
            lead = np.max(np.abs(np.linalg.eigvals(twisted(m, th, xi))))
            assert lead <= 1.0 + 1e-12


class TestCheckGap:
    def test_iid_rank_one_certifies(self):
        nu = np.array([0.5, 0.25, 0.25])
        trans = np.tile(nu, (3, 1))
        m = MarkovModel(trans, np.array([[0], [1], [-1]]), np.array([1.0, 0.8, 1.3]))
        rep = check_gap(m, b=0.4, n_theta=24, n_xi=9)
        assert rep.ok and rep.second_max_inside < 1e-10

    def test_lattice_degenerate_mark_rejected(self):
        # marks on the even sublattice: phase at theta = pi is unimodular
        nu = np.array([0.5, 0.25, 0.25])
        trans = np.tile(nu, (3, 1))
        m = MarkovModel(trans, np.array([[0], [2], [-2]]), np.ones(3))
        with pytest.raises(GapError):
            check_gap(m, b=0.4, n_theta=24, n_xi=9)

    def test_report_matches_direct_eigensolve(self):
        m = random_admissible(6, n_states=4)
        rep = check_gap(m, b=0.5, n_theta=24, n_xi=9)
        rng = np.random.default_rng(7)
        for _ in range(20):
            th = rng.uniform(-0.5, 0.5, m.d)
            xi = rng.uniform(-0.5, 0.5)
            mods = np.sort(np.abs(np.linalg.eigvals(twisted(m, th, xi))))[::-1]
            assert mods[0] >= rep.lead_min_inside - 1e-10
            assert mods[1] <= rep.second_max_inside + 1e-10


class TestObservable:
    def test_mass_is_nu_weighted_profile_integral(self):
        m = pinned_three_state()
        f = bump_observable(m, phi=[1.0, 2.0, 0.5], mass=2.0)
        expect = float(m.nu @ np.array([1.0, 2.0, 0.5])) * 2.0
        # degree-16 monomial pieces carry ~1e-10 relative integration noise
        assert f.mass(m) == pytest.approx(expect, rel=1e-9)

    def test_flow_derivative_has_zero_mass(self):
        m = pinned_three_state()
        f = two_term_observable(m)
        # telescoping is exact; the residue is rounding in the large local
        # coefficients of the normalized degree-16 pieces
        assert abs(f.flow_derivative().mass(m)) < 5e-8

    def test_support_validation(self):
        m = pinned_three_state()
        bad = Observable([ObsTerm((0,), np.ones(3),
                                  FiberProfile(smooth_bump(-0.5, 0.5)))], 1)
        with pytest.raises(ModelError):
            bad.validate_support(m)
        over = Observable([ObsTerm((0,), np.ones(3),
                                   FiberProfile(smooth_bump(0.1, m.tau_max + 0.5)))], 1)
        with pytest.raises(ModelError):
            over.validate_support(m)


class TestReconstructAndSplit:
    def test_interior_family_is_plain_value(self):
        m = pinned_three_state()
        f = bump_observable(m, lo=0.05, hi=m.tau_min * 0.8)
        h = reconstruct(f, m)
        x = np.array([0, 1, 2])
        s = np.array([0.3, 0.4, 0.5])
        cells = np.zeros((3, 1), dtype=int)
        got = h(x, cells, s, np.array([1, 2, 0]))
        expect = f.family_value((0,), x, s)
        assert np.max(np.abs(got - expect)) < 1e-12

    def test_window_boundary_values(self):
        m = pinned_three_state()
        eps = m.tau_min / 10
        assert smooth_step(-eps, -eps, 0.0) == 0.0
        assert smooth_step(0.0, -eps, 0.0) == pytest.approx(1.0, rel=1e-12)
        xs = np.linspace(-eps, 0, 64)
        assert np.all(np.diff(smooth_step(xs, -eps, 0.0)) >= -1e-14)

    def test_split_then_reconstruct_inner_support_exact(self):
        # profiles clear of the gluing zones: the split is exact everywhere
        m = pinned_three_state()
        eps = m.tau_min / 10
        base = smooth_bump(eps * 0.2, m.tau_min - 1.2 * eps, k=5, mass=1.0)
        phi = np.array([1.0, 0.4, 1.7])
        obs = split_window(lambda c: [(phi, base)] if c == (0,) else [], m, [(0,)])
        h = reconstruct(obs, m)
        rng = np.random.default_rng(8)
        x = rng.integers(0, 3, 500)
        s = rng.random(500) * m.tau[x]
        x1 = rng.integers(0, 3, 500)
        got = h(x, np.zeros((500, 1), dtype=int), s, x1)
        assert np.max(np.abs(got - phi[x] * base(s))) < 1e-12

    def test_split_then_reconstruct_blends_at_roof(self):
        # mass below the floor is redistributed by the window: away from the
        # roof the reconstruction is exact; inside the last eps it equals the
        # declared interpolation between the two sheets
        m = pinned_three_state()
        eps = m.tau_min / 10
        base = smooth_bump(-eps * 0.9, m.tau_min * 0.8, k=5, mass=1.0)
        phi = np.array([1.0, 0.4, 1.7])
        obs = split_window(lambda c: [(phi, base)] if c == (0,) else [], m, [(0,)])
        h = reconstruct(obs, m)
        rng = np.random.default_rng(9)
        x = rng.integers(0, 3, 600)
        s = rng.random(600) * m.tau[x]
        x1 = rng.integers(0, 3, 600)
        got = h(x, np.zeros((600, 1), dtype=int), s, x1)
        inner = s <= m.tau[x] - eps
        assert np.any(inner) and np.any(~inner)
        assert np.max(np.abs(got[inner] - phi[x[inner]] * base(s[inner]))) < 1e-10
        w = smooth_step(s - m.tau[x], -eps, 0.0)
        lifted = np.where(m.kappa[x][:, 0] == 0, phi[x1] * base(s - m.tau[x]), 0.0)
        blend = (1 - w) * phi[x] * base(s) + w * lifted
        assert np.max(np.abs(got - blend)) < 1e-10

    def test_split_profiles_respect_support(self):
        m = pinned_three_state()
        obs = split_window(lambda c: [(np.ones(3), smooth_bump(-0.05, 1.0, k=4))],
                           m, [(0,)])
        obs.validate_support(m)


class TestOracleFourier:
    def test_matches_path_enumeration_small_t(self):
        m = pinned_three_state()
        f = bump_observable(m, phi=[1.0, 0.5, 0.25])
        g = bump_observable(m, phi=[0.3, 1.0, 0.7], lo=0.1, hi=0.7)
        t = 6.5
        exact = path_enumeration_correlation(m, f, g, t)
        got = oracle_fourier(m, f, g, t, allow_small_t=True)
        assert got == pytest.approx(exact, abs=1e-10)

    def test_zero_g_gives_zero(self):
        m = pinned_three_state()
        f = bump_observable(m)
        g = bump_observable(m, phi=[0.0, 0.0, 0.0])
        assert oracle_fourier(m, f, g, 20.0, allow_small_t=True) == pytest.approx(0.0, abs=1e-13)

    def test_shift_covariance(self):
        m = pinned_three_state()
        f = bump_observable(m, cell=(0,))
        g = bump_observable(m, cell=(1,), lo=0.1, hi=0.7)
        f2 = bump_observable(m, cell=(3,))
        g2 = bump_observable(m, cell=(4,), lo=0.1, hi=0.7)
        t = 7.0
        a = oracle_fourier(m, f, g, t, allow_small_t=True)
        b = oracle_fourier(m, f2, g2, t, allow_small_t=True)
        assert a == pytest.approx(b, abs=1e-12)

    def test_requires_a_continuous_side(self):
        m = pinned_three_state()
        rough = Observable([ObsTerm((0,), np.ones(3),
                                    FiberProfile(PiecewisePoly([0.1, 0.5], [[1.0]])))], 1)
        with pytest.raises(ModelError):
            oracle_fourier_batch(m, rough, rough, [40.0])

    def test_d2_model_against_path_enumeration(self):
        m = random_admissible(11, n_states=3, d=2)
        f = bump_observable(m, cell=(0, 0))
        g = bump_observable(m, cell=(1, 0), lo=0.1, hi=m.tau_min * 0.88)
        t = 4.2
        exact = path_enumeration_correlation(m, f, g, t)
        got = oracle_fourier_batch(m, f, g, [t], tol=5e-8, trunc_tol=1e-9,
                                   allow_small_t=True)[t][0]
        assert got == pytest.approx(exact, abs=1e-7)


class TestOracleMC:
    def test_rejects_small_N(self):
        m = pinned_three_state()
        f = bump_observable(m)
        with pytest.raises(ModelError):
            oracle_mc(m, f, f, 1.0, N=100, seed=1)

    def test_zero_f_gives_zero(self):
        m = pinned_three_state()
        f = bump_observable(m, phi=[0.0, 0.0, 0.0])
        g = bump_observable(m)
        est, se = oracle_mc(m, f, g, 5.0, N=20_000, seed=2)
        assert est == 0.0

    def test_t_zero_total_mass_against_closed_form(self):
        # g == 1 assembled by the splitter; C_0(f, 1) is the plain integral
        m = pinned_three_state()
        f = bump_observable(m, phi=[1.0, 2.0, 0.5], mass=1.0)
        cells = [(c,) for c in range(-3, 4)]
        ones = split_window(lambda c: [(np.ones(3), PiecewisePoly(
            [-m.tau_min / 10 * 0.999, m.tau_max * 1.0], [[1.0]]))], m, cells)
        est, se = oracle_mc(m, f, ones, 0.0, N=200_000, seed=3)
        expect = f.mass(m)
        assert abs(est - expect) <= 3.5 * se + 1e-12

    def test_determinism(self):
        m = pinned_three_state()
        f = bump_observable(m)
        g = bump_observable(m, lo=0.1, hi=0.8)
        a = oracle_mc(m, f, g, 8.0, N=50_000, seed=7)
        b = oracle_mc(m, f, g, 8.0, N=50_000, seed=7)
        assert a == b

    def test_agrees_with_fourier(self):
        m = pinned_three_state()
        f = bump_observable(m, phi=[1.0, 0.5, 0.25])
        g = bump_observable(m, phi=[0.3, 1.0, 0.7], lo=0.1, hi=0.7)
        t = 14.0
        direct = oracle_fourier(m, f, g, t, allow_small_t=True)
        est, se = oracle_mc(m, f, g, t, N=400_000, seed=11)
        assert abs(est - direct) <= 3.5 * se


class TestGreenKubo:
    def test_iid_model_is_plain_covariance(self):
        nu = np.array([0.5, 0.25, 0.25])
        trans = np.tile(nu, (3, 1))
        m = MarkovModel(trans, np.array([[0], [1], [-1]]), np.array([1.0, 0.8, 1.3]))
        v = np.concatenate([m.kappa.astype(float),
                            (m.tau - m.nutau)[:, None]], axis=1)
        v -= nu @ v
        expect = v.T @ (nu[:, None] * v)
        got = greenkubo_sigma(m)
        assert np.max(np.abs(got - expect)) < 1e-13
