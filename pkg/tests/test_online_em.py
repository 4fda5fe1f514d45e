import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gemtrack.chain import ChainSampler, new_transition_matrix, random_transition_matrix
from gemtrack.errors import DegenerateFilter, DimensionMismatch, SingularCovariance
from gemtrack.online_em import (EMState, OnlineEM, e_step, em_init, filter_update, gaussian_weight,
                                log_weights, m_step, psd_floor, retrospective, sensor_estimates,
                                tpm_from_stats, writeback)
from gemtrack.scheduler import GAMMA
from gemtrack.sensors import (Observation, SensorLibrary, SubsetParams, observe, random_sensor_params,
                              subset_params)
from oracles import gaussian_logpdf

EMPTY = Observation(np.array([], dtype=np.int64), [])


def scalar_sp(mu=0.0, var=1.0):
    return SubsetParams(np.array([0]), np.array([1]), np.array([[mu]]), np.array([[[var]]]))


def one(y):
    return Observation(np.array([0]), [np.atleast_1d(np.asarray(y, dtype=float))])


class TestGaussianWeight:
    def test_at_mean(self):
        assert gaussian_weight(scalar_sp(1.5), 0, one(1.5), normalized=False) == 1.0

    def test_unnormalized(self):
        w = gaussian_weight(scalar_sp(), 0, one(1.0), normalized=False)
        assert w == pytest.approx(math.exp(-0.5)) == pytest.approx(0.60653, abs=5e-6)

    def test_density(self):
        w = gaussian_weight(scalar_sp(), 0, one(1.0), normalized=True)
        assert w == pytest.approx(0.24197, abs=5e-6)

    def test_empty(self):
        sp = SubsetParams(np.zeros(0, int), np.zeros(0, int), np.zeros((1, 0)), np.zeros((1, 0, 0)))
        assert gaussian_weight(sp, 0, EMPTY) == 1.0
        assert gaussian_weight(sp, 0, EMPTY, log=True) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            gaussian_weight(scalar_sp(), 0, Observation(np.array([0]), [np.zeros(2)]))

    def test_singular(self):
        with pytest.raises(SingularCovariance):
            gaussian_weight(scalar_sp(var=-1.0), 0, one(0.0))

    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_library_weights_match(self, seed, normalized):
        rng = np.random.default_rng(seed)
        lib = random_sensor_params(4, 3, [1, 2, 3, 2], rng)
        b = rng.random(4) < 0.6
        y = observe(lib, b, int(rng.integers(3)), rng)
        sp = subset_params(lib, b)
        ref = [gaussian_weight(sp, i, y, normalized, log=True) for i in range(3)]
        np.testing.assert_allclose(log_weights(lib, y, normalized), ref, rtol=1e-9, atol=1e-9)
        if normalized and not y.empty:
            oracle = [gaussian_logpdf(y.stacked, sp.means[i], sp.covs[i]) for i in range(3)]
            np.testing.assert_allclose(ref, oracle, rtol=1e-9, atol=1e-9)


class TestInit:
    def test_structure(self):
        lib = random_sensor_params(3, 4, 2, np.random.default_rng(0))
        b = np.array([1, 0, 1], bool)
        y = observe(lib, b, 2, np.random.default_rng(1))
        st_ = em_init(np.full(4, 0.25), y, subset_params(lib, b), b)
        assert np.all(st_.rho_a == 0)
        assert abs(st_.phi.sum() - 1) < 1e-12
        for a, k in enumerate([0, 2]):
            np.testing.assert_array_equal(st_.rho0[k], np.eye(4))
            for i in range(4):
                np.testing.assert_array_equal(st_.rho1[k, i, :, i], y.blocks[a])
                np.testing.assert_array_equal(st_.rho2[k, i, :, :, i], np.outer(y.blocks[a], y.blocks[a]))
                off = [j for j in range(4) if j != i]
                assert np.all(st_.rho1[k, i][:, off] == 0)
        assert np.all(st_.rho0[1] == 0) and np.all(st_.rho1[1] == 0)
        np.testing.assert_array_equal(st_.clock, [1, 0, 1])

    def test_no_evidence(self):
        pi = np.array([0.1, 0.2, 0.7])
        lib = random_sensor_params(2, 3, 1, np.random.default_rng(0))
        b = np.zeros(2, bool)
        st_ = em_init(pi, EMPTY, subset_params(lib, b), b)
        np.testing.assert_allclose(st_.phi, pi)

    def test_known_params_skip_sensor_stats(self):
        lib = random_sensor_params(2, 3, 1, np.random.default_rng(0))
        b = np.ones(2, bool)
        y = observe(lib, b, 0, np.random.default_rng(0))
        st_ = em_init(np.full(3, 1 / 3), y, subset_params(lib, b), b, learn_means=False,
                      learn_covs=False)
        assert st_.rho0 is None and st_.rho2 is None

    def test_degenerate(self):
        with pytest.raises(DegenerateFilter):
            em_init([1.0, 0.0], EMPTY, scalar_sp(), [False], log_g=np.array([-np.inf, 0.0]))


class TestFilterUpdate:
    def test_identity_no_evidence(self):
        st_ = EMState(np.array([0.2, 0.3, 0.5]), np.zeros((3, 3, 3)))
        out = filter_update(st_, new_transition_matrix(np.eye(3)), log_g=np.zeros(3))
        np.testing.assert_allclose(out, st_.phi)

    @pytest.mark.parametrize("q", [2, 4, 10])
    def test_weights_only(self, q):
        st_ = EMState(np.full(q, 1 / q), np.zeros((q, q, q)))
        g = np.ones(q)
        g[0] = 2.0
        out = filter_update(st_, new_transition_matrix(np.full((q, q), 1 / q)), log_g=np.log(g))
        assert out[0] == pytest.approx(2 / (q + 1))

    def test_degenerate(self):
        st_ = EMState(np.array([0.5, 0.5]), np.zeros((2, 2, 2)))
        with pytest.raises(DegenerateFilter):
            filter_update(st_, new_transition_matrix(np.eye(2)), log_g=np.full(2, -np.inf))

    @given(st.integers(0, 2**32 - 1))
    def test_simplex(self, seed):
        rng = np.random.default_rng(seed)
        q = int(rng.integers(1, 8))
        phi = rng.dirichlet(np.ones(q))
        out = filter_update(EMState(phi, np.zeros((q, q, q))), random_transition_matrix(q, rng),
                            log_g=rng.normal(0, 50, q))
        assert np.all(out >= 0) and abs(out.sum() - 1) < 1e-12


class TestRetrospective:
    def test_uniform(self):
        q = 4
        r = retrospective(EMState(np.full(q, 1 / q), None), new_transition_matrix(np.full((q, q), 1 / q)))
        np.testing.assert_allclose(r, np.full((q, q), 1 / q))

    def test_single_support(self):
        P = new_transition_matrix([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])
        r = retrospective(EMState(np.array([1.0, 0.0, 0.0]), None), P)
        np.testing.assert_allclose(r[0, :2], 1.0)
        # state 2 unreachable from the filter's support: guarded column
        np.testing.assert_allclose(r[:, 2], 1 / 3)

    @given(st.integers(0, 2**32 - 1))
    def test_columns_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        q = int(rng.integers(1, 8))
        phi = rng.dirichlet(np.ones(q) * 0.3)
        r = retrospective(EMState(phi, None), random_transition_matrix(q, rng))
        np.testing.assert_allclose(r.sum(axis=0), 1.0, atol=1e-9)
        assert np.all(r >= 0)


def _random_state(rng, N=3, q=4, n=2, covs=True):
    st_ = EMState(rng.dirichlet(np.ones(q)), rng.random((q, q, q)))
    st_.rho0 = rng.random((N, q, q))
    st_.rho1 = rng.normal(size=(N, q, n, q))
    st_.rho2 = rng.random((N, q, n, n, q)) if covs else None
    st_.clock = rng.integers(0, 5, N)
    return st_


class TestEStep:
    def test_full_step(self):
        rng = np.random.default_rng(0)
        st_ = _random_state(rng)
        r = retrospective(st_, random_transition_matrix(4, rng))
        e_step(st_, 5, r, EMPTY, np.zeros(3, bool), step=1.0)
        expect = np.zeros((4, 4, 4))
        for j in range(4):
            expect[:, j, j] = r[:, j]
        np.testing.assert_allclose(st_.rho_a, expect)

    def test_zero_step_is_pure_mixing(self):
        rng = np.random.default_rng(1)
        st_ = _random_state(rng)
        before = st_.rho_a.copy()
        r = retrospective(st_, random_transition_matrix(4, rng))
        e_step(st_, 5, r, EMPTY, np.zeros(3, bool), step=0.0)
        np.testing.assert_allclose(st_.rho_a, np.einsum("ijk,kl->ijl", before, r))

    def test_inactive_sensor_only_mixed(self):
        rng = np.random.default_rng(2)
        st_ = _random_state(rng)
        r0, clock = st_.rho0.copy(), st_.clock.copy()
        r = retrospective(st_, random_transition_matrix(4, rng))
        y = Observation(np.array([1]), [np.array([0.5, -0.5])])
        e_step(st_, 3, r, y, np.array([0, 1, 0], bool))
        np.testing.assert_allclose(st_.rho0[[0, 2]], r0[[0, 2]] @ r)
        np.testing.assert_array_equal(st_.clock, clock + [0, 1, 0])
        g = GAMMA(clock[1] + 1)
        np.testing.assert_allclose(st_.rho0[1], (1 - g) * (r0[1] @ r) + g * np.eye(4))

    def test_inactive_totals_non_increasing_uniform(self):
        q = 4
        rng = np.random.default_rng(3)
        st_ = _random_state(rng, q=q)
        st_.phi = np.full(q, 1 / q)
        r = retrospective(st_, new_transition_matrix(np.full((q, q), 1 / q)))
        for decay in (False, True):
            tot = st_.rho0.sum(axis=2)
            e_step(st_, 3, r, EMPTY, np.zeros(3, bool), decay_inactive=decay)
            assert np.all(st_.rho0.sum(axis=2) <= tot + 1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_filter_weighted_mass_preserved_without_evidence(self, seed):
        rng = np.random.default_rng(seed)
        q = int(rng.integers(2, 6))
        st_ = _random_state(rng, q=q)
        A = random_transition_matrix(q, rng)
        before = st_.rho0 @ st_.phi
        r = retrospective(st_, A)
        st_.phi = filter_update(st_, A, log_g=np.zeros(q))
        e_step(st_, 7, r, EMPTY, np.zeros(3, bool))
        np.testing.assert_allclose(st_.rho0 @ st_.phi, before, rtol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        st_ = _random_state(rng)
        r = retrospective(st_, random_transition_matrix(4, rng))
        y = Observation(np.array([0, 2]), [rng.normal(size=2), rng.normal(size=2)])
        e_step(st_, int(rng.integers(0, 100)), r, y, np.array([1, 0, 1], bool))
        assert np.all(st_.rho_a >= 0) and np.all(st_.rho0 >= 0)


class TestMStep:
    def test_scalar_moments(self):
        st_ = EMState(np.array([1.0]), np.ones((1, 1, 1)))
        st_.rho0 = np.array([[[2.0]]])
        st_.rho1 = np.array([[[[4.0]]]])
        st_.rho2 = np.array([[[[[10.0]]]]])
        st_.clock = np.array([1])
        A, sp = m_step(st_, new_transition_matrix([[1.0]]), scalar_sp(0.0, 5.0), [True],
                       known_means=False, known_covs=False)
        np.testing.assert_array_equal(A.p, [[1.0]])
        assert sp.means[0, 0] == pytest.approx(2.0)
        assert sp.covs[0, 0, 0] == pytest.approx(1.0)

    def test_known_params_unchanged(self):
        rng = np.random.default_rng(0)
        st_ = _random_state(rng, N=1, q=4, n=1)
        sp = SubsetParams(np.array([0]), np.array([1]), rng.normal(size=(4, 1)), np.ones((4, 1, 1)))
        _, out = m_step(st_, random_transition_matrix(4, rng), sp, [True], True, True)
        assert out is sp

    def test_zero_mass_row_keeps_previous(self):
        q = 3
        st_ = EMState(np.full(q, 1 / q), np.zeros((q, q, q)))
        st_.rho_a[0, 1, :] = 1.0
        prev = random_transition_matrix(q, np.random.default_rng(0))
        A = tpm_from_stats(st_, prev)
        np.testing.assert_allclose(A.p[0], [0, 1, 0])
        np.testing.assert_array_equal(A.p[1:], prev.p[1:])

    def test_floor(self):
        q = 3
        st_ = EMState(np.full(q, 1 / q), np.zeros((q, q, q)))
        for i in range(q):
            st_.rho_a[i, i, :] = 1.0
        A = tpm_from_stats(st_, new_transition_matrix(np.eye(q)), floor=1e-3)
        assert A.p.min() > 0
        np.testing.assert_allclose(A.p.sum(axis=1), 1.0, atol=1e-12)

    def test_insufficient_evidence_skipped(self):
        st_ = EMState(np.array([1.0, 0.0]), np.ones((2, 2, 2)))
        st_.rho0 = np.zeros((1, 2, 2))
        st_.rho0[0, 0, 0] = 1.0
        st_.rho1 = np.zeros((1, 2, 1, 2))
        st_.rho1[0, 0, 0, 0] = 3.0
        st_.rho2 = None
        st_.clock = np.array([1])
        sp = SubsetParams(np.array([0]), np.array([1]), np.array([[0.0], [7.0]]), np.ones((2, 1, 1)))
        _, out = m_step(st_, new_transition_matrix(np.eye(2)), sp, [True], False, True)
        np.testing.assert_allclose(out.means[:, 0], [3.0, 7.0])

    @given(st.integers(0, 2**32 - 1))
    def test_rows_stochastic(self, seed):
        rng = np.random.default_rng(seed)
        q = int(rng.integers(1, 7))
        st_ = EMState(rng.dirichlet(np.ones(q)), rng.random((q, q, q)) * (rng.random((q, q, q)) < 0.5))
        A = tpm_from_stats(st_, random_transition_matrix(q, rng))
        assert np.all(A.p >= 0)
        np.testing.assert_allclose(A.p.sum(axis=1), 1.0, atol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    def test_psd_floor(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(5, 3, 3))
        out = psd_floor(a)
        np.testing.assert_allclose(out, np.swapaxes(out, -1, -2), atol=1e-12)
        assert np.linalg.eigvalsh(out).min() >= 1e-6 - 1e-9


class TestWriteback:
    def _lib(self):
        return random_sensor_params(4, 3, [1, 2, 2, 3], np.random.default_rng(0))

    def test_empty_activation(self):
        lib = self._lib()
        ref = lib.copy()
        b = np.zeros(4, bool)
        writeback(lib, b, subset_params(lib, b))
        assert lib.equals(ref)

    @given(st.lists(st.booleans(), min_size=4, max_size=4))
    def test_round_trip_identity(self, bits):
        lib = self._lib()
        ref = lib.copy()
        writeback(lib, bits, subset_params(lib, bits))
        assert lib.equals(ref)

    def test_locality(self):
        lib = self._lib()
        ref = lib.copy()
        b = np.array([0, 0, 1, 0], bool)
        sp = subset_params(lib, b)
        sp.means[:] += 1.0
        sp.covs[:] *= 2.0
        writeback(lib, b, sp)
        for k in range(4):
            same = np.array_equal(lib.means_pad[k], ref.means_pad[k]) and \
                np.array_equal(lib.covs_pad[k], ref.covs_pad[k])
            assert same == (k != 2)
        np.testing.assert_allclose(lib.cov(2, 1), 2 * ref.cov(2, 1))

    def test_mismatch(self):
        lib = self._lib()
        sp = subset_params(lib, [1, 0, 0, 0])
        with pytest.raises(DimensionMismatch):
            writeback(lib, [0, 1, 0, 0], sp)


def _reference_run(A0, lib, pi, steps, known_means, known_covs, decay, floor):
    """Drive the public step functions by hand."""
    A_ref = A0
    state = None
    for t, (b, y) in enumerate(steps):
        if t == 0:
            state = em_init(pi, y, subset_params(lib, b), b, lib.n_max,
                            learn_means=not known_means, learn_covs=not known_covs,
                            log_g=log_weights(lib, y))
            continue
        log_g = log_weights(lib, y)
        r = retrospective(state, A_ref)
        state.phi = filter_update(state, A_ref, log_g=log_g)
        e_step(state, t, r, y, b, GAMMA, decay)
        A_ref, sp = m_step(state, A_ref, subset_params(lib, b), b, known_means, known_covs, floor)
        writeback(lib, b, sp)
    return A_ref, state


@pytest.mark.parametrize("known_means,known_covs,decay", [
    (True, True, False), (False, True, False), (False, False, False), (False, True, True),
    (True, False, True)])
def test_driver_matches_step_functions(known_means, known_covs, decay):
    rng = np.random.default_rng(42)
    q, N = 4, 3
    truth = random_sensor_params(N, q, [1, 2, 2], rng)
    A = random_transition_matrix(q, rng)
    steps, x = [], 0
    for t in range(150):
        x = int(rng.choice(q, p=A.p[x])) if t else 0
        b = rng.random(N) < 0.5
        steps.append((b, observe(truth, b, x, rng)))
    start = truth.copy()
    start.means_pad += rng.normal(0, 0.5, start.means_pad.shape)
    A0 = random_transition_matrix(q, rng)
    pi = np.full(q, 1 / q)

    lib_ref = start.copy()
    A_ref, st_ref = _reference_run(A0, lib_ref, pi, steps, known_means, known_covs, decay, 1e-6)

    lib = start.copy()
    em = OnlineEM(A0, lib, pi, known_means, known_covs, decay_inactive=decay, tpm_floor=1e-6)
    em.start(*steps[0])
    for t, (b, y) in enumerate(steps[1:], start=1):
        em.update(t, b, y)

    np.testing.assert_allclose(em.A_hat.p, A_ref.p, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(em.state.phi, st_ref.phi, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(em.state.rho_a, st_ref.rho_a, rtol=1e-9, atol=1e-12)
    for name in ("rho0", "rho1", "rho2", "clock"):
        a, b_ = getattr(em.state, name), getattr(st_ref, name)
        assert (a is None) == (b_ is None)
        if a is not None:
            np.testing.assert_allclose(a, b_, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(lib.means_pad, lib_ref.means_pad, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(lib.covs_pad, lib_ref.covs_pad, rtol=1e-9, atol=1e-10)


def test_m_step_start_delays_updates():
    rng = np.random.default_rng(0)
    lib = random_sensor_params(2, 3, 1, rng)
    A0 = random_transition_matrix(3, rng)
    em = OnlineEM(A0, lib, np.full(3, 1 / 3), m_step_start=5)
    b = np.ones(2, bool)
    em.start(b, observe(lib, b, 0, rng))
    for t in range(1, 5):
        assert em.update(t, b, observe(lib, b, 0, rng)) is A0
    assert em.update(5, b, observe(lib, b, 0, rng)) is not A0


def test_learned_covariances_psd():
    rng = np.random.default_rng(5)
    q = 3
    truth = random_sensor_params(2, q, 2, rng)
    A = random_transition_matrix(q, rng)
    est = truth.copy()
    est.covs_pad[...] = np.eye(2)
    est.invalidate()
    em = OnlineEM(random_transition_matrix(q, rng), est, np.full(q, 1 / q), known_means=True,
                  known_covs=False)
    x, sampler = 0, ChainSampler(A)
    for t in range(400):
        x = sampler.step(x, rng) if t else 0
        b = rng.random(2) < 0.7
        y = observe(truth, b, x, rng)
        em.start(b, y) if t == 0 else em.update(t, b, y)
        assert np.linalg.eigvalsh(est.covs_pad).min() >= 1e-6 - 1e-9
        assert abs(em.state.phi.sum() - 1) < 1e-12


def test_sensor_estimates_nan_without_evidence():
    st_ = EMState(np.array([1.0, 0.0]), np.zeros((2, 2, 2)))
    st_.rho0 = np.zeros((2, 2, 2))
    st_.rho1 = np.zeros((2, 2, 1, 2))
    means, covs = sensor_estimates(st_, np.array([0, 1]))
    assert np.all(np.isnan(means)) and covs is None
