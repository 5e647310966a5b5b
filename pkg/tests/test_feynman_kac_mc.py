import numpy as np
import pytest

from oracles import c_h_mp, expected_q1_dblquad
from pam_lab import feynman_kac_mc as fk
from pam_lab import spectral_model as sm
from pam_lab.errors import ContractViolation, NumericalError, ResourceError


def test_brownian_ensemble():
    e = fk.brownian_ensemble(3, 1.0, 1e-3, 5, start=0.7)
    assert e.paths.shape == (3, 1001)
    assert np.all(e.paths[:, 0] == 0.7)
    assert e.variance_check()
    bad = fk.BrownianEnsemble(3, 2e-3, 1.0, e.paths, e.start, 5)
    assert not bad.variance_check()
    assert np.array_equal(e.paths, fk.brownian_ensemble(3, 1.0, 1e-3, 5, start=0.7).paths)


def test_gamma_table():
    tab = fk.GammaTable(8.0, 0.35, 2.0)
    x = np.linspace(0, 2, 777)
    np.testing.assert_allclose(tab(x), sm.gamma_trunc(x, 8.0, 0.35), atol=1e-7 * sm.gamma_trunc(0.0, 8.0, 0.35))
    # one extension on demand
    y = np.array([0.0, 2.7])
    np.testing.assert_allclose(tab(y), sm.gamma_trunc(y, 8.0, 0.35), atol=1e-6)
    assert tab.x_max >= 2.7


def test_frozen_paths():
    t, M, H = 0.3, 4.0, 0.3
    q = fk.sample_Q(2, M, t, t / 300, H, 1, frozen=True)
    assert q.q1 == pytest.approx(t * M ** (2 - 2 * H) / (1 - H), rel=1e-12)
    q3 = fk.q1_batch(3, t, [M], H, 4, t / 300, frozen=True)[0]
    np.testing.assert_allclose(q3, 3 * t * M ** (2 - 2 * H) / (1 - H), rtol=1e-12)


def test_q_hat_identity():
    t, M, H, dt = 0.2, 4.0, 0.35, 0.2 / 256
    for r in range(5):
        q = fk.sample_Q(3, M, t, dt, H, 7, replica=r)
        assert q.q_hat == pytest.approx(2 * q.q1 + 3 * t * M ** (2 - 2 * H) / (1 - H), rel=1e-10)
    # against the full ordered double sum, diagonal included
    q1 = fk.q1_batch(3, t, [M], H, 50, dt, 7)[0]
    direct = fk.q_hat_direct(3, t, M, H, 50, dt, 7)
    np.testing.assert_allclose(fk.q_hat_from_q1(q1, 3, t, M, H), direct, rtol=1e-10)
    with pytest.raises(ContractViolation):
        fk.sample_Q(1, M, t, dt, H, 7)


def test_mean_q1_against_quadrature():
    t, M, H = 0.5, 4.0, 0.3
    q = fk.q1_batch(2, t, [M], H, 4000, seed=3)[0]
    ref = expected_q1_dblquad(t, M, H)
    assert abs(q.mean() - ref) < 4 * q.std(ddof=1) / np.sqrt(q.size)
    assert fk.expected_q1_m2(t, M, H) == pytest.approx(ref, rel=1e-8)


def test_moment_monotone_in_M():
    ests, gaps = fk.moment_sweep(2, 0.1, [2.0, 4.0, 8.0], 0.35, 4000, seed=2)
    for d, se in gaps:
        assert d > -2 * se
    assert ests[0].value < ests[1].value < ests[2].value


def test_start_point_monotonicity():
    a, b, (d, se) = fk.start_point_comparison(3, 0.2, 4.0, 0.35, 4000, seed=4)
    assert d > -2 * se
    assert a.value >= b.value


def test_moment_against_chaos():
    from pam_lab import pam_solver as ps
    e = fk.moment_estimate(2, 0.1, 16.0, 0.35, 20000, seed=8)
    chaos = ps.second_moment_chaos(0.1, 0.35, 3, M=16.0).value
    assert abs(e.value - chaos) < max(0.05 * chaos, 4 * e.se)


def test_log_space_no_overflow():
    lm, se, _ = fk.log_mean_exp(np.array([1000.0, 1001.0, 999.0]))
    assert np.isfinite(lm) and np.isfinite(se)
    e = fk.moment_estimate(6, 1.0, 16.0, 0.3, 100, dt=1 / 512, seed=1)
    assert np.isfinite(e.log_value) and np.isfinite(e.se_log)
    with pytest.raises(ContractViolation):
        fk.moment_estimate(1, 0.1, 4.0, 0.35, 10)


@pytest.mark.parametrize("m", [2, 3])
def test_scaling_identity(m):
    r = fk.scaling_identity_test(m, 0.25, 4.0, 0.4, 2000, seed=11)
    assert r.M2 == pytest.approx(m ** (-1 / 0.8) * 4.0)
    assert r.p_value > 0.01


def test_scaling_identity_trivial_and_control(record_property):
    r = fk.scaling_identity_test(1, 0.25, 4.0, 0.4, 100, seed=1)
    assert (r.statistic, r.p_value) == (0.0, 1.0)
    neg = fk.scaling_identity_test(2, 0.25, 4.0, 0.4, 2000, seed=11, M2=4.0)
    # negative control: recorded, not asserted
    record_property("negative_control_p", neg.p_value)
    with pytest.raises(ResourceError):
        fk.scaling_identity_test(2, 1.0, 4.0, 0.4, 10, dt=1e-8)


def test_eigenvalue_estimate_basic():
    assert fk.fk_eigenvalue_estimate(2.0, 0.0, 4.0, 0.35, 10).value == 0.0
    e = fk.fk_eigenvalue_estimate(2.0, 0.5, 4.0, 0.35, 2000, seed=1)
    assert e.value > 0 and e.se > 0 and e.extra["ess"] >= 50
    with pytest.raises(NumericalError):
        fk.fk_eigenvalue_estimate(16.0, 4.0, 4.0, 0.35, 200, seed=1)


@pytest.mark.xfail(strict=True, reason="the finite-t proxy approaches the eigenvalue from above; see the decisions ledger")
def test_eigenvalue_proxy_increases_in_t():
    a = fk.fk_eigenvalue_estimate(2.0, 0.5, 4.0, 0.35, 20000, seed=2)
    b = fk.fk_eigenvalue_estimate(2.0, 0.5, 16.0, 0.35, 20000, seed=3)
    assert b.value >= a.value - 2 * np.hypot(a.se, b.se)


def test_growth_fit():
    f1 = fk.moment_growth_fit([2, 3, 4], 0.25, 8.0, 0.4, 4000, seed=5, E=1.0)
    assert f1.ci[0] > 0
    assert f1.reference_slope == pytest.approx((c_h_mp(0.4) / 2) ** 2.5 * 0.25, rel=1e-10)
    f2 = fk.moment_growth_fit([2, 3, 4], 0.5, 8.0, 0.4, 4000, seed=5)
    assert f2.slope > f1.slope
    with pytest.raises(ContractViolation):
        fk.moment_growth_fit([2], 0.25, 8.0, 0.4, 100)
    with pytest.raises(ContractViolation):
        fk.moment_growth_fit([2, 7], 0.25, 8.0, 0.4, 100)
