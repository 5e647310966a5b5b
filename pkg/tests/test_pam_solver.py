import numpy as np
import pytest

from oracles import c_h_mp, expected_q1_dblquad, first_chaos_closed_form, truncated_second_moment_pde
from pam_lab import noise_sampler as ns
from pam_lab import pam_solver as ps
from pam_lab.errors import BlowUpError, ContractViolation


H = 0.35


def test_heat_step_keeps_constants():
    g = ns.NoiseGrid.centered(256, 0.05, 1e-3, H)
    f = ps.SolutionField(np.full(g.nx, 2.5), 0.0, g.x, {})
    out = ps.step_mild(f, np.zeros(g.nx), g.dt)
    assert np.max(np.abs(out.values - 2.5)) < 1e-12
    assert out.t == pytest.approx(g.dt)


def test_step_warns_when_dt_exceeds_h2():
    g = ns.NoiseGrid.centered(256, 0.01, 1e-3, H)
    f = ps.SolutionField(np.ones(g.nx), 0.0, g.x, {})
    with pytest.warns(RuntimeWarning):
        ps.step_mild(f, np.zeros(g.nx), 1e-3)


def test_one_step_mean():
    g = ns.NoiseGrid.centered(256, 0.05, 1e-3, H)
    u = ps.solve_ensemble(g.dt, g, 4, np.arange(10000))
    m = u.mean(axis=1)
    assert abs(m.mean() - 1) < 4 * m.std(ddof=1) / np.sqrt(m.size)


def test_solve_mean_and_stationarity():
    g = ns.NoiseGrid.centered(512, 0.05, 1e-3, H)
    u = ps.solve_ensemble(0.1, g, 8, np.arange(2000))
    m = u.mean(axis=1)
    assert abs(m.mean() - 1) < 4 * m.std(ddof=1) / np.sqrt(m.size)
    a, b = u[:, 100], u[:, 300]
    va, vb = a.var(ddof=1), b.var(ddof=1)
    se = np.sqrt(np.var((a - a.mean()) ** 2, ddof=1) / a.size + np.var((b - b.mean()) ** 2, ddof=1) / b.size)
    assert abs(va - vb) < 4 * se


def test_solve_field_and_csv(tmp_path):
    g = ns.NoiseGrid.centered(256, 0.05, 1e-3, H)
    f = ps.solve(0.02, g, 3, replica=5)
    assert f.scheme_meta["seed"] == 3 and f.scheme_meta["dt"] == 1e-3
    assert 0.0 <= f.scheme_meta["negative_fraction"] <= 1.0
    assert np.array_equal(f.values, ps.solve_ensemble(0.02, g, 3, np.arange(8))[5])
    p = tmp_path / "u.csv"
    f.to_csv(p)
    assert open(p).readline().startswith("# {")
    back = ps.SolutionField.from_csv(p)
    assert np.array_equal(back.values, f.values) and back.t == f.t
    with pytest.raises(ContractViolation):
        ps.solve(0.0, g, 3)
    with pytest.raises(ContractViolation):
        ps.solve(0.0105, g, 3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_reported(monkeypatch):
    g = ns.NoiseGrid.centered(256, 0.05, 1e-3, H)
    monkeypatch.setattr(ps, "density_from_coefficients", lambda grid, A, B, beta=None: np.full((A.shape[0], grid.nx), np.inf))
    with pytest.raises(BlowUpError) as e:
        ps.solve(0.01, g, 1)
    assert e.value.step == 0


def test_time_refinement_order():
    """Coarse steps use sums of fine increments, so all levels share one noise path."""
    t, K, R = 0.08, 9, 16
    g = ns.NoiseGrid.centered(256, 0.1, t / 2 ** K, H)
    n = 2 ** K
    D = np.array([ns.density_batch(g, s, 13, np.arange(R)) for s in range(n)])
    sols = {}
    # coarsest dt = 2.5e-3, about 1/xi_max^2; above that the error has not entered its asymptotic regime
    lo = 5
    for lev in range(lo, K + 1):
        m = 2 ** (K - lev)
        u = np.ones((R, g.nx))
        for s in range(2 ** lev):
            u = ps.step_mild(u, D[s * m:(s + 1) * m].sum(axis=0), t / 2 ** lev, g.h)
        sols[lev] = u
    err = [np.sqrt(np.mean((sols[l] - sols[l + 1]) ** 2)) for l in range(lo, K)]
    orders = np.log2(np.array(err[:-1]) / np.array(err[1:]))
    assert np.mean(orders) >= 0.25


def test_chaos_first_order_closed_form():
    for t, h in [(0.5, 0.3), (0.1, 0.35), (0.2, 0.45)]:
        c = ps.chaos_kernel_norm(1, t, h)
        ref = first_chaos_closed_form(t, h)
        assert c.value == pytest.approx(ref, rel=1e-3)
        assert c.quad_error < 1e-3 * ref
    assert ps.chaos_kernel_norm(0, 0.3, H).value == 1.0
    with pytest.raises(ContractViolation):
        ps.chaos_kernel_norm(5, 0.1, H)


def test_chaos_first_order_truncated():
    for M in (4.0, 16.0):
        c = ps.chaos_kernel_norm(1, 0.1, H, M=M)
        ref = c_h_mp(H) * expected_q1_dblquad(0.1, M, H)
        assert c.value == pytest.approx(ref, rel=1e-4)
        assert abs(c.value - ref) < c.quad_error


def test_chaos_scaling_in_t():
    for n in (1, 2, 3):
        a = ps.chaos_kernel_norm(n, 0.1, H).value
        b = ps.chaos_kernel_norm(n, 0.4, H).value
        assert b / a == pytest.approx(4 ** (n * H), rel=5e-3)
        # with a cutoff, time scaling by 4 pairs with frequency scaling by 1/2
        a = ps.chaos_kernel_norm(n, 0.1, H, M=16.0).value
        b = ps.chaos_kernel_norm(n, 0.4, H, M=8.0).value
        assert b / a == pytest.approx(4 ** (n * H), rel=5e-3)


def test_truncated_chaos_against_pde():
    ref = truncated_second_moment_pde(0.1, H, 16.0)
    s = ps.second_moment_chaos(0.1, H, 3, M=16.0)
    # the order-4 term is about 3e-4, the tail past it below 1e-4
    assert s.value == pytest.approx(ref, rel=5e-4)
    assert s.value < ref
    assert s.truncation_bound == s.terms[-1].value
    assert ps.second_moment_chaos(0.1, H, 4, M=16.0).value == pytest.approx(ref, rel=1e-4)


def test_second_moment_chaos_properties():
    vals = [ps.second_moment_chaos(0.1, H, n, max_tail=1.0).value for n in (1, 2, 3, 4)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert ps.second_moment_chaos(1e-8, H, 3).value == pytest.approx(1.0, abs=1e-3)
    a = ps.chaos_kernel_norm(1, 0.1, 0.45).value
    b = ps.chaos_kernel_norm(1, 0.1, 0.30).value
    ra, rb = first_chaos_closed_form(0.1, 0.45), first_chaos_closed_form(0.1, 0.30)
    assert (a < b) == (ra < rb)
    with pytest.raises(ps.TailDominanceError):
        ps.second_moment_chaos(20.0, H, 2)


def test_solver_vs_untruncated_chaos():
    g = ns.NoiseGrid.centered(800, 0.05, 1e-4, H)
    u = ps.solve_ensemble(0.1, g, 31, np.arange(200))
    m = (u ** 2).mean(axis=1)
    se = m.std(ddof=1) / np.sqrt(m.size)
    chaos = ps.second_moment_chaos(0.1, H, 3).value
    assert abs(m.mean() - chaos) < max(0.05 * chaos, 4 * se)


def test_picard_trivial_and_exact_limit():
    g = ns.NoiseGrid.centered(256, 0.1, 0.005, H)
    f = ps.picard_localized(2.0, 0, 0.05, g, 1)
    assert np.all(f.values == 1.0)
    # no localization and as many iterates as steps: the mild scheme itself
    r = ps.picard_ensemble(None, 10, 0.05, g, 1, np.arange(4), with_exact=True)
    assert np.max(np.abs(r["U"] - r["u"])) < 1e-12
    with pytest.raises(ContractViolation):
        ps.picard_localized(0.5, 2, 0.05, g, 1)


def test_picard_decay_in_beta_and_n():
    g = ns.NoiseGrid.centered(512, 0.1, 0.002, H)
    errs = []
    for b in (4.0, 8.0, 16.0):
        r = ps.picard_ensemble(b, 4, 0.1, g, 5, np.arange(32), with_exact=True)
        errs.append(np.sqrt(np.mean((r["U"] - r["u"]) ** 2)))
    assert errs[0] > errs[1] > errs[2]
    it = ps.picard_ensemble(8.0, 6, 0.1, g, 5, np.arange(32), all_iterates=True)["iterates"]
    d = [np.sqrt(np.mean((it[k] - it[k + 2]) ** 2)) for k in range(5)]
    assert all(a > b for a, b in zip(d, d[1:]))


def test_independence_gap():
    r, se = ps.independence_gap(1.0, 2, 0.1, 6.0, 400, 9)
    assert abs(r) < 3 / np.sqrt(400)
    assert ps.independence_gap(1.0, 2, 0.1, 0.0, 400, 9) == (1.0, 0.0)
    with pytest.raises(ContractViolation):
        ps.independence_gap(1.0, 2, 0.1, 3.0, 400, 9)
