import numpy as np
import pytest
from scipy import sparse
from scipy.sparse.linalg import eigsh

from oracles import heat_gaussian_objective, legendre_sup_grid, legendre_sup_refined
from pam_lab import spectral_model as sm
from pam_lab import variational_solver as vs
from pam_lab.errors import ContractViolation, GridTooSmallError, IterationLimitError


@pytest.fixture(scope="module")
def opt035():
    return {th: vs.maximize_E_theta(th, 0.35) for th in (0.5, 1.0, 2.0)}


def test_objective_gaussian_oracle():
    H = 0.3
    g = vs.Profile.gaussian(4096, 20.0, 1.0)
    ref, J, K = heat_gaussian_objective(1.0, H, 1.0)
    assert vs.objective_H_theta(g, 1.0, H) == pytest.approx(ref, rel=1e-3)
    assert vs.spectral_energy(g, H) == pytest.approx(J, rel=1e-3)
    assert vs.kinetic_energy(g) == pytest.approx(K, rel=1e-3)


def test_objective_theta_zero_and_norm_check():
    g = vs.Profile.gaussian(1024, 10.0, 0.8)
    assert vs.objective_H_theta(g, 0.0, 0.3) < 0
    bad = g.with_values(g.values * 1.01)
    with pytest.raises(ContractViolation):
        vs.objective_H_theta(bad, 1.0, 0.3)


def test_objective_rescaling():
    H, theta = 0.3, 2.0
    a = theta ** (1 / (2 * H))
    g = vs.Profile.gaussian(8192, 20.0, 1.0)
    ga = vs.Profile.gaussian(8192, 20.0, 1.0 / a)
    lhs = vs.objective_H_theta(ga, theta, H)
    rhs = theta ** (1 / H) * vs.objective_H_theta(g, 1.0, H)
    assert lhs == pytest.approx(rhs, rel=1e-3)


def test_gradient_finite_differences():
    H, theta = 0.35, 1.3
    rng = np.random.default_rng(7)
    g = vs.Profile.gaussian(2048, 12.0, 1.1)
    gr = vs.grad_objective(g, theta, H)
    assert abs(gr @ g.values * g.h) < 1e-10
    for _ in range(20):
        d = rng.standard_normal(g.N)
        d -= (d @ g.values) / (g.values @ g.values) * g.values
        d /= np.sqrt(g.h * d @ d)
        eps = 1e-6

        def f(s):
            v = g.values + s * d
            return vs.objective_H_theta(g.with_values(v / np.sqrt(g.h * v @ v)), theta, H)

        fd = (f(eps) - f(-eps)) / (2 * eps)
        assert gr @ d == pytest.approx(fd, rel=1e-5)


def test_gradient_vanishes_at_discrete_ground_state():
    N, L = 801, 8.0
    p = vs.Profile.grid(N, L)
    T = sparse.diags([-np.ones(N - 1), 2 * np.ones(N), -np.ones(N - 1)], [-1, 0, 1]) / p.h ** 2
    w, v = eigsh(T.tocsc(), k=1, sigma=0)
    g = p.with_values(np.abs(v[:, 0]) / np.sqrt(p.h * v[:, 0] @ v[:, 0]))
    assert np.linalg.norm(vs.grad_objective(g, 0.0, 0.35)) < 1e-6


def test_maximize_properties(opt035):
    r = opt035[1.0]
    assert r.E_theta > 0
    assert np.all(np.diff(r.objective_history[-10:]) >= -1e-12)
    assert abs(r.profile.values[0]) < 1e-4 and abs(r.profile.values[-1]) < 1e-4
    assert abs(r.profile.norm2() - 1) < 1e-10
    v = r.profile.values
    assert np.sqrt(r.profile.h * np.sum((v - v[::-1]) ** 2)) < 1e-3
    # the Gaussian family gives a positive lower bound
    s = vs.gaussian_trial_width(1.0, 0.35)
    gauss = max(heat_gaussian_objective(1.0, 0.35, s * f)[0] for f in (0.5, 0.8, 1.0, 1.25, 2.0))
    assert gauss > 0 and r.E_theta >= gauss


def test_maximize_scaling_in_theta(opt035):
    H = 0.35
    base = opt035[1.0].E_theta
    assert opt035[2.0].E_theta / base == pytest.approx(2 ** (1 / H), rel=0.01)
    for th, r in opt035.items():
        assert r.E_theta / th ** (1 / H) == pytest.approx(base, rel=0.01)


def test_maximize_grid_refinement():
    H = 0.4
    spec = vs.default_grid(1.0, H)
    a = vs.maximize_E_theta(1.0, H, spec).E_theta
    b = vs.maximize_E_theta(1.0, H, {"N": 2 * spec["N"], "L": spec["L"]}).E_theta
    assert abs(a - b) / b < 0.005


def test_maximize_errors():
    with pytest.raises(IterationLimitError) as e:
        vs.maximize_E_theta(1.0, 0.35, {"N": 512, "L": 5.0}, {"max_iter": 3})
    assert e.value.best is not None
    s = vs.gaussian_trial_width(1.0, 0.35)
    with pytest.raises(GridTooSmallError):
        vs.maximize_E_theta(1.0, 0.35, {"N": 256, "L": 1.2 * s})
    with pytest.raises(ContractViolation):
        vs.maximize_E_theta(1.0, 0.2)


def test_multi_start():
    best, runs = vs.multi_start(1.0, 0.4, {"N": 2048, "L": 40 * vs.gaussian_trial_width(1.0, 0.4)})
    assert len(runs) == 5
    assert best.E_theta == max(r.E_theta for r in runs)


@pytest.mark.parametrize("H", [0.3, 0.35, 0.45])
def test_legendre(H):
    t, E = 0.7, 3.1
    K = (sm.c_h(H) / 2) ** (1 / H) * t * E
    q = 1 + 1 / H
    for lam in (0.5, 1.0, 2.0):
        v = vs.legendre_star(lam, H, t, E)
        assert v == pytest.approx(sm.c_hat(H, t, E) * lam ** (1 + H), rel=1e-8)
        assert v == pytest.approx(legendre_sup_refined(lam, K, q), rel=1e-10)
        assert v == pytest.approx(legendre_sup_grid(lam, K, q, beta_max=100.0), rel=1e-4)
    assert vs.legendre_star(1e-12, H, t, E) < 1e-14
    with pytest.raises(ContractViolation):
        vs.legendre_star(-1.0, H, t, E)


def test_product_ansatz(opt035):
    H, theta = 0.35, 2.0
    g0 = opt035[1.0].profile            # optimizer of H_{theta/2}
    J, K = vs.spectral_energy(g0, H), vs.kinetic_energy(g0)
    assert vs.product_ansatz_K(g0, 1.0, 2, H) == pytest.approx(-K + 0.5 * J, rel=1e-12)
    steps = [vs.product_ansatz_K(g0, theta, m + 1, H) - vs.product_ansatz_K(g0, theta, m, H) for m in range(2, 8)]
    np.testing.assert_allclose(steps, -0.5 * K + theta / 2 * J, rtol=1e-12)
    E = opt035[1.0].E_theta
    # at the optimizer the virial identity gives K_m/m = E_{theta/2} (1 - 1/(m H))
    for m in (5, 50, 1000):
        assert vs.product_ansatz_K(g0, theta, m, H) / m == pytest.approx(E * (1 - 1 / (m * H)), rel=2e-3)
    assert vs.product_ansatz_K(g0, theta, 10 ** 4, H) / 10 ** 4 == pytest.approx(E, rel=0.02)
    with pytest.raises(ContractViolation):
        vs.product_ansatz_K(g0, theta, 1, H)


def test_eigenvalue_free_and_constant():
    H, M, theta = 0.35, 2.0, 0.5
    free = vs.principal_eigenvalue_m2(0.0, M, H)
    assert abs(free) < 1e-3
    g0 = sm.gamma_trunc(0.0, M, H)
    const = vs.principal_eigenvalue_m2(theta, M, H, potential=lambda z: np.full_like(np.asarray(z, float), g0),
                                       check_mass=False)
    # a constant potential shifts the free spectrum by exactly 2 theta gamma_M(0)
    assert const - free == pytest.approx(2 * theta * g0, abs=1e-6)


def test_eigenvalue_monotone():
    H = 0.35
    lm = [vs.principal_eigenvalue_m2(0.5, M, H) for M in (1.0, 2.0, 4.0)]
    assert lm[0] <= lm[1] <= lm[2]
    lt = [vs.principal_eigenvalue_m2(th, 2.0, H) for th in (0.25, 0.5, 1.0)]
    assert lt[0] <= lt[1] <= lt[2]
