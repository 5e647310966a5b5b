"""Mild-form time stepping, chaos second moments and localized Picard iterates.

Heat semigroup: p_t has Fourier multiplier exp(-t xi^2 / 2), so u solves
du = 1/2 u'' dt + u W(dt, dx) in the Ito sense with u(0, .) = 1.
"""
import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from scipy import integrate, special
from scipy.interpolate import CubicSpline

from .errors import BlowUpError, ContractViolation, NumericalError
from .noise_sampler import (BLOCK, NoiseGrid, coefficients, density_from_coefficients,
                            n_workers)
from .spectral_model import c_h, check_H


@dataclass
class SolutionField:
    values: np.ndarray
    t: float
    x: np.ndarray = field(repr=False)
    scheme_meta: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write("# " + json.dumps(self.scheme_meta, sort_keys=True) + "\n")
            f.write("x,value\n")
            for a, b in zip(self.x, self.values):
                f.write(f"{float(a)!r},{float(b)!r}\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as f:
            meta = json.loads(f.readline()[1:])
        d = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
        return cls(d[:, 1], float(meta.get("t", np.nan)), d[:, 0], meta)


class TailDominanceError(NumericalError):
    pass


# ---------------------------------------------------------------- mild scheme

def padded_grid(half_width, h, t, dt, H, xi_max=None):
    """Centered periodic grid covering [-half_width, half_width] plus 8 sqrt(t) on each side."""
    nx = int(np.ceil(2 * (half_width + 8 * np.sqrt(t)) / h))
    nx = sfft.next_fast_len(nx + (nx % 2))
    nx += nx % 2
    return NoiseGrid.centered(nx, h, dt, H, xi_max)


@lru_cache(maxsize=64)
def _heat_multiplier(nx, h, lag):
    k = 2 * np.pi * sfft.rfftfreq(nx, h)
    return np.exp(-0.5 * lag * k * k)


def heat(u, lag, h):
    """p_lag * u on the periodic grid (last axis)."""
    nx = u.shape[-1]
    U = sfft.rfft(u, axis=-1, workers=n_workers())
    return sfft.irfft(U * _heat_multiplier(nx, h, float(lag)), nx, axis=-1, workers=n_workers())


def step_mild(field, slab, dt, h=None):
    """u <- p_dt * (u + u dW), with u taken at the left end of the step (Ito).

    `field` may be a SolutionField or an array (batched over leading axes);
    `slab` is a NoiseSlab or the density array itself.
    """
    dens = slab.density if hasattr(slab, "density") else slab
    if isinstance(field, SolutionField):
        hh = field.x[1] - field.x[0]
        if dt > hh * hh:
            warnings.warn(f"dt={dt:g} exceeds h^2={hh * hh:g}; the noise is under-resolved in time",
                          RuntimeWarning)
        v = heat(field.values * (1.0 + dens), dt, hh)
        return SolutionField(v, field.t + dt, field.x, dict(field.scheme_meta))
    return heat(field * (1.0 + dens), dt, h)


def _n_steps(t, dt):
    n = int(round(t / dt))
    if n < 1 or abs(n * dt - t) > 1e-9 * max(1.0, t):
        raise ContractViolation(f"t={t} is not a whole number of steps dt={dt}")
    return n


def solve_ensemble(t, grid, master_seed, replicas, checkpoints=None):
    """Run replicas side by side; returns (R, nx) fields at t (and checkpoint snapshots)."""
    if t <= 0:
        raise ContractViolation("t must be positive")
    n = _n_steps(t, grid.dt)
    replicas = np.atleast_1d(replicas)
    u = np.ones((len(replicas), grid.nx))
    snaps = {}
    chk = set(checkpoints or [])
    for s in range(n):
        A, B = coefficients(grid, s, master_seed, replicas)
        u = step_mild(u, density_from_coefficients(grid, A, B), grid.dt, grid.h)
        if not np.all(np.isfinite(u)):
            raise BlowUpError(f"non-finite values at step {s}", step=s)
        if s + 1 in chk:
            snaps[s + 1] = u.copy()
    return (u, snaps) if checkpoints else u


def solve(t, grid, master_seed, replica=0):
    u = solve_ensemble(t, grid, master_seed, [replica])[0]
    meta = {"t": t, "dt": grid.dt, "nx": grid.nx, "h": grid.h, "xi_max": grid.xi_max,
            "n_modes": grid.n_modes, "H": grid.H, "seed": int(master_seed), "replica": int(replica),
            "negative_fraction": float(np.mean(u < 0))}
    return SolutionField(u, t, grid.x, meta)


# ---------------------------------------------------------------- chaos terms

@dataclass
class ChaosTerm:
    order: int
    value: float
    quad_error: float


@dataclass
class ChaosSum:
    value: float
    truncation_bound: float
    terms: list


def _hat_weights_uniform(p, delta, nd, M):
    """w[d] = int hat(s) |d delta - s|^p 1(|d delta - s| <= M) ds, d = -nd..nd, hat of half-width delta."""
    def F0(x):
        return np.sign(x) * np.abs(x) ** (p + 1) / (p + 1)

    def F1(x):
        return np.abs(x) ** (p + 2) / (p + 2)

    x0 = np.arange(-nd, nd + 1) * delta
    out = np.zeros(len(x0))
    for sa, sb, sgn in ((-delta, 0.0, 1.0), (0.0, delta, -1.0)):
        xa = np.clip(x0 - sb, -M, M)
        xb = np.clip(x0 - sa, -M, M)
        out += (1 + sgn * x0 / delta) * (F0(xb) - F0(xa)) - sgn / delta * (F1(xb) - F1(xa))
    return out


def _exp_coeffs(a, dr):
    """Exact integrals of a linear-in-r source against exp(-a (r_end - r)) on one step."""
    z = a * dr
    big = z > 1e-3
    zs = np.where(big, z, 1.0)
    c0 = np.where(big, -np.expm1(-z) / zs, 1 - z / 2 + z * z / 6 - z ** 3 / 24)
    c2 = np.where(big, (1 - np.exp(-z) * (1 + z)) / zs ** 2, 0.5 - z / 3 + z * z / 8 - z ** 3 / 30)
    return np.exp(-z), dr * c0, dr * (c0 - c2)


def _truncated_raw(n_max, t, H, M, delta, nr, grade):
    """Orders 1..n_max of the second moment with every frequency increment cut at |xi| <= M.

    Variables: eta_i = xi_1 + ... + xi_i on a uniform grid of [-n M, n M] and
    times r on a graded grid.  P_k(r, eta) and Q_k(r, eta) are the recursion

        Q_k(r, .) = int_0^r P_k(r', .) e^{-(r - r') eta^2} dr'
        P_{k+1}(r, w) = int Q_k(r, eta) |w - eta|^{1-2H} 1(|w - eta| <= M) d eta

    with P_1 = |eta|^{1-2H} 1(|eta| <= M); order k is c_H^k int Q_k(t, eta) d eta.
    The eta-convolution is product integration of the piecewise linear Q, the
    r-integral is exact for piecewise linear P.
    """
    p = 1 - 2 * H
    nM = int(round(M / delta))
    delta = M / nM
    N = n_max * nM
    eta = np.arange(-N, N + 1) * delta
    r = t * (np.arange(nr + 1) / nr) ** grade
    a = eta ** 2
    L = 2 * N + 1
    nfft = sfft.next_fast_len(3 * L)
    wf = sfft.rfft(_hat_weights_uniform(p, delta, 2 * N, M), nfft)
    P1 = np.where(np.abs(eta) <= M + 1e-12, np.abs(eta) ** p, 0.0)
    # half value at the jump, so hat-function integrals of P1 stay second order
    P1[[N - nM, N + nM]] *= 0.5
    P = np.broadcast_to(P1, (nr + 1, L)).copy()
    coeffs = [_exp_coeffs(a, r[j + 1] - r[j]) for j in range(nr)]
    out = []
    for k in range(1, n_max + 1):
        Q = np.zeros_like(P)
        for j, (e, c0, c1) in enumerate(coeffs):
            Q[j + 1] = e * Q[j] + P[j] * c0 + (P[j + 1] - P[j]) * c1
        out.append(float(np.trapezoid(Q[-1], eta)))
        if k < n_max:
            conv = sfft.irfft(sfft.rfft(Q, nfft, axis=1) * wf, nfft, axis=1)
            P = conv[:, 2 * N:2 * N + L]
    return out


def _pair_weights(z, p):
    """W[i, j] = int hat_j(s) (|w_i - s|^p + (w_i + s)^p) ds on the nodes z (w = z)."""
    w = z
    W = np.zeros((len(w), len(z)))
    for a in range(len(z) - 1):
        za, zb = z[a], z[a + 1]
        dz = zb - za
        for sgn in (1.0, -1.0):
            xa, xb = sgn * za - w, sgn * zb - w
            lo, hi = np.minimum(xa, xb), np.maximum(xa, xb)
            I0 = (np.sign(hi) * np.abs(hi) ** (p + 1) - np.sign(lo) * np.abs(lo) ** (p + 1)) / (p + 1)
            I1 = (np.abs(hi) ** (p + 2) - np.abs(lo) ** (p + 2)) / (p + 2)
            Is = sgn * (I1 + w * I0)
            W[:, a + 1] += (Is - za * I0) / dz
            W[:, a] += (zb * I0 - Is) / dz
    return W


def _untruncated_raw(n_max, H, ratio, zmin, zmax, zlag=15.0):
    """Scale-free integrals I_k with order k = c_H^k t^{kH} I_k.

    Self-similarity gives P_k(r, w) = r^{b_k} phi_k(w sqrt(r)), b_1 = -(1-2H)/2,
    b_{k+1} = b_k + H, and the one-dimensional recursion

        psi_k(z) = int_0^1 u^{b_k} phi_k(z sqrt(u)) e^{-(1-u) z^2} du
        phi_{k+1}(w) = int psi_k(z) |w - z|^{1-2H} dz,   I_k = int psi_k.

    Functions live on a geometric grid in z; psi ~ A z^{-1-2H} beyond zmax.
    """
    p = 1 - 2 * H
    y = np.arange(np.log(zmin), np.log(zmax) + 1e-9, np.log(ratio))
    z = np.concatenate([[0.0], np.exp(y)])
    Z = z[-1]
    W = _pair_weights(z, p)
    s_of = lambda v: Z * v ** (-1 / (2 * H))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        tail = integrate.quad_vec(lambda v: Z ** (-2 * H) / (2 * H) * (np.abs(z - s_of(v)) ** p + (z + s_of(v)) ** p),
                                  0, 1, epsabs=0, epsrel=1e-10)[0]
    xl, wl = special.roots_laguerre(40)
    phi = z ** p
    b = -(1 - 2 * H) / 2
    out = []
    for k in range(1, n_max + 1):
        if k == 1:
            phif = lambda w: np.asarray(w, float) ** p
        else:
            spl = CubicSpline(y, phi[1:] / (1 + z[1:]) ** p)
            f0 = phi[1] / (1 + z[1]) ** p

            def phif(w, spl=spl, f0=f0):
                w = np.asarray(w, float)
                lw = np.log(np.clip(w, z[1], Z))
                return np.where(w >= z[1], spl(lw), f0) * (1 + w) ** p
        psi = np.empty_like(z)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            for i, zi in enumerate(z):
                if zi < zlag:
                    f = lambda u, zi=zi: phif(zi * np.sqrt(u)) * np.exp(-(1 - u) * zi * zi)
                    psi[i] = integrate.quad(f, 0, 1, weight="alg", wvar=(b, 0), limit=200,
                                            epsabs=0, epsrel=1e-10)[0]
                else:
                    u = 1 - xl / zi ** 2
                    psi[i] = np.sum(wl * u ** b * phif(zi * np.sqrt(u))) / zi ** 2
        A = psi[-1] * Z ** (1 + 2 * H)
        out.append(2 * (float(np.trapezoid(psi, z)) + A * Z ** (-2 * H) / (2 * H)))
        if k < n_max:
            phi = W @ psi + A * tail
        b += H
    return out


N_MAX = 4
DEFAULT_UNTRUNC = {"ratio": 1.03, "zmin": 1e-4, "zmax": 1e4}


@lru_cache(maxsize=16)
def _untruncated_table(H, ratio, zmin, zmax):
    fine = np.array(_untruncated_raw(N_MAX, H, ratio, zmin, zmax))
    coarse = np.array(_untruncated_raw(N_MAX, H, ratio ** 2, zmin, zmax))
    # second order in log(ratio): one Richardson step
    return fine + (fine - coarse) / 3, np.abs(fine - coarse) / 3


@lru_cache(maxsize=32)
def _truncated_table(t, H, M, delta, nr, grade):
    fine = np.array(_truncated_raw(N_MAX, t, H, M, delta, nr, grade))
    coarse = np.array(_truncated_raw(N_MAX, t, H, M, 2 * delta, nr, grade))
    # the |eta|^{1-2H} cusp at 0 leaves an O(delta^{2-2H}) error; one Richardson step
    corr = (fine - coarse) / (2 ** (2 - 2 * H) - 1)
    return fine + corr, np.abs(corr)


def default_truncated_spec(t, M):
    delta = min(0.02 * np.sqrt(0.1 / t), 0.05)
    return {"delta": max(delta, N_MAX * M / 1e5), "nr": 200, "grade": 2.0}


def chaos_kernel_norm(n, t, H, quad_spec=None, M=None):
    """Order-n contribution n! c_H^n ||F f_n||^2 to E[u(t,x)^2].

    With M given, every frequency variable is restricted to [-M, M] (the
    cutoff of the Feynman-Kac functional); otherwise the full spectral
    measure is used.  quad_error is the gap to a half-resolution run.
    """
    if int(n) != n or n < 0 or n > N_MAX:
        raise ContractViolation(f"chaos order must be in 0..{N_MAX}")
    if t <= 0:
        raise ContractViolation("t must be positive")
    H = check_H(H)
    if n == 0:
        return ChaosTerm(0, 1.0, 0.0)
    c = c_h(H)
    if M is None:
        q = dict(DEFAULT_UNTRUNC)
        q.update(quad_spec or {})
        vals, errs = _untruncated_table(H, q["ratio"], q["zmin"], q["zmax"])
        scale = c ** n * t ** (n * H)
        return ChaosTerm(n, float(scale * vals[n - 1]), float(scale * errs[n - 1]))
    q = default_truncated_spec(t, M)
    q.update(quad_spec or {})
    vals, errs = _truncated_table(float(t), H, float(M), float(q["delta"]), int(q["nr"]), float(q["grade"]))
    return ChaosTerm(n, float(c ** n * vals[n - 1]), float(c ** n * errs[n - 1]))


def second_moment_chaos(t, H, n_max=3, M=None, quad_spec=None, max_tail=0.05):
    """Sum of chaos orders 0..n_max; the last term is the truncation bound."""
    if n_max < 1 or n_max > N_MAX:
        raise ContractViolation(f"n_max must be in 1..{N_MAX}")
    terms = [chaos_kernel_norm(k, t, H, quad_spec, M) for k in range(n_max + 1)]
    total = sum(tm.value for tm in terms)
    last = terms[-1].value
    if last / total >= max_tail:
        raise TailDominanceError(f"last chaos term is {last / total:.1%} of the sum; reduce t")
    return ChaosSum(total, last, terms)


# ---------------------------------------------------------------- Picard iterates

def _kernel_hats(grid, n, beta, t_final=None):
    """FFT of the kernels p_{t_j - t_i}(y) 1(|y| <= beta sqrt(t_j)) for 0 <= i < j <= n."""
    nx, h, dt = grid.nx, grid.h, grid.dt
    k = 2 * np.pi * sfft.rfftfreq(nx, h)
    m = np.arange(nx)
    y = np.minimum(m, nx - m) * h
    K = np.empty((n + 1, n, len(k)), dtype=complex)
    for lag in range(1, n + 1):
        E = np.exp(-0.5 * lag * dt * k * k)
        for j in range(lag, n + 1):
            K[j, j - lag] = E
    if beta is None or not np.isfinite(beta):
        return K
    for j in range(1, n + 1):
        c = beta * np.sqrt(j * dt)
        outside = y > c
        for i in range(j):
            lag = (j - i) * dt
            if special.erfc(c / np.sqrt(2 * lag)) < 1e-17:
                continue
            ex = np.where(outside, np.exp(-y * y / (2 * lag)) / np.sqrt(2 * np.pi * lag) * h, 0.0)
            K[j, i] = K[j, i] - sfft.rfft(ex)
    return K


def picard_ensemble(beta, n_iters, t, grid, master_seed, replicas, localize_noise=True,
                    with_exact=False, all_iterates=False):
    """U_{beta,n}(t, .) for each replica, driven by the localized noise with shared coefficients.

    beta=None (or inf) removes both the noise localization and the kernel
    restriction; the iterates then converge to the mild scheme itself.
    Returns a dict with 'U' (R, nx), optionally 'u' from the paired exact run
    and 'iterates' [U_0 .. U_n] at time t.
    """
    if n_iters < 0:
        raise ContractViolation("n_iters must be >= 0")
    if beta is not None and np.isfinite(beta) and beta < 1:
        raise ContractViolation("beta must be >= 1")
    n = _n_steps(t, grid.dt)
    replicas = np.atleast_1d(replicas)
    nb = None if (beta is None or not np.isfinite(beta) or not localize_noise) else float(beta)
    K = _kernel_hats(grid, n, beta) if n_iters > 0 else None
    R, nx = len(replicas), grid.nx
    U_out = np.ones((R, nx))
    u_out = np.ones((R, nx)) if with_exact else None
    iters = [np.ones((R, nx))] if all_iterates else None
    if all_iterates:
        iters += [np.empty((R, nx)) for _ in range(n_iters)]
    w = n_workers()
    for c0 in range(0, R, BLOCK):
        sl = slice(c0, min(R, c0 + BLOCK))
        reps = replicas[sl]
        r = len(reps)
        dens = np.empty((n, r, nx))
        u = np.ones((r, nx))
        for s in range(n):
            A, B = coefficients(grid, s, master_seed, reps)
            dens[s] = density_from_coefficients(grid, A, B, nb)
            if with_exact:
                dex = dens[s] if nb is None else density_from_coefficients(grid, A, B)
                u = step_mild(u, dex, grid.dt, grid.h)
        if with_exact:
            u_out[sl] = u
        U = np.ones((n + 1, r, nx))
        for it in range(n_iters):
            G = sfft.rfft(U[:n] * dens, axis=-1, workers=w)
            Un = np.empty_like(U)
            Un[0] = 1.0
            for j in range(1, n + 1):
                S = np.einsum("ik,irk->rk", K[j, :j], G[:j])
                Un[j] = 1.0 + sfft.irfft(S, nx, axis=-1, workers=w)
            U = Un
            if all_iterates:
                iters[it + 1][sl] = U[n]
            if not np.all(np.isfinite(U[n])):
                raise BlowUpError(f"non-finite Picard iterate {it + 1}")
        U_out[sl] = U[n]
    res = {"U": U_out}
    if with_exact:
        res["u"] = u_out
    if all_iterates:
        res["iterates"] = iters
    return res


def picard_localized(beta, n_iters, t, grid, master_seed, replica=0):
    U = picard_ensemble(beta, n_iters, t, grid, master_seed, [replica])["U"][0]
    meta = {"t": t, "beta": beta, "n_iters": n_iters, "dt": grid.dt, "nx": grid.nx, "h": grid.h,
            "xi_max": grid.xi_max, "H": grid.H, "seed": int(master_seed), "replica": int(replica)}
    return SolutionField(U, t, grid.x, meta)


def separation_threshold(beta, n_iters, t):
    return 2 * n_iters * beta * (1 + np.sqrt(t))


def independence_grid(separation, beta, n_iters, t, H, h=0.1, dt=None):
    """Periodic grid long enough that the wrap-around distance also clears the threshold."""
    thr = separation_threshold(beta, n_iters, t)
    L = separation + max(thr, separation) + 8 * np.sqrt(t) + 4 * beta
    nx = sfft.next_fast_len(int(np.ceil(L / h)))
    nx += nx % 2
    return NoiseGrid.centered(nx, h, dt or t / 50, H)


def independence_gap(beta, n_iters, t, separation, n_samples, master_seed, grid=None, H=0.35):
    """Correlation of U_{beta,n}(t, 0) and U_{beta,n}(t, separation) over n_samples replicas."""
    thr = separation_threshold(beta, n_iters, t)
    if separation != 0 and separation < thr:
        raise ContractViolation(f"separation {separation} below the threshold {thr:.3f}")
    if separation == 0:
        return 1.0, 0.0
    grid = grid or independence_grid(separation, beta, n_iters, t, H)
    U = picard_ensemble(beta, n_iters, t, grid, master_seed, np.arange(n_samples))["U"]
    a = U[:, grid.node(0.0)]
    b = U[:, grid.node(separation)]
    r = float(np.corrcoef(a, b)[0, 1])
    se = (1 - r * r) / np.sqrt(n_samples - 1)
    return r, float(se)
