"""Hurst parameter, closed-form constants and the spectral measure |xi|^(1-2H).

Fourier convention: F g(xi) = int e^{-i xi x} g(x) dx.
"""
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import ContractViolation, NumericalError

H_LOW, H_HIGH = 0.25, 0.5


def check_H(H):
    """Reject H outside the open interval (1/4, 1/2)."""
    H = float(H)
    if not (H_LOW < H < H_HIGH):
        raise ContractViolation(f"H={H} outside the open interval (1/4, 1/2)")
    return H


def c_h(H):
    """c_H = Gamma(2H+1) sin(pi H) / (2 pi), defined for 0 < H < 1."""
    H = float(H)
    if not (0.0 < H < 1.0):
        raise ContractViolation(f"c_h needs 0 < H < 1, got {H}")
    return special.gamma(2 * H + 1) * np.sin(np.pi * H) / (2 * np.pi)


def c0(H):
    H = check_H(H)
    return (1 + H) * (c_h(H) / 2) ** (1 / (1 + H)) * (1 / H) ** (H / (1 + H))


def c_hat(H, t, E):
    """Tail constant [(1+H) c_H/2 ((1+1/H) t E)^H]^{-1}."""
    H = check_H(H)
    if t <= 0 or E <= 0:
        raise ContractViolation("c_hat needs t > 0 and E > 0")
    return 1.0 / ((1 + H) * c_h(H) / 2 * ((1 + 1 / H) * t * E) ** H)


@dataclass(frozen=True)
class HurstModel:
    H: float
    tolerance: float = 1e-12

    def __post_init__(self):
        check_H(self.H)

    @property
    def c_H(self):
        return c_h(self.H)

    @property
    def c0(self):
        return c0(self.H)

    def c_hat(self, t, E):
        return c_hat(self.H, t, E)

    def to_dict(self):
        return {"H": self.H, "c_H": self.c_H, "c0": self.c0}


def _gamma_trunc_scalar(x, M, H, tol):
    x = abs(float(x))
    if x == 0.0:
        return M ** (2 - 2 * H) / (1 - H)
    p = 1 - 2 * H
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(lambda xi: xi ** p, 0.0, M, weight="cos", wvar=x,
                                  epsabs=tol, epsrel=tol, limit=400)
    scale = M ** (2 - 2 * H)
    if err > 1e3 * tol * scale:
        raise NumericalError(f"gamma_trunc quadrature did not converge at x={x}", achieved=2 * err)
    return 2.0 * val


def gamma_trunc(x, M, H, tol=1e-12):
    """gamma_M^1(x) = int_{-M}^{M} cos(xi x) |xi|^{1-2H} dxi.

    Oscillatory QUADPACK rule (weight cos) on [0, M]; x may be an array.
    """
    if M <= 0:
        raise ContractViolation("cutoff M must be positive")
    if np.ndim(x) == 0:
        return _gamma_trunc_scalar(x, M, H, tol)
    xa = np.asarray(x, dtype=float)
    out = np.array([_gamma_trunc_scalar(v, M, H, tol) for v in xa.ravel()])
    return out.reshape(xa.shape)


@dataclass(frozen=True)
class SpectralTruncation:
    M: float
    H: float

    def __post_init__(self):
        if self.M <= 0:
            raise ContractViolation("cutoff M must be positive")

    @property
    def gamma1_at_zero(self):
        return self.M ** (2 - 2 * self.H) / (1 - self.H)

    def gamma1(self, x):
        return gamma_trunc(x, self.M, self.H)

    def mu1_mass(self):
        # total mass of |xi|^{1-2H} on [-M, M]
        return 2 * self.M ** (2 - 2 * self.H) / (2 - 2 * self.H)


def fejer_kernel(x, beta):
    """l_beta(x) = beta (1 - cos(beta x)) / (pi beta^2 x^2), integrates to 1."""
    x = np.asarray(x, dtype=float)
    bx = beta * x
    small = np.abs(bx) < 1e-4
    safe = np.where(small, 1.0, bx)
    # 1 - cos(u) = 2 sin^2(u/2) avoids cancellation
    val = 2 * np.sin(safe / 2) ** 2 / safe ** 2
    val = np.where(small, 0.5 - bx ** 2 / 24, val)
    return beta * val / np.pi


def fejer_ft(xi, beta):
    """Fourier transform of l_beta: the triangle (1 - |xi|/beta)_+."""
    if beta < 1:
        raise ContractViolation("beta must be >= 1")
    xi = np.asarray(xi, dtype=float)
    out = np.clip(1.0 - np.abs(xi) / beta, 0.0, None)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Mollifier:
    beta: float

    def __post_init__(self):
        if self.beta < 1:
            raise ContractViolation("beta must be >= 1")

    def kernel(self, x):
        return fejer_kernel(x, self.beta)

    def ft(self, xi):
        return fejer_ft(xi, self.beta)


def cov_W(s, x, t, y, H):
    """E[W(s,x) W(t,y)] = (|x|^2H + |y|^2H - |x-y|^2H)/2 * min(s,t)."""
    if s < 0 or t < 0:
        raise ContractViolation("times must be nonnegative")
    x, y = np.asarray(x, float), np.asarray(y, float)
    sp = 0.5 * (np.abs(x) ** (2 * H) + np.abs(y) ** (2 * H) - np.abs(x - y) ** (2 * H))
    return sp * min(s, t)


def gaussian_window_ft(xi, beta):
    """int_{-beta}^{beta} exp(i xi x - x^2/2) dx (real), via the Faddeeva function.

    Uses erf(z) = 1 - exp(-z^2) w(iz) with z = (beta + i xi)/sqrt(2), which
    stays finite for large xi.
    """
    xi = np.asarray(xi, dtype=float)
    z = (1j * beta - xi) / np.sqrt(2)
    corr = np.exp(-beta ** 2 / 2 - 1j * beta * xi) * special.wofz(z)
    return np.sqrt(2 * np.pi) * (np.exp(-xi ** 2 / 2) - corr.real)


def truncated_heat_fourier_bound(beta_list, alpha, xi_cut=200.0, check=True):
    """I(beta) = int |xi|^alpha |int_{-beta}^{beta} e^{i xi x - x^2/2} dx|^2 dxi.

    Outer integral by adaptive quadrature on [0, xi_cut] (even integrand).
    Past xi_cut the inner transform is bounded by 2 e^{-beta^2/2}/|xi| plus a
    Gaussian term, so the dropped tail is below 8 e^{-beta^2} xi_cut^{alpha-1}/(1-alpha).
    Returns a list of (I, abs_err, tail_bound).
    """
    if not (0 < alpha < 1):
        raise ContractViolation("alpha must lie in (0, 1)")
    out = []
    for beta in beta_list:
        if beta < 1:
            raise ContractViolation("beta must be >= 1")
        f = lambda xi: xi ** alpha * gaussian_window_ft(xi, beta) ** 2
        pts = np.linspace(0, min(xi_cut, 40.0), 9)[1:-1]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            v1, e1 = integrate.quad(f, 0, 40.0, points=pts, limit=2000, epsabs=1e-13, epsrel=1e-11)
            v2, e2 = integrate.quad(f, 40.0, xi_cut, limit=5000, epsabs=1e-13, epsrel=1e-11)
        val, err = 2 * (v1 + v2), 2 * (e1 + e2)
        if err > 1e-6 * abs(val):
            raise NumericalError(f"I(beta) quadrature failed at beta={beta}", achieved=err)
        tail = 8 * np.exp(-beta ** 2) * xi_cut ** (alpha - 1) / (1 - alpha)
        out.append((val, err, tail))
    if check:
        vals = [v[0] for v in out]
        if max(vals) / min(vals) >= 10:
            raise NumericalError("I(beta) is not uniformly bounded over the beta list",
                                 achieved=max(vals) / min(vals))
    return out
