"""Spectral synthesis of the noise increments of W and of the localized field W_beta.

One time slab on a periodic grid of period L is

    dW(x) = sum_k w_k [A_k cos(xi_k x) + B_k sin(xi_k x)]                (density)
    W(x)  = sum_k w_k/xi_k [A_k sin(xi_k x) + B_k (1 - cos(xi_k x))]    (field, W(0) = 0)

with xi_k = 2 pi k / L, k = 1..n_modes, A_k, B_k iid N(0,1) and
w_k^2 = 2 c_H xi_k^{1-2H} dxi dt (the factor 2 folds -xi_k onto xi_k).
The density is what multiplies u in the solver; the pinned field is what
the covariance of W refers to.  The localized field reuses A_k, B_k and
replaces |xi|^{1/2-H} by (l_beta * |.|^{1/2-H})(xi).
"""
import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from scipy import integrate, special

from .errors import ContractViolation, SampleSizeError
from .spectral_model import c_h

NOISE_TAG = 0x57
BLOCK = 32


def n_workers():
    try:
        n = int(os.environ.get("PAM_LAB_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def philox(*key):
    """Counter-based Philox generator keyed by a tuple of nonnegative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class NoiseGrid:
    x_min: float
    x_max: float
    nx: int
    dt: float
    H: float
    xi_max: float
    n_modes: int = field(init=False)

    def __post_init__(self):
        if self.nx < 8 or self.x_max <= self.x_min or self.dt <= 0:
            raise ContractViolation("bad noise grid")
        if self.xi_max * self.h > np.pi * (1 + 1e-12):
            raise ContractViolation("xi_max * h exceeds pi (aliasing above Nyquist)")
        n = int(np.floor(self.xi_max / self.dxi + 1e-9))
        n = min(n, self.nx // 2 - 1)
        if n < 64:
            raise ContractViolation(f"only {n} spectral modes; need at least 64")
        object.__setattr__(self, "n_modes", n)

    @classmethod
    def centered(cls, nx, h, dt, H, xi_max=None):
        """Grid x_j = (j - nx//2) h so that x = 0 is a node."""
        x_min = -(nx // 2) * h
        xi_max = np.pi / h if xi_max is None else xi_max
        return cls(x_min, x_min + nx * h, nx, dt, H, xi_max)

    @property
    def L(self):
        return self.x_max - self.x_min

    @property
    def h(self):
        return self.L / self.nx

    @property
    def dxi(self):
        return 2 * np.pi / self.L

    @property
    def x(self):
        return self.x_min + self.h * np.arange(self.nx)

    @property
    def xi(self):
        return self.dxi * np.arange(1, self.n_modes + 1)

    @property
    def pin_index(self):
        j = -self.x_min / self.h
        return int(round(j)) if abs(j - round(j)) < 1e-9 and 0 <= round(j) < self.nx else None

    def node(self, x):
        return int(np.argmin(np.abs(self.x - x)))

    def to_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "nx": self.nx, "dt": self.dt,
                "H": self.H, "xi_max": self.xi_max, "n_modes": self.n_modes}


@dataclass
class NoiseSlab:
    increments: np.ndarray
    density: np.ndarray
    seed: int
    step_index: int
    replica: int = 0
    A: np.ndarray = None
    B: np.ndarray = None
    beta: float = None


# ---------------------------------------------------------------- weights

def fejer_power_conv(v, alpha):
    """(l * |.|^alpha)(v) for the unit Fejer kernel l(u) = (1 - cos u)/(pi u^2).

    Uses the finite-part Fourier transform of |u|^alpha, which is
    -2 Gamma(1+alpha) sin(pi alpha/2) |x|^{-1-alpha}, against the triangle
    (1 - |x|)_+ e^{ixv}; only a one-dimensional integral on [0, 1] remains.
    """
    v = abs(float(v))
    a = alpha
    d = 1.0 if v <= 1 else 1.0 / v
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        I0 = integrate.quad(lambda x: x ** (-1 - a) * (1 - x) * (np.cos(x * v) - 1), 0, d,
                            limit=200, epsabs=1e-14, epsrel=1e-12)[0]
        if d < 1:
            Ic = integrate.quad(lambda x: x ** (-1 - a) * (1 - x), d, 1, weight="cos", wvar=v,
                                limit=400, epsabs=1e-14, epsrel=1e-12)[0]
            Ig = (1 / (-a) - 1 / (1 - a)) - (d ** (-a) / (-a) - d ** (1 - a) / (1 - a))
            I0 += Ic - Ig
    br = 2 * (I0 - 1 / (1 - a)) - 2 / a
    C = -2 * special.gamma(1 + a) * np.sin(np.pi * a / 2)
    return C * br / (2 * np.pi)


def localized_amplitude(xi, beta, H):
    """(l_beta * |.|^{1/2-H})(xi) = beta^{-(1/2-H)} (l * |.|^{1/2-H})(beta xi)."""
    a = 0.5 - H
    return beta ** (-a) * np.array([fejer_power_conv(beta * v, a) for v in np.atleast_1d(xi)])


@lru_cache(maxsize=64)
def _weights(grid, beta):
    xi = grid.xi
    base = np.sqrt(2 * c_h(grid.H) * grid.dxi * grid.dt)
    if beta is None:
        w = base * xi ** (0.5 - grid.H)
    else:
        w = base * localized_amplitude(xi, beta, grid.H)
    return w


def mode_weights(grid, beta=None):
    if beta is not None and beta < 1:
        raise ContractViolation("beta must be >= 1")
    return _weights(grid, None if beta is None else float(beta))


# ---------------------------------------------------------------- sampling

def coefficients(grid, step_index, master_seed, replicas):
    """A_k, B_k for the given replicas at one step, each of shape (len(replicas), n_modes).

    Draws come in blocks of BLOCK replicas keyed by (seed, block, step), so a
    replica's coefficients do not depend on which other replicas are requested.
    """
    replicas = np.atleast_1d(np.asarray(replicas, dtype=np.int64))
    A = np.empty((len(replicas), grid.n_modes))
    B = np.empty_like(A)
    blocks = replicas // BLOCK
    for b in np.unique(blocks):
        sel = np.nonzero(blocks == b)[0]
        rows = replicas[sel] % BLOCK
        # normals fill in C order, so drawing a prefix of the block gives the
        # same rows as drawing all of it
        z = philox(master_seed, NOISE_TAG, b, step_index).standard_normal((rows.max() + 1, 2, grid.n_modes))
        A[sel] = z[rows, 0]
        B[sel] = z[rows, 1]
    return A, B


def _synth(grid, C):
    """Re sum_k C_k e^{i xi_k x_j} on the grid, batched over leading axes."""
    phase = np.exp(1j * grid.xi * grid.x_min)
    c = np.zeros(C.shape[:-1] + (grid.nx // 2 + 1,), dtype=complex)
    c[..., 1:grid.n_modes + 1] = C * phase
    return sfft.irfft(c, grid.nx, axis=-1, workers=n_workers()) * (grid.nx / 2)


def density_from_coefficients(grid, A, B, beta=None):
    w = mode_weights(grid, beta)
    return _synth(grid, w * (A - 1j * B))


def field_from_coefficients(grid, A, B, beta=None):
    w = mode_weights(grid, beta) / grid.xi
    F = _synth(grid, w * (-B - 1j * A))
    j0 = grid.pin_index
    if j0 is not None:
        return F - F[..., j0:j0 + 1]
    return F + np.sum(w * B, axis=-1, keepdims=True)


def density_batch(grid, step_index, master_seed, replicas, beta=None):
    A, B = coefficients(grid, step_index, master_seed, replicas)
    return density_from_coefficients(grid, A, B, beta)


def sample_slab(grid, step_index, master_seed, replica=0):
    A, B = coefficients(grid, step_index, master_seed, [replica])
    return NoiseSlab(field_from_coefficients(grid, A, B)[0], density_from_coefficients(grid, A, B)[0],
                     int(master_seed), int(step_index), int(replica), A[0], B[0])


def sample_localized_slab(grid, beta, step_index, master_seed, replica=0):
    if beta < 1:
        raise ContractViolation("beta must be >= 1")
    A, B = coefficients(grid, step_index, master_seed, [replica])
    return NoiseSlab(field_from_coefficients(grid, A, B, beta)[0],
                     density_from_coefficients(grid, A, B, beta)[0],
                     int(master_seed), int(step_index), int(replica), A[0], B[0], float(beta))


def field_samples(grid, n_slabs, master_seed, beta=None, replica=0):
    """Pinned increments for steps 0..n_slabs-1 as an (n_slabs, nx) array."""
    out = np.empty((n_slabs, grid.nx))
    for s in range(n_slabs):
        A, B = coefficients(grid, s, master_seed, [replica])
        out[s] = field_from_coefficients(grid, A, B, beta)[0]
    return out


# ---------------------------------------------------------------- diagnostics

def _values(slabs):
    if isinstance(slabs, np.ndarray):
        return slabs
    return np.array([s.increments for s in slabs])


def empirical_covariance(slabs, x, y, grid):
    """Sample covariance of increments at the nodes nearest x and y, with jackknife SE."""
    V = _values(slabs)
    n = V.shape[0]
    if n < 100:
        raise SampleSizeError(f"need at least 100 slabs, got {n}")
    a = V[:, grid.node(x)]
    b = V[:, grid.node(y)]
    Sab, Sa, Sb = np.sum(a * b), np.sum(a), np.sum(b)
    cov = (Sab - Sa * Sb / n) / (n - 1)
    loo = ((Sab - a * b) - (Sa - a) * (Sb - b) / (n - 1)) / (n - 2)
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(cov), float(se)


def dump_slabs(path, slabs):
    """Little-endian float64, one row per slab."""
    _values(slabs).astype("<f8").tofile(path)


def load_slabs(path, nx):
    return np.fromfile(path, dtype="<f8").reshape(-1, nx)
