"""Feynman-Kac Monte Carlo for moments of u with a Fourier-truncated potential.

For m independent Brownian motions B_1..B_m,

    q1    = sum_{j<k} int_0^t gamma_M(B_j(s) - B_k(s)) ds
    q_hat = 2 q1 + m t gamma_M(0)

and E[u(t,x)^m] is approximated by E exp(c_H q1) (cutoff M on the frequencies).
Time integrals are left-endpoint Riemann sums on the Euler grid of the paths.
"""
import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats
from scipy.interpolate import CubicSpline

from .errors import ContractViolation, NumericalError, ResourceError
from .noise_sampler import philox
from .spectral_model import c_h, gamma_trunc

BM_TAG = 0xB0
MAX_STEPS = 10 ** 7
CHUNK = 256


@dataclass
class BrownianEnsemble:
    m: int
    dt: float
    t: float
    paths: np.ndarray
    start: np.ndarray
    seed: int

    def variance_check(self, n_se=5.0):
        """Pooled increment variance within n_se standard errors of dt."""
        d = np.diff(self.paths, axis=1).ravel()
        if d.size < 2:
            return True
        se = self.dt * np.sqrt(2.0 / (d.size - 1))
        return abs(np.var(d, ddof=1) - self.dt) <= n_se * se


@dataclass
class QSample:
    q1: float
    q_hat: float
    M: float
    meta: dict = field(default_factory=dict)


@dataclass
class Estimate:
    value: float
    se: float
    log_value: float
    se_log: float
    n: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"value": self.value, "se": self.se, "log_value": self.log_value, "se_log": self.se_log,
             "n": self.n}
        d.update(self.extra)
        return d


# ---------------------------------------------------------------- gamma table

class GammaTable:
    """Cubic interpolant of gamma_M on [0, x_max] with spacing well below 1/M."""

    def __init__(self, M, H, x_max, spacing=None):
        self.M, self.H = float(M), float(H)
        self.spacing = spacing or 0.05 / max(self.M, 1.0)
        self.x_max = 0.0
        self._build(x_max)

    def _build(self, x_max):
        n = int(np.ceil(x_max / self.spacing)) + 4
        x = self.spacing * np.arange(n)
        self.spline = CubicSpline(x, gamma_trunc(x, self.M, self.H), bc_type=((1, 0.0), "not-a-knot"))
        self.x_max = x[-3]

    def __call__(self, d):
        a = np.abs(d)
        top = float(a.max()) if a.size else 0.0
        if top > self.x_max:
            self._build(1.5 * top)
            if top > self.x_max:
                raise NumericalError("gamma table range could not be extended", achieved=top)
        return self.spline(a)


_TABLES = {}


def gamma_table(M, H, x_max):
    key = (float(M), float(H))
    tab = _TABLES.get(key)
    if tab is None:
        tab = _TABLES[key] = GammaTable(M, H, x_max)
    elif tab.x_max < x_max:
        tab._build(x_max)
    return tab


# ---------------------------------------------------------------- paths and Q

def _steps(t, dt):
    n = int(round(t / dt))
    if n > MAX_STEPS:
        raise ResourceError(f"{n} time steps exceed the budget of {MAX_STEPS}")
    if n < 1:
        raise ContractViolation("t must exceed dt")
    return n


def _increments(seed, replicas, m, n, dt, stream=0):
    """Standard normal increments scaled by sqrt(dt), one Philox stream per replica."""
    z = np.empty((len(replicas), m, n))
    for i, r in enumerate(replicas):
        z[i] = philox(seed, BM_TAG, stream, r).standard_normal((m, n))
    return z * np.sqrt(dt)


def _starts(start, m):
    s = np.broadcast_to(np.asarray(start, dtype=float), (m,)).copy()
    return s


def brownian_ensemble(m, t, dt, seed, replica=0, start=0.0, stream=0):
    n = _steps(t, dt)
    s = _starts(start, m)
    inc = _increments(seed, [replica], m, n, dt, stream)[0]
    paths = np.concatenate([s[:, None], s[:, None] + np.cumsum(inc, axis=1)], axis=1)
    return BrownianEnsemble(m, dt, n * dt, paths, s, int(seed))


def q1_batch(m, t, M_list, H, n_paths, dt=None, seed=0, start=0.0, stream=0, frozen=False):
    """q1 for replicas 0..n_paths-1 at each cutoff in M_list; shape (len(M_list), n_paths).

    All cutoffs share the same paths (common random numbers).  frozen=True
    uses zero increments, so every path stays at its start.
    """
    if m < 1:
        raise ContractViolation("m must be >= 1")
    M_list = np.atleast_1d(np.asarray(M_list, dtype=float))
    if np.any(M_list <= 0):
        raise ContractViolation("cutoff M must be positive")
    dt = dt or t / 2048
    n = _steps(t, dt)
    s = _starts(start, m)
    out = np.zeros((len(M_list), n_paths))
    if m == 1:
        return out
    spread = np.ptp(s)
    guess = spread + 8 * np.sqrt(2 * t)
    tabs = [gamma_table(M, H, guess) for M in M_list]
    pairs = [(j, k) for j in range(m) for k in range(j + 1, m)]
    for c0 in range(0, n_paths, CHUNK):
        reps = np.arange(c0, min(n_paths, c0 + CHUNK))
        if frozen:
            inc = np.zeros((len(reps), m, n))
        else:
            inc = _increments(seed, reps, m, n, dt, stream)
        # left endpoints B(s_0), ..., B(s_{n-1})
        B = np.cumsum(inc, axis=2) - inc + s[None, :, None]
        for j, k in pairs:
            D = B[:, j] - B[:, k]
            for i, tab in enumerate(tabs):
                out[i, reps] += dt * tab(D).sum(axis=1)
    return out


def q_hat_direct(m, t, M, H, n_paths, dt=None, seed=0, start=0.0, stream=0):
    """q_hat as the full double sum over ordered pairs (j, k), diagonal included."""
    dt = dt or t / 2048
    n = _steps(t, dt)
    s = _starts(start, m)
    tab = gamma_table(M, H, np.ptp(s) + 8 * np.sqrt(2 * t))
    out = np.zeros(n_paths)
    for c0 in range(0, n_paths, CHUNK):
        reps = np.arange(c0, min(n_paths, c0 + CHUNK))
        inc = _increments(seed, reps, m, n, dt, stream)
        B = np.cumsum(inc, axis=2) - inc + s[None, :, None]
        for j in range(m):
            for k in range(m):
                out[reps] += dt * tab(B[:, j] - B[:, k]).sum(axis=1)
    return out


def q_hat_from_q1(q1, m, t, M, H):
    return 2 * q1 + m * t * M ** (2 - 2 * H) / (1 - H)


def sample_Q(m, M, t, dt, H, seed, start=0.0, replica=0, frozen=False):
    if m < 2:
        raise ContractViolation("sample_Q needs m >= 2")
    n = _steps(t, dt)
    q = q1_batch(m, t, [M], H, replica + 1, dt, seed, start, frozen=frozen)[0, replica]
    return QSample(float(q), float(q_hat_from_q1(q, m, n * dt, M, H)), float(M),
                   {"dt": dt, "seed": int(seed), "replica": int(replica), "m": m, "t": t, "H": H})


def write_q_samples(path, q1, q_hat, meta):
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(f)
        w.writerow(["replica", "q1", "q_hat"])
        for i, (a, b) in enumerate(zip(q1, q_hat)):
            w.writerow([i, repr(float(a)), repr(float(b))])


# ---------------------------------------------------------------- estimators

def log_mean_exp(a):
    """log of the mean of exp(a) and its jackknife standard error."""
    a = np.asarray(a, dtype=float)
    n = a.size
    lm = special.logsumexp(a) - np.log(n)
    top = a.max()
    w = np.exp(a - top)
    S = w.sum()
    loo = top + np.log(np.maximum(S - w, 1e-300) / (n - 1))
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(lm), float(se), loo


def _estimate(a, **extra):
    lm, se, _ = log_mean_exp(a)
    v = np.exp(lm)
    return Estimate(float(v), float(v * se), lm, se, a.size, extra)


def paired_log_difference(a, b):
    """log mean e^a - log mean e^b with a jackknife SE that keeps the pairing."""
    la, _, loo_a = log_mean_exp(a)
    lb, _, loo_b = log_mean_exp(b)
    d = loo_a - loo_b
    n = d.size
    se = np.sqrt((n - 1) / n * np.sum((d - d.mean()) ** 2))
    return float(la - lb), float(se)


def moment_estimate(m, t, M, H, n_paths, dt=None, seed=0, start=0.0):
    """E exp(c_H q1), the M-truncated m-th moment of u(t, x)."""
    if m < 2:
        raise ContractViolation("moment_estimate needs m >= 2")
    q = q1_batch(m, t, [M], H, n_paths, dt, seed, start)[0]
    return _estimate(c_h(H) * q, m=m, t=t, M=M, H=H, seed=seed)


def moment_sweep(m, t, M_list, H, n_paths, dt=None, seed=0, start=0.0):
    """Estimates at increasing cutoffs on common paths, with paired SEs of consecutive log gaps."""
    Q = c_h(H) * q1_batch(m, t, M_list, H, n_paths, dt, seed, start)
    ests = [_estimate(q, M=float(M)) for q, M in zip(Q, M_list)]
    gaps = [paired_log_difference(Q[i + 1], Q[i]) for i in range(len(M_list) - 1)]
    return ests, gaps


def start_point_comparison(m, t, M, H, n_paths, dt=None, seed=0, spacing=1.0):
    """Common start 0 versus starts 0, spacing, 2 spacing, ... on the same increments."""
    c = c_h(H)
    qa = c * q1_batch(m, t, [M], H, n_paths, dt, seed, 0.0)[0]
    qb = c * q1_batch(m, t, [M], H, n_paths, dt, seed, spacing * np.arange(m))[0]
    return _estimate(qa), _estimate(qb), paired_log_difference(qa, qb)


@dataclass
class KSReport:
    statistic: float
    p_value: float
    n_samples: int
    M1: float
    M2: float
    t1: float
    t2: float


def scaling_identity_test(m, t, M, H, n_samples, dt=None, seed=0, M2=None):
    """KS test of Q_{m,M}(t) against Q_{m,M''}(t_m)/m with t_m = m^{1/H} t.

    Brownian scaling gives equality in law for M'' = m^{-1/(2H)} M; the time
    step is scaled by m^{1/H} too, so the two discrete laws coincide.  Passing
    M2 overrides M'' (negative control).  The two sides use independent streams.
    """
    if m < 1:
        raise ContractViolation("m must be >= 1")
    dt = dt or t / 2048
    tm = m ** (1 / H) * t
    dtm = m ** (1 / H) * dt
    Mpp = m ** (-1 / (2 * H)) * M if M2 is None else M2
    _steps(tm, dtm)
    if m == 1:
        return KSReport(0.0, 1.0, n_samples, M, Mpp, t, tm)
    a = q1_batch(m, t, [M], H, n_samples, dt, seed, stream=1)[0]
    b = q1_batch(m, tm, [Mpp], H, n_samples, dtm, seed, stream=2)[0] / m
    r = stats.ks_2samp(a, b)
    return KSReport(float(r.statistic), float(r.pvalue), n_samples, float(M), float(Mpp), t, tm)


def fk_eigenvalue_estimate(M, theta, t, H, n_paths, dt=None, seed=0, min_ess=50):
    """(1/t) log E exp((theta/2) q_hat) for m = 2, with a delta-method SE."""
    if theta == 0:
        return Estimate(0.0, 0.0, 0.0, 0.0, n_paths, {"ess": float(n_paths)})
    dt = dt or t / 2048
    q1 = q1_batch(2, t, [M], H, n_paths, dt, seed)[0]
    a = 0.5 * theta * q_hat_from_q1(q1, 2, t, M, H)
    w = np.exp(a - a.max())
    ess = w.sum() ** 2 / np.sum(w * w)
    if ess < min_ess:
        raise NumericalError(f"effective sample size {ess:.1f} < {min_ess}; use smaller t or more paths",
                             achieved=ess)
    lm = special.logsumexp(a) - np.log(n_paths)
    se_log = np.std(w, ddof=1) / (np.sqrt(n_paths) * w.mean())
    return Estimate(float(lm / t), float(se_log / t), float(lm), float(se_log), n_paths, {"ess": float(ess)})


@dataclass
class GrowthFit:
    m_list: list
    log_moments: list
    se_log: list
    slope: float
    slope_se: float
    ci: tuple
    reference_slope: float = None


def moment_growth_fit(m_list, t, M, H, n_paths, dt=None, seed=0, E=None, max_se=0.5):
    """Weighted fit of log E[u^m] against m^{1+1/H}; the slope CI uses the Monte Carlo SEs.

    Each m uses its own stream so that the points are independent.  If E is
    given, the reference slope (c_H/2)^{1/H} E t is reported alongside.
    """
    m_list = list(m_list)
    if len(m_list) < 2:
        raise ContractViolation("need at least two values of m")
    if any(m < 2 or m > 6 for m in m_list):
        raise ContractViolation("m must lie in 2..6")
    y, s = [], []
    for m in m_list:
        q = q1_batch(m, t, [M], H, n_paths, dt, seed, stream=100 + m)[0]
        lm, se, _ = log_mean_exp(c_h(H) * q)
        if se > max_se:
            raise NumericalError(f"SE of log moment {se:.3f} > {max_se} at m={m}", achieved=se)
        y.append(lm)
        s.append(se)
    x = np.array(m_list, float) ** (1 + 1 / H)
    y, s = np.array(y), np.maximum(np.array(s), 1e-12)
    W = 1 / s ** 2
    X = np.stack([np.ones_like(x), x], axis=1)
    cov = np.linalg.inv(X.T @ (W[:, None] * X))
    beta = cov @ X.T @ (W * y)
    se = float(np.sqrt(cov[1, 1]))
    slope = float(beta[1])
    ref = None if E is None else float((c_h(H) / 2) ** (1 / H) * E * t)
    return GrowthFit(m_list, y.tolist(), s.tolist(), slope, se, (slope - 1.96 * se, slope + 1.96 * se), ref)


def expected_q1_m2(t, M, H):
    """int_0^t int_{-M}^{M} e^{-s xi^2} |xi|^{1-2H} d xi ds, done analytically in s."""
    p = 1 - 2 * H
    f = lambda xi: xi ** p * (-np.expm1(-t * xi * xi)) / (xi * xi)
    return 2 * integrate.quad(f, 0, M, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
