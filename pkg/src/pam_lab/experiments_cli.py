"""Command line driver: flat config files, deterministic seeds, CSV and JSON outputs.

Every CSV starts with a `# config {...}` echo and a `# generated ...` line;
everything after those is byte-identical for identical config and seed.
"""
import argparse
import csv
import datetime
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from . import feynman_kac_mc as fk
from . import noise_sampler as ns
from . import pam_solver as ps
from . import spectral_model as sm
from . import variational_solver as vs
from .errors import ContractViolation, PamLabError, ResourceError

COMMON = {"H": None, "t": None, "seed": 0, "out": None}

DEFAULTS = {
    "constants": {"E": None},
    "variational": {"theta": 1.0, "N": 4096, "L": None, "multi_start": 0},
    "covariance": {"nx": 8192, "h": 0.02, "dt": 0.01, "n_slabs": 10000,
                   "pairs": "0.1:0.1,0.1:0.3,0.5:-0.5,1:2,-2:1.5"},
    "moments": {"m": 2, "M": 16.0, "n_paths": 20000, "dt": None, "n_max": 3},
    "eigen": {"theta": 0.5, "M": 2.0, "n_paths": 20000, "dt": None},
    "max-growth": {"R_nodes": "64,128,256,512,1024", "h": 0.05, "dt": 0.001, "replicas": 128,
                   "xi_max": None},
    "tail": {"n_samples": 10000, "nx": 160, "h": 0.1, "dt": 0.001, "xi_max": None, "upper": 0.1,
             "min_exceed": 20},
    "independence": {"beta": 1.0, "n_iters": 2, "separations": "0,0.5,1,2,3,4,6,8,10",
                     "n_samples": 400, "h": 0.1, "dt": None, "M_schedule": None, "R": None},
    "selftest": {},
}
T_DEFAULT = {"moments": 0.1, "eigen": 8.0, "max-growth": 0.2, "tail": 0.2, "independence": 0.1,
             "covariance": None, "variational": None, "constants": None, "selftest": None}


class UsageError(ContractViolation):
    pass


# ---------------------------------------------------------------- config

def parse_config_text(text):
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {i}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(v):
    if v is None or not isinstance(v, str):
        return v
    if v.lower() in ("none", ""):
        return None
    for f in (int, float):
        try:
            return f(v)
        except ValueError:
            pass
    return v


@dataclass
class ExperimentConfig:
    experiment: str
    H: float
    t: float
    seed: int
    output_dir: str
    params: dict

    def to_dict(self):
        return asdict(self)


def build_config(experiment, file_values, overrides):
    valid = dict(COMMON)
    valid.update(DEFAULTS[experiment])
    vals = {k: v for k, v in valid.items()}
    vals["t"] = T_DEFAULT.get(experiment)
    for src in (file_values, overrides):
        for k, v in src.items():
            if k not in valid:
                raise UsageError(f"unknown key '{k}'; valid keys: {', '.join(sorted(valid))}")
            if v is not None:
                vals[k] = _coerce(v)
    if vals["H"] is None and experiment != "selftest":
        raise UsageError("missing required value for H (use --H or 'H = ...' in the config)")
    if vals["H"] is not None and experiment != "constants":
        sm.check_H(vals["H"])
    params = {k: vals[k] for k in DEFAULTS[experiment]}
    return ExperimentConfig(experiment, vals["H"], vals["t"], int(vals["seed"]), vals["out"], params)


# ---------------------------------------------------------------- output

class Output:
    """Config echo first, a single writer per file, rows flushed as they come."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.dir = cfg.output_dir
        if self.dir:
            os.makedirs(self.dir, exist_ok=True)
            with open(os.path.join(self.dir, "config.json"), "w") as f:
                json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)
                f.write("\n")

    def csv(self, name, header):
        if not self.dir:
            return None
        f = open(os.path.join(self.dir, name), "w", newline="")
        f.write("# config " + json.dumps(self.cfg.to_dict(), sort_keys=True) + "\n")
        f.write("# generated " + datetime.datetime.now(datetime.timezone.utc).isoformat() + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        f.flush()
        return f, w

    @staticmethod
    def row(handle, values):
        if handle is None:
            return
        f, w = handle
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in values])
        f.flush()

    def summary(self, name, data):
        if self.dir:
            with open(os.path.join(self.dir, name), "w") as f:
                json.dump({"config": self.cfg.to_dict(), "result": data}, f, indent=1, sort_keys=True,
                          default=float)
                f.write("\n")


def _floats(s):
    if isinstance(s, (int, float)):
        return [float(s)]
    return [float(v) for v in str(s).split(",") if v.strip()]


# ---------------------------------------------------------------- experiments

def proof_schedule(R, M, H):
    """beta(R) = exp(M (log R)^{1/(1+H)}) and n(R) = [M (log R)^{1/(1+H)}] + 1."""
    if R <= np.e:
        raise ContractViolation("the schedule needs R > e")
    a = M * np.log(R) ** (1 / (1 + H))
    return float(np.exp(a)), int(np.floor(a)) + 1


@dataclass
class MaxGrowthFit:
    R_values: list
    log_max: list
    log_max_se: list
    regressor: list
    slope: float
    intercept: float
    r_squared: float
    slope_ci: tuple
    reference_slope: float = None

    def to_dict(self):
        return asdict(self)


def fit_max_growth(R_values, log_max, H, log_max_se=None, reference=None):
    x = np.log(np.asarray(R_values, float)) ** (1 / (1 + H))
    y = np.asarray(log_max, float)
    lr = stats.linregress(x, y)
    df = len(x) - 2
    q = stats.t.ppf(0.975, df) if df > 0 else np.inf
    return MaxGrowthFit(list(map(float, R_values)), y.tolist(),
                        list(log_max_se) if log_max_se is not None else [], x.tolist(),
                        float(lr.slope), float(lr.intercept), float(lr.rvalue ** 2),
                        (float(lr.slope - q * lr.stderr), float(lr.slope + q * lr.stderr)), reference)


def run_max_growth(cfg, out=None, E=None):
    """Mean over replicas of log max_{window} u(t, .) for windows of R grid nodes."""
    p = cfg.params
    R_list = [int(r) for r in _floats(p["R_nodes"])]
    if len(R_list) < 4 or any(b <= a for a, b in zip(R_list, R_list[1:])):
        raise ContractViolation("R_nodes must be increasing with at least 4 values")
    out = out or Output(cfg)
    h, dt, t = p["h"], p["dt"], cfg.t
    fh = out.csv("max_growth.csv", ["R_nodes", "half_width", "mean_log_max", "se", "replicas", "nx"])
    rows = []
    try:
        for R in R_list:
            half = R * h / 2
            grid = ps.padded_grid(half, h, t, dt, cfg.H, p["xi_max"])
            u = ps.solve_ensemble(t, grid, cfg.seed, np.arange(p["replicas"]))
            win = np.abs(grid.x) <= half + 1e-9
            lm = np.log(np.max(u[:, win], axis=1))
            rows.append((R, lm.mean(), lm.std(ddof=1) / np.sqrt(lm.size)))
            Output.row(fh, [R, half, lm.mean(), rows[-1][2], p["replicas"], grid.nx])
    finally:
        if fh:
            fh[0].close()
    ref = None
    if E is not None:
        ref = float(sm.c0(cfg.H) * (t * E) ** (cfg.H / (1 + cfg.H)))
    fit = fit_max_growth([r[0] for r in rows], [r[1] for r in rows], cfg.H, [r[2] for r in rows], ref)
    out.summary("max_growth.json", fit.to_dict())
    return fit


@dataclass
class TailFit:
    a: list
    log_survival: list
    slope: float
    slope_se: float
    exponent: float
    exponent_se: float
    r_squared: float
    n_samples: int

    def to_dict(self):
        return asdict(self)


def fit_tail(log_u, H, upper=0.1, min_exceed=20):
    """Rank-based survival of log u on its upper tail, fitted against a^{1+H} and in log-log form."""
    s = np.sort(np.asarray(log_u, float))
    n = s.size
    k0 = int(np.floor((1 - upper) * n))
    idx = np.arange(k0, n - min_exceed + 1)
    a = s[idx]
    surv = (n - idx) / n
    keep = a > 0
    a, surv = a[keep], surv[keep]
    if a.size < 3:
        raise ContractViolation("too few positive tail points to fit")
    ls = np.log(surv)
    lr = stats.linregress(a ** (1 + H), ls)
    le = stats.linregress(np.log(a), np.log(-ls))
    return TailFit(a.tolist(), ls.tolist(), float(lr.slope), float(lr.stderr), float(le.slope),
                   float(le.stderr), float(le.rvalue ** 2), n)


def tail_samples(cfg):
    p = cfg.params
    if p["n_samples"] < 10 ** 4:
        raise ContractViolation("the tail experiment needs at least 1e4 samples")
    grid = ns.NoiseGrid.centered(p["nx"], p["h"], p["dt"], cfg.H, p["xi_max"])
    j = grid.node(0.0)
    vals = np.empty(p["n_samples"])
    step = 1024
    for c in range(0, p["n_samples"], step):
        reps = np.arange(c, min(p["n_samples"], c + step))
        vals[reps] = ps.solve_ensemble(cfg.t, grid, cfg.seed, reps)[:, j]
    return vals


def run_tail(cfg, out=None):
    p = cfg.params
    out = out or Output(cfg)
    u = tail_samples(cfg)
    if np.any(u <= 0):
        raise ContractViolation("nonpositive u(t,0) samples; refine dt")
    fit = fit_tail(np.log(u), cfg.H, p["upper"], p["min_exceed"])
    fh = out.csv("tail.csv", ["a", "log_survival"])
    if fh:
        for a, l in zip(fit.a, fit.log_survival):
            Output.row(fh, [a, l])
        fh[0].close()
    out.summary("tail.json", {k: v for k, v in fit.to_dict().items() if k not in ("a", "log_survival")})
    return fit


def run_independence(cfg, out=None):
    """Correlation of U_{beta,n}(t, 0) and U_{beta,n}(t, d) across a separation sweep."""
    p = cfg.params
    out = out or Output(cfg)
    beta, n = p["beta"], int(p["n_iters"])
    if p["M_schedule"] is not None and p["R"] is not None:
        beta, n = proof_schedule(p["R"], p["M_schedule"], cfg.H)
    t = cfg.t
    seps = sorted(set(_floats(p["separations"])))
    thr = ps.separation_threshold(beta, n, t)
    grid = ps.independence_grid(max(seps), beta, n, t, cfg.H, p["h"], p["dt"])
    U = ps.picard_ensemble(beta, n, t, grid, cfg.seed, np.arange(p["n_samples"]))["U"]
    j0 = grid.node(0.0)
    fh = out.csv("independence.csv", ["separation", "correlation", "se", "above_threshold"])
    res = []
    for d in seps:
        if d == 0:
            r = 1.0
        else:
            r = float(np.corrcoef(U[:, j0], U[:, grid.node(d)])[0, 1])
        se = (1 - r * r) / np.sqrt(p["n_samples"] - 1)
        res.append({"separation": d, "correlation": r, "se": se, "above_threshold": bool(d >= thr)})
        Output.row(fh, [d, r, se, int(d >= thr)])
    if fh:
        fh[0].close()
    rep = {"threshold": thr, "beta": beta, "n_iters": n, "n_samples": p["n_samples"],
           "bound": 3 / np.sqrt(p["n_samples"]), "rows": res}
    out.summary("independence.json", rep)
    return rep


def run_constants(cfg, out=None):
    H = cfg.H
    res = {"H": H, "c_H": sm.c_h(H), "c0": sm.c0(H)}
    if cfg.t is not None and cfg.params.get("E"):
        res["c_hat"] = sm.c_hat(H, cfg.t, cfg.params["E"])
    return res


def run_variational(cfg, out=None):
    p = cfg.params
    spec = {"N": int(p["N"])}
    if p["L"] is not None:
        spec["L"] = float(p["L"])
    if p["multi_start"]:
        res = vs.multi_start(p["theta"], cfg.H, spec)
    else:
        res = vs.maximize_E_theta(p["theta"], cfg.H, spec)
    out = out or Output(cfg)
    d = {"E_theta": res.E_theta, "iterations": res.iterations, "theta": p["theta"], "H": cfg.H}
    out.summary("variational.json", d)
    fh = out.csv("profile.csv", ["x", "g"])
    if fh:
        for a, b in zip(res.profile.x, res.profile.values):
            Output.row(fh, [a, b])
        fh[0].close()
    return d


def run_covariance(cfg, out=None):
    p = cfg.params
    grid = ns.NoiseGrid.centered(int(p["nx"]), p["h"], p["dt"], cfg.H)
    V = ns.field_samples(grid, int(p["n_slabs"]), cfg.seed)
    out = out or Output(cfg)
    fh = out.csv("covariance.csv", ["x", "y", "empirical", "se", "exact", "z"])
    rows = []
    for pair in str(p["pairs"]).split(","):
        x, y = (float(v) for v in pair.split(":"))
        c, se = ns.empirical_covariance(V, x, y, grid)
        xx, yy = grid.x[grid.node(x)], grid.x[grid.node(y)]
        ex = float(sm.cov_W(p["dt"], xx, p["dt"], yy, cfg.H))
        rows.append({"x": xx, "y": yy, "empirical": c, "se": se, "exact": ex, "z": (c - ex) / se})
        Output.row(fh, [xx, yy, c, se, ex, (c - ex) / se])
    if fh:
        fh[0].close()
    out.summary("covariance.json", rows)
    return rows


def run_moments(cfg, out=None):
    p = cfg.params
    e = fk.moment_estimate(int(p["m"]), cfg.t, p["M"], cfg.H, int(p["n_paths"]), p["dt"], cfg.seed)
    res = {"fk": e.to_dict()}
    if int(p["m"]) == 2:
        c = ps.second_moment_chaos(cfg.t, cfg.H, int(p["n_max"]), M=p["M"])
        res["chaos"] = {"value": c.value, "truncation_bound": c.truncation_bound}
    (out or Output(cfg)).summary("moments.json", res)
    return res


def run_eigen(cfg, out=None):
    p = cfg.params
    e = fk.fk_eigenvalue_estimate(p["M"], p["theta"], cfg.t, cfg.H, int(p["n_paths"]), p["dt"], cfg.seed)
    lam = vs.principal_eigenvalue_m2(p["theta"], p["M"], cfg.H)
    res = {"fk": e.to_dict(), "grid_eigenvalue": lam}
    (out or Output(cfg)).summary("eigen.json", res)
    return res


def selftest():
    """Quick checks of the trivially exact cases; returns a list of (name, ok)."""
    H = 0.35
    res = []
    res.append(("c_H at H=1/2 is 1/(2 pi)", abs(sm.c_h(0.5) - 1 / (2 * np.pi)) < 1e-15))
    M = 3.0
    res.append(("gamma_M(0) closed form",
                abs(sm.gamma_trunc(0.0, M, H) - M ** (2 - 2 * H) / (1 - H)) < 1e-12))
    q = fk.sample_Q(2, M, 0.5, 0.5 / 64, H, 1, frozen=True)
    res.append(("frozen paths give t gamma_M(0)", abs(q.q1 - 0.5 * M ** (2 - 2 * H) / (1 - H)) < 1e-9))
    q = fk.sample_Q(3, M, 0.5, 0.5 / 64, H, 1)
    res.append(("q_hat bookkeeping",
                abs(q.q_hat - 2 * q.q1 - 3 * 0.5 * M ** (2 - 2 * H) / (1 - H)) < 1e-10 * abs(q.q_hat)))
    res.append(("m=1 scaling test is trivial", fk.scaling_identity_test(1, 0.1, 2.0, H, 10).p_value == 1.0))
    res.append(("theta=0 eigenvalue proxy is 0", fk.fk_eigenvalue_estimate(2.0, 0.0, 1.0, H, 10).value == 0.0))
    res.append(("chaos order 0 is 1", ps.chaos_kernel_norm(0, 0.1, H).value == 1.0))
    g = ns.NoiseGrid.centered(256, 0.05, 1e-3, H)
    res.append(("pinned field vanishes at 0", ns.sample_slab(g, 0, 1).increments[g.pin_index] == 0.0))
    return res


RUNNERS = {"constants": run_constants, "variational": run_variational, "covariance": run_covariance,
           "moments": run_moments, "eigen": run_eigen, "max-growth": run_max_growth, "tail": run_tail,
           "independence": run_independence}


def make_parser():
    ap = argparse.ArgumentParser(prog="pam-lab", description="Parabolic Anderson model lab")
    sub = ap.add_subparsers(dest="command")
    for name in DEFAULTS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file")
        s.add_argument("--H", type=float)
        s.add_argument("--t", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
    return ap


def _jsonable(x):
    if hasattr(x, "to_dict"):
        return x.to_dict()
    return x


def cli_main(argv=None):
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    if not args.command:
        ap.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "selftest":
            res = selftest()
            for name, ok in res:
                print(f"{'PASS' if ok else 'FAIL'} {name}")
            return 0 if all(ok for _, ok in res) else 2
        fv = {}
        if args.config:
            with open(args.config, encoding="utf-8") as f:
                fv = parse_config_text(f.read())
        ov = {"H": args.H, "t": args.t, "seed": args.seed, "out": args.out}
        for kv in args.set:
            if "=" not in kv:
                raise UsageError(f"--set expects KEY=VALUE, got {kv}")
            k, v = kv.split("=", 1)
            ov[k.strip()] = v.strip()
        cfg = build_config(args.command, fv, ov)
        res = RUNNERS[args.command](cfg)
        print(json.dumps(_jsonable(res), default=float, sort_keys=True))
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 1
    except (PamLabError, ValueError, ArithmeticError) as e:
        code = getattr(e, "exit_code", 1 if isinstance(e, ValueError) else 2)
        print(f"error: {e}", file=sys.stderr)
        return code
    except MemoryError as e:
        print(f"error: {e}", file=sys.stderr)
        return ResourceError.exit_code


def main():
    sys.exit(cli_main())
