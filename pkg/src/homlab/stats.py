"""Monte Carlo campaigns, mergeable sample sets, rate fits, log-Laplace profiles
and flux decorrelation diagnostics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import logsumexp

from .energy import CellProblem, sample_quadratic_forms
from .field import FieldError, derive_seed, make_law
from .grid import DEFAULT_TOL, CubeGrid, GridError, SolverError
from .multiscale import corrector_curve, gluing_defect

Z95 = 1.959963984540054
DEFAULT_LAMBDAS = (-2.0, -1.0, -0.5, -0.25, 0.25, 0.5, 1.0, 2.0)
DEFAULT_BETAS = (0.25, 0.4, 0.49)
OVERFLOW_GUARD = 50.0


class StatsError(ValueError):
    pass


# -- sample sets ---------------------------------------------------------------


@dataclass
class SampleSet:
    """Per-sample observations keyed by sample index; statistics are order-independent."""

    tag: str
    seed: int = 0
    records: dict = dc_field(default_factory=dict)
    failures: dict = dc_field(default_factory=dict)

    def add(self, index, obs):
        if index in self.records or index in self.failures:
            raise StatsError(f"sample {index} already present")
        self.records[index] = dict(obs)

    def fail(self, index, message):
        self.failures[index] = str(message)

    def merge(self, other):
        if other.tag != self.tag or other.seed != self.seed:
            raise StatsError("cannot merge sample sets from different campaigns")
        clash = (set(self.records) | set(self.failures)) & (set(other.records) | set(other.failures))
        if clash:
            raise StatsError(f"overlapping sample indices: {sorted(clash)[:5]}")
        out = SampleSet(self.tag, self.seed)
        out.records = {**self.records, **other.records}
        out.failures = {**self.failures, **other.failures}
        return out

    @property
    def count(self):
        return len(self.records)

    @property
    def indices(self):
        return sorted(self.records)

    @property
    def seeds(self):
        return [derive_seed(self.seed, i) for i in self.indices]

    def names(self):
        keys = set()
        for obs in self.records.values():
            keys.update(obs)
        return sorted(keys)

    def values(self, name):
        return np.array([self.records[i][name] for i in self.indices], dtype=float)

    def sufficient(self, name):
        x = self.values(name)
        return len(x), math.fsum(x), math.fsum(x * x)

    def mean(self, name):
        n, s, _ = self.sufficient(name)
        if n == 0:
            raise StatsError(f"no samples for {name!r}")
        return s / n

    def var(self, name):
        """Unbiased sample variance (two-pass, exactly summed)."""
        x = self.values(name)
        n = len(x)
        if n < 2:
            return 0.0
        m = math.fsum(x) / n
        return math.fsum((x - m) ** 2) / (n - 1)

    def se(self, name):
        return math.sqrt(self.var(name) / self.count)


# -- campaign driver -----------------------------------------------------------

EXPERIMENTS = {}


def experiment(name):
    def deco(fn):
        EXPERIMENTS[name] = fn
        return fn

    return deco


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    params: dict

    def canonical(self):
        return json.dumps({"name": self.name, "params": self.params}, sort_keys=True)


def _run_one(args):
    name, params, seed, index = args
    s = derive_seed(seed, index)
    try:
        return index, EXPERIMENTS[name](params, s), None
    except (SolverError, GridError, FieldError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def run_campaign(spec, n_samples, seed, workers=1, start=0):
    """Run samples ``start .. start+n_samples-1``; sample i uses ``derive_seed(seed, i)``."""
    if n_samples < 1:
        raise StatsError("need at least one sample")
    if spec.name not in EXPERIMENTS:
        raise StatsError(f"unknown experiment {spec.name!r}")
    jobs = [(spec.name, spec.params, seed, i) for i in range(start, start + n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_run_one(j) for j in jobs]
    out = SampleSet(spec.name, seed)
    for index, obs, err in sorted(results, key=lambda r: r[0]):
        if err is None:
            out.add(index, obs)
        else:
            out.fail(index, err)
    return out


def _field(params, seed):
    return make_law(seed=seed, **params["law"])


def _vec(params, key, dim, default=0):
    v = params.get(key)
    if v is None:
        v = np.eye(dim)[default]
    return np.asarray(v, dtype=float)


@experiment("quadratic_forms")
def _exp_quadratic_forms(params, seed):
    """Per-size matrices of nu(p) = 1/2 p.N p and -mu(q) = 1/2 q.M q."""
    fld = _field(params, seed)
    obs = {}
    for R in params["sizes"]:
        grid = CubeGrid(fld.dim, R, params.get("rho", 2))
        N, M, _, _ = sample_quadratic_forms(CellProblem(grid, fld, params.get("tol", DEFAULT_TOL)))
        for i in range(fld.dim):
            for j in range(i, fld.dim):
                obs[f"N_{R}_{i}{j}"] = float(N[i, j])
                obs[f"M_{R}_{i}{j}"] = float(M[i, j])
    return obs


@experiment("nu")
def _exp_nu(params, seed):
    fld = _field(params, seed)
    p = _vec(params, "p", fld.dim)
    obs = {}
    for R in params["sizes"]:
        grid = CubeGrid(fld.dim, R, params.get("rho", 2))
        obs[f"nu_{R}"] = CellProblem(grid, fld, params.get("tol", DEFAULT_TOL)).nu(p)[0]
    return obs


@experiment("corrector")
def _exp_corrector(params, seed):
    fld = _field(params, seed)
    p = _vec(params, "p", fld.dim)
    c = corrector_curve(fld, p, params["M"], params.get("levels"), params.get("rho", 2),
                        params.get("tol", DEFAULT_TOL))
    obs = {}
    for k, o, h, r in zip(c.levels, c.osc, c.hminus, c.ratios):
        obs[f"osc_{k}"] = o
        obs[f"hminus_{k}"] = h
        obs[f"ratio_{k}"] = r
    return obs


@experiment("gluing")
def _exp_gluing(params, seed):
    fld = _field(params, seed)
    p = _vec(params, "p", fld.dim)
    obs = {}
    for n in params["n"]:
        lhs, rhs = gluing_defect(fld, p, params["m"], n, params.get("rho", 2), params.get("tol", DEFAULT_TOL))
        obs[f"lhs_{n}"] = lhs
        obs[f"rhs_{n}"] = rhs
    return obs


@experiment("decor")
def _exp_decor(params, seed):
    fld = _field(params, seed)
    fluxes = cube_fluxes(fld, params.get("r", 3), params.get("separation", 1), params.get("n_cubes", 16),
                         params.get("rho", 2), _vec(params, "p", fld.dim), params.get("tol", DEFAULT_TOL))
    return {f"flux_{c}_{i}": float(fluxes[c, i]) for c in range(fluxes.shape[0]) for i in range(fluxes.shape[1])}


# -- rate fits -----------------------------------------------------------------


@dataclass
class RateFit:
    sizes: np.ndarray
    means: np.ndarray
    ses: np.ndarray
    alpha: float
    alpha_se: float
    ci: tuple
    r2: float
    slope: float
    intercept: float


def fit_rate(sizes, means, ses, min_sizes=3):
    """Inverse-variance weighted fit of ``log mean = c - alpha log size``.

    Standard errors of the logs come from the delta method (se / mean); the
    CI is ``alpha +- 1.96 se(alpha)`` from the weighted normal equations.
    Zero standard errors fall back to unit weights.
    """
    x = np.asarray(sizes, dtype=float)
    y = np.asarray(means, dtype=float)
    s = np.asarray(ses, dtype=float)
    if len(x) < min_sizes:
        raise StatsError(f"need >= {min_sizes} sizes")
    if np.any(y <= 0):
        raise StatsError("log-log fit needs positive means")
    lx, ly = np.log(x), np.log(y)
    sl = s / y
    if np.all(sl > 0):
        w = 1.0 / sl**2
        known = True
    else:
        w = np.ones_like(lx)
        known = False
    X = np.stack([np.ones_like(lx), lx], axis=1)
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ ly)
    resid = ly - X @ beta
    if not known:
        dof = max(len(x) - 2, 1)
        cov = cov * float(resid @ resid) / dof
    ybar = np.sum(w * ly) / np.sum(w)
    ss_tot = float(np.sum(w * (ly - ybar) ** 2))
    r2 = 1.0 - float(np.sum(w * resid**2)) / ss_tot if ss_tot > 0 else 1.0
    slope = float(beta[1])
    se = math.sqrt(max(cov[1, 1], 0.0))
    alpha = -slope
    return RateFit(x, y, s, alpha, se, (alpha - Z95 * se, alpha + Z95 * se), r2, slope, float(beta[0]))


def variance_se(x):
    """Standard error of the unbiased sample variance (fourth-moment formula)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    m = x.mean()
    s2 = x.var(ddof=1)
    m4 = np.mean((x - m) ** 4)
    v = (m4 - s2**2 * (n - 3) / (n - 1)) / n
    return math.sqrt(max(v, 0.0))


def effective_from_campaign(samples, size, dim):
    """Mean of the per-sample N matrices at ``size`` (the effective-matrix estimate)."""
    A = np.zeros((dim, dim))
    for i in range(dim):
        for j in range(i, dim):
            A[i, j] = A[j, i] = samples.mean(f"N_{size}_{i}{j}")
    return A


def _matrices(samples, size, dim, key):
    rows = []
    for idx in samples.indices:
        obs = samples.records[idx]
        A = np.zeros((dim, dim))
        for i in range(dim):
            for j in range(i, dim):
                A[i, j] = A[j, i] = obs[f"{key}_{size}_{i}{j}"]
        rows.append(A)
    return np.array(rows)


def j_values(samples, size, dim, p, q):
    """Per-sample ``J(box, p, q) = 1/2 p.N p + 1/2 q.M q - p.q`` at ``size``."""
    N = _matrices(samples, size, dim, "N")
    M = _matrices(samples, size, dim, "M")
    return 0.5 * np.einsum("i,sij,j->s", p, N, p) + 0.5 * np.einsum("i,sij,j->s", q, M, q) - float(p @ q)


def nu_values(samples, size, dim, p):
    N = _matrices(samples, size, dim, "N")
    return 0.5 * np.einsum("i,sij,j->s", p, N, p)


def rate_table(samples, sizes, dim, p, ahom=None):
    """Rows (size, mean, se, n) of J(box, p, ahom p); ahom defaults to the largest-box estimate."""
    p = np.asarray(p, dtype=float)
    if ahom is None:
        ahom = effective_from_campaign(samples, max(sizes), dim)
    q = ahom @ p
    rows = []
    for R in sizes:
        J = j_values(samples, R, dim, p, q)
        rows.append((R, math.fsum(J) / len(J), float(J.std(ddof=1) / math.sqrt(len(J))), len(J)))
    return rows, ahom


# -- log-Laplace ---------------------------------------------------------------


@dataclass
class LogLaplaceProfile:
    beta: float
    lambdas: np.ndarray
    psi: np.ndarray
    C: float
    convex: bool
    scale: float


def log_laplace(x, volume, beta, lambdas=DEFAULT_LAMBDAS):
    """``psi(lambda) = log mean exp(lambda |box|^beta (X - mean X))`` on the grid.

    The fitted C is the smallest constant with ``psi <= C (1 + lambda^2)`` on the grid.
    """
    x = np.asarray(x, dtype=float)
    lambdas = np.asarray(sorted(lambdas), dtype=float)
    scaled = volume**beta * (x - math.fsum(x) / len(x))
    peak = float(np.abs(scaled).max()) if len(scaled) else 0.0
    bad = [lam for lam in lambdas if abs(lam) * peak > OVERFLOW_GUARD]
    if bad:
        raise StatsError(f"overflow guard violated for lambda in {bad}")
    psi = np.array([logsumexp(lam * scaled) - math.log(len(scaled)) for lam in lambdas])
    C = float(np.max(psi / (1 + lambdas**2)))
    g, first = np.unique(np.concatenate([lambdas, [0.0]]), return_index=True)
    v = np.concatenate([psi, [0.0]])[first]
    slopes = np.diff(v) / np.diff(g)
    convex = bool(np.all(np.diff(slopes) >= -1e-12))
    return LogLaplaceProfile(beta, lambdas, psi, C, convex, float(volume**beta))


# -- decorrelation -------------------------------------------------------------


def cube_layout(n_cubes, r, separation, dim):
    """Centres of a row-major block of cubes of side r with the given gap between faces."""
    per_side = math.ceil(n_cubes ** (1.0 / dim) - 1e-9)
    step = r + separation
    idx = np.indices((per_side,) * dim).reshape(dim, -1).T[:n_cubes]
    return idx * step


def cube_fluxes(field, r, separation, n_cubes, rho=2, p=None, tol=DEFAULT_TOL):
    """``fint a grad v`` of the nu(p) minimizer on each cube, shape (n_cubes, d)."""
    if separation < 0:
        raise StatsError("separation must be nonnegative")
    if int(r) != r or r % 2 != 1:
        raise StatsError("cube side must be an odd integer (lattice-centred cubes)")
    dim = field.dim
    p = np.eye(dim)[0] if p is None else np.asarray(p, dtype=float)
    out = []
    for c in cube_layout(n_cubes, r, separation, dim):
        prob = CellProblem(CubeGrid(dim, r, rho, tuple(float(t) for t in c)), field, tol)
        _, v = prob.nu(p)
        out.append(prob.flux_mean(v))
    return np.array(out)


@dataclass
class Decorrelation:
    corr: np.ndarray  # (2d, 2d): components of cube 0 then cube 1
    threshold: float
    var_single: float
    var_avg: dict
    reduction: dict  # N -> var_single / var_avg[N] (ideally N)
    n: int


def flux_decorrelation(law, r, separation, n, seed, rho=2, n_cubes=16, averages=(4, 16), workers=1,
                       tol=DEFAULT_TOL):
    """Correlations of cube-averaged fluxes between neighbouring cubes and CLT variance scaling."""
    spec = ExperimentSpec("decor", {"law": law, "r": r, "separation": separation, "n_cubes": n_cubes,
                                    "rho": rho, "tol": tol})
    samples = run_campaign(spec, n, seed, workers=workers)
    return decorrelation_from_samples(samples, law["dim"], n_cubes, averages)


def decorrelation_from_samples(samples, dim, n_cubes, averages=(4, 16)):
    if samples.count < 2 or n_cubes < 2:
        raise StatsError("need at least two samples and two cubes")
    if max(averages) > n_cubes:
        raise StatsError("cannot average more cubes than computed")
    F = np.array([[[samples.records[i][f"flux_{c}_{k}"] for k in range(dim)] for c in range(n_cubes)]
                  for i in samples.indices])
    pair = np.concatenate([F[:, 0, :], F[:, 1, :]], axis=1)
    corr = np.corrcoef(pair, rowvar=False)
    single = F[:, :, 0]
    var_single = float(np.mean(single.var(axis=0, ddof=1)))
    var_avg, red = {}, {}
    for N in averages:
        var_avg[N] = float(single[:, :N].mean(axis=1).var(ddof=1))
        red[N] = var_single / var_avg[N] if var_avg[N] > 0 else math.inf
    n = samples.count
    return Decorrelation(corr, 3.0 / math.sqrt(n), var_single, var_avg, red, n)


# -- artifacts -----------------------------------------------------------------


def manifest(spec_dict, seeds=None, version=None):
    from . import __version__

    doc = {"spec": spec_dict, "seeds": seeds, "version": version or __version__}
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return doc, hashlib.sha256(text.encode()).hexdigest()


def format_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_text(header, rows, manifest_hash):
    buf = io.StringIO()
    buf.write(f"# manifest {manifest_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, manifest_hash):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(header, rows, manifest_hash))


def write_manifest(path, doc, manifest_hash):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"hash": manifest_hash, **doc}, fh, sort_keys=True, indent=2)
        fh.write("\n")
