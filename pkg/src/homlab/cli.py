"""Command line entry point: ``homlab [global flags] <subcommand> [options]``.

Every run resolves a configuration (defaults < INI config < flags), writes its
artifacts under ``$HOMLAB_OUT/<subcommand>/`` (or ``--out``) together with a
manifest whose hash heads every CSV, and exits with

    0  all hard invariants passed
    2  configuration error
    3  an invariant failed
    4  a solver failed (including partial campaign failures)
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .energy import CellProblem, identity_suite, j_quantity, sample_quadratic_forms
from .field import FieldError, load_field, make_law, save_field
from .grid import DEFAULT_TOL, CubeGrid, GridError, SolverError, loads_snapshot
from .multiscale import TriadicHierarchy, msp_evaluate, msp_test_suite
from .regularity import RegularityError, harmonic_test_function, regularity_curve
from .stats import (
    DEFAULT_BETAS,
    DEFAULT_LAMBDAS,
    ExperimentSpec,
    StatsError,
    csv_text,
    decorrelation_from_samples,
    fit_rate,
    log_laplace,
    manifest,
    rate_table,
    run_campaign,
    variance_se,
    write_manifest,
)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_SOLVER = 0, 2, 3, 4
OUT_ENV = "HOMLAB_OUT"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _floats(text):
    return [float(t) for t in str(text).replace(";", ",").split(",") if t.strip()]


def _ints(text):
    out = []
    for t in str(text).split(","):
        if t.strip():
            v = float(t)
            if v != int(v):
                raise ValueError(f"{t!r} is not an integer")
            out.append(int(v))
    return out


# (section, key): (type, default, description) -- the single table of defaults
DEFAULTS = {
    ("field", "law"): (str, "checkerboard", "checkerboard | laminate | constant"),
    ("field", "dim"): (int, 2, "spatial dimension (2 or 3)"),
    ("field", "lambda"): (float, 4.0, "ellipticity constant (contrast)"),
    ("field", "vf"): (float, 0.5, "checkerboard volume fraction of the lambda phase"),
    ("field", "axis"): (int, 0, "laminate axis"),
    ("field", "period"): (float, 2.0, "laminate period"),
    ("field", "matrix"): (_floats, None, "constant law matrix, row-major"),
    ("field", "file"): (str, None, "coefficient field file (overrides the law)"),
    ("grid", "rho"): (int, 2, "mesh cells per unit length"),
    ("grid", "sizes"): (_ints, [3, 9, 27, 81], "triadic cube sides for campaigns"),
    ("grid", "cube"): (float, 9.0, "cube side for single-realization commands"),
    ("run", "samples"): (int, 64, "Monte Carlo samples"),
    ("run", "seed"): (int, 0, "base seed"),
    ("run", "p"): (_floats, None, "slope p (default e1)"),
    ("run", "q"): (_floats, None, "flux q (default e2)"),
    ("run", "tol"): (float, DEFAULT_TOL, "CG relative residual tolerance"),
    ("run", "workers"): (int, 1, "campaign worker processes"),
    ("experiment", "levels"): (_ints, None, "triadic levels (corrector: M; msp: list of m)"),
    ("experiment", "inner"): (_ints, None, "inner corrector levels"),
    ("experiment", "m"): (int, 3, "gluing top level"),
    ("experiment", "n"): (_ints, [1, 2], "gluing sub-levels"),
    ("experiment", "k"): (int, 0, "polynomial degree for regularity curves"),
    ("experiment", "radii"): (_floats, None, "ball radii for regularity curves"),
    ("experiment", "R"): (float, 27.0, "cube side for regularity curves"),
    ("experiment", "ahom"): (_floats, None, "effective matrix for regularity (row-major)"),
    ("experiment", "beta"): (_floats, list(DEFAULT_BETAS), "log-Laplace exponents"),
    ("experiment", "lambdas"): (_floats, list(DEFAULT_LAMBDAS), "log-Laplace lambda grid"),
    ("experiment", "separation"): (int, 1, "gap between decorrelation cubes"),
    ("experiment", "r"): (int, 3, "decorrelation cube side"),
    ("experiment", "n_cubes"): (int, 16, "cubes per decorrelation sample"),
}


def default_table():
    """The defaults table as text (used by ``--help-defaults``)."""
    lines = []
    for (sec, key), (_, val, doc) in DEFAULTS.items():
        lines.append(f"[{sec}] {key:<10} = {val!s:<24} {doc}")
    return "\n".join(lines)


def load_config(path):
    """Parse an INI file into ``{(section, key): value}``; unknown keys are errors."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    problems, out = [], {}
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"])
    for sec in parser.sections():
        for key, raw in parser.items(sec):
            if (sec, key) not in DEFAULTS:
                problems.append(f"unknown config key [{sec}] {key}")
                continue
            conv = DEFAULTS[(sec, key)][0]
            try:
                out[(sec, key)] = conv(raw)
            except ValueError as exc:
                problems.append(f"bad value for [{sec}] {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return out


FLAG_KEYS = {
    "law": ("field", "law"), "dim": ("field", "dim"), "lam": ("field", "lambda"), "vf": ("field", "vf"),
    "axis": ("field", "axis"), "period": ("field", "period"), "field": ("field", "file"),
    "rho": ("grid", "rho"), "sizes": ("grid", "sizes"), "cube": ("grid", "cube"),
    "samples": ("run", "samples"), "seed": ("run", "seed"), "p": ("run", "p"), "q": ("run", "q"),
    "tol": ("run", "tol"), "workers": ("run", "workers"),
    "levels": ("experiment", "levels"), "inner": ("experiment", "inner"), "m": ("experiment", "m"),
    "n": ("experiment", "n"), "k": ("experiment", "k"), "radii": ("experiment", "radii"),
    "R": ("experiment", "R"), "ahom": ("experiment", "ahom"), "beta": ("experiment", "beta"),
    "lambdas": ("experiment", "lambdas"), "separation": ("experiment", "separation"),
    "r": ("experiment", "r"), "n_cubes": ("experiment", "n_cubes"),
}


def resolve(args):
    cfg = {k: v[1] for k, v in DEFAULTS.items()}
    if args.config:
        cfg.update(load_config(args.config))
    for attr, key in FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg[key] = val
    validate(cfg, args.command)
    return cfg


def _is_triadic(x):
    if x < 1 or x != int(x):
        return False
    x = int(x)
    while x % 3 == 0:
        x //= 3
    return x == 1


def validate(cfg, command):
    g = lambda s, k: cfg[(s, k)]
    problems = []
    if g("field", "dim") not in (2, 3):
        problems.append("dim must be 2 or 3")
    if g("field", "lambda") < 1:
        problems.append("lambda must be >= 1")
    if not 0 <= g("field", "vf") <= 1:
        problems.append("vf must lie in [0, 1]")
    if g("field", "law") not in ("checkerboard", "laminate", "constant"):
        problems.append(f"unknown law {g('field', 'law')!r}")
    if g("grid", "rho") < 1:
        problems.append("rho must be a positive integer")
    if g("run", "tol") <= 0:
        problems.append("tol must be positive")
    if g("run", "samples") < 1:
        problems.append("samples must be >= 1")
    if g("run", "workers") < 1:
        problems.append("workers must be >= 1")
    dim = g("field", "dim")
    for key in ("p", "q"):
        v = g("run", key)
        if v is not None and len(v) != dim:
            problems.append(f"{key} must have {dim} components")
    if command in ("rate", "fluct"):
        sizes = g("grid", "sizes")
        if command == "rate" and len(sizes) < 3:
            problems.append("need >= 3 sizes")
        if command == "fluct" and len(sizes) < 2:
            problems.append("need >= 2 sizes")
        bad = [s for s in sizes if not _is_triadic(s)]
        if bad:
            problems.append(f"sizes must be triadic (3^m): {bad}")
        if command == "rate" and g("run", "samples") < 8:
            problems.append("need >= 8 samples per size")
    if command == "corrector":
        lv = g("experiment", "levels")
        if lv is not None and (len(lv) != 1 or lv[0] < 2):
            problems.append("corrector needs a single level M >= 2")
    if command == "gluing":
        if any(n > g("experiment", "m") or n < 0 for n in g("experiment", "n")):
            problems.append("gluing sub-levels must lie in [0, m]")
    if command == "decor":
        if g("experiment", "separation") < 0:
            problems.append("separation must be >= 0")
        if g("experiment", "r") % 2 != 1:
            problems.append("decorrelation cube side must be odd")
    if problems:
        raise ConfigError(problems)


def law_params(cfg):
    law = cfg[("field", "law")]
    dim = cfg[("field", "dim")]
    lam = cfg[("field", "lambda")]
    out = {"law": law, "dim": dim, "lam": lam}
    if law == "checkerboard":
        out["volume_fraction"] = cfg[("field", "vf")]
    elif law == "laminate":
        out["axis"] = cfg[("field", "axis")]
        out["period"] = cfg[("field", "period")]
        out["values"] = [np.eye(dim).tolist(), (lam * np.eye(dim)).tolist()]
    elif law == "constant":
        mat = cfg[("field", "matrix")]
        out["matrix"] = np.eye(dim).tolist() if mat is None else np.reshape(mat, (dim, dim)).tolist()
    return out


def build_field(cfg, seed=None):
    path = cfg[("field", "file")]
    if path:
        return load_field(path)
    params = law_params(cfg)
    return make_law(seed=cfg[("run", "seed")] if seed is None else seed, **params)


def _vec(cfg, key, default_axis, dim):
    v = cfg[("run", key)]
    return np.eye(dim)[default_axis] if v is None else np.asarray(v, dtype=float)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


class Run:
    """Output directory, manifest hash and artifact writers for one command."""

    def __init__(self, command, cfg, out):
        self.command = command
        root = out or os.environ.get(OUT_ENV, "homlab_out")
        self.dir = os.path.join(root, command)
        spec = {f"{s}.{k}": v for (s, k), v in sorted(cfg.items()) if (s, k) != ("run", "workers")}
        spec["command"] = command
        self.doc, self.hash = manifest(_jsonable(spec))
        os.makedirs(self.dir, exist_ok=True)
        write_manifest(os.path.join(self.dir, "manifest.json"), self.doc, self.hash)

    def csv(self, name, header, rows):
        path = os.path.join(self.dir, name)
        with open(path, "w", newline="") as fh:
            fh.write(csv_text(header, rows, self.hash))
        return path

    def json(self, name, data):
        path = os.path.join(self.dir, name)
        with open(path, "w") as fh:
            json.dump(_jsonable({"manifest": self.hash, **data}), fh, sort_keys=True, indent=2)
            fh.write("\n")
        return path


def _campaign_status(samples):
    if samples.failures:
        return EXIT_SOLVER, {str(k): v for k, v in sorted(samples.failures.items())}
    return EXIT_OK, {}


# -- subcommands -----------------------------------------------------------------


def cmd_gen_field(cfg, args, run):
    fld = build_field(cfg)
    R = int(args.box)
    if R % 2 != 1:
        raise ConfigError(["box must be an odd number of cells (lattice-centred cube)"])
    lo = (-(R // 2),) * fld.dim
    hi = (R // 2 + 1,) * fld.dim
    out = args.out_file or os.path.join(run.dir, "field.bin")
    save_field(out, fld, lo, hi)
    return EXIT_OK, {"file": out, "cells": R**fld.dim}


def _problem(cfg, side=None):
    fld = build_field(cfg)
    side = cfg[("grid", "cube")] if side is None else side
    grid = CubeGrid(fld.dim, side, cfg[("grid", "rho")])
    return CellProblem(grid, fld, cfg[("run", "tol")]), fld


def cmd_energy(cfg, args, run):
    prob, fld = _problem(cfg)
    p = _vec(cfg, "p", 0, fld.dim)
    q = _vec(cfg, "q", 1 % fld.dim, fld.dim)
    rep = j_quantity(prob, p, q)
    data = {"p": p, "q": q, "nu": rep.nu, "mu": rep.mu, "J": rep.J}
    status = EXIT_OK
    if args.check_identities:
        checks = {k: {"value": v, "threshold": rep.tolerance, "passed": v <= rep.tolerance}
                  for k, v in rep.residuals.items()}
        data["identities"] = checks
        if not rep.ok:
            status = EXIT_INVARIANT
    run.json("energy.json", data)
    print(json.dumps(_jsonable(data), sort_keys=True, indent=2))
    return status, data


def cmd_identities(cfg, args, run):
    prob, fld = _problem(cfg)
    d = fld.dim
    rng = np.random.default_rng(cfg[("run", "seed")])
    p = _vec(cfg, "p", 0, d)
    q = _vec(cfg, "q", 1 % d, d)
    p2, q2 = rng.standard_normal(d), rng.standard_normal(d)
    res = identity_suite(prob, p, q, p2, q2, seed=cfg[("run", "seed")])
    side = prob.grid.side
    if side >= 3 and _is_triadic(side):
        from .energy import subadditivity_check

        sub = subadditivity_check(fld, prob.grid, p, q, prob.tol)
        thr = 1e-10
        res["nu_subadditive"] = (sub["nu"] - sub["nu_children"], thr, sub["nu"] <= sub["nu_children"] + thr)
        res["mu_superadditive"] = (sub["mu_children"] - sub["mu"], thr, sub["mu"] >= sub["mu_children"] - thr)
    rows = [(k, v, t, int(ok)) for k, (v, t, ok) in res.items()]
    run.csv("identities.csv", ["check", "value", "threshold", "passed"], rows)
    for k, v, t, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {k:<22} {v:.3e} (threshold {t:.1e})")
    ok = all(r[3] for r in rows)
    return (EXIT_OK if ok else EXIT_INVARIANT), {"checks": res}


def _campaign(cfg, name, params, n=None):
    spec = ExperimentSpec(name, {"law": law_params(cfg), "rho": cfg[("grid", "rho")],
                                 "tol": cfg[("run", "tol")], **params})
    return run_campaign(spec, n or cfg[("run", "samples")], cfg[("run", "seed")], workers=cfg[("run", "workers")])


def cmd_rate(cfg, args, run):
    sizes = cfg[("grid", "sizes")]
    d = cfg[("field", "dim")]
    p = _vec(cfg, "p", 0, d)
    samples = _campaign(cfg, "quadratic_forms", {"sizes": sizes})
    status, failures = _campaign_status(samples)
    if samples.count < 2:
        return EXIT_SOLVER, {"failures": failures}
    rows, ahom = rate_table(samples, sizes, d, p)
    run.csv("rates.csv", ["size", "mean", "se", "n"], rows)
    fit = fit_rate([r[0] ** d for r in rows], [r[1] for r in rows], [r[2] for r in rows])
    means = [r[1] for r in rows]
    data = {
        "ahom_hat": ahom,
        "alpha": fit.alpha, "alpha_ci": fit.ci, "r2": fit.r2,
        "means_decreasing": all(a > b for a, b in zip(means, means[1:])),
        "alpha_ci_excludes_zero": fit.ci[0] > 0,
        "failures": failures,
    }
    run.json("rate_fit.json", data)
    print(f"alpha = {fit.alpha:.4f}  95% CI [{fit.ci[0]:.4f}, {fit.ci[1]:.4f}]  R^2 = {fit.r2:.4f}")
    return status, data


def cmd_fluct(cfg, args, run):
    sizes = cfg[("grid", "sizes")]
    d = cfg[("field", "dim")]
    p = _vec(cfg, "p", 0, d)
    samples = _campaign(cfg, "nu", {"sizes": sizes, "p": p.tolist()})
    status, failures = _campaign_status(samples)
    rows, var_rows = [], []
    Cs = {}
    for R in sizes:
        x = samples.values(f"nu_{R}")
        var_rows.append((R, float(x.var(ddof=1)), variance_se(x), len(x)))
        for beta in cfg[("experiment", "beta")]:
            prof = log_laplace(x, float(R) ** d, beta, cfg[("experiment", "lambdas")])
            Cs[(R, beta)] = prof.C
            rows += [(R, beta, lam, psi) for lam, psi in zip(prof.lambdas, prof.psi)]
    run.csv("loglaplace.csv", ["size", "beta", "lambda", "psi_hat"], rows)
    run.csv("variance.csv", ["size", "var", "se", "n"], var_rows)
    fit = fit_rate([r[0] for r in var_rows], [r[1] for r in var_rows], [r[2] for r in var_rows], min_sizes=2)
    data = {"variance_slope": fit.slope, "variance_slope_ci": (-fit.ci[1], -fit.ci[0]),
            "C": {f"{R}:{b}": c for (R, b), c in Cs.items()}, "failures": failures}
    run.json("fluct.json", data)
    print(f"variance slope vs R = {fit.slope:.3f} +- {1.96 * fit.alpha_se:.3f}")
    return status, data


def cmd_corrector(cfg, args, run):
    lv = cfg[("experiment", "levels")] or [4]
    M = lv[0]
    inner = cfg[("experiment", "inner")] or list(range(1, M))
    d = cfg[("field", "dim")]
    p = _vec(cfg, "p", 0, d)
    samples = _campaign(cfg, "corrector", {"M": M, "levels": inner, "p": p.tolist()})
    status, failures = _campaign_status(samples)
    rows = []
    for k in inner:
        rows.append((k, samples.mean(f"osc_{k}"), samples.se(f"osc_{k}"), samples.mean(f"hminus_{k}"),
                     samples.se(f"hminus_{k}"), samples.mean(f"ratio_{k}"), samples.count))
    run.csv("curve.csv", ["level", "osc", "osc_se", "hminus", "hminus_se", "ratio", "n"], rows)
    fit = fit_rate([3.0**r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], min_sizes=2)
    ratios = [r[5] for r in rows]
    data = {"growth_exponent": fit.slope, "growth_ci": (-fit.ci[1], -fit.ci[0]),
            "ratios_decreasing": all(a > b for a, b in zip(ratios, ratios[1:])), "failures": failures}
    run.json("corrector.json", data)
    print(f"osc ~ 3^(k * {fit.slope:.3f}), ratios {['%.4f' % r for r in ratios]}")
    return status, data


def cmd_msp(cfg, args, run):
    tol = cfg[("run", "tol")]
    snapshot = fld = None
    if args.input:
        with open(args.input, "rb") as fh:
            buf = fh.read()
        try:
            snapshot = loads_snapshot(buf)
        except FieldError:
            fld = load_field(args.input)
    jobs = []
    if snapshot is not None:
        h = TriadicHierarchy(snapshot.grid)
        jobs.append((h.m, h, {"input": snapshot}))
    else:
        fld = fld or build_field(cfg)
        for m in cfg[("experiment", "levels")] or [2, 3, 4]:
            h = TriadicHierarchy(CubeGrid(fld.dim, 3**m, cfg[("grid", "rho")]))
            jobs.append((m, h, msp_test_suite(h, fld, tol=tol)))
    rows, ratios = [], {}
    for m, h, suite in jobs:
        for name, fn in suite.items():
            rep = msp_evaluate(fn, h, tol)
            ratios.setdefault(m, {})[name] = rep.ratio
            for n, term in enumerate(rep.rhs_scale_terms):
                rows.append((m, name, n, term, rep.lhs_l2, rep.lhs_hminus, rep.rhs_gradient_term, rep.ratio))
    run.csv("msp.csv", ["m", "function", "level", "scale_term", "lhs_l2", "lhs_hminus", "grad_l2", "ratio"], rows)
    mx = {m: max(v.values()) for m, v in ratios.items()}
    spread = max(mx.values()) / min(mx.values()) - 1
    data = {"ratios": ratios, "max_ratio": mx, "spread": spread}
    run.json("msp.json", data)
    for m, v in mx.items():
        print(f"m = {m}: max ratio {v:.4f}")
    finite = all(math.isfinite(v) for v in mx.values())
    return (EXIT_OK if finite else EXIT_INVARIANT), data


def cmd_gluing(cfg, args, run):
    m = cfg[("experiment", "m")]
    ns = cfg[("experiment", "n")]
    d = cfg[("field", "dim")]
    p = _vec(cfg, "p", 0, d)
    samples = _campaign(cfg, "gluing", {"m": m, "n": ns, "p": p.tolist()})
    status, failures = _campaign_status(samples)
    rows, held = [], 0
    for i in samples.indices:
        obs = samples.records[i]
        for n in ns:
            lhs, rhs = obs[f"lhs_{n}"], obs[f"rhs_{n}"]
            ok = lhs <= rhs * (1 + 1e-8) + 1e-10
            held += ok
            rows.append((i, m, n, lhs, rhs, int(ok)))
    run.csv("gluing.csv", ["sample", "m", "n", "lhs", "rhs", "holds"], rows)
    total = len(rows)
    data = {"held": held, "total": total, "failures": failures}
    run.json("gluing.json", data)
    print(f"gluing inequality held in {held}/{total} instances")
    if status == EXIT_OK and held < total:
        status = EXIT_INVARIANT
    return status, data


def cmd_regularity(cfg, args, run):
    fld = build_field(cfg)
    d = fld.dim
    R = cfg[("experiment", "R")]
    k = cfg[("experiment", "k")]
    rho = cfg[("grid", "rho")]
    radii = cfg[("experiment", "radii")] or [r for r in (2, 3, 4, 6, 8, 12) if r <= R / 2]
    ah = cfg[("experiment", "ahom")]
    if ah is not None:
        ahom = np.reshape(ah, (d, d))
    elif fld.law == "constant":
        ahom = np.asarray(fld.params["matrix"], dtype=float)
    else:
        N, _, _, _ = sample_quadratic_forms(CellProblem(CubeGrid(d, R, rho), fld, cfg[("run", "tol")]))
        ahom = 0.5 * (N + N.T)
    boundary = None
    if fld.law == "constant":
        boundary = harmonic_test_function(ahom, k + 1, seed=cfg[("run", "seed")])
    rows = []
    for kk in range(k + 1):
        curve = regularity_curve(fld, R, kk, radii, ahom=ahom, boundary=boundary, rho=rho, tol=cfg[("run", "tol")])
        rows += [(kk, r, v, raw, ratio, curve.slope) for r, v, raw, ratio in
                 zip(curve.radii, curve.values, curve.raw, curve.ratios)]
    run.csv("dk.csv", ["k", "r", "dk_normalized", "dk", "ratio_to_largest", "slope"], rows)
    by_r = {}
    for kk, r, _, raw, _, _ in rows:
        by_r.setdefault(r, []).append(raw)
    monotone = all(all(b <= a * (1 + 1e-9) + 1e-14 for a, b in zip(v, v[1:])) for v in by_r.values())
    data = {"ahom": ahom, "monotone_in_k": monotone, "slope": rows[-1][5] if rows else None}
    run.json("regularity.json", data)
    print(f"D_{k} slope {data['slope']}")
    return (EXIT_OK if monotone else EXIT_INVARIANT), data


def cmd_decor(cfg, args, run):
    d = cfg[("field", "dim")]
    nc = cfg[("experiment", "n_cubes")]
    sep = cfg[("experiment", "separation")]
    samples = _campaign(cfg, "decor", {"r": cfg[("experiment", "r")], "separation": sep, "n_cubes": nc})
    status, failures = _campaign_status(samples)
    dec = decorrelation_from_samples(samples, d, nc, tuple(a for a in (4, 16) if a <= nc))
    rows = [(sep, float(dec.corr[i, d + i]), dec.n) for i in range(d)]
    run.csv("decor.csv", ["separation", "corr", "n"], rows)
    cross = float(np.abs(dec.corr[:d, d:]).max())
    data = {"max_cross_corr": cross, "threshold": dec.threshold, "variance_reduction": dec.reduction,
            "corr": dec.corr, "failures": failures}
    run.json("decor.json", data)
    print(f"max |corr| {cross:.4f} (threshold {dec.threshold:.4f}); reduction {dec.reduction}")
    return status, data


COMMANDS = {
    "gen-field": cmd_gen_field, "energy": cmd_energy, "identities": cmd_identities, "rate": cmd_rate,
    "fluct": cmd_fluct, "corrector": cmd_corrector, "msp": cmd_msp, "gluing": cmd_gluing,
    "regularity": cmd_regularity, "decor": cmd_decor,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="homlab", description="Stochastic homogenization laboratory.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--tol", type=float)
    ap.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./homlab_out)")
    ap.add_argument("--help-defaults", action="store_true", help="print the defaults table and exit")
    # global flags are accepted after the subcommand too
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    glob.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    glob.add_argument("--tol", type=float, default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command")
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[glob], **kw)

    def common(p, law=True):
        if law:
            p.add_argument("--law", choices=["checkerboard", "laminate", "constant"])
            p.add_argument("--dim", type=int)
            p.add_argument("--lambda", dest="lam", type=float)
            p.add_argument("--vf", type=float)
            p.add_argument("--axis", type=int)
            p.add_argument("--period", type=float)
            p.add_argument("--field", help="coefficient field file")
        p.add_argument("--rho", type=int)

    def vec(text):
        return _floats(text)

    p = sub.add_parser("gen-field", help="write a coefficient field file")
    common(p)
    p.add_argument("--box", type=int, required=True, help="odd number of cells per side")
    p.add_argument("--out", dest="out_file", help="output file")

    for name in ("energy", "identities"):
        p = sub.add_parser(name, help="nu, mu, J on one cube" if name == "energy" else "identity suite")
        common(p)
        p.add_argument("--cube", type=float)
        p.add_argument("--p", type=vec)
        p.add_argument("--q", type=vec)
        if name == "energy":
            p.add_argument("--check-identities", action="store_true")

    for name, extra in (("rate", ()), ("fluct", ("--beta", "--lambdas"))):
        p = sub.add_parser(name, help="convergence rate campaign" if name == "rate" else "log-Laplace campaign")
        common(p)
        p.add_argument("--sizes", type=_ints)
        p.add_argument("--samples", type=int)
        p.add_argument("--p", type=vec)
        for e in extra:
            p.add_argument(e, type=vec)

    p = sub.add_parser("corrector", help="corrector sublinearity campaign")
    common(p)
    p.add_argument("--levels", type=_ints, help="box level M")
    p.add_argument("--inner", type=_ints)
    p.add_argument("--samples", type=int)
    p.add_argument("--p", type=vec)

    p = sub.add_parser("msp", help="multiscale Poincare suite")
    common(p)
    p.add_argument("--input", help="field file or grid snapshot")
    p.add_argument("--levels", type=_ints)

    p = sub.add_parser("gluing", help="gluing comparison campaign")
    common(p)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=_ints)
    p.add_argument("--samples", type=int)
    p.add_argument("--p", type=vec)

    p = sub.add_parser("regularity", help="D_k(r) curves")
    common(p)
    p.add_argument("--R", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--radii", type=vec)
    p.add_argument("--ahom", type=vec)

    p = sub.add_parser("decor", help="flux decorrelation campaign")
    common(p)
    p.add_argument("--separation", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--n-cubes", dest="n_cubes", type=int)
    p.add_argument("--samples", type=int)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.help_defaults:
        print(default_table())
        return EXIT_OK
    if not args.command:
        ap.print_help()
        return EXIT_CONFIG
    try:
        cfg = resolve(args)
        run = Run(args.command, cfg, args.out)
        status, data = COMMANDS[args.command](cfg, args, run)
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (FieldError, GridError, RegularityError, StatsError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        report = {"error": str(exc), "residual": exc.residual, "iterations": exc.iterations}
        print(json.dumps(report), file=sys.stderr)
        return EXIT_SOLVER
    if status == EXIT_SOLVER:
        print(json.dumps({"failures": data.get("failures", {})}), file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
