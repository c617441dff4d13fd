"""Cell-problem energies nu, mu, the modulated energy J and their identities.

For a realization on a cube U:

* ``nu(U, p)``: minimum of ``fint 1/2 grad v . a grad v`` over ``v = p.x`` on the boundary,
* ``mu(U, q)``: minimum of ``fint (1/2 grad u . a grad u - q . grad u)`` over all ``u``,
* ``J(U, p, q) = nu - mu - p.q``, maximized over solutions by ``u_min - v_min``.

Every identity below is exact for the discrete problems, so defects are
driven only by the CG tolerance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import make_law
from .grid import (
    DEFAULT_TOL,
    CubeGrid,
    Dirichlet,
    GridField,
    MeanZero,
    QuadraticForm,
    assemble,
    gradient_average_operator,
    integral_mean,
    laplacian,
    solve_spd,
)

IDENTITY_FACTOR = 100.0


class EnergyError(RuntimeError):
    pass


@dataclass
class EnergyReport:
    p: np.ndarray
    q: np.ndarray
    nu: float
    mu: float
    J: float
    v_min: GridField
    u_min: GridField
    u_max: GridField
    residuals: dict = dc_field(default_factory=dict)
    tolerance: float = 0.0

    @property
    def ok(self):
        return all(v <= self.tolerance for v in self.residuals.values())


@dataclass
class EffectiveMatrices:
    Q_hat: np.ndarray
    P_hat: np.ndarray
    ahom_hat: np.ndarray
    M_hat: np.ndarray  # quadratic form of E[J(0, q)]
    N_hat: np.ndarray  # quadratic form of E[J(p, 0)] = E[nu(p)]
    M_cov: np.ndarray
    N_cov: np.ndarray
    Q_ci: np.ndarray
    P_ci: np.ndarray
    zero_grad_q: float
    zero_grad_p: float
    n_samples: int


class CellProblem:
    """One realization on one grid, with the operators reused across solves."""

    def __init__(self, grid, field=None, tol=DEFAULT_TOL, preconditioner="jacobi", form=None):
        self.grid = grid
        self.field = field
        self.tol = tol
        self.preconditioner = preconditioner
        self.form = assemble(grid, field) if form is None else form
        self.lam = field.lam if field is not None else float(np.linalg.eigvalsh(self.form.coeffs).max())
        self.K = self.form.K
        self.grad_op = gradient_average_operator(grid)
        self.flux_op = gradient_average_operator(grid, self.form.coeffs)
        self.x = grid.node_coords()

    # -- functionals -------------------------------------------------------
    def energy(self, u):
        return 0.5 * float(u @ (self.K @ u))

    def bilinear(self, u, v):
        return float(u @ (self.K @ v))

    def grad_mean(self, u):
        return self.grad_op @ u

    def flux_mean(self, u):
        return self.flux_op @ u

    def grad_norm(self, u):
        L = laplacian(self.grid)
        return math.sqrt(max(float(u @ (L @ u)), 0.0))

    def modulated(self, w, p, q):
        """``fint (-1/2 grad w . a grad w - p . a grad w + q . grad w)``."""
        return -self.energy(w) - float(p @ self.flux_mean(w)) + float(q @ self.grad_mean(w))

    # -- optimizers --------------------------------------------------------
    def nu(self, p):
        p = np.asarray(p, dtype=float)
        form = QuadraticForm(self.K, np.zeros(self.grid.num_nodes), grid=self.grid, coeffs=self.form.coeffs)
        v = solve_spd(form, Dirichlet(self.grid.boundary_mask, self.x @ p), self.tol,
                      preconditioner=self.preconditioner).values
        return self.energy(v), v

    def mu(self, q):
        q = np.asarray(q, dtype=float)
        b = self.grad_op.T @ q
        form = QuadraticForm(self.K, b, grid=self.grid, coeffs=self.form.coeffs)
        u = solve_spd(form, MeanZero(), self.tol, preconditioner=self.preconditioner).values
        u = u - integral_mean(self.grid, u)
        return form.value(u), u

    def solution_bank(self, n, seed):
        """Discrete a-harmonic functions with random boundary data."""
        rng = np.random.default_rng(seed)
        mask = self.grid.boundary_mask
        form = QuadraticForm(self.K, np.zeros(self.grid.num_nodes), grid=self.grid)
        bank = []
        for _ in range(n):
            g = np.zeros(self.grid.num_nodes)
            g[mask] = rng.standard_normal(mask.sum())
            bank.append(solve_spd(form, Dirichlet(mask, g), self.tol, preconditioner=self.preconditioner).values)
        return bank

    def report(self, p, q):
        return j_quantity(self, p, q)


def _problem(grid, field, tol):
    return grid if isinstance(grid, CellProblem) else CellProblem(grid, field, tol)


def nu(grid, field, p, tol=DEFAULT_TOL):
    """``(value, minimizer)`` of the Dirichlet cell problem with slope ``p``."""
    value, v = _problem(grid, field, tol).nu(p)
    return value, GridField(grid if isinstance(grid, CubeGrid) else grid.grid, v)


def mu(grid, field, q, tol=DEFAULT_TOL):
    """``(value, minimizer)`` of the Neumann problem with flux ``q`` (mean-zero minimizer)."""
    value, u = _problem(grid, field, tol).mu(q)
    return value, GridField(grid if isinstance(grid, CubeGrid) else grid.grid, u)


def identity_tolerance(problem, p, q):
    scale = max(1.0, float(p @ p + q @ q))
    return IDENTITY_FACTOR * problem.tol * scale


def j_quantity(problem, p, q, field=None):
    """J computed from the two minimizers, with every identity checked."""
    if isinstance(problem, CubeGrid):
        problem = CellProblem(problem, field)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    nu_val, v = problem.nu(p)
    mu_val, u = problem.mu(q)
    u_max = u - v
    J = nu_val - mu_val - float(p @ q)
    flux = problem.flux_mean(u_max)
    grad = problem.grad_mean(u_max)
    lam = problem.lam
    residuals = {
        "modulated_identity": abs(J - problem.modulated(u_max, p, q)),
        "energy_identity": abs(J - problem.energy(u_max)),
        "flux_identity": abs(J - 0.5 * (float(-p @ flux) + float(q @ grad))),
        "positivity": max(0.0, -J),
        "nu_lower": max(0.0, 0.5 * float(p @ p) - nu_val),
        "mu_upper": max(0.0, float(q @ q) / (2 * lam) + mu_val),
    }
    grid = problem.grid
    return EnergyReport(
        p=p,
        q=q,
        nu=nu_val,
        mu=mu_val,
        J=J,
        v_min=GridField(grid, v),
        u_min=GridField(grid, u),
        u_max=GridField(grid, u_max),
        residuals=residuals,
        tolerance=identity_tolerance(problem, p, q),
    )


def first_variation_residual(report, problem, test_bank):
    """``max |<a grad u_max, grad phi> - <-a p + q, grad phi>| / ||grad phi||`` over the bank."""
    u = report.u_max.values
    worst = 0.0
    for phi in test_bank:
        lhs = problem.bilinear(u, phi)
        rhs = -float(report.p @ problem.flux_mean(phi)) + float(report.q @ problem.grad_mean(phi))
        norm = problem.grad_norm(phi)
        if norm > 0:
            worst = max(worst, abs(lhs - rhs) / norm)
    return worst


def second_variation_check(report, problem, phi):
    """``(J - calJ(u_max + phi), 1/2 <grad phi, a grad phi>)``; equal for phi in A(U)."""
    u = report.u_max.values
    lhs = report.J - problem.modulated(u + phi, report.p, report.q)
    rhs = problem.energy(phi)
    return lhs, rhs


def sandwich_check(report, problem, w, v):
    """Slacks of the two quadratic-response bounds around the maximum of calJ.

    Lower: ``2J - calJ(w) - calJ(v) - 1/4 ||grad(v - w)||^2 >= 0``.
    Upper: ``lam ||grad(v - w)||^2 - (2 calJ(v) - calJ(w) - J) >= 0``.
    """
    p, q = report.p, report.q
    jw = problem.modulated(w, p, q)
    jv = problem.modulated(v, p, q)
    d2 = problem.grad_norm(v - w) ** 2
    lower = 2 * report.J - jw - jv - 0.25 * d2
    upper = problem.lam * d2 - (2 * jv - jw - report.J)
    return lower, upper


def polarization_check(problem, p1, q1, p2, q2):
    """Parallelogram identity for J, linearity of maximizers, and convexity bounds.

    Returns a dict of defects (should be ~0) and slacks (should be >= 0).
    """
    p1, q1, p2, q2 = (np.asarray(v, dtype=float) for v in (p1, q1, p2, q2))
    r1 = j_quantity(problem, p1, q1)
    r2 = j_quantity(problem, p2, q2)
    rm = j_quantity(problem, 0.5 * (p1 + p2), 0.5 * (q1 + q2))
    rd = j_quantity(problem, p1 - p2, q1 - q2)
    rs = j_quantity(problem, p1 + p2, q1 + q2)
    lhs = 0.5 * r1.J + 0.5 * r2.J - rm.J
    scale = max(1.0, float(np.abs(r1.u_max.values).max() + np.abs(r2.u_max.values).max()))
    additivity = float(np.abs(rs.u_max.values - r1.u_max.values - r2.u_max.values).max()) / scale
    lam = problem.lam
    dp2 = float((p1 - p2) @ (p1 - p2))
    dq2 = float((q1 - q2) @ (q1 - q2))
    # separate convexity in p (q fixed at q1) and in q (p fixed at p1)
    jp = [j_quantity(problem, pp, q1).J for pp in (p1, p2, 0.5 * (p1 + p2))]
    jq = [j_quantity(problem, p1, qq).J for qq in (q1, q2, 0.5 * (q1 + q2))]
    lhs_p = 0.5 * jp[0] + 0.5 * jp[1] - jp[2]
    lhs_q = 0.5 * jq[0] + 0.5 * jq[1] - jq[2]
    return {
        "defect": abs(lhs - 0.25 * rd.J),
        "additivity": additivity,
        "upconvex_slack": lam * (dp2 + dq2) - lhs,
        "convexp_slack": lhs_p - dp2 / 8.0,
        "convexq_slack": lhs_q - dq2 / (8.0 * lam),
        "lhs": lhs,
        "lhs_p": lhs_p,
        "lhs_q": lhs_q,
    }


def gradient_of_J(problem, p, q, directions, step=1e-4):
    """``grad J(p, q)(p', q') = <-a p' + q', grad u_max(p, q)>`` for each direction.

    Also returns central finite differences of J and the recombination
    ``J(p+p', q+q') - J(p, q) - J(p', q')`` for cross-validation.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    base = j_quantity(problem, p, q)
    u = base.u_max.values
    flux = problem.flux_mean(u)
    grad = problem.grad_mean(u)
    exact, fd, recomb = [], [], []
    for dp, dq in directions:
        dp = np.asarray(dp, dtype=float)
        dq = np.asarray(dq, dtype=float)
        exact.append(-float(dp @ flux) + float(dq @ grad))
        if not (np.any(dp) or np.any(dq)):
            fd.append(0.0)
            recomb.append(0.0)
            continue
        jp = j_quantity(problem, p + step * dp, q + step * dq).J
        jm = j_quantity(problem, p - step * dp, q - step * dq).J
        fd.append((jp - jm) / (2 * step))
        recomb.append(j_quantity(problem, p + dp, q + dq).J - base.J - j_quantity(problem, dp, dq).J)
    return {"exact": np.array(exact), "fd": np.array(fd), "recombined": np.array(recomb), "J": base.J}


def subadditivity_check(field, grid, p, q, tol=DEFAULT_TOL):
    """nu and mu on a triadic cube and its 3^d children (volume-weighted means)."""
    big = CellProblem(grid, field, tol)
    nu_big, _ = big.nu(p)
    mu_big, _ = big.mu(q)
    side = grid.side / 3.0
    nus, mus = [], []
    for offs in itertools.product((-1, 0, 1), repeat=grid.dim):
        center = tuple(c + side * o for c, o in zip(grid.center, offs))
        child = CellProblem(CubeGrid(grid.dim, side, grid.rho, center), field, tol)
        nus.append(child.nu(p)[0])
        mus.append(child.mu(q)[0])
    return {"nu": nu_big, "nu_children": float(np.mean(nus)), "mu": mu_big, "mu_children": float(np.mean(mus))}


def _quadratic_matrix(values, dim):
    """Matrix of the quadratic form f(x) = 1/2 x.A x from f(e_i) and f(e_i + e_j)."""
    A = np.zeros((dim, dim))
    for i in range(dim):
        A[i, i] = 2.0 * values[(i,)]
    for i, j in itertools.combinations(range(dim), 2):
        A[i, j] = A[j, i] = values[(i, j)] - values[(i,)] - values[(j,)]
    return A


def _directions(dim):
    keys = [(i,) for i in range(dim)] + list(itertools.combinations(range(dim), 2))
    vecs = []
    for key in keys:
        v = np.zeros(dim)
        v[list(key)] = 1.0
        vecs.append(v)
    return keys, vecs


def sample_quadratic_forms(problem):
    """Per-realization matrices: ``nu(p) = 1/2 p.N p`` and ``-mu(q) = 1/2 q.M q``.

    Evaluated from the basis and mixed directions (one solve each), together
    with the gradient/flux averages of the basis minimizers.
    """
    dim = problem.grid.dim
    keys, vecs = _directions(dim)
    nu_vals, mu_vals = {}, {}
    grad_mu = np.zeros((dim, dim))
    flux_nu = np.zeros((dim, dim))
    for key, e in zip(keys, vecs):
        nv, v = problem.nu(e)
        mv, u = problem.mu(e)
        nu_vals[key] = nv
        mu_vals[key] = -mv
        if len(key) == 1:
            grad_mu[:, key[0]] = problem.grad_mean(u)
            flux_nu[:, key[0]] = problem.flux_mean(v)
    return _quadratic_matrix(nu_vals, dim), _quadratic_matrix(mu_vals, dim), grad_mu, flux_nu


def estimate_effective(law, grid, n_samples, seed, tol=DEFAULT_TOL, n_boot=200):
    """Monte Carlo estimates of Q(U), P(U) and the effective matrix on ``grid``.

    ``law`` is a dict of :func:`homlab.field.make_law` arguments (without the
    seed).  Sample ``i`` uses the derived seed of ``(seed, i)``.
    """
    from .field import derive_seed

    dim = grid.dim
    if n_samples < 1:
        raise EnergyError("need at least one sample")
    Ns, Ms, Gs, Hs = [], [], [], []
    for i in range(n_samples):
        fld = make_law(seed=derive_seed(seed, i), **law)
        N, M, G, H = sample_quadratic_forms(CellProblem(grid, fld, tol))
        Ns.append(N)
        Ms.append(M)
        Gs.append(G)
        Hs.append(H)
    Ns, Ms = np.array(Ns), np.array(Ms)
    N_hat, M_hat = Ns.mean(axis=0), Ms.mean(axis=0)
    for mat in (N_hat, M_hat):
        if np.linalg.cond(mat) > 1e12:
            raise EnergyError("degenerate quadratic form; cannot invert")
    Q_hat = np.linalg.inv(M_hat)
    P_hat = np.linalg.inv(N_hat)
    flat = lambda a: a.reshape(len(a), -1)
    ddof = 1 if n_samples > 1 else 0
    N_cov = np.atleast_2d(np.cov(flat(Ns), rowvar=False, ddof=ddof)) / n_samples
    M_cov = np.atleast_2d(np.cov(flat(Ms), rowvar=False, ddof=ddof)) / n_samples
    rng = np.random.default_rng(seed)
    Qb, Pb = [], []
    for _ in range(n_boot if n_samples > 1 else 0):
        idx = rng.integers(0, n_samples, n_samples)
        Qb.append(np.linalg.inv(Ms[idx].mean(axis=0)))
        Pb.append(np.linalg.inv(Ns[idx].mean(axis=0)))
    if Qb:
        Q_ci = np.percentile(np.array(Qb), [2.5, 97.5], axis=0)
        P_ci = np.percentile(np.array(Pb), [2.5, 97.5], axis=0)
    else:
        Q_ci = np.array([Q_hat, Q_hat])
        P_ci = np.array([P_hat, P_hat])
    G_hat = np.mean(Gs, axis=0)
    H_hat = np.mean(Hs, axis=0)
    # grad_q E[J(p, Q p)] = E[fint grad u_min(Qp)] - p ; grad_p E[J(P q, q)] = -(q - E[flux v_min(Pq)])
    zq = max(np.abs(G_hat @ Q_hat @ e - e).max() for e in np.eye(dim))
    zp = max(np.abs(e - H_hat @ P_hat @ e).max() for e in np.eye(dim))
    return EffectiveMatrices(
        Q_hat=Q_hat,
        P_hat=P_hat,
        ahom_hat=N_hat,
        M_hat=M_hat,
        N_hat=N_hat,
        M_cov=M_cov,
        N_cov=N_cov,
        Q_ci=Q_ci,
        P_ci=P_ci,
        zero_grad_q=float(zq),
        zero_grad_p=float(zp),
        n_samples=n_samples,
    )


def identity_suite(problem, p, q, p2, q2, n_tests=4, seed=0):
    """Run every exact identity on one realization.

    Returns ``{name: (value, threshold, passed)}``; thresholds are multiples of
    the CG tolerance (defects ``<= threshold``, slacks ``>= -threshold``).
    """
    tol = problem.tol
    p, q, p2, q2 = (np.asarray(v, dtype=float) for v in (p, q, p2, q2))
    out = {}

    def defect(name, value, thr):
        out[name] = (float(value), float(thr), bool(value <= thr))

    def slack(name, value, thr):
        out[name] = (float(value), float(thr), bool(value >= -thr))

    rep = j_quantity(problem, p, q)
    scale = max(1.0, float(p @ p + q @ q))
    for key, val in rep.residuals.items():
        if key == "positivity":
            defect("J_nonnegative", val, tol)
        else:
            defect(key, val, IDENTITY_FACTOR * tol * scale)
    r3 = j_quantity(problem, 3 * p, 3 * q)
    defect("J_homogeneous", abs(r3.J - 9 * rep.J) / max(1.0, 9 * abs(rep.J)), IDENTITY_FACTOR * tol)
    bank = problem.solution_bank(n_tests, seed)
    defect("first_variation", first_variation_residual(rep, problem, bank), 1000 * tol * math.sqrt(scale))
    u = rep.u_max.values
    worst_sv = 0.0
    for phi in bank:
        lhs, rhs = second_variation_check(rep, problem, phi)
        worst_sv = max(worst_sv, abs(lhs - rhs) / (1.0 + problem.grad_norm(phi) ** 2))
    defect("second_variation", worst_sv, 10 * tol * scale)
    lo, hi = np.inf, np.inf
    for a, b in zip(bank, bank[1:]):
        l, h = sandwich_check(rep, problem, u + a, u + b)
        lo, hi = min(lo, l), min(hi, h)
    slack("sandwich_lower", lo, 10 * tol * scale)
    slack("sandwich_upper", hi, 10 * tol * scale)
    pol = polarization_check(problem, p, q, p2, q2)
    scale2 = max(scale, float(p2 @ p2 + q2 @ q2))
    defect("polarization", pol["defect"], IDENTITY_FACTOR * tol * scale2)
    defect("maximizer_additivity", pol["additivity"], IDENTITY_FACTOR * tol)
    for key in ("upconvex_slack", "convexp_slack", "convexq_slack"):
        slack(key, pol[key], 10 * tol * scale2)
    dirs = [(p2, np.zeros_like(p2)), (np.zeros_like(q2), q2), (p2, q2)]
    g = gradient_of_J(problem, p, q, dirs)
    rel = np.abs(g["fd"] - g["exact"]) / np.maximum(1.0, np.abs(g["exact"]))
    defect("gradient_fd", float(rel.max()), 1e-5)
    defect("gradient_recombined", float(np.abs(g["recombined"] - g["exact"]).max()), IDENTITY_FACTOR * tol * scale2)
    return out
