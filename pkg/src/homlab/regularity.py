"""a-bar-harmonic polynomials and mesoscopic polynomial-approximation curves D_k(r)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy
from scipy.linalg import sqrtm
from scipy.optimize import minimize

from .field import make_constant
from .grid import (
    DEFAULT_TOL,
    CubeGrid,
    Dirichlet,
    GridError,
    GridField,
    assemble,
    cell_values,
    solve_spd,
)

GRAM_COND_LIMIT = 1e8
MIN_RADIUS_CELLS = 8


class RegularityError(ValueError):
    pass


def monomials(d, k):
    """Exponent tuples of total degree <= k, ordered by degree then lexicographically."""
    out = []
    for n in range(k + 1):
        out += sorted((e for e in itertools.product(range(n + 1), repeat=d) if sum(e) == n), reverse=True)
    return out


def harmonic_dimension(d, k):
    """Dimension of the harmonic polynomials of degree <= k in d variables."""
    total = 1
    for n in range(1, k + 1):
        total += math.comb(n + d - 1, d - 1) - (math.comb(n + d - 3, d - 1) if n >= 2 else 0)
    return total


@lru_cache(maxsize=None)
def _harmonic_polys(d, k):
    """Rational basis of the Laplace-harmonic polynomials of degree <= k (sympy expressions)."""
    ys = sympy.symbols(f"y0:{d}")
    basis = []
    for n in range(k + 1):
        exps = [e for e in monomials(d, n) if sum(e) == n]
        monos = [sympy.prod([y**a for y, a in zip(ys, e)]) for e in exps]
        if n < 2:
            basis += monos
            continue
        lower = [e for e in monomials(d, n - 2) if sum(e) == n - 2]
        col = {e: i for i, e in enumerate(lower)}
        A = sympy.zeros(len(lower), len(exps))
        for j, e in enumerate(exps):
            for i in range(d):
                if e[i] >= 2:
                    f = list(e)
                    f[i] -= 2
                    A[col[tuple(f)], j] += e[i] * (e[i] - 1)
        for vec in A.nullspace():
            basis.append(sympy.expand(sum(c * m for c, m in zip(vec, monos))))
    return ys, basis


def _coeff_matrix(polys, xs, exps):
    rows = []
    for poly in polys:
        P = sympy.Poly(poly, *xs)
        cd = dict(P.terms())
        rows.append([float(cd.get(e, 0.0)) for e in exps])
    return np.array(rows)


@dataclass(frozen=True)
class AHarmonicBasis:
    ahom: np.ndarray
    degree: int
    dim: int
    exponents: tuple
    coeffs: np.ndarray  # (n_basis, n_monomials), polynomials in x
    degrees: tuple  # total degree of each basis element
    whitening: np.ndarray

    def __len__(self):
        return self.coeffs.shape[0]

    def monomial_values(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([np.prod(x ** np.asarray(e), axis=1) for e in self.exponents], axis=1)

    def evaluate(self, x):
        """Basis values at points x, shape (npts, n_basis)."""
        return self.monomial_values(x) @ self.coeffs.T

    def operator_residual(self):
        """Coefficients of div(ahom grad w) for each basis element (should vanish)."""
        return _apply_operator(self.ahom, self.exponents, self.coeffs)


def _apply_operator(ahom, exps, coeffs):
    index = {e: i for i, e in enumerate(exps)}
    out = np.zeros_like(coeffs)
    d = len(exps[0])
    for j, e in enumerate(exps):
        for a in range(d):
            for b in range(d):
                f = list(e)
                c = f[a]
                f[a] -= 1
                if f[a] < 0:
                    continue
                c *= f[b]
                f[b] -= 1
                if f[b] < 0 or c == 0:
                    continue
                out[:, index[tuple(f)]] += ahom[a, b] * c * coeffs[:, j]
    return out


def build_basis(ahom, k, d=None):
    """a-bar-harmonic polynomials of degree <= k, built from Laplace harmonics in y = S x."""
    ahom = np.atleast_2d(np.asarray(ahom, dtype=float))
    d = ahom.shape[0] if d is None else d
    if ahom.shape != (d, d) or not np.allclose(ahom, ahom.T, rtol=0, atol=1e-14):
        raise RegularityError("ahom must be a symmetric d x d matrix")
    if np.linalg.eigvalsh(ahom).min() <= 0:
        raise RegularityError("ahom must be positive definite")
    if k < 0:
        raise RegularityError("degree must be nonnegative")
    S = np.real(sqrtm(np.linalg.inv(ahom)))
    S = 0.5 * (S + S.T)
    ys, polys = _harmonic_polys(d, k)
    xs = sympy.symbols(f"x0:{d}")
    Sq = sympy.Matrix(S.tolist())
    sub = {ys[i]: sum(Sq[i, j] * xs[j] for j in range(d)) for i in range(d)}
    pulled = [sympy.expand(p.subs(sub, simultaneous=True)) for p in polys]
    exps = tuple(monomials(d, k))
    coeffs = _coeff_matrix(pulled, xs, exps)
    degrees = tuple(int(sympy.Poly(p, *ys).total_degree()) for p in polys)
    return AHarmonicBasis(ahom, k, d, exps, coeffs, degrees, S)


def ball_mask(grid, center, r):
    """Cells whose centres lie in the closed ball B_r(center)."""
    c = grid.cell_centers() - np.asarray(center, dtype=float)
    return np.sum(c * c, axis=1) <= r * r * (1 + 1e-12)


def _project(values, A):
    G = A.T @ A
    if np.linalg.cond(G) <= GRAM_COND_LIMIT:
        coef = np.linalg.solve(G, A.T @ values)
    else:
        coef = np.linalg.lstsq(A, values, rcond=None)[0]
    return values - A @ coef


def poly_distance(v, center, r, basis):
    """Normalized L2(B_r) distance from v to the span of the basis (cell-centre quadrature)."""
    grid = v.grid
    if r * grid.rho < MIN_RADIUS_CELLS:
        raise RegularityError(f"radius must span at least {MIN_RADIUS_CELLS} cells")
    mask = ball_mask(grid, center, r)
    if not mask.any():
        raise RegularityError("empty ball mask")
    vals = cell_values(grid, v.values)[mask]
    pts = (grid.cell_centers()[mask] - np.asarray(center, dtype=float)) / r
    A = basis.evaluate(pts)
    res = _project(vals, A)
    return math.sqrt(float(np.mean(res * res)))


def _ball_l2(v, center, r):
    grid = v.grid
    vals = cell_values(grid, v.values)[ball_mask(grid, center, r)]
    return math.sqrt(float(np.mean(vals * vals)))


def _loglog_slope(r, y):
    r = np.log(np.asarray(r, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(r, y, 1)[0])


@dataclass
class RegularityCurve:
    k: int
    radii: list
    values: list  # D_k(r) / ||v||_{L2(B_{R/2})}
    raw: list  # D_k(r)
    ratios: list  # D_k(r) / D_k(r_max)
    slope: float


def solve_box(field, R, boundary, rho=4, tol=DEFAULT_TOL):
    """Discrete a-harmonic function on the cube of side R with Dirichlet data ``boundary(x)``."""
    grid = CubeGrid(field.dim, R, rho)
    form = assemble(grid, field)
    g = np.zeros(grid.num_nodes)
    mask = grid.boundary_mask
    g[mask] = boundary(grid.node_coords()[mask])
    return solve_spd(form, Dirichlet(mask, g), tol)


def regularity_curve(field, R, k, radii, ahom=None, boundary=None, rho=4, tol=DEFAULT_TOL, v=None):
    """D_k(r) on concentric balls for a discrete a-harmonic v on the cube of side R.

    ``ahom`` defaults to the identity; ``boundary`` defaults to the plane x_1.
    Radii must lie in [8 cells, R/2].
    """
    d = field.dim if field is not None else v.grid.dim
    if ahom is None:
        ahom = np.eye(d)
    radii = [float(r) for r in radii]
    if any(r > R / 2 + 1e-12 for r in radii):
        raise RegularityError("radii must not exceed R/2")
    if v is None:
        if boundary is None:
            boundary = lambda x: x[:, 0]
        v = solve_box(field, R, boundary, rho, tol)
    basis = build_basis(ahom, k, d)
    center = v.grid.center
    raw = [poly_distance(v, center, r, basis) for r in radii]
    norm = _ball_l2(v, center, R / 2)
    values = [x / norm if norm > 0 else 0.0 for x in raw]
    ref = raw[-1]
    ratios = [x / ref if ref > 0 else 0.0 for x in raw]
    positive = all(x > 0 for x in raw)
    slope = _loglog_slope(radii, raw) if positive and len(radii) >= 2 else float("nan")
    return RegularityCurve(k, radii, values, raw, ratios, slope)


def harmonic_test_function(ahom, degree, seed=0):
    """A random combination of the top-degree a-bar-harmonic basis elements, as a callable."""
    basis = build_basis(ahom, degree)
    top = [i for i, n in enumerate(basis.degrees) if n == degree]
    w = np.random.default_rng(seed).standard_normal(len(top))
    coeffs = w @ basis.coeffs[top]

    def f(x):
        return basis.monomial_values(x) @ coeffs

    return f


def constant_field(ahom):
    return make_constant(np.asarray(ahom, dtype=float))


# -- norm equivalence on polynomials -------------------------------------------


def _derivative_tensor(exps, m):
    """Matrix mapping monomial coefficients to all order-m partial derivatives, per point.

    Returns a list of (multi-index, coefficient matrix into the same monomial basis).
    """
    d = len(exps[0])
    index = {e: i for i, e in enumerate(exps)}
    ops = []
    for alpha in itertools.product(range(d), repeat=m):
        D = np.zeros((len(exps), len(exps)))
        for j, e in enumerate(exps):
            f = list(e)
            c = 1.0
            for a in alpha:
                c *= f[a]
                f[a] -= 1
                if f[a] < 0:
                    c = 0.0
                    break
            if c:
                D[index[tuple(f)], j] = c
        ops.append(D)
    return ops


def _ball_points(d, spacing):
    axis = np.arange(-1 + spacing / 2, 1, spacing)
    pts = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), axis=-1).reshape(-1, d)
    return pts[np.sum(pts * pts, axis=1) <= 1]


def _sphere_points(d, n):
    if d == 2:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    # Fibonacci sphere
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


@dataclass
class MarkovEstimate:
    d: int
    k: int
    m: int
    constant: float
    best_draw: float
    n_draws: int


def markov_constant(d, k, m, n_draws=10_000, seed=0, polish=5):
    """Empirical sup of ``||grad^m w||_{L^inf(B_1)}`` over ``w in P_k`` with ``||w||_{L^1(B_1)} = 1``.

    The L^1 norm is normalized (mean of |w| over the ball).  Random Gaussian
    coefficient draws are followed by a local maximization from the best
    ``polish`` draws, which makes the recorded maximum reproducible.
    """
    if m > k:
        return MarkovEstimate(d, k, m, 0.0, 0.0, n_draws)
    exps = monomials(d, k)
    spacing = 0.02 if d == 2 else 0.06
    inner = _ball_points(d, spacing)
    edge = _sphere_points(d, 720 if d == 2 else 4000)
    A_in = np.stack([np.prod(inner ** np.asarray(e), axis=1) for e in exps], axis=1)
    sup_pts = np.vstack([inner, edge])
    A_sup = np.stack([np.prod(sup_pts ** np.asarray(e), axis=1) for e in exps], axis=1)
    D = _derivative_tensor(exps, m)
    DA = [A_sup @ Dm for Dm in D]

    def ratio(c):
        c = np.atleast_2d(c)
        l1 = np.mean(np.abs(c @ A_in.T), axis=1)
        g2 = sum((c @ M.T) ** 2 for M in DA)
        return np.sqrt(g2.max(axis=1)) / l1

    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((n_draws, len(exps)))
    vals = np.concatenate([ratio(chunk) for chunk in np.array_split(draws, max(1, n_draws // 500))])
    best = float(vals.max())
    top = draws[np.argsort(vals)[-polish:]] if polish else []
    constant = best
    for c0 in top:
        res = minimize(lambda c: -ratio(c)[0], c0, method="Nelder-Mead",
                       options={"maxiter": 4000, "xatol": 1e-8, "fatol": 1e-10})
        constant = max(constant, -float(res.fun))
    return MarkovEstimate(d, k, m, constant, best, n_draws)
