"""Triadic cube hierarchies, H^-1 norms, the multiscale Poincare inequality,
the gluing comparison between scales and corrector sublinearity curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .energy import CellProblem
from .grid import (
    DEFAULT_TOL,
    CubeGrid,
    GridError,
    GridField,
    cell_energies,
    gradient,
    integral_mean,
    l2_norm,
    laplacian,
    neumann_potential,
)


class TriadicHierarchy:
    """Level-n subcubes ``z + box_n`` (z in 3^n Z^d) of the top cube ``box_m``.

    Subcubes are listed in C order of their block index.
    """

    def __init__(self, grid, m=None):
        if m is None:
            m = round(math.log(grid.side, 3))
        if abs(3**m - grid.side) > 1e-9:
            raise GridError("top cube side must be 3^m")
        if any(abs(c - round(c)) > 1e-9 for c in grid.center):
            raise GridError("top cube must be centred at a lattice point")
        self.grid = grid
        self.m = int(m)
        self.dim = grid.dim

    def count(self, n):
        return 3 ** (self.dim * (self.m - n))

    def centers(self, n):
        k = 3 ** (self.m - n)
        side = 3**n
        idx = np.indices((k,) * self.dim).reshape(self.dim, -1).T
        return self.grid.lower + side * (idx + 0.5)

    def block(self, n):
        """Mesh cells per side of a level-n cube."""
        return self.grid.rho * 3**n

    def cell_labels(self, n):
        """Level-n cube index of every mesh cell."""
        b = self.block(n)
        k = 3 ** (self.m - n)
        cells = np.indices(self.grid.cell_shape).reshape(self.dim, -1)
        return np.ravel_multi_index(tuple(cells // b), (k,) * self.dim)

    def subgrids(self, n):
        for c in self.centers(n):
            yield self.grid.subgrid(c, 3**n)


def cube_averages(F, hierarchy, n):
    """Mean of the per-cell vector field over each level-n cube, shape (|Z_n|, d)."""
    if F.rank != "vector":
        raise GridError("cube averages need a vector field")
    grid = hierarchy.grid
    d = grid.dim
    k = 3 ** (hierarchy.m - n)
    b = hierarchy.block(n)
    vals = F.values.reshape(grid.cell_shape + (d,))
    shape = []
    for _ in range(d):
        shape += [k, b]
    blocks = vals.reshape(tuple(shape) + (d,))
    axes = tuple(2 * i + 1 for i in range(d))
    return blocks.mean(axis=axes).reshape(-1, d)


def h_minus_one_norm(F, tol=DEFAULT_TOL):
    """Normalized H^-1 norm of a per-cell vector field (dual of mean-zero H^1 vector fields)."""
    w = neumann_potential(F, tol=tol)
    L = laplacian(F.grid)
    total = sum(float(w[:, i] @ (L @ w[:, i])) for i in range(F.grid.dim))
    return math.sqrt(max(total, 0.0))


@dataclass
class MspReport:
    lhs_l2: float
    lhs_hminus: float
    rhs_gradient_term: float
    rhs_scale_terms: list
    ratio: float

    @property
    def lhs(self):
        return self.lhs_l2 + self.lhs_hminus

    @property
    def rhs(self):
        return self.rhs_gradient_term + float(sum(self.rhs_scale_terms))


def msp_evaluate(u, hierarchy, tol=DEFAULT_TOL):
    """Both sides of the multiscale Poincare inequality (constant 1 on each side)."""
    grid = hierarchy.grid
    vals = u.values
    lhs_l2 = l2_norm(grid, vals - integral_mean(grid, vals))
    grad = gradient(u)
    lhs_hm = h_minus_one_norm(grad, tol=tol)
    grad_l2 = math.sqrt(max(float(cell_energies(grid, vals).sum()), 0.0) / grid.volume)
    terms = []
    for n in range(hierarchy.m):
        avg = cube_averages(grad, hierarchy, n)
        terms.append(3**n * math.sqrt(float(np.mean(np.sum(avg**2, axis=1)))))
    rhs = grad_l2 + sum(terms)
    ratio = (lhs_l2 + lhs_hm) / rhs if rhs > 0 else (0.0 if lhs_l2 + lhs_hm == 0 else math.inf)
    return MspReport(lhs_l2, lhs_hm, grad_l2, terms, ratio)


def msp_test_suite(hierarchy, field=None, p=None, tol=DEFAULT_TOL):
    """The fixed test functions: affine, per-cell oscillator, smooth product, corrector proxy."""
    grid = hierarchy.grid
    x = grid.node_coords() - np.asarray(grid.center)
    L = grid.side
    suite = {
        "affine_e1": x[:, 0],
        "affine_diag": x.sum(axis=1),
        "oscillator": np.prod(np.cos(2 * np.pi * x), axis=1),
        "smooth": np.prod(np.sin(np.pi * x / L), axis=1),
    }
    if field is not None:
        p = np.eye(grid.dim)[0] if p is None else np.asarray(p, dtype=float)
        _, v = CellProblem(grid, field, tol).nu(p)
        suite["corrector_proxy"] = v - grid.node_coords() @ p
    return {k: GridField(grid, v) for k, v in suite.items()}


def _nu_and_minimizer(grid, field, p, tol):
    return CellProblem(grid, field, tol).nu(p)


def _glue(grid, field, p, n, tol):
    """Children nu values and the glued function on ``grid`` (plane outside children)."""
    hier = TriadicHierarchy(grid)
    V = grid.node_coords() @ p
    nus = []
    for sub, nodes, _ in hier.subgrids(n):
        val, v = _nu_and_minimizer(sub, field, p, tol)
        nus.append(val)
        V[nodes] = v
    return V, nus


def gluing_defect(field, p, m, n, rho=2, tol=DEFAULT_TOL, center=None):
    """``(lhs, rhs)`` comparing the box_m minimizer to the glued level-n minimizers.

    lhs = mean over level-n cubes of ||grad v_m - grad v_z||^2 (normalized on each cube),
    rhs = -nu(box_m) + mean of nu(z + box_n).
    """
    if not 0 <= n <= m:
        raise GridError("need 0 <= n <= m")
    dim = field.dim
    p = np.asarray(p, dtype=float)
    grid = CubeGrid(dim, 3**m, rho, center or (0.0,) * dim)
    nu_m, v_m = _nu_and_minimizer(grid, field, p, tol)
    if n == m:
        return 0.0, 0.0
    V, nus = _glue(grid, field, p, n, tol)
    lhs = float(cell_energies(grid, v_m - V).sum()) / grid.volume
    rhs = -nu_m + float(np.mean(nus))
    return lhs, rhs


def telescoping_check(field, p, level, rho=2, tol=DEFAULT_TOL):
    """``||grad v(box_{l+1}) - grad v(box_l)||^2`` on box_l against the level-l gluing rhs."""
    dim = field.dim
    p = np.asarray(p, dtype=float)
    big = CubeGrid(dim, 3 ** (level + 1), rho)
    nu_big, v_big = _nu_and_minimizer(big, field, p, tol)
    sub, nodes, cells = big.subgrid((0.0,) * dim, 3**level)
    _, v_small = _nu_and_minimizer(sub, field, p, tol)
    lhs = float(cell_energies(sub, v_big[nodes] - v_small).sum()) / sub.volume
    _, nus = _glue(big, field, p, level, tol)
    return lhs, -nu_big + float(np.mean(nus))


@dataclass
class CorrectorCurve:
    p: np.ndarray
    M: int
    levels: list
    osc: list
    hminus: list
    ratios: list = dc_field(default_factory=list)


def corrector_curve(field, p, M, inner_levels=None, rho=2, tol=DEFAULT_TOL):
    """Oscillation and H^-1 gradient norm of the Dirichlet corrector proxy on inner cubes.

    The proxy is the box_M minimizer of nu minus the plane; inner cubes box_k
    (k <= M-1) are concentric, so the boundary layer of box_M is discarded.
    """
    if M < 2:
        raise GridError("corrector curve needs at least two levels")
    if inner_levels is None:
        inner_levels = list(range(1, M))
    if any(k > M - 1 or k < 0 for k in inner_levels):
        raise GridError("inner levels must lie in [0, M-1]")
    dim = field.dim
    p = np.asarray(p, dtype=float)
    grid = CubeGrid(dim, 3**M, rho)
    _, v = _nu_and_minimizer(grid, field, p, tol)
    phi = v - grid.node_coords() @ p
    osc, hm = [], []
    for k in inner_levels:
        sub, nodes, _ = grid.subgrid((0.0,) * dim, 3**k)
        local = phi[nodes]
        osc.append(l2_norm(sub, local - integral_mean(sub, local)))
        hm.append(h_minus_one_norm(gradient(GridField(sub, local)), tol=tol))
    ratios = [o / 3**k for o, k in zip(osc, inner_levels)]
    return CorrectorCurve(p, M, list(inner_levels), osc, hm, ratios)
