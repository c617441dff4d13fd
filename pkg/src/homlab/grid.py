"""Uniform Q1 discretization of cubes and the sparse solves built on it.

All integrals are normalized by the cube volume, so ``energy(u)`` is
``fint 1/2 grad u . a grad u``.  Coefficients are constant on each mesh
cell; the mesh must resolve every coefficient discontinuity, which makes the
element integrals exact for the bilinear trial space.

Vector fields (gradients, fluxes, H^-1 data) live on mesh cells as cell
averages.  For a Q1 function the cell average of its gradient is exact, so
averages over any union of mesh cells are exact too.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field as dc_field
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field import KIND_SCALAR, KIND_VECTOR, FieldError, _pack_header, _unpack_header

DEFAULT_TOL = 1e-10


class GridError(ValueError):
    pass


class SolverError(RuntimeError):
    """CG failed to reach the requested tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class CubeGrid:
    """Cube ``center + (-side/2, side/2)^d`` meshed with ``rho`` cells per unit length."""

    dim: int
    side: float
    rho: int = 4
    center: tuple = ()

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise GridError("dimension must be 2 or 3")
        if self.side < 1:
            raise GridError("cube side must be at least 1")
        if int(self.rho) != self.rho or self.rho < 1:
            raise GridError("resolution must be a positive integer")
        n = self.rho * self.side
        if abs(n - round(n)) > 1e-9:
            raise GridError("rho * side must be an integer")
        if not self.center:
            object.__setattr__(self, "center", (0.0,) * self.dim)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def n(self):
        return int(round(self.rho * self.side))

    @property
    def h(self):
        return 1.0 / self.rho

    @property
    def lower(self):
        return np.asarray(self.center) - 0.5 * self.side

    @property
    def upper(self):
        return np.asarray(self.center) + 0.5 * self.side

    @property
    def volume(self):
        return float(self.side) ** self.dim

    @property
    def node_shape(self):
        return (self.n + 1,) * self.dim

    @property
    def cell_shape(self):
        return (self.n,) * self.dim

    @property
    def num_nodes(self):
        return (self.n + 1) ** self.dim

    @property
    def num_cells(self):
        return self.n ** self.dim

    def node_coords(self):
        axes = [self.lower[k] + self.h * np.arange(self.n + 1) for k in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)

    def cell_centers(self):
        axes = [self.lower[k] + self.h * (np.arange(self.n) + 0.5) for k in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)

    @cached_property
    def boundary_mask(self):
        idx = np.indices(self.node_shape).reshape(self.dim, -1)
        return np.any((idx == 0) | (idx == self.n), axis=0)

    @cached_property
    def connectivity(self):
        """Global node index of each local corner, shape (num_cells, 2^d)."""
        cells = np.indices(self.cell_shape).reshape(self.dim, -1)
        cols = []
        for corner in itertools.product((0, 1), repeat=self.dim):
            idx = cells + np.asarray(corner)[:, None]
            cols.append(np.ravel_multi_index(tuple(idx), self.node_shape))
        return np.stack(cols, axis=1)

    def subgrid(self, center, side):
        """Aligned sub-cube and the indices of its nodes/cells in this grid."""
        sub = CubeGrid(self.dim, side, self.rho, tuple(center))
        start = (sub.lower - self.lower) * self.rho
        if np.any(np.abs(start - np.round(start)) > 1e-9) or np.any(start < -1e-9) or np.any(
            np.round(start) + sub.n > self.n
        ):
            raise GridError("sub-cube is not an aligned subset of the grid")
        start = np.round(start).astype(int)
        node_sl = tuple(slice(s, s + sub.n + 1) for s in start)
        cell_sl = tuple(slice(s, s + sub.n) for s in start)
        nodes = np.arange(self.num_nodes).reshape(self.node_shape)[node_sl].ravel()
        cells = np.arange(self.num_cells).reshape(self.cell_shape)[cell_sl].ravel()
        return sub, nodes, cells


@dataclass
class GridField:
    """Nodal scalar values or per-cell vector values on a grid."""

    grid: CubeGrid
    values: np.ndarray
    rank: str = "scalar"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.rank == "scalar":
            if self.values.shape != (self.grid.num_nodes,):
                raise GridError("scalar field must have one value per node")
        elif self.rank == "vector":
            if self.values.shape != (self.grid.num_cells, self.grid.dim):
                raise GridError("vector field must have d values per cell")
        else:
            raise GridError(f"unknown rank {self.rank!r}")


@dataclass
class QuadraticForm:
    """``u -> 1/2 u.K u - b.u + c`` in normalized units.

    ``coeffs`` keeps the per-cell coefficient matrices so fluxes and
    modulated energies can be evaluated exactly later.
    """

    K: sp.csr_matrix
    b: np.ndarray
    c: float = 0.0
    grid: CubeGrid | None = None
    coeffs: np.ndarray | None = dc_field(default=None, repr=False)

    def value(self, u):
        u = np.asarray(u)
        return 0.5 * float(u @ (self.K @ u)) - float(self.b @ u) + self.c


@lru_cache(maxsize=16)
def reference_element(dim, h):
    """Exact Q1 element integrals on ``[0, h]^d``.

    Returns ``(stiff, grad_avg, mass)``: ``stiff[i, j, a, b] = int d_i phi_a d_j phi_b``,
    ``grad_avg[a, i]`` the cell average of ``d_i phi_a`` and ``mass[a, b]``.
    """
    m1 = h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    s1 = 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])
    g1 = np.array([[-0.5, -0.5], [0.5, 0.5]])
    corners = list(itertools.product((0, 1), repeat=dim))
    nloc = len(corners)
    stiff = np.zeros((dim, dim, nloc, nloc))
    mass = np.zeros((nloc, nloc))
    grad_avg = np.zeros((nloc, dim))
    for a, ca in enumerate(corners):
        for i in range(dim):
            sign = 1.0 if ca[i] == 1 else -1.0
            grad_avg[a, i] = sign / h * 2.0 ** (1 - dim)
        for b, cb in enumerate(corners):
            mass[a, b] = np.prod([m1[ca[k], cb[k]] for k in range(dim)])
            for i in range(dim):
                for j in range(dim):
                    val = 1.0
                    for k in range(dim):
                        if k == i and k == j:
                            val *= s1[ca[k], cb[k]]
                        elif k == i:
                            val *= g1[ca[k], cb[k]]
                        elif k == j:
                            val *= g1[cb[k], ca[k]]
                        else:
                            val *= m1[ca[k], cb[k]]
                    stiff[i, j, a, b] = val
    return stiff, grad_avg, mass


def check_alignment(grid, field):
    """Raise unless every coefficient discontinuity lies on a mesh plane."""
    if field.dim != grid.dim:
        raise GridError("field and grid dimensions differ")
    for k, bp in enumerate(field.breakpoints()):
        if bp is None:
            continue
        origin, spacing = bp
        steps = spacing * grid.rho
        shift = (origin - grid.lower[k]) * grid.rho
        if abs(steps - round(steps)) > 1e-9 or abs(shift - round(shift)) > 1e-9:
            raise GridError("grid is not aligned with the coefficient cells")
    if not field.support_contains(grid.lower, grid.upper):
        raise GridError("field support smaller than grid")


def cell_coefficients(grid, field):
    check_alignment(grid, field)
    return field.matrices_at(grid.cell_centers())


def element_matrices(grid, coeffs):
    stiff, _, _ = reference_element(grid.dim, grid.h)
    ke = np.einsum("cij,ijab->cab", coeffs, stiff)
    return 0.5 * (ke + np.swapaxes(ke, 1, 2))


def _scatter(grid, ke):
    conn = grid.connectivity
    nloc = conn.shape[1]
    rows = np.broadcast_to(conn[:, :, None], (conn.shape[0], nloc, nloc)).ravel()
    cols = np.broadcast_to(conn[:, None, :], (conn.shape[0], nloc, nloc)).ravel()
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(grid.num_nodes,) * 2).tocsr()
    K = (K + K.T) * (0.5 / grid.volume)
    K.sum_duplicates()
    return K.tocsr()


def assemble(grid, field):
    """Energy quadratic form of ``field`` on ``grid`` (no linear term)."""
    coeffs = cell_coefficients(grid, field)
    K = _scatter(grid, element_matrices(grid, coeffs))
    return QuadraticForm(K=K, b=np.zeros(grid.num_nodes), grid=grid, coeffs=coeffs)


def assemble_coeffs(grid, coeffs):
    K = _scatter(grid, element_matrices(grid, coeffs))
    return QuadraticForm(K=K, b=np.zeros(grid.num_nodes), grid=grid, coeffs=coeffs)


@lru_cache(maxsize=8)
def laplacian(grid):
    """Normalized stiffness matrix of the identity coefficient."""
    eye = np.broadcast_to(np.eye(grid.dim), (grid.num_cells, grid.dim, grid.dim))
    return _scatter(grid, element_matrices(grid, eye))


def _local_values(grid, u):
    return np.asarray(u)[grid.connectivity]


def gradient(u):
    """Cell averages of the gradient of a nodal field."""
    grid = u.grid
    _, grad_avg, _ = reference_element(grid.dim, grid.h)
    return GridField(grid, _local_values(grid, u.values) @ grad_avg, rank="vector")


def gradient_average_operator(grid, coeffs=None):
    """Sparse ``(d, num_nodes)`` map ``u -> fint grad u`` (or ``fint a grad u``)."""
    _, grad_avg, _ = reference_element(grid.dim, grid.h)
    conn = grid.connectivity
    w = (grid.h ** grid.dim) / grid.volume
    if coeffs is None:
        vals = np.broadcast_to(grad_avg.T[None], (grid.num_cells,) + grad_avg.T.shape)
    else:
        vals = np.einsum("cij,aj->cia", coeffs, grad_avg)
    rows = np.broadcast_to(np.arange(grid.dim)[None, :, None], vals.shape).ravel()
    cols = np.broadcast_to(conn[:, None, :], vals.shape).ravel()
    return sp.coo_matrix((w * vals.ravel(), (rows, cols)), shape=(grid.dim, grid.num_nodes)).tocsr()


def cell_energies(grid, u, coeffs=None, v=None):
    """Per-cell integrals ``int_c grad u . a grad v`` (unnormalized)."""
    stiff, _, _ = reference_element(grid.dim, grid.h)
    ue = _local_values(grid, u)
    ve = ue if v is None else _local_values(grid, v)
    if coeffs is None:
        ke = np.trace(stiff, axis1=0, axis2=1)
        return np.einsum("ca,ab,cb->c", ue, ke, ve)
    return np.einsum("ca,cij,ijab,cb->c", ue, coeffs, stiff, ve)


def integral_mean(grid, u):
    """Exact ``fint u`` for a nodal Q1 function."""
    return float(_local_values(grid, u).mean(axis=1).mean())


def l2_norm(grid, u):
    """Exact normalized L2 norm of a nodal Q1 function."""
    _, _, mass = reference_element(grid.dim, grid.h)
    ue = _local_values(grid, u)
    total = np.einsum("ca,ab,cb->", ue, mass, ue)
    return math.sqrt(max(total, 0.0) / grid.volume)


def gradient_l2(grid, u, cells=None):
    """Normalized ``||grad u||_L2`` over the grid (or a subset of cells)."""
    e = cell_energies(grid, u)
    if cells is not None:
        e = e[cells]
    return math.sqrt(max(float(e.sum()), 0.0) / (e.size * grid.h ** grid.dim))


def cell_values(grid, u):
    """Q1 value at each cell centre."""
    return _local_values(grid, u).mean(axis=1)


# -- solver ----------------------------------------------------------------------


@dataclass
class Dirichlet:
    mask: np.ndarray
    values: np.ndarray


@dataclass
class MeanZero:
    pass


@dataclass
class PinNode:
    index: int
    value: float = 0.0


def pcg(A, b, precond, tol=DEFAULT_TOL, maxiter=None, project=None):
    """Preconditioned CG; ``project`` (if given) is applied to every iterate."""
    n = b.shape[0]
    if maxiter is None:
        maxiter = 10 * n
    x = np.zeros(n)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, 0
    r = b.copy()
    z = precond(r)
    if project is not None:
        z = project(z)
    p = z.copy()
    rz = float(r @ z)
    it = 0
    while it < maxiter:
        if np.linalg.norm(r) <= tol * bnorm:
            # guard against drift of the recursive residual
            true_r = b - A @ x
            if project is not None:
                true_r = project(true_r)
            if np.linalg.norm(true_r) <= tol * bnorm:
                return x, it
            r = true_r
            z = precond(r)
            if project is not None:
                z = project(z)
            p = z.copy()
            rz = float(r @ z)
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if project is not None:
            x = project(x)
            r = project(r)
        z = precond(r)
        if project is not None:
            z = project(z)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    res = float(np.linalg.norm(b - A @ x)) / bnorm
    raise SolverError("conjugate gradient did not converge", res, it)


def _project_mean(v):
    return v - v.mean()


@lru_cache(maxsize=8)
def _laplace_factor(grid, kind):
    L = laplacian(grid).tocsc()
    if kind == "dirichlet":
        free = np.flatnonzero(~grid.boundary_mask)
    else:
        free = np.arange(1, grid.num_nodes)
    lu = spla.splu(L[free][:, free].tocsc(), permc_spec="COLAMD")
    return lu, free


def _preconditioner(kind, A, grid, constraint):
    if kind == "jacobi":
        dinv = 1.0 / A.diagonal()
        return lambda r: dinv * r
    if kind == "laplace":
        if grid is None:
            raise GridError("laplace preconditioner needs the grid")
        if isinstance(constraint, MeanZero):
            lu, free = _laplace_factor(grid, "neumann")

            def apply(r):
                z = np.zeros_like(r)
                z[free] = lu.solve(r[free])
                return z

            return apply
        lu, _ = _laplace_factor(grid, "dirichlet")
        return lu.solve
    raise GridError(f"unknown preconditioner {kind!r}")


def default_maxiter(grid_or_nodes, dim):
    nodes = grid_or_nodes
    return int(50 * round(nodes ** (1.0 / dim)))


def solve_spd(form, constraint, tol=DEFAULT_TOL, maxiter=None, preconditioner="jacobi"):
    """Minimize ``form`` under ``constraint``; returns the nodal GridField."""
    if tol <= 0:
        raise GridError("tolerance must be positive")
    grid = form.grid
    K = form.K
    N = K.shape[0]
    dim = grid.dim if grid is not None else 2
    if maxiter is None:
        maxiter = default_maxiter(N, dim)
    if isinstance(constraint, Dirichlet):
        mask = np.asarray(constraint.mask, dtype=bool)
        if grid is not None and preconditioner == "laplace" and not np.array_equal(mask, grid.boundary_mask):
            raise GridError("laplace preconditioner supports boundary Dirichlet data only")
        free = np.flatnonzero(~mask)
        fixed = np.flatnonzero(mask)
        values = np.asarray(constraint.values, dtype=float)
        if values.shape != (N,):
            raise GridError("Dirichlet values must be given on every node")
        u = np.zeros(N)
        u[fixed] = values[fixed]
        Kff = K[free][:, free]
        rhs = form.b[free] - K[free][:, fixed] @ u[fixed]
        M = _preconditioner(preconditioner, Kff, grid, constraint)
        u[free], _ = pcg(Kff, rhs, M, tol, maxiter)
    elif isinstance(constraint, MeanZero):
        if abs(form.b.sum()) > 1e-8 * max(1.0, np.abs(form.b).sum()):
            raise GridError("linear term is incompatible with a pure Neumann problem")
        M = _preconditioner(preconditioner, K, grid, constraint)
        u, _ = pcg(K, _project_mean(form.b), M, tol, maxiter, project=_project_mean)
    elif isinstance(constraint, PinNode):
        free = np.delete(np.arange(N), constraint.index)
        u = np.zeros(N)
        u[constraint.index] = constraint.value
        Kff = K[free][:, free]
        rhs = form.b[free] - K[free][:, [constraint.index]] @ u[[constraint.index]]
        u[free], _ = pcg(Kff, rhs, _preconditioner("jacobi", Kff, grid, constraint), tol, maxiter)
    else:
        raise GridError("unknown constraint")
    if grid is None:
        return u
    return GridField(grid, u)


def load_vector(grid, F):
    """``g[j] = fint F . e_i phi_j`` for piecewise-constant cell data, per component."""
    F = np.asarray(F, dtype=float)
    conn = grid.connectivity
    w = (grid.h ** grid.dim) / (2 ** grid.dim) / grid.volume
    g = np.zeros((grid.num_nodes, F.shape[1]))
    for a in range(conn.shape[1]):
        np.add.at(g, conn[:, a], w * F)
    return g


def neumann_potential(F, tol=DEFAULT_TOL, preconditioner="jacobi"):
    """Componentwise mean-zero solutions of ``-Lap w_i = F_i - (F_i)`` with natural BCs.

    Returns a nodal array of shape (num_nodes, d).
    """
    grid = F.grid
    L = laplacian(grid)
    data = F.values - F.values.mean(axis=0)
    g = load_vector(grid, data)
    form = QuadraticForm(K=L, b=np.zeros(grid.num_nodes), grid=grid)
    out = np.zeros((grid.num_nodes, grid.dim))
    for i in range(grid.dim):
        form.b = g[:, i]
        w = solve_spd(form, MeanZero(), tol=tol, preconditioner=preconditioner).values
        # mean-zero in the integral sense (the kernel is constants)
        out[:, i] = w - integral_mean(grid, w)
    return out


# -- snapshots -------------------------------------------------------------------

_SNAP = "<dI"


def dumps_snapshot(gf):
    """GridField as bytes in the field file format (rank tag in the kind slot).

    The header extents hold the node (scalar) or cell (vector) index range;
    a trailer records side, resolution and centre so the grid can be rebuilt.
    """
    g = gf.grid
    kind = KIND_SCALAR if gf.rank == "scalar" else KIND_VECTOR
    shape = g.node_shape if gf.rank == "scalar" else g.cell_shape
    head = _pack_header(kind, g.dim, 1.0, "snapshot", 0, (0,) * g.dim + tuple(shape))
    trailer = struct.pack(_SNAP, float(g.side), int(g.rho)) + struct.pack(f"<{g.dim}d", *g.center)
    return head + trailer + np.ascontiguousarray(gf.values, dtype="<f8").tobytes()


def loads_snapshot(buf):
    kind, dim, _, _, _, pos = _unpack_header(buf)
    if kind not in (KIND_SCALAR, KIND_VECTOR):
        raise FieldError("file holds a coefficient field, not a grid snapshot")
    pos += 16 * dim
    side, rho = struct.unpack_from(_SNAP, buf, pos)
    pos += struct.calcsize(_SNAP)
    center = struct.unpack_from(f"<{dim}d", buf, pos)
    pos += 8 * dim
    grid = CubeGrid(dim, side, rho, center)
    if kind == KIND_SCALAR:
        vals = np.frombuffer(buf, dtype="<f8", offset=pos, count=grid.num_nodes)
        return GridField(grid, vals.astype(float))
    vals = np.frombuffer(buf, dtype="<f8", offset=pos, count=grid.num_cells * dim)
    return GridField(grid, vals.reshape(grid.num_cells, dim).astype(float), rank="vector")
