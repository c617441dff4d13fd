"""Independent dense reference computations used to check the sparse code paths."""

import itertools

import numpy as np


def _q1_grad(xi, corner, h):
    """Gradient of the bilinear/trilinear hat of ``corner`` at reference point xi in [0,1]^d."""
    d = len(xi)
    g = np.zeros(d)
    for a in range(d):
        val = 1.0
        for b in range(d):
            f = xi[b] if corner[b] else 1 - xi[b]
            if b == a:
                f = (1.0 if corner[b] else -1.0) / h
            val *= f
        g[a] = val
    return g


def _q1_val(xi, corner):
    return np.prod([x if c else 1 - x for x, c in zip(xi, corner)])


def dense_stiffness(grid, field):
    """Normalized stiffness by brute-force tensor Gauss quadrature, cell by cell."""
    d, h, n = grid.dim, grid.h, grid.n
    gp = 0.5 + np.array([-1, 1]) / (2 * np.sqrt(3))
    K = np.zeros((grid.num_nodes, grid.num_nodes))
    corners = list(itertools.product((0, 1), repeat=d))
    for cell in itertools.product(range(n), repeat=d):
        centre = grid.lower + h * (np.array(cell) + 0.5)
        A = field.matrices_at(centre[None])[0]
        nodes = [np.ravel_multi_index(tuple(np.array(cell) + c), grid.node_shape) for c in corners]
        for q in itertools.product(gp, repeat=d):
            G = np.array([_q1_grad(q, c, h) for c in corners])
            K[np.ix_(nodes, nodes)] += (h**d / 2**d) * G @ A @ G.T
    return K / grid.volume


def dense_mass(grid):
    d, h, n = grid.dim, grid.h, grid.n
    gp = 0.5 + np.array([-1, 1]) / (2 * np.sqrt(3))
    M = np.zeros((grid.num_nodes, grid.num_nodes))
    corners = list(itertools.product((0, 1), repeat=d))
    for cell in itertools.product(range(n), repeat=d):
        nodes = [np.ravel_multi_index(tuple(np.array(cell) + c), grid.node_shape) for c in corners]
        for q in itertools.product(gp, repeat=d):
            v = np.array([_q1_val(q, c) for c in corners])
            M[np.ix_(nodes, nodes)] += (h**d / 2**d) * np.outer(v, v)
    return M / grid.volume


def dense_dirichlet(K, mask, g, b=None):
    """Minimize 1/2 u.K u - b.u with u = g on mask, by dense factorization."""
    free = ~mask
    b = np.zeros(len(g)) if b is None else b
    u = g.astype(float).copy()
    rhs = b[free] - K[np.ix_(free, mask)] @ g[mask]
    u[free] = np.linalg.solve(K[np.ix_(free, free)], rhs)
    return u


def dense_hminus(grid, F):
    """sup over mean-zero nodal eta of <F, eta> / ||grad eta||, per component, via eigendecomposition.

    <F, eta> is the exact pairing of cell-constant F with the Q1 interpolant.
    """
    d = grid.dim
    K = dense_stiffness_identity(grid)
    w, V = np.linalg.eigh(K)
    keep = w > 1e-10 * w.max()
    total = 0.0
    for i in range(d):
        b = load(grid, F[:, i] - F[:, i].mean())
        coef = V[:, keep].T @ b
        total += float(np.sum(coef**2 / w[keep]))
    return np.sqrt(total)


def dense_stiffness_identity(grid):
    from homlab.field import make_constant

    return dense_stiffness(grid, make_constant(np.eye(grid.dim)))


def load(grid, f):
    """Exact ``fint f phi_j`` for cell-constant f, by brute-force quadrature."""
    d, h, n = grid.dim, grid.h, grid.n
    gp = 0.5 + np.array([-1, 1]) / (2 * np.sqrt(3))
    out = np.zeros(grid.num_nodes)
    corners = list(itertools.product((0, 1), repeat=d))
    for ci, cell in enumerate(itertools.product(range(n), repeat=d)):
        nodes = [np.ravel_multi_index(tuple(np.array(cell) + c), grid.node_shape) for c in corners]
        for q in itertools.product(gp, repeat=d):
            for j, c in zip(nodes, corners):
                out[j] += (h**d / 2**d) * f[ci] * _q1_val(q, c)
    return out / grid.volume
