import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dense_dirichlet, dense_hminus, dense_stiffness
from homlab.energy import CellProblem
from homlab.field import make_checkerboard, make_constant, make_laminate
from homlab.grid import (
    CubeGrid,
    Dirichlet,
    GridError,
    GridField,
    MeanZero,
    PinNode,
    QuadraticForm,
    SolverError,
    assemble,
    dumps_snapshot,
    gradient,
    gradient_average_operator,
    integral_mean,
    laplacian,
    load_vector,
    loads_snapshot,
    neumann_potential,
    solve_spd,
)
from homlab.multiscale import h_minus_one_norm


def ckb(seed=7, lam=4.0):
    return make_checkerboard(2, lam, 0.5, seed)


def test_grid_validation():
    with pytest.raises(GridError):
        CubeGrid(4, 3, 2)
    with pytest.raises(GridError):
        CubeGrid(2, 3, 0)
    with pytest.raises(GridError):
        CubeGrid(2, 2.3, 2)
    g = CubeGrid(2, 9, 4)
    assert g.num_nodes == 37**2 and g.h == 0.25


def test_misaligned_grid_rejected():
    with pytest.raises(GridError):
        assemble(CubeGrid(2, 3, 2, (0.25, 0.0)), ckb())
    with pytest.raises(GridError):
        assemble(CubeGrid(2, 3, 1, (0.5, 0.0)), make_laminate(2, 0, [np.eye(2), 4 * np.eye(2)], 1.0))


def test_field_support_too_small():
    f = make_checkerboard(2, 4.0, 0.5, 1, box=((-1, -1), (2, 2)))
    assemble(CubeGrid(2, 3, 2), f)
    with pytest.raises(GridError):
        assemble(CubeGrid(2, 5, 2), f)


@pytest.mark.parametrize("dim,side,rho", [(2, 3, 2), (2, 3, 3), (3, 1, 2)])
def test_assembly_matches_dense_quadrature(dim, side, rho):
    f = make_checkerboard(dim, 4.0, 0.5, 99)
    g = CubeGrid(dim, side, rho)
    K = assemble(g, f).K.toarray()
    ref = dense_stiffness(g, f)
    assert np.abs(K - ref).max() <= 1e-12 * np.abs(ref).max()
    u = np.random.default_rng(1).standard_normal(g.num_nodes)
    e, e_ref = 0.5 * u @ K @ u, 0.5 * u @ ref @ u
    assert abs(e - e_ref) <= 1e-12 * abs(e_ref)


def test_stiffness_bitwise_symmetric_with_constant_kernel():
    K = assemble(CubeGrid(2, 9, 3), ckb()).K
    assert (K - K.T).count_nonzero() == 0
    assert np.abs(K @ np.ones(K.shape[0])).max() <= 1e-12


@pytest.mark.parametrize("A", [np.eye(2), np.diag([4.0, 1.0]), np.array([[2.0, 0.7], [0.7, 1.5]])])
def test_affine_energy_exact_constant(A):
    g = CubeGrid(2, 3, 4)
    form = assemble(g, make_constant(A))
    p = np.array([0.3, -1.2])
    assert abs(form.value(g.node_coords() @ p) - 0.5 * p @ A @ p) <= 1e-13


def test_affine_energy_exact_checkerboard():
    g = CubeGrid(2, 9, 2)
    f = ckb()
    p = np.array([1.0, 2.0])
    cells = np.stack(np.meshgrid(np.arange(-4, 5), np.arange(-4, 5), indexing="ij"), -1)
    ref = 0.5 * np.mean(np.einsum("i,xyij,j->xy", p, f.cell_matrices(cells), p))
    assert abs(assemble(g, f).value(g.node_coords() @ p) - ref) <= 1e-12


def test_identity_dirichlet_reproduces_plane():
    g = CubeGrid(2, 9, 2)
    form = assemble(g, make_constant(np.eye(2)))
    plane = g.node_coords() @ np.array([0.4, -1.1])
    u = solve_spd(form, Dirichlet(g.boundary_mask, plane)).values
    # the CG stopping rule is relative, so the nodal error scales with the data
    assert np.abs(u - plane).max() <= 1e-10 * np.abs(plane).max()


def test_dirichlet_matches_dense_solve():
    g = CubeGrid(2, 4, 2)  # 9 x 9 nodes
    f = make_checkerboard(2, 4.0, 0.5, 3, box=((-3, -3), (3, 3)))
    K = assemble(g, f).K
    rng = np.random.default_rng(5)
    b = rng.standard_normal(g.num_nodes)
    gvals = np.where(g.boundary_mask, rng.standard_normal(g.num_nodes), 0.0)
    form = QuadraticForm(K, b, grid=g)
    u = solve_spd(form, Dirichlet(g.boundary_mask, gvals), tol=1e-12).values
    ref = dense_dirichlet(dense_stiffness(g, f), g.boundary_mask, gvals, b)
    assert np.abs(u - ref).max() <= 1e-8


def test_pin_node_and_mean_zero_agree_up_to_constant():
    g = CubeGrid(2, 3, 2)
    form = assemble(g, ckb())
    form.b = gradient_average_operator(g).T @ np.array([1.0, 0.5])
    a = solve_spd(form, MeanZero()).values
    b = solve_spd(form, PinNode(0, 0.0)).values
    assert np.abs((a - a.mean()) - (b - b.mean())).max() <= 1e-8


def test_zero_rhs_mean_zero_gives_zero():
    g = CubeGrid(2, 3, 2)
    form = assemble(g, ckb())
    u = solve_spd(form, MeanZero()).values
    assert np.abs(u).max() == 0.0


def test_solver_failure_carries_residual():
    g = CubeGrid(2, 9, 2)
    form = assemble(g, ckb())
    with pytest.raises(SolverError) as info:
        solve_spd(form, Dirichlet(g.boundary_mask, g.node_coords()[:, 0]), maxiter=2)
    assert info.value.residual > 0 and info.value.iterations == 2


def test_gradient_of_affine_and_constant():
    g = CubeGrid(2, 3, 3)
    p = np.array([2.0, -0.5])
    G = gradient(GridField(g, g.node_coords() @ p)).values
    assert np.abs(G - p).max() <= 1e-13
    assert np.abs(gradient(GridField(g, np.full(g.num_nodes, 3.0))).values).max() == 0.0


def test_gradient_of_bilinear_product():
    g = CubeGrid(2, 3, 1)
    x = g.node_coords()
    G = gradient(GridField(g, x[:, 0] * x[:, 1])).values
    c = g.cell_centers()
    # the cell average of grad(x1 x2) = (x2, x1) is its value at the cell centre
    assert np.abs(G - c[:, ::-1]).max() <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
def test_divergence_theorem_for_dirichlet_solutions(seed, p1, p2):
    g = CubeGrid(2, 3, 2)
    p = np.array([p1, p2])
    prob = CellProblem(g, ckb(seed))
    _, v = prob.nu(p)
    assert np.abs(prob.grad_mean(v) - p).max() <= 1e-12 * (1 + np.abs(p).max())


def test_galerkin_orthogonality():
    g = CubeGrid(2, 9, 2)
    tol = 1e-10
    prob = CellProblem(g, ckb(), tol)
    _, u = prob.nu(np.array([1.0, 0.3]))
    L = laplacian(g)
    rng = np.random.default_rng(0)
    for _ in range(5):
        phi = np.where(g.boundary_mask, 0.0, rng.standard_normal(g.num_nodes))
        lhs = abs(prob.bilinear(phi, u))
        bound = 10 * tol * np.sqrt(phi @ L @ phi) * np.sqrt(u @ L @ u)
        assert lhs <= bound


def test_energy_decreases_under_refinement():
    f = ckb(11)
    p = np.array([1.0, 0.0])
    for rho in (1, 2, 4):
        coarse = CellProblem(CubeGrid(2, 3, rho), f).nu(p)[0]
        fine = CellProblem(CubeGrid(2, 3, 2 * rho), f).nu(p)[0]
        assert fine <= coarse + 1e-10


def test_neumann_potential_of_constant_is_zero():
    g = CubeGrid(2, 3, 2)
    F = GridField(g, np.tile([1.5, -2.0], (g.num_cells, 1)), rank="vector")
    assert np.abs(neumann_potential(F)).max() == 0.0
    assert h_minus_one_norm(F) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_hminus_matches_dense_supremum(seed):
    g = CubeGrid(2, 2, 4)  # 9 x 9 nodes, 8 x 8 cells
    F = np.random.default_rng(seed).standard_normal((g.num_cells, 2))
    assert abs(h_minus_one_norm(GridField(g, F, rank="vector")) - dense_hminus(g, F)) <= 1e-6


def test_hminus_duality_identity():
    g = CubeGrid(2, 3, 3)
    tol = 1e-10
    F = np.random.default_rng(2).standard_normal((g.num_cells, 2))
    w = neumann_potential(GridField(g, F, rank="vector"), tol=tol)
    L = laplacian(g)
    b = load_vector(g, F - F.mean(axis=0))
    for i in range(2):
        pairing = float(b[:, i] @ w[:, i])
        energy = float(w[:, i] @ L @ w[:, i])
        assert abs(pairing - energy) <= 10 * tol * max(1.0, energy)
        assert abs(integral_mean(g, w[:, i])) <= 1e-14


def test_hminus_weaker_than_l2_for_gradients():
    g = CubeGrid(2, 3, 3)
    phi = np.random.default_rng(3).standard_normal(g.num_nodes)
    G = gradient(GridField(g, phi))
    l2 = np.sqrt(np.mean(np.sum(G.values**2, axis=1)))
    assert h_minus_one_norm(G) <= l2 * (1 + 1e-12)


def test_snapshot_round_trip():
    g = CubeGrid(2, 3, 2, (1.0, -1.0))
    u = GridField(g, np.random.default_rng(0).standard_normal(g.num_nodes))
    v = loads_snapshot(dumps_snapshot(u))
    assert v.grid == g and np.array_equal(u.values, v.values)
    F = gradient(u)
    assert np.array_equal(loads_snapshot(dumps_snapshot(F)).values, F.values)
