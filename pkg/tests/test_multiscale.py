import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homlab.field import derive_seed, make_checkerboard, make_constant
from homlab.grid import CubeGrid, GridError, GridField, gradient
from homlab.multiscale import (
    TriadicHierarchy,
    corrector_curve,
    cube_averages,
    gluing_defect,
    h_minus_one_norm,
    msp_evaluate,
    msp_test_suite,
    telescoping_check,
)


def ckb(seed=7):
    return make_checkerboard(2, 4.0, 0.5, seed)


def test_hierarchy_validation():
    with pytest.raises(GridError):
        TriadicHierarchy(CubeGrid(2, 4, 2))
    with pytest.raises(GridError):
        TriadicHierarchy(CubeGrid(2, 9, 2, (0.5, 0.0)))


@pytest.mark.parametrize("dim,side", [(2, 9), (2, 27), (3, 9)])
def test_hierarchy_tiles_the_top_cube(dim, side):
    h = TriadicHierarchy(CubeGrid(dim, side, 1))
    for n in range(h.m + 1):
        labels = h.cell_labels(n)
        counts = np.bincount(labels, minlength=h.count(n))
        assert len(counts) == h.count(n)
        assert np.all(counts == h.block(n) ** dim)
        c = h.centers(n)
        assert len(c) == h.count(n)
        assert np.all(np.abs(c - np.round(c)) <= 1e-12)  # lattice-point centres


def test_cube_averages_match_dense_summation():
    g = CubeGrid(2, 9, 2)
    h = TriadicHierarchy(g)
    rng = np.random.default_rng(0)
    F = GridField(g, rng.standard_normal((g.num_cells, 2)), rank="vector")
    cc = g.cell_centers()
    for n in range(h.m + 1):
        avg = cube_averages(F, h, n)
        half = 3**n / 2
        for z, a in zip(h.centers(n), avg):
            inside = np.all(np.abs(cc - z) < half, axis=1)
            ref = F.values[inside].mean(axis=0)
            assert np.abs(a - ref).max() <= 1e-13


def test_cube_averages_of_affine_and_top_level():
    g = CubeGrid(2, 9, 2)
    h = TriadicHierarchy(g)
    p = np.array([1.5, -0.25])
    G = gradient(GridField(g, g.node_coords() @ p))
    for n in range(h.m + 1):
        assert np.abs(cube_averages(G, h, n) - p).max() <= 1e-13
    F = GridField(g, np.random.default_rng(1).standard_normal((g.num_cells, 2)), rank="vector")
    assert np.abs(cube_averages(F, h, h.m)[0] - F.values.mean(axis=0)).max() <= 1e-13


def test_cube_averages_reject_scalar():
    g = CubeGrid(2, 3, 2)
    with pytest.raises(GridError):
        cube_averages(GridField(g, np.zeros(g.num_nodes)), TriadicHierarchy(g), 0)


def test_msp_affine_ratio():
    h = TriadicHierarchy(CubeGrid(2, 9, 2))
    suite = msp_test_suite(h)
    rep = msp_evaluate(suite["affine_e1"], h)
    # the gradient is constant: the H^-1 term vanishes, every cube average is e1
    assert rep.lhs_hminus <= 1e-9
    assert abs(rep.rhs_gradient_term - 1.0) <= 1e-12
    assert np.allclose(rep.rhs_scale_terms, [1.0, 3.0])
    assert abs(rep.lhs_l2 - 9 / np.sqrt(12)) <= 1e-12
    assert rep.ratio <= 1


def test_msp_constant_function():
    g = CubeGrid(2, 9, 2)
    rep = msp_evaluate(GridField(g, np.full(g.num_nodes, 2.0)), TriadicHierarchy(g))
    # the gradient term is the square root of a round-off sized energy
    assert rep.lhs == 0.0 and rep.rhs <= 1e-6 and rep.ratio == 0.0


def test_msp_oscillator_has_no_scale_terms():
    h = TriadicHierarchy(CubeGrid(2, 9, 4))
    rep = msp_evaluate(msp_test_suite(h)["oscillator"], h)
    assert max(rep.rhs_scale_terms) <= 1e-12
    assert rep.ratio <= 1


@pytest.mark.parametrize("name", ["affine_e1", "affine_diag", "oscillator", "smooth", "corrector_proxy"])
def test_msp_holds_on_suite(name):
    h = TriadicHierarchy(CubeGrid(2, 9, 2))
    u = msp_test_suite(h, field=ckb(3))[name]
    assert msp_evaluate(u, h).ratio <= 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_msp_holds_for_random_functions(seed):
    h = TriadicHierarchy(CubeGrid(2, 9, 1))
    vals = np.random.default_rng(seed).standard_normal(h.grid.num_nodes)
    assert msp_evaluate(GridField(h.grid, vals), h).ratio <= 1


def test_msp_scale_invariance():
    h = TriadicHierarchy(CubeGrid(2, 9, 2))
    u = msp_test_suite(h)["smooth"]
    a = msp_evaluate(u, h)
    b = msp_evaluate(GridField(h.grid, 5 * u.values), h)
    assert abs(a.ratio - b.ratio) <= 1e-9


def test_hminus_homogeneous():
    g = CubeGrid(2, 3, 3)
    F = np.random.default_rng(4).standard_normal((g.num_cells, 2))
    a = h_minus_one_norm(GridField(g, F, rank="vector"))
    b = h_minus_one_norm(GridField(g, -3 * F, rank="vector"))
    assert abs(b - 3 * a) <= 1e-8 * b


def test_gluing_trivial_cases():
    assert gluing_defect(ckb(), [1.0, 0.0], 1, 1) == (0.0, 0.0)
    lhs, rhs = gluing_defect(make_constant(np.eye(2)), [1.0, 0.0], 2, 1)
    assert abs(lhs) <= 1e-12 and abs(rhs) <= 1e-12
    with pytest.raises(GridError):
        gluing_defect(ckb(), [1.0, 0.0], 1, 2)


@pytest.mark.parametrize("seed", range(4))
def test_gluing_proven_bound(seed):
    # lhs <= 2 rhs follows from the quadratic response of the minimizer
    f = make_checkerboard(2, 4.0, 0.5, derive_seed(31, seed))
    lhs, rhs = gluing_defect(f, [1.0, 0.0], 2, 1)
    assert rhs >= -1e-10
    assert lhs <= 2 * rhs + 1e-9


def test_gluing_rhs_is_weighted_energy_gap():
    # the glued function is admissible on the big cube, so the rhs equals the
    # a-weighted energy of its difference from the minimizer
    from homlab.energy import CellProblem
    from homlab.multiscale import _glue

    f = ckb(2)
    p = np.array([0.3, 1.0])
    g = CubeGrid(2, 9, 2)
    prob = CellProblem(g, f)
    for n in (0, 1):
        nu_m, v_m = prob.nu(p)
        V, nus = _glue(g, f, p, n, prob.tol)
        rhs = -nu_m + float(np.mean(nus))
        assert abs(prob.energy(V - v_m) - rhs) <= 1e-8 * max(1.0, rhs)
        lhs, rhs2 = gluing_defect(f, p, 2, n)
        assert abs(rhs - rhs2) <= 1e-12


def test_telescoping_bounded_by_cube_count():
    f = ckb(5)
    lhs, rhs = telescoping_check(f, [1.0, 0.0], 1)
    assert lhs <= 2 * 3**2 * rhs + 1e-9


def test_corrector_curve_constant_field_is_zero():
    c = corrector_curve(make_constant(np.diag([2.0, 1.0])), [1.0, 0.0], 2)
    assert max(c.osc) <= 1e-9 and max(c.hminus) <= 1e-9


def test_corrector_curve_levels():
    with pytest.raises(GridError):
        corrector_curve(ckb(), [1.0, 0.0], 1)
    with pytest.raises(GridError):
        corrector_curve(ckb(), [1.0, 0.0], 2, inner_levels=[2])
    c = corrector_curve(ckb(), [1.0, 0.0], 3)
    assert c.levels == [1, 2] and len(c.osc) == 2
    assert all(r == o / 3**k for r, o, k in zip(c.ratios, c.osc, c.levels))
    assert all(o > 0 for o in c.osc)


def test_subgrids_partition_nodes():
    g = CubeGrid(2, 9, 2)
    h = TriadicHierarchy(g)
    cells = np.concatenate([cl for _, _, cl in h.subgrids(1)])
    assert sorted(cells.tolist()) == list(range(g.num_cells))
    for sub, nodes, _ in itertools.islice(h.subgrids(1), 3):
        assert np.allclose(g.node_coords()[nodes], sub.node_coords())
