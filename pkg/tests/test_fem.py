import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forchup.errors import DomainError, MaxIterationsExceeded
from forchup.fem import (
    BoundarySpec,
    Dirichlet,
    FineMobility,
    Flux,
    NoFlux,
    Periodic,
    Well,
    average_velocity,
    boundary_fluxes,
    cell_velocity,
    solve_linear_elliptic,
    solve_steady_nonlinear,
    solve_transient,
)
from forchup.forchheimer import GField, eval_G_twoterm
from forchup.grid import StructuredGrid


def drop_x(p0=0.0, p1=1.0):
    return BoundarySpec(Dirichlet(p0), Dirichlet(p1), NoFlux(), NoFlux())


def test_affine_exactness_linear():
    g = StructuredGrid(7, 5, 1.0, 0.6)
    s = solve_linear_elliptic(g, 1.0, BoundarySpec.affine_dirichlet((1.0, 0.0)))
    X1, _ = g.node_coords()
    np.testing.assert_allclose(s.p, X1, atol=1e-13)
    np.testing.assert_allclose(s.velocity.reshape(-1, 2), [[-1.0, 0.0]] * g.n_cells, atol=1e-12)


def test_tensor_coefficient():
    g = StructuredGrid(4, 4)
    K = np.tile(np.diag([2.0, 1.0]), (g.n_cells, 1, 1))
    s = solve_linear_elliptic(g, K, BoundarySpec.affine_dirichlet((0.0, 1.0)))
    np.testing.assert_allclose(s.velocity.reshape(-1, 2), [[0.0, -1.0]] * g.n_cells, atol=1e-12)


def test_full_tensor_affine_exactness():
    g = StructuredGrid(5, 6)
    K = np.array([[3.0, 1.0], [1.0, 2.0]])
    s = solve_linear_elliptic(g, np.tile(K, (g.n_cells, 1, 1)), BoundarySpec.affine_dirichlet((1.0, -2.0)))
    np.testing.assert_allclose(s.grad.reshape(-1, 2), [[1.0, -2.0]] * g.n_cells, atol=1e-12)
    np.testing.assert_allclose(s.average_velocity(), -K @ [1.0, -2.0], atol=1e-12)


def _checker(grid, r=1):
    j, i = np.indices(grid.shape)
    return np.where(((i // r) + (j // r)) % 2 == 0, 1.0, 10.0)


def test_checkerboard_flux_refinement():
    # 4x4 checkerboard of k in {1, 10}; each mesh resolves the squares r times finer
    bc = BoundarySpec.affine_dirichlet((1.0, 0.0))
    q = []
    for r in (4, 16, 64):
        g = StructuredGrid(4 * r, 4 * r)
        q.append(boundary_fluxes(solve_linear_elliptic(g, _checker(g, r), bc))["right"])
    assert abs(q[0] - q[1]) / abs(q[1]) < 0.02
    assert abs(q[1] - q[2]) < abs(q[0] - q[1])


def test_nonlinear_constant_gradient():
    g = StructuredGrid(6, 6)
    gf = GField.two_term(np.full(g.shape, 2.0))
    s = solve_steady_nonlinear(g, 1.0, FineMobility(np.ones(g.shape), gf), BoundarySpec.affine_dirichlet((1.0, 0.0)))
    X1, _ = g.node_coords()
    np.testing.assert_allclose(s.p, X1, atol=1e-12)
    np.testing.assert_allclose(s.velocity.reshape(-1, 2), [[-0.5, 0.0]] * g.n_cells, atol=1e-12)


def test_darcy_limit_is_bitwise_linear():
    g = StructuredGrid(8, 5)
    k = np.random.default_rng(1).uniform(1, 10, g.shape)
    bc = drop_x()
    a = solve_linear_elliptic(g, k, bc)
    b = solve_steady_nonlinear(g, k, FineMobility(k, GField.darcy(g.shape)), bc)
    assert np.array_equal(a.p, b.p)
    assert b.iterations == 1


def test_two_layer_parallel_velocities():
    g = StructuredGrid(6, 8)
    k = np.ones(g.shape)
    k[4:] = 5.0
    beta = np.where(k > 1, 0.3, 2.0)
    mob = FineMobility(k, GField.two_term(beta))
    s = solve_steady_nonlinear(g, k, mob, drop_x(0.0, 1.0))
    xi = 1.0  # |grad p| along the layers
    for kval, b in ((1.0, 2.0), (5.0, 0.3)):
        u = s.velocity[k == kval][:, 0]
        np.testing.assert_allclose(u, -eval_G_twoterm(kval * xi, b) * kval * xi, rtol=1e-8)


def test_global_conservation():
    g = StructuredGrid(9, 7, 1.5, 1.0)
    k = np.random.default_rng(2).uniform(1, 5, g.shape)
    rhs = np.random.default_rng(3).uniform(0, 1, g.shape)
    d = Dirichlet(0.0)
    s = solve_linear_elliptic(g, k, BoundarySpec(d, d, d, d), rhs=rhs)
    total = sum(boundary_fluxes(s).values())
    assert total == pytest.approx(rhs.sum() * g.cell_area, rel=1e-10)


def test_reaction_flux_equals_average_velocity():
    g = StructuredGrid(8, 6)
    k = np.random.default_rng(0).uniform(1, 10, g.shape)
    s = solve_linear_elliptic(g, k, drop_x())
    fl = boundary_fluxes(s)
    ux = s.average_velocity()[0]
    # flow runs towards lower pressure: out through the left face
    assert fl["left"] == pytest.approx(-ux * g.Ly, rel=1e-10)
    assert fl["right"] == pytest.approx(ux * g.Ly, rel=1e-10)
    assert fl["top"] == 0.0


def test_mirror_symmetry():
    g = StructuredGrid(8, 6)
    k = np.random.default_rng(4).uniform(1, 10, g.shape)
    a = solve_linear_elliptic(g, k, drop_x(0.0, 1.0))
    b = solve_linear_elliptic(g, k[:, ::-1], drop_x(1.0, 0.0))
    np.testing.assert_allclose(a.p, b.p[:, ::-1], atol=1e-12)


def test_periodic_mean_gradient():
    g = StructuredGrid(6, 6)
    k = np.random.default_rng(0).uniform(1, 10, g.shape)
    s = solve_linear_elliptic(g, k, BoundarySpec.affine_periodic((1.0, 0.5)))
    np.testing.assert_allclose(s.grad.reshape(-1, 2).mean(axis=0), [1.0, 0.5], atol=1e-12)
    # periodic fluctuation: equal traces on opposite faces after removing the affine part
    X1, X2 = g.node_coords()
    w = s.p - (X1 + 0.5 * X2)
    np.testing.assert_allclose(w[:, 0], w[:, -1], atol=1e-12)
    np.testing.assert_allclose(w[0], w[-1], atol=1e-12)


def test_pure_neumann_is_zero_mean():
    g = StructuredGrid(5, 5)
    rhs = np.zeros(g.shape)
    rhs[0, 0], rhs[-1, -1] = 1.0, -1.0
    s = solve_linear_elliptic(g, 1.0, BoundarySpec(), rhs=rhs)
    assert abs(s.p.mean()) < 1e-12


def test_flux_condition_balances_source():
    g = StructuredGrid(6, 4)
    Q = 2.0
    s = solve_linear_elliptic(g, 1.0, BoundarySpec(NoFlux(), Flux(Q), NoFlux(), NoFlux()),
                              rhs=np.full(g.shape, Q / g.area))
    # 1D solution: u_x(x) = Q x / (Lx Ly)
    C1, _ = g.cell_centers()
    np.testing.assert_allclose(s.velocity[..., 0], Q * C1 / g.area, atol=1e-10)


def test_well_face_is_equipotential():
    g = StructuredGrid(6, 5)
    k = np.random.default_rng(5).uniform(1, 10, g.shape)
    Q = 3.0
    s = solve_linear_elliptic(g, k, BoundarySpec(NoFlux(), Well(Q), NoFlux(), NoFlux()),
                              rhs=np.full(g.shape, Q / g.area))
    right = s.p[:, -1]
    np.testing.assert_allclose(right, right[0], atol=1e-14)


def test_picard_records_updates_and_limits():
    g = StructuredGrid(8, 8)
    k = np.random.default_rng(6).uniform(1, 10, g.shape)
    mob = FineMobility(k, GField.two_term(np.full(g.shape, 5.0)))
    s = solve_steady_nonlinear(g, k, mob, drop_x(0.0, 10.0))
    assert s.updates[-1] <= 1e-8 and len(s.updates) == s.iterations
    with pytest.raises(MaxIterationsExceeded):
        solve_steady_nonlinear(g, k, mob, drop_x(0.0, 10.0), max_iter=2)


def test_cell_velocity_examples():
    assert np.all(cell_velocity(np.zeros((3, 2)), 2.0, 1.0) == 0.0)
    np.testing.assert_allclose(cell_velocity([[1.0, 0.0]], 3.0, 1.0), [[-3.0, 0.0]])
    G = eval_G_twoterm(1.0, 2.0)
    np.testing.assert_allclose(cell_velocity([[1.0, 0.0]], 1.0, G), [[-0.5, 0.0]])


def test_average_velocity_examples():
    g = StructuredGrid(10, 10)
    u = np.zeros((10, 10, 2))
    u[...] = (2.0, -1.0)
    np.testing.assert_allclose(average_velocity(g, u), [2.0, -1.0])
    C1, _ = g.cell_centers()
    u = np.stack([C1, np.zeros_like(C1)], axis=-1)
    np.testing.assert_allclose(average_velocity(g, u), [0.5, 0.0], atol=1e-15)
    mask = np.zeros(g.shape, dtype=bool)
    mask[:, :5] = True
    np.testing.assert_allclose(average_velocity(g, u, mask), [0.25, 0.0], atol=1e-15)
    with pytest.raises(DomainError):
        average_velocity(g, u, np.zeros(g.shape, dtype=bool))


def test_bc_validation():
    with pytest.raises(DomainError):
        BoundarySpec(Periodic(), NoFlux())
    with pytest.raises(DomainError):
        BoundarySpec(Well(1.0), Well(1.0))
    with pytest.raises(DomainError):
        BoundarySpec(mean_gradient=(1.0, 0.0))


def test_transient_conserves_mass_without_flux():
    g = StructuredGrid(6, 6)
    k = np.random.default_rng(7).uniform(1, 10, g.shape)
    phi = np.random.default_rng(8).uniform(0.1, 0.3, g.shape)
    X1, X2 = g.node_coords()
    p0 = np.cos(np.pi * X1) + X2**2
    mob = FineMobility(k, GField.two_term(np.full(g.shape, 1.0)))
    ts = solve_transient(g, k, mob, phi, 1.0, BoundarySpec(), p0, 0.01, 0.1)

    def mass(p):
        # consistent mass: exact integral of phi * bilinear p
        return float((phi * 0.25 * (p[:-1, :-1] + p[:-1, 1:] + p[1:, :-1] + p[1:, 1:])).sum())

    m0 = mass(ts.states[0].p)
    for s in ts.states[1:]:
        assert mass(s.p) == pytest.approx(m0, rel=1e-10, abs=1e-12)


def test_transient_validation():
    g = StructuredGrid(2, 2)
    with pytest.raises(DomainError):
        solve_transient(g, 1.0, None, np.ones(g.shape), 1.0, BoundarySpec(), np.zeros(9), 0.3, 1.0)
    with pytest.raises(DomainError):
        solve_transient(g, 1.0, None, np.zeros(g.shape), 1.0, BoundarySpec(), np.zeros(9), 0.5, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(2, 7), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 20))
def test_affine_exactness_property(nx, ny, a, b, k):
    g = StructuredGrid(nx, ny, 1.0, 0.7)
    s = solve_linear_elliptic(g, k, BoundarySpec.affine_dirichlet((a, b)))
    X1, X2 = g.node_coords()
    np.testing.assert_allclose(s.p, a * X1 + b * X2, atol=1e-11 * (1 + abs(a) + abs(b)))
