import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forchup.errors import DomainError
from forchup.grid import (
    BlockPartition,
    ScalarCellField,
    StructuredGrid,
    beta_from_k_contrast,
    beta_from_phi_k,
    generate_permeability,
    porosity_from_k,
    read_field_csv,
    write_field_csv,
    write_vtk,
)


def test_grid_geometry():
    g = StructuredGrid(4, 2, 2.0, 1.0, x0=1.0)
    assert g.shape == (2, 4)
    assert (g.h1, g.h2) == (0.5, 0.5)
    assert g.n_nodes == 15 and g.n_cells == 8
    assert g.area == 2.0 and g.cell_area == 0.25
    X1, X2 = g.node_coords()
    assert X1.shape == (3, 5) and X1[0, -1] == 3.0
    C1, C2 = g.cell_centers()
    assert C1[0, 0] == 1.25 and C2[1, 0] == 0.75
    assert g.center == (2.0, 0.5)
    assert g.refined(3).shape == (6, 12)


@pytest.mark.parametrize("args", [(0, 1), (2, 2, 0.0), (2, 2, 1.0, -1.0), (1.5, 2)])
def test_grid_rejects_bad_input(args):
    with pytest.raises(DomainError):
        StructuredGrid(*args)


def test_partition_blocks_tile_the_grid():
    g = StructuredGrid(12, 6, 3.0, 1.5)
    part = BlockPartition(g, 4, 2)
    assert (part.bx, part.by, part.n_blocks) == (3, 3, 8)
    cover = np.zeros(g.shape, dtype=int)
    for bi, bj in part.blocks():
        cover[part.block_slices(bi, bj)] += 1
        bg = part.block_grid(bi, bj)
        assert bg.h1 == pytest.approx(g.h1) and bg.h2 == pytest.approx(g.h2)
        assert bg.x0 == pytest.approx(bi * 0.75) and bg.y0 == pytest.approx(bj * 0.75)
    assert np.all(cover == 1)
    assert list(part.blocks())[:2] == [(0, 0), (1, 0)]
    assert part.coarse.shape == (2, 4)
    with pytest.raises(DomainError):
        BlockPartition(g, 5, 2)


def test_two_layer_example():
    g = StructuredGrid(4, 4)
    k = generate_permeability(g, "horizontal-stratified", 1.0, 10.0, layer_count=2)
    np.testing.assert_array_equal(k.values[:2], 1.0)
    np.testing.assert_array_equal(k.values[2:], 11.0)


@pytest.mark.parametrize("pattern", ["vertical-stratified", "horizontal-stratified", "linear", "random"])
@pytest.mark.parametrize("profile", ["alternating", "ramp"])
def test_contrast_and_bounds(pattern, profile):
    g = StructuredGrid(20, 10, 2.0, 1.0)
    k = generate_permeability(g, pattern, 2.0, 10.0, layer_count=5, seed=4, profile=profile)
    v = k.values
    assert v.min() == pytest.approx(2.0, rel=1e-14)
    assert (v.max() - v.min()) / v.min() == pytest.approx(10.0, rel=1e-12)


def test_stratified_fields_are_constant_across():
    g = StructuredGrid(12, 8)
    kv = generate_permeability(g, "vertical-stratified", layer_count=4).values
    kh = generate_permeability(g, "horizontal-stratified", layer_count=4).values
    assert np.all(kv == kv[0:1, :])
    assert np.all(kh == kh[:, 0:1])


def test_linear_is_affine():
    g = StructuredGrid(6, 5)
    v = generate_permeability(g, "linear").values
    # second differences vanish along both axes
    np.testing.assert_allclose(np.diff(v, 2, axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.diff(v, 2, axis=0), 0.0, atol=1e-12)


def test_random_is_reproducible():
    g = StructuredGrid(8, 8)
    a = generate_permeability(g, "random", seed=7).values
    b = generate_permeability(g, "random", seed=7).values
    c = generate_permeability(g, "random", seed=8).values
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_explicit_interfaces():
    g = StructuredGrid(1, 10)
    k = generate_permeability(g, "horizontal-stratified", interfaces=[0.3])
    np.testing.assert_array_equal(k.values[:3, 0], 1.0)
    np.testing.assert_array_equal(k.values[3:, 0], 11.0)


def test_zero_contrast_is_uniform():
    k = generate_permeability(StructuredGrid(3, 3), "random", 2.5, 0.0)
    np.testing.assert_array_equal(k.values, 2.5)


@pytest.mark.parametrize("kw", [dict(pattern="zigzag"), dict(pattern="random", k_min=0.0),
                                dict(pattern="vertical-stratified", layer_count=0),
                                dict(pattern="vertical-stratified", layer_count=9),
                                dict(pattern="random", contrast=-1.0)])
def test_generator_errors(kw):
    with pytest.raises(DomainError):
        generate_permeability(StructuredGrid(8, 4), **kw)


def test_porosity_and_beta():
    g = StructuredGrid(2, 1)
    k = ScalarCellField(g, [[1.0, 8.0]], positive=True)
    phi = porosity_from_k(k, 1 / 3, 0.1)
    np.testing.assert_allclose(phi.values, [[0.1, 0.2]])
    beta = beta_from_phi_k(phi, k)
    np.testing.assert_allclose(beta.values, [[0.1, 0.2 / np.sqrt(8.0)]])
    b = beta_from_k_contrast(k, 1e-3, 10.0)
    np.testing.assert_allclose(b.values, [[1e-3, 1.1e-2]])
    np.testing.assert_array_equal(beta_from_k_contrast(k, 1e-3, 0.0).values, 1e-3)


def test_field_shape_checked():
    with pytest.raises(DomainError):
        ScalarCellField(StructuredGrid(2, 2), np.ones(3))
    with pytest.raises(DomainError):
        ScalarCellField(StructuredGrid(1, 1), [[0.0]], positive=True)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_csv_roundtrip_is_exact(nx, ny, seed):
    import tempfile
    from pathlib import Path

    g = StructuredGrid(nx, ny)
    f = ScalarCellField(g, np.random.default_rng(seed).uniform(0, 1, g.shape))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "f.csv"
        write_field_csv(p, f)
        np.testing.assert_array_equal(read_field_csv(p, g).values, f.values)


def test_csv_missing_cells(tmp_path):
    p = tmp_path / "f.csv"
    write_field_csv(p, ScalarCellField(StructuredGrid(2, 2), np.ones((2, 2))))
    with pytest.raises(DomainError):
        read_field_csv(p, StructuredGrid(3, 2))


def test_vtk_layout(tmp_path):
    g = StructuredGrid(3, 2)
    p = tmp_path / "f.vtk"
    write_vtk(p, g, cell_data={"k": np.arange(6.0).reshape(2, 3)}, point_data={"p": np.zeros((3, 4))})
    text = p.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert "DIMENSIONS 4 3 1" in text
    assert "POINT_DATA 12" in text and "CELL_DATA 6" in text
    i = text.index("SCALARS k double 1")
    assert [float(v) for v in text[i + 2:i + 8]] == list(range(6))
