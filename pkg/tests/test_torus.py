import io

import numpy as np
import pytest

from layerpot import (
    GridField,
    TorusGrid,
    assemble_D,
    coefficient_field_from_config,
    curl_free_projection,
    garding_check,
    multiplication_operator,
)
from layerpot.torus import (
    antidifferentiate,
    inner,
    reflection_signs,
    tangential_curl,
    tangential_divergence,
    tangential_gradient,
)


def test_grid_validation():
    with pytest.raises(ValueError):
        TorusGrid(n=1, N=12)
    with pytest.raises(ValueError):
        TorusGrid(n=3, N=16)
    with pytest.raises(ValueError):
        TorusGrid(n=1, N=4)
    g = TorusGrid(n=2, N=16, m=2)
    assert g.total_dim == 16 * 16 * 6


def test_grid_points_are_cell_centers():
    g = TorusGrid(n=1, N=8, L=8.0)
    np.testing.assert_allclose(g.points[:, 0], np.arange(8) + 0.5)


def test_D_eigenvalues_n1():
    # per mode xi the symbol has eigenvalues +-|xi|; xi = 0 contributes 2m zeros
    g = TorusGrid(n=1, N=8, L=2 * np.pi)
    D = assemble_D(g)
    w = np.linalg.eigvalsh(D.matrix)
    expect = sorted(
        [float(s * abs(x)) for x in g.axis_modes for s in (+1, -1)]
    )
    np.testing.assert_allclose(sorted(w), expect, atol=1e-12)


def test_D_on_constant_is_zero(grid64):
    D = assemble_D(grid64)
    f = GridField(grid64, np.ones((grid64.npts, 2)))
    assert D.apply(f).norm() <= 1e-13


def test_D_symbol_action_single_mode(grid64):
    # f = [0, e^{ix}] -> D f = [i e^{ix}, 0]
    D = assemble_D(grid64)
    x = grid64.points[:, 0]
    vals = np.zeros((grid64.npts, 2), dtype=complex)
    vals[:, 1] = np.exp(1j * x)
    out = D.apply(GridField(grid64, vals))
    np.testing.assert_allclose(out.values[:, 0], 1j * np.exp(1j * x), atol=1e-12)
    np.testing.assert_allclose(out.values[:, 1], 0.0, atol=1e-12)


def test_D_exactly_selfadjoint_and_odd(grid64):
    D = assemble_D(grid64).matrix
    assert np.linalg.norm(D - D.conj().T) == 0.0
    s = reflection_signs(grid64)
    np.testing.assert_allclose(s[:, None] * D * s[None, :], -D, atol=1e-15)


def test_spectral_accuracy_multimode():
    g = TorusGrid(n=1, N=32)
    D = assemble_D(g)
    x = g.points[:, 0]
    rng = np.random.default_rng(0)
    for k in (1, 3, 7):
        v = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        vals = np.exp(1j * k * x)[:, None] * v[None, :]
        out = D.apply(GridField(g, vals)).values
        sym = np.array([[0, 1j * k], [-1j * k, 0]])
        expect = np.exp(1j * k * x)[:, None] * (sym @ v)[None, :]
        np.testing.assert_allclose(out, expect, atol=1e-12)


def test_fft_roundtrip():
    g = TorusGrid(n=2, N=8)
    rng = np.random.default_rng(1)
    vals = rng.standard_normal((g.npts, g.dim_component)) + 1j * rng.standard_normal(
        (g.npts, g.dim_component)
    )
    np.testing.assert_allclose(g.ifft(g.fft(vals)), vals, atol=1e-12)


def test_curl_free_projection_properties(grid64):
    P = curl_free_projection(grid64).matrix
    assert np.linalg.norm(P @ P - P) <= 1e-12
    assert np.linalg.norm(P - P.conj().T) <= 1e-12
    D = assemble_D(grid64).matrix
    assert np.linalg.norm(P @ D - D @ P) <= 1e-10


def test_curl_free_projection_constants_killed(grid64):
    P = curl_free_projection(grid64)
    f = GridField(grid64, np.ones((grid64.npts, 2)))
    assert P.apply(f).norm() <= 1e-12


def test_curl_free_projection_meanzero_fixed_n1(grid64):
    # for n = 1 the symbol is invertible on every nonzero mode
    rng = np.random.default_rng(3)
    vals = rng.standard_normal((grid64.npts, 2)) + 1j * rng.standard_normal(
        (grid64.npts, 2)
    )
    vals -= vals.mean(axis=0, keepdims=True)
    f = GridField(grid64, vals)
    P = curl_free_projection(grid64)
    assert (
        np.linalg.norm(P.apply(f).values - f.values) <= 1e-11 * np.linalg.norm(f.values)
    )


def test_curl_free_projection_n2_divfree_killed():
    g = TorusGrid(n=2, N=8)
    P = curl_free_projection(g)
    x, y = g.points[:, 0], g.points[:, 1]
    # divergence-free tangential field: (d_y psi, -d_x psi)
    vals = np.zeros((g.npts, 3), dtype=complex)
    vals[:, 1] = np.cos(y)
    vals[:, 2] = np.cos(x)
    out = P.apply(GridField(g, vals))
    assert out.norm() <= 1e-12


def test_multiplication_identity(grid64, identity64):
    M = multiplication_operator(identity64)
    np.testing.assert_allclose(M.matrix, np.eye(grid64.total_dim), atol=1e-15)


def test_multiplication_constant_norm(grid64, constant64):
    M = multiplication_operator(constant64)
    C = constant64.samples[0]
    assert M.norm2() == pytest.approx(np.linalg.norm(C, 2), rel=1e-12)


def test_multiplication_kkpt_pointwise(grid64, kkpt64):
    M = multiplication_operator(kkpt64)
    f = GridField.from_scalar(grid64, np.ones((grid64.npts, 1)))
    out = M.apply(f).values
    s = np.where(grid64.points[:, 0] < grid64.L / 2, 1.0, -1.0)
    np.testing.assert_allclose(out[:, 0], 1.0, atol=1e-15)
    np.testing.assert_allclose(out[:, 1], -0.5 * s, atol=1e-15)


def test_garding_identity(grid64, identity64):
    assert garding_check(identity64, trials=8) == pytest.approx(1.0, abs=1e-10)


def test_garding_diagonal():
    grid = TorusGrid(n=1, N=32)
    field = coefficient_field_from_config(
        grid, {"family": "constant", "matrix": [[2.0, 0.0], [0.0, 0.5]]}
    )
    worst = garding_check(field, trials=12)
    assert worst >= 0.5 - 1e-10


def test_garding_kkpt():
    grid = TorusGrid(n=1, N=32)
    field = coefficient_field_from_config(grid, {"family": "kkpt", "k": 0.9})
    assert garding_check(field, trials=12) >= 1.0 - 1e-10


def test_inner_product_weighting():
    g = TorusGrid(n=1, N=16, L=2 * np.pi)
    ones = GridField(g, np.ones((g.npts, 2)))
    # integral of 1 over both components over the period
    assert inner(g, ones, ones) == pytest.approx(2 * g.L)


def test_tangential_calculus_roundtrip():
    g = TorusGrid(n=2, N=8)
    rng = np.random.default_rng(5)
    u = rng.standard_normal((g.npts, 1)) + 1j * rng.standard_normal((g.npts, 1))
    u -= u.mean(axis=0, keepdims=True)
    grad = tangential_gradient(g, u)
    assert np.linalg.norm(tangential_curl(g, grad)) <= 1e-12
    div = tangential_divergence(g, grad)
    back = antidifferentiate(g, grad)
    np.testing.assert_allclose(back, u, atol=1e-11)
    # div grad = laplacian: check against spectral multiplier on one mode
    x = g.points[:, 0]
    mode = np.exp(2j * x).reshape(-1, 1)
    lap = tangential_divergence(g, tangential_gradient(g, mode))
    np.testing.assert_allclose(lap, -4 * mode, atol=1e-10)


def test_gridfield_csv_roundtrip():
    g = TorusGrid(n=2, N=8, m=2)
    rng = np.random.default_rng(7)
    vals = rng.standard_normal((g.npts, g.dim_component)) + 1j * rng.standard_normal(
        (g.npts, g.dim_component)
    )
    f = GridField(g, vals)
    buf = io.StringIO()
    f.to_csv(buf)
    buf.seek(0)
    header = buf.readline().strip().split(",")
    assert header[:2] == ["x", "y"]
    assert "perp_0_re" in header and "par_1_1_im" in header
    buf.seek(0)
    g2 = GridField.from_csv(g, buf)
    np.testing.assert_allclose(g2.values, vals, atol=1e-15)


def test_gridfield_rejects_nonfinite():
    g = TorusGrid(n=1, N=8)
    vals = np.zeros((8, 2))
    vals[0, 0] = np.nan
    with pytest.raises(ValueError):
        GridField(g, vals)
