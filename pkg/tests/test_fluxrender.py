import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bumpy
from fluxcaustic.fluxrender import (
    FluxImage, GrayImage, clip_triangle_to_rect, flux_to_gray, gamma, gamma_inv, gray_to_flux, quadrant_area,
    render_flux, render_flux_with_grads, trace_pairs,
)
from fluxcaustic import autodiff as ad
from fluxcaustic.geometry import ImagePlane, Triangle2D, build_grid_lens, pixel_rect
from fluxcaustic.oracle import montecarlo_clip_area

SOURCES4 = (np.array([-0.3, 0.2, 0.1, -0.05]), np.array([0.25, -0.2, 0.3, -0.4]), np.array([0.4, 0.1, 0.3, 0.2]))


# exact clipping -----------------------------------------------------------------


def test_clip_examples():
    t = Triangle2D([0.1, 0.1], [0.4, 0.1], [0.1, 0.3])
    assert clip_triangle_to_rect(t, (0, 1, 0, 1)) == pytest.approx(t.area, abs=1e-15)
    unit = Triangle2D([0, 0], [1, 0], [0, 1])
    assert clip_triangle_to_rect(unit, (0, 0.5, 0, 0.5)) == pytest.approx(0.25, abs=1e-15)
    assert clip_triangle_to_rect(unit, (2, 3, 2, 3)) == 0.0
    assert clip_triangle_to_rect(unit, (0.5, 1, 0.5, 1)) == 0.0


tri_coord = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(tri_coord, min_size=6, max_size=6))
def test_clipped_areas_partition_the_triangle(c):
    t = Triangle2D(c[0:2], c[2:4], c[4:6])
    plane = ImagePlane(1.0, 7.0, 7.0, 7, 7)
    total = sum(clip_triangle_to_rect(t, pixel_rect(plane, u, v)) for u in range(7) for v in range(7))
    assert total == pytest.approx(t.area, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(tri_coord, min_size=6, max_size=6), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 2),
       st.floats(0.1, 2))
def test_corner_integrals_match_polygon_clipping(c, x0, y0, w, h):
    # the renderer's corner-quadrant integrals against Sutherland-Hodgman
    t = Triangle2D(c[0:2], c[2:4], c[4:6])
    xs, ys = (c[0], c[2], c[4]), (c[1], c[3], c[5])
    x1, y1 = x0 + w, y0 + h
    signed = (quadrant_area(xs, ys, x1, y1) - quadrant_area(xs, ys, x0, y1)
              - quadrant_area(xs, ys, x1, y0) + quadrant_area(xs, ys, x0, y0))
    assert abs(signed) == pytest.approx(clip_triangle_to_rect(t, (x0, x1, y0, y1)), abs=1e-12)


def test_montecarlo_agrees_with_exact_clip():
    rng = np.random.default_rng(7)
    for _ in range(3):
        c = rng.uniform(-1, 1, 6)
        t = Triangle2D(c[0:2], c[2:4], c[4:6])
        rect = (-0.3, 0.5, -0.4, 0.2)
        est, se = montecarlo_clip_area(t, rect, 10**7, rng)
        exact = clip_triangle_to_rect(t, rect)
        assert abs(est - exact) <= 3 * se + 1e-12


def test_montecarlo_trivial_cases():
    t = Triangle2D([0, 0], [1, 0], [0, 1])
    assert montecarlo_clip_area(t, (-1, 2, -1, 2), 1000, 0)[0] == 0.5
    assert montecarlo_clip_area(t, (3, 4, 3, 4), 1000, 0)[0] == 0.0


# gamma ----------------------------------------------------------------------------


def test_uniform_flux_to_mid_gray():
    n_p = 12
    g = flux_to_gray(FluxImage(np.full((3, 4), 7.0)), n_p * gamma(0.5))
    assert np.allclose(g.data, 0.5, atol=1e-15)


def test_gamma_roundtrip():
    x = np.linspace(0, 1, 1001)
    assert np.max(np.abs(gamma(gamma_inv(x)) - x)) < 1e-12
    assert np.max(np.abs(gamma_inv(gamma(x)) - x)) < 1e-12


def test_gray_to_flux():
    assert np.all(gray_to_flux(GrayImage(np.zeros((2, 2)))).data == 0)
    assert np.all(gray_to_flux(GrayImage(np.ones((2, 2)))).data == 1)


def test_doubling_flux_keeps_gray(rng):
    phi = rng.random((5, 5))
    a = flux_to_gray(FluxImage(phi), 3.0)
    b = flux_to_gray(FluxImage(2 * phi), 3.0)
    assert np.array_equal(a.data, b.data)


def test_zero_flux_rejected():
    with pytest.raises(ValueError):
        flux_to_gray(FluxImage(np.zeros((2, 2))), 1.0)


# rendering ------------------------------------------------------------------------


def test_axial_source_symmetry(small_lens, small_plane):
    f = render_flux(([0.0], [0.0], [1.0]), small_lens, small_plane).data
    m = f.max()
    # the diagonal split of each grid cell is symmetric under half-turns and transposition
    assert np.max(np.abs(f - f[::-1, ::-1])) / m < 1e-9
    assert np.max(np.abs(f - f.T)) / m < 1e-9


def test_flux_conservation(small_lens, small_plane):
    lens = bumpy(small_lens, 0.1)
    img = render_flux(SOURCES4, lens, small_plane)
    tr = trace_pairs(*SOURCES4, lens, small_plane)
    expected = float(np.sum(tr.flux))
    assert img.escaped == 0.0 and img.tir_count == 0
    assert abs(img.total + img.escaped - expected) <= 1e-9 * expected


def test_conservation_with_escaping_light(small_lens):
    lens = bumpy(small_lens, 0.1)
    plane = ImagePlane(150.0, 6.0, 6.0, 16, 16)
    img = render_flux(SOURCES4, lens, plane)
    expected = float(np.sum(trace_pairs(*SOURCES4, lens, plane).flux))
    assert img.escaped > 0
    assert abs(img.total + img.escaped - expected) <= 1e-9 * expected


def test_two_triangle_lens_by_hand():
    lens = build_grid_lens(2, 2, (10.0, 10.0), 120.0, 121.0)
    lens = lens.with_heights([121.0, 121.2, 121.1, 121.4])
    plane = ImagePlane(150.0, 16.0, 16.0, 4, 4)
    src = ([0.2], [-0.1], [0.7])
    tr = trace_pairs(*src, lens, plane)
    expected = np.zeros((4, 4))
    for i in range(2):
        t = Triangle2D(*[(tr.proj_x[c][i], tr.proj_y[c][i]) for c in range(3)])
        for u in range(4):
            for v in range(4):
                expected[v, u] += tr.flux[i] * clip_triangle_to_rect(t, pixel_rect(plane, u, v)) / t.area
    got = render_flux(src, lens, plane).data
    assert np.max(np.abs(got - expected)) <= 1e-12 * expected.max()


def test_superposition(small_lens, small_plane):
    lens = bumpy(small_lens, 0.1)
    a = tuple(s[:2] for s in SOURCES4)
    b = tuple(s[2:] for s in SOURCES4)
    whole = render_flux(SOURCES4, lens, small_plane).data
    parts = render_flux(a, lens, small_plane).data + render_flux(b, lens, small_plane).data
    assert np.max(np.abs(whole - parts)) <= 1e-12 * whole.max()


def test_intensity_linearity(small_lens, small_plane):
    x, y, q = SOURCES4
    base = render_flux((x, y, q), small_lens, small_plane).data
    scaled = render_flux((x, y, 3.7 * q), small_lens, small_plane).data
    assert np.allclose(scaled, 3.7 * base, rtol=1e-14, atol=0)


@pytest.mark.parametrize("c", [2.0, 0.25, 1024.0])
def test_intensity_scaling_keeps_gray_bitwise(small_lens, small_plane, c):
    x, y, q = SOURCES4
    G = 300.0
    a = flux_to_gray(render_flux((x, y, q), small_lens, small_plane), G)
    b = flux_to_gray(render_flux((x, y, c * q), small_lens, small_plane), G)
    assert np.array_equal(a.data, b.data)


def test_deterministic_across_threads(small_lens, small_plane):
    lens = bumpy(small_lens, 0.1)
    one = render_flux(SOURCES4, lens, small_plane, chunk_sources=1, threads=1).data
    again = render_flux(SOURCES4, lens, small_plane, chunk_sources=1, threads=1).data
    many = render_flux(SOURCES4, lens, small_plane, chunk_sources=1, threads=3).data
    assert np.array_equal(one, again) and np.array_equal(one, many)


def test_backends_agree(small_lens, small_plane):
    lens = bumpy(small_lens, 0.1)
    for wrt in ("sources", "heights"):
        c = render_flux_with_grads(SOURCES4, lens, small_plane, wrt, backend="compiled")
        d = render_flux_with_grads(SOURCES4, lens, small_plane, wrt, backend="dual")
        assert np.allclose(c.image.data, d.image.data, rtol=0, atol=1e-13 * c.image.data.max())
        Jc = c.contributions.jacobian_dense(small_plane.n_pixels)
        Jd = d.contributions.jacobian_dense(small_plane.n_pixels)
        assert np.max(np.abs(Jc - Jd)) <= 1e-10 * np.max(np.abs(Jc))


def total_internal_reflection_lens():
    lens = build_grid_lens(3, 3, (10.0, 10.0), 120.0, 121.0)
    z = lens.z.copy()
    z[4] = 127.0  # steep spike at the centre
    return lens.with_heights(z)


def test_internal_reflection_is_tallied():
    lens = total_internal_reflection_lens()
    plane = ImagePlane(150.0, 40.0, 40.0, 16, 16)
    img = render_flux(([0.0], [0.0], [1.0]), lens, plane)
    assert img.tir_count > 0
    tr = trace_pairs([0.0], [0.0], [1.0], lens, plane)
    assert np.all(tr.flux[tr.tir] == 0)


# gradients -------------------------------------------------------------------------


def fd_jacobian(render, p, h):
    cols = []
    for j in range(len(p)):
        e = np.zeros_like(p)
        e[j] = h
        cols.append((render(p + e) - render(p - e)).ravel() / (2 * h))
    return np.column_stack(cols)


@pytest.fixture
def grad_scene():
    lens = bumpy(build_grid_lens(8, 8, (10.0, 10.0), 120.0, 121.0), 0.1, seed=3)
    return lens, ImagePlane(150.0, 16.0, 16.0, 16, 16)


def test_source_jacobian_against_finite_differences(grad_scene):
    lens, plane = grad_scene
    p = np.column_stack(SOURCES4).ravel()
    res = render_flux_with_grads(SOURCES4, lens, plane, "sources")
    J = res.contributions.jacobian_dense(plane.n_pixels)
    Jfd = fd_jacobian(lambda v: render_flux(tuple(v.reshape(-1, 3).T), lens, plane).data, p, 1e-6)
    assert np.max(np.abs(J - Jfd)) / np.max(np.abs(J)) < 1e-4


def test_height_jacobian_against_finite_differences(grad_scene):
    lens, plane = grad_scene
    res = render_flux_with_grads(SOURCES4, lens, plane, "heights")
    J = res.contributions.jacobian_dense(plane.n_pixels)
    Jfd = fd_jacobian(lambda z: render_flux(SOURCES4, lens.with_heights(z), plane).data, lens.z.copy(), 1e-6)
    assert np.max(np.abs(J - Jfd)) / np.max(np.abs(J)) < 1e-4


def test_intensity_partial_is_contribution_over_q(grad_scene):
    lens, plane = grad_scene
    x, y, q = SOURCES4
    J = render_flux_with_grads(SOURCES4, lens, plane, "sources").contributions.jacobian_dense(plane.n_pixels)
    for k in range(4):
        alone = render_flux((x[k:k + 1], y[k:k + 1], q[k:k + 1]), lens, plane).data.ravel()
        assert np.allclose(J[:, 3 * k + 2], alone / q[k], rtol=1e-12, atol=1e-15)


def test_zero_seed_gives_zero_gradient(grad_scene):
    lens, plane = grad_scene
    res = render_flux_with_grads(SOURCES4, lens, plane, "heights")
    assert np.all(res.contributions.vjp(np.zeros(plane.n_pixels)) == 0)


def test_trace_duals_track_pair_variables(grad_scene):
    lens, plane = grad_scene
    tr = trace_pairs(*SOURCES4, lens, plane, wrt="sources")
    assert isinstance(tr.flux, ad.Dual)
    assert tr.variables.shape == (4 * lens.n_triangles, 3)
    assert tr.source_of_pair[lens.n_triangles] == 1
