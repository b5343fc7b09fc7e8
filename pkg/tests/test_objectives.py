import numpy as np
import pytest

from conftest import bumpy
from fluxcaustic.fluxrender import FluxImage, GrayImage, gamma, gamma_inv, render_flux, render_flux_with_grads
from fluxcaustic.geometry import ImagePlane, build_grid_lens
from fluxcaustic.objectives import (
    LensDesignProblem, Reference, SourceFitProblem, e_flux, e_grad, e_img, e_out, e_out_points, e_smooth,
    gradient_mismatch, image_mismatch, vertex_mean_curvature,
)
from fluxcaustic.oracle import dense_grid_render, dense_grid_sources
from fluxcaustic.sourcemodel import ContractionParams, PointSourceSet, encode, init_sources


def central_fd(f, x, h):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# image terms --------------------------------------------------------------------


def test_e_flux_examples(rng):
    ref = GrayImage(rng.random((6, 6)))
    assert e_flux(FluxImage(3 * gamma(ref.data)), ref) < 1e-28
    one = np.zeros((4, 5))
    one[2, 3] = 1.0
    n_p = 20
    assert e_flux(FluxImage(np.ones((4, 5))), GrayImage(one)) == pytest.approx((n_p - 1) / n_p, rel=1e-14)
    phi = rng.random((6, 6))
    assert e_flux(FluxImage(10 * phi), ref) == pytest.approx(e_flux(FluxImage(phi), ref), rel=1e-13)


def test_gray_mismatch_examples(rng):
    a = rng.random((4, 4))
    assert image_mismatch(a, a) == 0.0
    b = a.copy()
    b[1, 2] += 0.3
    assert image_mismatch(a, b) == pytest.approx(0.09, rel=1e-12)
    assert gradient_mismatch(np.full((3, 3), 0.2), np.full((3, 3), 0.7)) == 0.0
    assert gradient_mismatch(a, a) == 0.0
    ramp = np.tile([0.0, 0.5, 1.0], (3, 1))
    # three rows of two horizontal steps of 0.5, no vertical change
    assert gradient_mismatch(ramp, np.full((3, 3), 0.5)) == pytest.approx(1.5, rel=1e-15)


def test_e_img_zero_at_matching_render(rng):
    ref = GrayImage(rng.random((6, 6)))
    assert e_img(FluxImage(5 * gamma(ref.data)), ref) < 1e-28


@pytest.mark.parametrize("term", [e_flux, e_img, e_grad])
def test_image_term_adjoints(term, rng):
    phi = rng.uniform(0.05, 0.3, (16, 16))
    tgt = GrayImage(rng.random((16, 16)))
    E, g = term(FluxImage(phi), tgt, with_grad=True)
    fd = central_fd(lambda v: term(FluxImage(v.reshape(16, 16)), tgt), phi.ravel(), 1e-7).reshape(16, 16)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())


def test_e_out_points():
    plane = ImagePlane(1.0, 4.0, 6.0, 8, 8)
    assert e_out_points([0.0, 1.9], [2.9, -3.0], plane) == 0.0
    assert e_out_points([3.0], [0.0], plane) == pytest.approx(1.0)
    assert e_out_points([5.0], [7.0], plane) == pytest.approx(25.0)


def test_e_out_gradient(small_lens):
    lens = bumpy(small_lens, 0.1)
    plane = ImagePlane(150.0, 9.0, 9.0, 16, 16)
    src = ([0.1, -0.2], [0.0, 0.3], [0.5, 0.5])

    def f(z):
        tr = render_flux_with_grads(src, lens.with_heights(z), plane, "heights", keep_traces=True).traces
        return e_out(tr, plane)

    res = render_flux_with_grads(src, lens, plane, "heights", keep_traces=True)
    E, g = e_out(res.traces, plane, with_grad=True, n_variables=lens.n_vertices)
    assert E > 0
    fd = central_fd(f, lens.z.copy(), 1e-6)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())


# smoothness -----------------------------------------------------------------------


def sphere_lens(R, n=41):
    lens = build_grid_lens(n, n, (10.0, 10.0), 120.0, 121.0)
    x, y = lens.xy.T
    return lens.with_heights(121.0 + np.sqrt(R * R - x * x - y * y) - R)


def test_flat_surface_has_no_curvature(small_lens):
    assert e_smooth(small_lens) == 0.0


def test_sphere_curvature():
    R = 30.0
    lens = sphere_lens(R)
    assert 10.0 / 40 <= R / 50
    H = vertex_mean_curvature(lens)[0]
    interior = ~lens.boundary_mask()
    assert np.max(np.abs(H[interior] * R - 1)) < 0.05


def test_smoothing_flow_decreases_energy():
    lens = bumpy(build_grid_lens(17, 17, (10.0, 10.0), 120.0, 121.0), 0.3, seed=5)
    interior = ~lens.boundary_mask()
    energies = [e_smooth(lens)]
    for _ in range(10):
        _, D, A, _, ok = vertex_mean_curvature(lens)
        z = lens.z.copy()
        step = np.where(ok, D[:, 2] / np.where(ok, A, 1.0), 0.0)
        z[interior] += 0.02 * step[interior]
        lens = lens.with_heights(z)
        energies.append(e_smooth(lens))
    assert all(b < a for a, b in zip(energies, energies[1:]))


def test_e_smooth_gradient():
    lens = bumpy(build_grid_lens(9, 9, (10.0, 10.0), 120.0, 121.0), 0.3, seed=2)
    E, g = e_smooth(lens, with_grad=True)
    fd = central_fd(lambda z: e_smooth(lens.with_heights(z)), lens.z.copy(), 1e-6)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())


# source fitting -------------------------------------------------------------------


@pytest.fixture
def fit_scene():
    lens = bumpy(build_grid_lens(9, 9, (10.0, 10.0), 120.0, 121.0), 0.15, seed=4)
    plane = ImagePlane(150.0, 9.9, 9.9, 16, 16)
    ref = Reference(lens, plane, dense_grid_render(4, 1.0, lens, plane))
    return lens, plane, ref


def test_generator_parameters_sit_at_the_floor(fit_scene):
    lens, plane, _ = fit_scene
    ref = Reference(lens, plane, dense_grid_render(2, 1.0, lens, plane))
    truth = dense_grid_sources(2, 1.0)
    prob = SourceFitProblem([ref], 1.0)
    E, _ = prob(prob.initial_vector(truth))
    assert E < 1e-6


@pytest.mark.parametrize("contraction,symmetric", [(True, False), (False, False), (True, True), (False, True)])
def test_source_fit_gradient(fit_scene, contraction, symmetric):
    _, _, ref = fit_scene
    start = PointSourceSet([0.1, -0.1, 0.1, -0.1], [0.2, 0.2, -0.2, -0.2], [0.3, 0.3, 0.3, 0.3], 1.0)
    if not symmetric:
        start = PointSourceSet([0.13, -0.21, 0.3, -0.05], [0.22, 0.1, -0.33, -0.2], [0.3, 0.2, 0.25, 0.25], 1.0)
    prob = SourceFitProblem([ref], 1.0, contraction=contraction, symmetric=symmetric)
    x = prob.initial_vector(start)
    if not contraction:
        x[0] = 0.7  # outside the square: exercise the penalty
    E, g = prob(x)
    fd = central_fd(lambda v: prob(v)[0], x, 1e-6)
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-6)


def test_zero_intensity_parameter_has_zero_gradient(fit_scene):
    _, _, ref = fit_scene
    p = encode(init_sources(4, 1.0))
    p.qh[1] = 0.0
    _, g = SourceFitProblem([ref], 1.0)(p.vector())
    assert g[5] == 0.0


def test_objective_adds_over_references(fit_scene):
    lens, plane, ref = fit_scene
    other = bumpy(lens, 0.1, seed=9)
    ref2 = Reference(other, plane, dense_grid_render(4, 1.0, other, plane))
    x = encode(init_sources(4, 1.0)).vector()
    E1, g1 = SourceFitProblem([ref], 1.0)(x)
    E2, g2 = SourceFitProblem([ref2], 1.0)(x)
    E, g = SourceFitProblem([ref, ref2], 1.0)(x)
    assert E == pytest.approx(E1 + E2, rel=1e-13)
    assert np.allclose(g, g1 + g2, rtol=1e-12, atol=1e-15)


# lens design ----------------------------------------------------------------------


def peak_gray(flux):
    return GrayImage(gamma_inv(flux.data / flux.data.max()))


def test_design_fixed_point(small_lens, small_plane):
    src = init_sources(4, 1.0)
    target = peak_gray(render_flux(src.arrays(), small_lens, small_plane))
    prob = LensDesignProblem(src, small_lens, small_plane, target, weights=(1, 0, 0, 0))
    E, g = prob(prob.initial_vector())
    assert prob.last_terms["E_img"] < 1e-24
    assert np.max(np.abs(g)) < 1e-9


def test_design_gradient(small_plane):
    lens = bumpy(build_grid_lens(7, 7, (10.0, 10.0), 120.0, 121.0), 0.1, seed=1)
    plane = ImagePlane(150.0, 9.0, 9.0, 16, 16)
    src = init_sources(4, 1.0)
    u = (np.arange(16) + 0.5) / 16 - 0.5
    target = GrayImage((np.hypot(*np.meshgrid(u, u)) < 0.3).astype(float))
    prob = LensDesignProblem(src, lens, plane, target, weights=(1.0, 0.1, 1.0, 1e-3))
    x = prob.initial_vector()
    E, g = prob(x)
    assert prob.last_terms["E_out"] > 0 and prob.last_terms["E_smooth"] > 0
    fd = central_fd(lambda v: prob(v)[0], x, 1e-6)
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-6 * np.abs(fd).max())


def test_pixel_jacobian_is_local(small_plane):
    lens = bumpy(build_grid_lens(9, 9, (10.0, 10.0), 120.0, 121.0), 0.1)
    src = ([0.0], [0.0], [1.0])
    res = render_flux_with_grads(src, lens, small_plane, "heights", keep_traces=True)
    j = small_plane.res_w * 10 + 12
    w = np.zeros(small_plane.n_pixels)
    w[j] = 1.0
    g = res.contributions.vjp(w)
    touching = np.unique(res.contributions.pair[res.contributions.pixel == j])
    allowed = np.zeros(lens.n_vertices, dtype=bool)
    allowed[lens.triangles[touching].ravel()] = True
    assert np.any(g != 0)
    assert np.all(g[~allowed] == 0)


def test_invalid_heights_are_rejected(small_lens, small_plane):
    src = init_sources(4, 1.0)
    target = peak_gray(render_flux(src.arrays(), small_lens, small_plane))
    prob = LensDesignProblem(src, small_lens, small_plane, target)
    x = prob.initial_vector()
    x[3] = 100.0  # behind the front face
    E, g = prob(x)
    assert E == np.inf
