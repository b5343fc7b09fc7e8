"""Objectives for the two optimization stages, with exact gradients.

Image terms are differentiated in two steps: an analytic adjoint gives
dE/dflux per pixel, which is then contracted with the renderer's sparse
per-contribution partials.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fluxrender import GAMMA, FluxImage, GrayImage, gamma, gamma_inv, render_flux_with_grads
from .geometry import ConfigurationError, DegenerateGeometryError, ImagePlane, LensSurface, Vec3
from .optics import QuarticRootError
from .sourcemodel import (
    ContractionParams, PointSourceSet, boundary_penalties, boundary_penalty_gradient,
    decode, encode, mirror, pullback_gradient,
)

log = logging.getLogger(__name__)

SOURCE_FIT_WEIGHTS = (1.0, 1e3, 1e3)
LENS_DESIGN_WEIGHTS = (1.0, 0.1, 1.0, 1e-3)


# image terms ---------------------------------------------------------------


def _data(img):
    return img.data if isinstance(img, (FluxImage, GrayImage)) else np.asarray(img, dtype=float)


def e_flux(rendered, reference, exponent: float = GAMMA, with_grad: bool = False):
    """Squared flux mismatch against a grayscale reference.

    The rendered flux is rescaled to the reference total ``sum(gamma(g))``
    before comparison; the returned adjoint includes that normalization.
    """
    phi = _data(rendered)
    target = gamma(_data(reference), exponent)
    if phi.shape != target.shape:
        raise ConfigurationError(f"image shapes differ: {phi.shape} vs {target.shape}")
    G = target.sum()
    S = phi.sum()
    if not S > 0:
        raise ValueError("rendered image carries no flux")
    r = G * phi / S - target
    E = float(np.sum(r * r))
    if not with_grad:
        return E
    grad = (2 * G / S) * (r - np.sum(r * phi) / S)
    return E, grad


def rendered_gray(rendered, G: float, exponent: float = GAMMA):
    """``g = clamp(gamma^-1(G * flux / sum(flux)))`` and ``dg/dt`` for ``t = G*flux/sum``."""
    phi = _data(rendered)
    S = phi.sum()
    if not S > 0:
        raise ValueError("rendered image carries no flux")
    t = G * phi / S
    g = gamma_inv(t, exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        dg = np.where((t > 0) & (t < 1), np.power(np.where(t > 0, t, 1.0), 1 / exponent - 1) / exponent, 0.0)
    return g, dg, t


def _normalization_adjoint(phi, G, w):
    """Pull ``w = dE/dt`` back through ``t = G * phi / sum(phi)``."""
    S = phi.sum()
    return (G / S) * (w - np.sum(w * phi) / S)


def image_mismatch(g, target, with_grad: bool = False):
    """Squared grayscale mismatch between two gray arrays, and ``dE/dg``."""
    g, tgt = _data(g), _data(target)
    d = g - tgt
    E = float(np.sum(d * d))
    return (E, 2 * d) if with_grad else E


def _forward_diff(g):
    return g[:, 1:] - g[:, :-1], g[1:, :] - g[:-1, :]


def gradient_mismatch(g, target, with_grad: bool = False):
    """Squared mismatch of forward-difference gradients of two gray arrays, and ``dE/dg``."""
    g, tgt = _data(g), _data(target)
    gx, gy = _forward_diff(g)
    tx, ty = _forward_diff(tgt)
    dx, dy = gx - tx, gy - ty
    E = float(np.sum(dx * dx) + np.sum(dy * dy))
    if not with_grad:
        return E
    w = np.zeros_like(g)
    w[:, 1:] += 2 * dx
    w[:, :-1] -= 2 * dx
    w[1:, :] += 2 * dy
    w[:-1, :] -= 2 * dy
    return E, w


def _through_gray(term, rendered, target, exponent, with_grad):
    tgt = _data(target)
    G = gamma(tgt, exponent).sum()
    g, dg, _ = rendered_gray(rendered, G, exponent)
    if not with_grad:
        return term(g, tgt)
    E, w = term(g, tgt, with_grad=True)
    return E, _normalization_adjoint(_data(rendered), G, w * dg)


def e_img(rendered, target, exponent: float = GAMMA, with_grad: bool = False):
    """Squared grayscale mismatch of a rendered flux image, brightness-matched to ``target``."""
    return _through_gray(image_mismatch, rendered, target, exponent, with_grad)


def e_grad(rendered, target, exponent: float = GAMMA, with_grad: bool = False):
    """Forward-difference gradient mismatch of a rendered flux image against ``target``."""
    return _through_gray(gradient_mismatch, rendered, target, exponent, with_grad)


def _box_excess(v, half):
    return v - np.clip(v, -half, half)


def e_out_points(xs, ys, plane: ImagePlane) -> float:
    """Sum of squared distances from points to the image rectangle."""
    ex = _box_excess(np.asarray(xs, dtype=float), plane.width / 2)
    ey = _box_excess(np.asarray(ys, dtype=float), plane.height / 2)
    return float(np.sum(ex * ex) + np.sum(ey * ey))


def e_out(traces, plane: ImagePlane, with_grad: bool = False, n_variables: int = 0):
    """Squared distance of projected triangle corners outside the image.

    Summed over every (source, triangle) pair and its three corners; pairs
    lost to total internal reflection have no projection and are skipped.
    ``traces`` are heights-mode :class:`~fluxcaustic.fluxrender.Trace` objects.
    """
    E = 0.0
    grad = np.zeros(n_variables) if with_grad else None
    for tr in traces:
        live = ~tr.tir
        for coords, half in ((tr.proj_x, plane.width / 2), (tr.proj_y, plane.height / 2)):
            for c in coords:
                ex = np.where(live, _box_excess(ad.value(c), half), 0.0)
                E += float(np.sum(ex * ex))
                if with_grad and np.any(ex):
                    d = ad.partials(c, 3) * (2 * ex)[:, None]
                    grad += np.bincount(tr.variables.ravel(), weights=d.ravel(), minlength=n_variables)
    return (E, grad) if with_grad else E


# smoothness ----------------------------------------------------------------


def _corner_terms(P):
    """Per-triangle cotangent Laplacian pieces and mixed areas.

    ``P`` is a list of three corner :class:`Vec3` (values or duals) of shape
    ``(T,)``.  Returns ``(lap, mixed, area)`` where ``lap[i]`` is the Vec3
    ``1/2 [cot_k (p_j - p_i) + cot_j (p_k - p_i)]`` for corner ``i`` and
    ``mixed[i]`` its Meyer mixed-area share.
    """
    cross = (P[1] - P[0]).cross(P[2] - P[0])
    twice_area = cross.norm()
    area = 0.5 * twice_area
    cot = []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        cot.append((P[j] - P[i]).dot(P[k] - P[i]) / twice_area)
    cotv = [ad.value(c) for c in cot]
    obtuse = [cv < 0 for cv in cotv]
    any_obtuse = obtuse[0] | obtuse[1] | obtuse[2]
    lap, mixed = [], []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        eij, eik = P[j] - P[i], P[k] - P[i]
        lap.append(Vec3(*(0.5 * (cot[k] * a + cot[j] * b) for a, b in zip(eij, eik))))
        voronoi = 0.125 * (eik.dot(eik) * cot[j] + eij.dot(eij) * cot[k])
        fallback = ad.where(obtuse[i], 0.5 * area, 0.25 * area)
        mixed.append(ad.where(any_obtuse, fallback, voronoi))
    return lap, mixed, area


def _vertex_sums(lens: LensSurface, lap, mixed):
    V = lens.n_vertices
    tri = lens.triangles
    D = np.zeros((V, 3))
    A = np.zeros(V)
    for i in range(3):
        for a in range(3):
            D[:, a] += np.bincount(tri[:, i], weights=ad.value(lap[i][a]), minlength=V)
        A += np.bincount(tri[:, i], weights=ad.value(mixed[i]), minlength=V)
    return D, A


def vertex_mean_curvature(lens: LensSurface, _terms=None):
    """Discrete mean curvature per vertex; 0 on the boundary.

    ``H = |Delta p| / (2 A_mixed)`` with the cotangent Laplacian; positive
    where the surface bulges towards +z.
    """
    P = [Vec3.of(lens.vertices()[lens.triangles[:, c]]) for c in range(3)]
    lap, mixed, area = _terms or _corner_terms(P)
    D, A = _vertex_sums(lens, lap, mixed)
    normals = np.zeros((lens.n_vertices, 3))
    fn = (P[1] - P[0]).cross(P[2] - P[0]).value()
    for i in range(3):
        for a in range(3):
            normals[:, a] += np.bincount(lens.triangles[:, i], weights=fn[:, a], minlength=lens.n_vertices)
    sign = np.where(np.sum(D * normals, axis=1) > 0, -1.0, 1.0)
    norm = np.linalg.norm(D, axis=1)
    interior = ~lens.boundary_mask()
    degenerate = interior & (A <= 0)
    if np.any(degenerate):
        log.warning("%d vertices with zero mixed area; curvature set to 0", int(degenerate.sum()))
    ok = interior & (A > 0)
    H = np.zeros(lens.n_vertices)
    H[ok] = sign[ok] * norm[ok] / (2 * A[ok])
    return H, D, A, sign, ok


def e_smooth(lens: LensSurface, with_grad: bool = False):
    """Area-weighted squared mean curvature ``sum_f A_f * mean(H_corners)^2``.

    The gradient is exact: per-triangle width-3 duals over the corner
    heights, contracted with vertex-level adjoints of ``H``.
    """
    tri = lens.triangles
    V = lens.n_vertices
    xyz = lens.vertices()
    if with_grad:
        P = []
        for c in range(3):
            v = xyz[tri[:, c]]
            P.append(Vec3(v[:, 0], v[:, 1], ad.variable(v[:, 2], c, 3)))
    else:
        P = [Vec3.of(xyz[tri[:, c]]) for c in range(3)]
    lap, mixed, area = _corner_terms(P)
    H, D, A, sign, ok = vertex_mean_curvature(lens, (lap, mixed, area))
    Hf = H[tri].mean(axis=1)
    Af = ad.value(area)
    E = float(np.sum(Af * Hf * Hf))
    if not with_grad:
        return E

    lam = np.zeros(V)
    for i in range(3):
        lam += np.bincount(tri[:, i], weights=2 * Af * Hf / 3, minlength=V)
    norm = np.linalg.norm(D, axis=1)
    live = ok & (norm > 0)
    gD = np.zeros((V, 3))
    gA = np.zeros(V)
    gD[live] = (lam[live] * sign[live] / (2 * A[live] * norm[live]))[:, None] * D[live]
    gA[live] = -lam[live] * sign[live] * norm[live] / (2 * A[live] ** 2)

    # per-triangle partials w.r.t. its three corner heights
    tg = (Hf * Hf)[:, None] * ad.partials(area, 3)
    for i in range(3):
        vi = tri[:, i]
        for a in range(3):
            tg = tg + gD[vi, a][:, None] * ad.partials(lap[i][a], 3)
        tg = tg + gA[vi][:, None] * ad.partials(mixed[i], 3)
    grad = np.bincount(tri.ravel(), weights=tg.ravel(), minlength=V)
    return E, grad


# source fitting ----------------------------------------------------------------


@dataclass
class Reference:
    """One captured (or synthesized) caustic: lens, receiving plane, image."""

    lens: LensSurface
    plane: ImagePlane
    image: GrayImage

    def __post_init__(self):
        if self.image.shape != self.plane.shape:
            raise ConfigurationError(
                f"reference image {self.image.shape} does not match plane {self.plane.shape}"
            )


class SourceFitProblem:
    """``lambda1 * sum_m E_flux^m + lambda2 * E_bp + lambda3 * E_bi`` over emitters.

    With ``contraction=True`` the parameter vector holds ``(x_hat, y_hat, q_hat)``
    per free emitter and the penalties vanish identically; otherwise it holds
    raw ``(x, y, q)`` and the penalties do the constraining.
    """

    def __init__(self, references, B: float, weights=SOURCE_FIT_WEIGHTS, contraction: bool = True,
                 symmetric: bool = False, exponent: float = GAMMA, chunk_sources: int = 8, threads: int = 1):
        if not references:
            raise ConfigurationError("source fitting needs at least one reference")
        self.references = list(references)
        self.B = float(B)
        self.weights = tuple(float(w) for w in weights)
        self.contraction = contraction
        self.symmetric = symmetric
        self.exponent = exponent
        self.chunk_sources = chunk_sources
        self.threads = threads
        self.last_terms: dict = {}

    def initial_vector(self, sources: PointSourceSet) -> np.ndarray:
        if self.contraction:
            return encode(sources, self.symmetric).vector()
        x, y, q = sources.arrays()
        if self.symmetric:
            x, y, q = x[::4], y[::4], q[::4]
        return np.column_stack([x, y, q]).ravel()

    def sources(self, vec) -> PointSourceSet:
        if self.contraction:
            return decode(ContractionParams.from_vector(vec, self.B, self.symmetric))
        v = np.asarray(vec, dtype=float).reshape(-1, 3)
        x, y, q = v[:, 0], v[:, 1], v[:, 2]
        if self.symmetric:
            x, y, q = mirror(x, y, q)
        return PointSourceSet(x, y, q, self.B)

    def _pull(self, vec, grad_sources):
        if self.contraction:
            return pullback_gradient(ContractionParams.from_vector(vec, self.B, self.symmetric), grad_sources)
        g = grad_sources.reshape(-1, 3)
        if self.symmetric:
            m = np.array([[1, 1, 1], [-1, 1, 1], [1, -1, 1], [-1, -1, 1]], dtype=float)
            g = (g.reshape(-1, 4, 3) * m[None]).sum(axis=1)
        return g.ravel()

    def __call__(self, vec):
        src = self.sources(vec)
        if not np.any(src.q != 0):
            return np.inf, np.zeros_like(vec)
        l1, l2, l3 = self.weights
        g_src = np.zeros(3 * src.n)
        e_total = 0.0
        terms = []
        for ref in self.references:
            res = render_flux_with_grads(src.arrays(), ref.lens, ref.plane, "sources",
                                         self.chunk_sources, self.threads)
            if not res.image.total > 0:
                return np.inf, np.zeros_like(vec)
            E, w = e_flux(res.image, ref.image, self.exponent, with_grad=True)
            terms.append(E)
            e_total += E
            g_src += res.contributions.vjp(w)
        e_bp, e_bi = boundary_penalties(src)
        gbp, gbi = boundary_penalty_gradient(src)
        value = l1 * e_total + l2 * e_bp + l3 * e_bi
        self.last_terms = {"E_flux": terms, "E_bp": e_bp, "E_bi": e_bi}
        return value, self._pull(vec, l1 * g_src + l2 * gbp + l3 * gbi)


# lens design -----------------------------------------------------------------


class LensDesignProblem:
    """``mu1 E_img + mu2 E_grad + mu3 E_out + mu4 E_smooth`` over back-face heights.

    With ``pin_boundary`` the boundary heights stay at their initial values
    and only interior heights are free.
    """

    def __init__(self, sources: PointSourceSet, lens: LensSurface, plane: ImagePlane, target: GrayImage,
                 weights=LENS_DESIGN_WEIGHTS, exponent: float = GAMMA, chunk_sources: int = 8, threads: int = 1,
                 pin_boundary: bool = False):
        if target.shape != plane.shape:
            raise ConfigurationError(f"target image {target.shape} does not match plane {plane.shape}")
        self.sources = sources
        self.lens = lens
        self.plane = plane
        self.target = target
        self.weights = tuple(float(w) for w in weights)
        self.exponent = exponent
        self.chunk_sources = chunk_sources
        self.threads = threads
        if any(w < 0 for w in self.weights):
            raise ConfigurationError("loss weights must be nonnegative")
        self.free = ~lens.boundary_mask() if pin_boundary else np.ones(lens.n_vertices, dtype=bool)
        self.last_terms: dict = {}

    def initial_vector(self) -> np.ndarray:
        return self.lens.z[self.free].copy()

    def lens_at(self, vec) -> LensSurface:
        z = self.lens.z.copy()
        z[self.free] = vec
        return self.lens.with_heights(z)

    def evaluate(self, lens: LensSurface, with_grad: bool = True):
        """Total objective and its gradient over all vertex heights."""
        m1, m2, m3, m4 = self.weights
        res = render_flux_with_grads(self.sources.arrays(), lens, self.plane, "heights",
                                     self.chunk_sources, self.threads, keep_traces=m3 != 0)
        V = lens.n_vertices
        Ei, wi = e_img(res.image, self.target, self.exponent, with_grad=True)
        Eg, wg = e_grad(res.image, self.target, self.exponent, with_grad=True)
        grad = res.contributions.vjp(m1 * wi + m2 * wg)
        Eo = 0.0
        if m3:
            Eo, go = e_out(res.traces, self.plane, with_grad=True, n_variables=V)
            grad += m3 * go
        Es, gs = e_smooth(lens, with_grad=True)
        grad += m4 * gs
        value = m1 * Ei + m2 * Eg + m3 * Eo + m4 * Es
        self.last_terms = {"E_img": Ei, "E_grad": Eg, "E_out": Eo, "E_smooth": Es}
        return value, grad, res.image

    def __call__(self, vec):
        try:
            lens = self.lens_at(vec)
            lens.validate()
            value, grad, _ = self.evaluate(lens)
        except (ConfigurationError, DegenerateGeometryError, QuarticRootError, ValueError) as exc:
            log.debug("lens design evaluation rejected: %s", exc)
            return np.inf, np.zeros_like(vec)
        return value, grad[self.free]
