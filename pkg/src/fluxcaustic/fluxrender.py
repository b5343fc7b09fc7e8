"""Flux-transport renderer.

For every (source, back-face triangle) pair the renderer

1. finds the front-face triangle that feeds it (inverse front refraction),
2. assigns it the flux ``q * solid_angle``,
3. refracts the corner rays out of the back face and projects them onto the
   receiving plane,
4. spreads the flux over the pixels in proportion to exact overlap areas.

The same code runs on plain arrays or on width-3 duals; with duals every
pixel contribution carries its derivative with respect to the three
variables of its pair (x, y, q of the source, or the three corner heights).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import DEGENERATE_AREA, ImagePlane, LensSurface, Triangle2D, Vec3, triangle_normal
from ._overlap import allocate_kernel
from .optics import incident_point, refract_exit, solid_angle

log = logging.getLogger(__name__)

GAMMA = 2.2
CORNER_CHUNK = 400_000


@dataclass
class FluxImage:
    """Per-pixel flux, shape ``(res_h, res_w)``, indexed ``[v, u]``."""

    data: np.ndarray
    escaped: float = 0.0
    lost: float = 0.0
    tir_count: int = 0
    degenerate_count: int = 0
    # unphysical negative intensities (penalty-mode fits) give signed images
    signed: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if not self.signed and np.any(self.data < 0):
            # clipping round-off can leave tiny negatives next to exact zeros
            neg = self.data.min()
            if neg < -1e-12 * max(self.data.max(), 1e-300):
                raise ValueError(f"negative flux {neg:g}")
            self.data = np.maximum(self.data, 0.0)

    @property
    def total(self) -> float:
        return float(self.data.sum())

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other: "FluxImage") -> "FluxImage":
        return FluxImage(
            self.data + other.data, self.escaped + other.escaped, self.lost + other.lost,
            self.tir_count + other.tir_count, self.degenerate_count + other.degenerate_count,
            self.signed or other.signed,
        )


@dataclass
class GrayImage:
    """Grayscale values in [0, 1], shape ``(res_h, res_w)``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if np.any(self.data < 0) or np.any(self.data > 1):
            raise ValueError("gray values must lie in [0, 1]")

    @property
    def shape(self):
        return self.data.shape


# gamma -------------------------------------------------------------------


def gamma(g, exponent: float = GAMMA):
    """Display gamma: grayscale -> relative flux."""
    return np.power(np.clip(g, 0.0, 1.0), exponent)


def gamma_inv(t, exponent: float = GAMMA):
    return np.clip(np.power(np.maximum(t, 0.0), 1.0 / exponent), 0.0, 1.0)


def gray_to_flux(img: GrayImage, exponent: float = GAMMA) -> FluxImage:
    return FluxImage(gamma(img.data, exponent))


def flux_to_gray(img: FluxImage, reference_total_brightness: float, exponent: float = GAMMA) -> GrayImage:
    """``g = gamma^-1(G * flux / sum(flux))`` clamped to [0, 1]."""
    s = img.data.sum()
    if not s > 0:
        raise ValueError("cannot convert an all-zero flux image to grayscale")
    return GrayImage(gamma_inv(reference_total_brightness * img.data / s, exponent))


# exact triangle/rectangle overlap --------------------------------------------


def clip_polygon_halfplane(poly: np.ndarray, axis: int, bound: float, keep_below: bool) -> np.ndarray:
    """Sutherland-Hodgman step against ``x[axis] <= bound`` (or ``>=``)."""
    out = []
    n = len(poly)
    for i in range(n):
        s, e = poly[i - 1], poly[i]
        s_in = s[axis] <= bound if keep_below else s[axis] >= bound
        e_in = e[axis] <= bound if keep_below else e[axis] >= bound
        if s_in != e_in:
            t = (bound - s[axis]) / (e[axis] - s[axis])
            out.append(s + t * (e - s))
        if e_in:
            out.append(e)
    return np.array(out).reshape(-1, 2)


def shoelace(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_triangle_to_rect(tri: Triangle2D, rect) -> float:
    """Area of ``tri`` intersected with ``rect = (xmin, xmax, ymin, ymax)``."""
    if tri.degenerate:
        return 0.0
    xmin, xmax, ymin, ymax = rect
    poly = tri.points()
    for axis, bound, below in ((0, xmin, False), (0, xmax, True), (1, ymin, False), (1, ymax, True)):
        poly = clip_polygon_halfplane(poly, axis, bound, below)
        if len(poly) == 0:
            return 0.0
    return abs(shoelace(poly))


def _avg_min(xa, xb, a):
    """Mean of ``min(x, a)`` along the segment from ``xa`` to ``xb``."""
    va, vb = ad.value(xa), ad.value(xb)
    mean = 0.5 * (xa + xb)
    hi = ad.maximum(xa, xb)
    lo = ad.minimum(xa, xb)
    straddle = (np.minimum(va, vb) < a) & (np.maximum(va, vb) > a)
    span = ad.where(straddle, hi - lo, 1.0)
    over = hi - a
    mixed = mean - over * over / (2.0 * span)
    res = ad.where(straddle, mixed, mean)
    both_above = np.minimum(va, vb) >= a
    return ad.where(both_above, np.broadcast_to(a, np.shape(va)), res)


def quadrant_area(xs, ys, a, b):
    """Signed area of a triangle intersected with ``{x <= a, y <= b}``.

    Green's theorem with ``M = min(x, a) * [y <= b]`` turns the area into a
    sum of exact edge integrals.  ``xs``/``ys`` are 3-sequences of corner
    coordinates (arrays or duals broadcastable against ``a`` and ``b``).
    The sign follows the triangle's orientation.
    """
    out = 0.0
    for i in range(3):
        x0, y0 = xs[i], ys[i]
        x1, y1 = xs[(i + 1) % 3], ys[(i + 1) % 3]
        v0, v1 = ad.value(y0), ad.value(y1)
        dy = y1 - y0
        dyv = ad.value(dy)
        crosses = (np.minimum(v0, v1) < b) & (np.maximum(v0, v1) > b)
        t = (b - y0) / ad.where(crosses, dy, 1.0)
        xc = x0 + (x1 - x0) * t
        ya = ad.minimum(y0, b)
        yb = ad.minimum(y1, b)
        xa = ad.where(v0 <= b, x0, xc)
        xb = ad.where(v1 <= b, x1, xc)
        seg = (yb - ya) * _avg_min(xa, xb, a)
        out = out + ad.where(dyv == 0, 0.0, seg)
    return out


# pixel allocation ------------------------------------------------------------


@dataclass
class Contributions:
    """Sparse flux allocation with per-entry width-3 partials.

    Entry ``e`` adds ``value[e]`` to pixel ``pixel[e]``; ``der[e, s]`` is its
    derivative with respect to variable ``variables[pair[e], s]``.
    """

    pixel: np.ndarray
    pair: np.ndarray
    value: np.ndarray
    der: np.ndarray | None
    variables: np.ndarray | None = None
    n_variables: int = 0

    def vjp(self, pixel_weights: np.ndarray) -> np.ndarray:
        """``sum_j w_j * d(flux_j)/d(variables)`` by scatter-add."""
        w = np.asarray(pixel_weights, dtype=float).ravel()[self.pixel]
        idx = self.variables[self.pair]
        return np.bincount(idx.ravel(), weights=(self.der * w[:, None]).ravel(), minlength=self.n_variables)

    def jacobian_dense(self, n_pixels: int) -> np.ndarray:
        J = np.zeros((n_pixels, self.n_variables))
        idx = self.variables[self.pair]
        for s in range(idx.shape[1]):
            np.add.at(J, (self.pixel, idx[:, s]), self.der[:, s])
        return J


def allocate(px, py, flux, plane: ImagePlane, backend: str = "compiled", chunk: int = CORNER_CHUNK):
    """Spread per-triangle ``flux`` over pixels by exact overlap fractions.

    ``px``/``py`` are 3-tuples of projected corner coordinates, each of shape
    ``(n,)`` (arrays or duals), ``flux`` has shape ``(n,)``.  ``backend`` is
    ``"compiled"`` (numba kernel with hand-derived partials) or ``"dual"``
    (pure numpy on duals; slower, used as a cross-check).  Returns
    ``(image, escaped, contributions, degenerate_mask)``.
    """
    width = flux.width if isinstance(flux, ad.Dual) else None
    pxv = np.stack([ad.value(c) for c in px], axis=-1)
    pyv = np.stack([ad.value(c) for c in py], axis=-1)
    area = 0.5 * ((pxv[:, 1] - pxv[:, 0]) * (pyv[:, 2] - pyv[:, 0]) - (pxv[:, 2] - pxv[:, 0]) * (pyv[:, 1] - pyv[:, 0]))
    degenerate = np.abs(area) < DEGENERATE_AREA
    fv = ad.value(flux)

    pw, ph = plane.pixel_w, plane.pixel_h
    u_lo = np.clip(np.floor((pxv.min(-1) - plane.x0) / pw), 0, plane.res_w).astype(np.int64)
    u_hi = np.clip(np.ceil((pxv.max(-1) - plane.x0) / pw), 0, plane.res_w).astype(np.int64)
    v_lo = np.clip(np.floor((pyv.min(-1) - plane.y0) / ph), 0, plane.res_h).astype(np.int64)
    v_hi = np.clip(np.ceil((pyv.max(-1) - plane.y0) / ph), 0, plane.res_h).astype(np.int64)
    nu = np.where(degenerate, 0, np.maximum(u_hi - u_lo, 0))
    nv = np.where(degenerate, 0, np.maximum(v_hi - v_lo, 0))
    nu = np.where(nv == 0, 0, nu)
    nv = np.where(nu == 0, 0, nv)

    image = np.zeros(plane.n_pixels)
    if backend == "compiled":
        npix = nu * nv
        offsets = np.cumsum(npix) - npix
        m = int(npix.sum())
        K = width or 0
        dpx = np.stack([ad.partials(c, K) for c in px], axis=1) if K else np.zeros((len(fv), 3, 0))
        dpy = np.stack([ad.partials(c, K) for c in py], axis=1) if K else np.zeros((len(fv), 3, 0))
        dfl = flux.der if K else np.zeros((len(fv), 0))
        out_pix = np.empty(m, np.int64)
        out_pair = np.empty(m, np.int64)
        out_val = np.empty(m)
        out_der = np.empty((m, K))
        allocate_kernel(
            np.ascontiguousarray(pxv), np.ascontiguousarray(pyv),
            np.ascontiguousarray(np.broadcast_to(dpx, (len(fv), 3, K))),
            np.ascontiguousarray(np.broadcast_to(dpy, (len(fv), 3, K))),
            np.ascontiguousarray(fv, dtype=float), np.ascontiguousarray(np.broadcast_to(dfl, (len(fv), K))),
            u_lo, v_lo, nu, nv, offsets, plane.x0, plane.y0, pw, ph, plane.res_w,
            out_pix, out_pair, out_val, out_der, image,
        )
        keep = out_val != 0
        if K:
            keep |= np.any(out_der != 0, axis=1)
        contrib = Contributions(out_pix[keep], out_pair[keep], out_val[keep], out_der[keep] if K else None)
    elif backend == "dual":
        n_corners = np.where(nu > 0, (nu + 1) * (nv + 1), 0)
        area_d = 0.5 * ((px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0]))
        parts = []
        active = np.flatnonzero(n_corners)
        cum = np.cumsum(n_corners[active])
        start = 0
        while start < len(active):
            base = cum[start - 1] if start > 0 else 0
            stop = max(int(np.searchsorted(cum, base + chunk, side="right")), start + 1)
            sel = active[start:stop]
            parts.append(_allocate_chunk(sel, px, py, flux, area_d, plane, u_lo, v_lo, nu, nv, width, image))
            start = stop
        if parts:
            contrib = Contributions(
                np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]),
                np.concatenate([p[2] for p in parts]),
                np.concatenate([p[3] for p in parts]) if width else None,
            )
        else:
            contrib = Contributions(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros((0, width)) if width else None)
    else:
        raise ValueError(f"unknown allocation backend {backend!r}")

    in_image = image.reshape(plane.shape)
    total_in = fv[~degenerate].sum()
    escaped = float(total_in - in_image.sum())
    if total_in >= 0:
        escaped = max(escaped, 0.0)
    return in_image, escaped, contrib, degenerate


def _allocate_chunk(sel, px, py, flux, area, plane, u_lo, v_lo, nu, nv, width, image):
    ox = u_lo * plane.pixel_w + plane.x0
    oy = v_lo * plane.pixel_h + plane.y0
    nc = (nu[sel] + 1) * (nv[sel] + 1)
    owner = np.repeat(np.arange(len(sel)), nc)
    offs = np.cumsum(nc) - nc
    local = np.arange(len(owner)) - offs[owner]
    cu = local // (nv[sel][owner] + 1)
    cv = local % (nv[sel][owner] + 1)
    pair = sel[owner]
    a = (u_lo[pair] + cu) * plane.pixel_w + plane.x0 - ox[pair]
    b = (v_lo[pair] + cv) * plane.pixel_h + plane.y0 - oy[pair]
    xs = [ad.take(c, pair) - ox[pair] for c in px]
    ys = [ad.take(c, pair) - oy[pair] for c in py]
    F = quadrant_area(xs, ys, a, b)

    # pixel (i, j) of a triangle uses corners (i..i+1, j..j+1)
    npix = nu[sel] * nv[sel]
    p_owner = np.repeat(np.arange(len(sel)), npix)
    p_offs = np.cumsum(npix) - npix
    p_local = np.arange(len(p_owner)) - p_offs[p_owner]
    nvo = nv[sel][p_owner]
    pi = p_local // nvo
    pj = p_local % nvo
    c00 = offs[p_owner] + pi * (nvo + 1) + pj
    c01 = c00 + 1
    c10 = c00 + nvo + 1
    c11 = c10 + 1
    pix_area = ad.take(F, c11) - ad.take(F, c01) - ad.take(F, c10) + ad.take(F, c00)
    pair_p = sel[p_owner]
    frac = pix_area / ad.take(area, pair_p)
    contrib = ad.take(flux, pair_p) * frac
    u = u_lo[pair_p] + pi
    v = v_lo[pair_p] + pj
    pix = v * plane.res_w + u
    val = ad.value(contrib)
    keep = val != 0
    if width:
        keep |= np.any(contrib.der != 0, axis=-1)
    image += np.bincount(pix[keep], weights=val[keep], minlength=image.size)
    der = contrib.der[keep] if width else None
    return pix[keep], pair_p[keep], val[keep], der


# tracing -----------------------------------------------------------------------


@dataclass
class Trace:
    """Per-(source, triangle) geometry of one render pass."""

    proj_x: tuple
    proj_y: tuple
    flux: object
    tir: np.ndarray
    variables: np.ndarray | None = field(default=None, repr=False)
    source_of_pair: np.ndarray | None = field(default=None, repr=False)


def trace_pairs(xs, ys, qs, lens: LensSurface, plane: ImagePlane, wrt: str | None = None,
                source_ids=None) -> Trace:
    """Trace all (source, triangle) pairs for the given emitters.

    ``wrt`` is ``None`` (values only), ``"sources"`` (partials with respect
    to each pair's x, y, q) or ``"heights"`` (partials with respect to each
    pair's three corner heights).  Outputs are flattened over
    ``(source, triangle)`` in source-major order.
    """
    xs = np.asarray(xs, dtype=float)[:, None]
    ys = np.asarray(ys, dtype=float)[:, None]
    qs = np.asarray(qs, dtype=float)[:, None]
    S, T = xs.shape[0], lens.n_triangles
    tri = lens.triangles
    vxy = lens.xy
    vz = lens.z
    eta = lens.refractive_index

    if wrt == "sources":
        sx, sy, sq = ad.variable(xs, 0, 3), ad.variable(ys, 1, 3), ad.variable(qs, 2, 3)
        back_z = vz[None, :]
    elif wrt == "heights":
        sx, sy, sq = xs, ys, qs
        back_z = ad.variable(vz[None, :], 0, 1)
    elif wrt is None:
        sx, sy, sq = xs, ys, qs
        back_z = vz[None, :]
    else:
        raise ValueError(f"unknown differentiation target {wrt!r}")

    src = Vec3(sx, sy, np.zeros_like(xs))
    back = Vec3(vxy[None, :, 0], vxy[None, :, 1], back_z)
    front = incident_point(src, back, lens.front_z, eta)
    inside = (back - front).normalized()

    def corner(v: Vec3, c: int) -> Vec3:
        g = Vec3(*(_take1(comp, tri[:, c]) for comp in v))
        if wrt == "heights":
            g = Vec3(*(ad.expand_slots(comp, c, 3) if isinstance(comp, ad.Dual) else comp for comp in g))
        return g

    backs = [corner(back, c) for c in range(3)]
    fronts = [corner(front, c) for c in range(3)]
    dirs = [corner(inside, c) for c in range(3)]

    normal = triangle_normal(*backs)
    omega = solid_angle(src, *fronts)
    flux = sq * omega

    px, py = [], []
    tir = np.zeros((S, T), dtype=bool)
    for c in range(3):
        out, bad = refract_exit(dirs[c], normal, eta, return_mask=True)
        tir |= np.broadcast_to(bad, (S, T))
        dz = ad.value(out.z)
        # grazing exits never reach the plane; treat like internal reflection
        tir |= np.broadcast_to(dz <= 1e-12, (S, T))
        safe = Vec3(out.x, out.y, ad.where(dz <= 1e-12, 1.0, out.z))
        t = (plane.z - backs[c].z) / safe.z
        px.append(_flat(backs[c].x + safe.x * t, S, T))
        py.append(_flat(backs[c].y + safe.y * t, S, T))
    flux = _flat(flux, S, T)
    tir = tir.ravel()
    flux = ad.where(tir, 0.0, flux)

    variables = None
    ids = np.arange(S) if source_ids is None else np.asarray(source_ids)
    if wrt == "sources":
        variables = np.repeat(3 * ids[:, None] + np.arange(3), T, axis=0)
    elif wrt == "heights":
        variables = np.tile(tri, (S, 1))
    return Trace(tuple(px), tuple(py), flux, tir, variables, np.repeat(ids, T))


def _take1(x, idx):
    return ad.take(x, idx, axis=1) if np.ndim(ad.value(x)) >= 2 else x


def _flat(x, S, T):
    if isinstance(x, ad.Dual):
        val = np.broadcast_to(x.val, (S, T)).reshape(-1)
        der = np.broadcast_to(x.der, (S, T, x.width)).reshape(-1, x.width)
        return ad.Dual(val, der)
    return np.broadcast_to(np.asarray(x, dtype=float), (S, T)).reshape(-1)


# public entry points -------------------------------------------------------


@dataclass
class RenderResult:
    image: FluxImage
    contributions: Contributions | None
    traces: list


def _render(sources, lens: LensSurface, plane: ImagePlane, wrt, chunk_sources: int, threads: int,
            keep_traces=False, backend="compiled"):
    xs, ys, qs = (np.atleast_1d(np.asarray(a, dtype=float)) for a in sources)
    n = len(xs)
    chunks = [np.arange(i, min(i + chunk_sources, n)) for i in range(0, n, chunk_sources)]

    def work(ids):
        tr = trace_pairs(xs[ids], ys[ids], qs[ids], lens, plane, wrt, source_ids=ids)
        img, escaped, contrib, degenerate = allocate(tr.proj_x, tr.proj_y, tr.flux, plane, backend)
        fv = ad.value(tr.flux)
        lost = float(fv[degenerate].sum())
        part = FluxImage(img, escaped, lost, int(tr.tir.sum()), int((degenerate & ~tr.tir).sum()),
                         signed=bool(np.any(qs[ids] < 0)))
        return part, contrib, tr

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(ids) for ids in chunks]

    # merge in chunk order so the result does not depend on scheduling
    image = results[0][0]
    for part, _, _ in results[1:]:
        image = image + part
    if image.tir_count:
        log.debug("%d (source, triangle) pairs hit total internal reflection", image.tir_count)
    contrib = None
    if wrt is not None:
        cs = [r[1] for r in results]
        variables = np.concatenate([r[2].variables for r in results])
        offsets = np.cumsum([0] + [len(r[2].variables) for r in results[:-1]])
        contrib = Contributions(
            np.concatenate([c.pixel for c in cs]),
            np.concatenate([c.pair + o for c, o in zip(cs, offsets)]),
            np.concatenate([c.value for c in cs]),
            np.concatenate([c.der for c in cs]),
            variables,
            3 * n if wrt == "sources" else lens.n_vertices,
        )
    traces = [r[2] for r in results] if keep_traces else []
    return RenderResult(image, contrib, traces)


def render_flux(sources, lens: LensSurface, plane: ImagePlane, chunk_sources: int = 8, threads: int = 1,
                backend: str = "compiled") -> FluxImage:
    """Flux image of ``sources = (xs, ys, qs)`` through ``lens``."""
    return _render(sources, lens, plane, None, chunk_sources, threads, backend=backend).image


def render_flux_with_grads(sources, lens: LensSurface, plane: ImagePlane, wrt: str,
                           chunk_sources: int = 8, threads: int = 1, keep_traces: bool = False,
                           backend: str = "compiled") -> RenderResult:
    """Flux image plus the sparse Jacobian of every pixel.

    ``wrt="sources"`` differentiates with respect to ``(x_k, y_k, q_k)``
    (variable ``3k + s``); ``wrt="heights"`` with respect to the flattened
    back-surface heights.
    """
    return _render(sources, lens, plane, wrt, chunk_sources, threads, keep_traces, backend)
