"""Independent reference machinery for validating the fast paths."""

from __future__ import annotations

import numpy as np

from .fluxrender import GAMMA, FluxImage, GrayImage, gamma_inv, render_flux
from .geometry import ConfigurationError, ImagePlane, LensSurface, Triangle2D
from .optics import QuarticRootError
from .sourcemodel import PointSourceSet


def snell_bisection(source, back_vertex, front_z: float, eta: float, tol: float = 1e-13) -> np.ndarray:
    """Incidence parameter ``k`` by bisection on the lateral Snell mismatch.

    The mismatch ``eta*(1-k)*|OA| - k*|AA'|`` is positive at k=0 and negative
    at k=1; ``source`` and ``back_vertex`` are ``(..., 3)`` arrays.
    """
    s = np.asarray(source, dtype=float)
    v = np.asarray(back_vertex, dtype=float)
    r = np.hypot(v[..., 0] - s[..., 0], v[..., 1] - s[..., 1])
    zb = v[..., 2] - s[..., 2]
    zf = front_z - s[..., 2]

    def g(k):
        return eta * (1 - k) * np.hypot(k * r, zf) - k * np.hypot((1 - k) * r, zb - zf)

    lo = np.zeros_like(r)
    hi = np.ones_like(r)
    if np.any(g(lo) <= 0) or np.any(g(hi) >= 0):
        raise QuarticRootError("Snell mismatch has no sign change on [0, 1]")
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        pos = g(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    return 0.5 * (lo + hi)


# dense-grid extended source ------------------------------------------------------


def dense_grid_sources(grid_n: int, B: float, profile: str = "uniform") -> PointSourceSet:
    """``grid_n x grid_n`` cell-centred emitter lattice over the source square.

    ``profile="uniform"`` gives equal intensities; ``"center"`` weights each
    emitter by ``1 - (r / r_max)^2 / 2`` (brighter middle, half as bright at
    the corners).  Intensities sum to one.
    """
    if grid_n < 1:
        raise ConfigurationError("grid_n must be >= 1")
    c = (np.arange(grid_n) + 0.5) / grid_n * B - B / 2
    X, Y = np.meshgrid(c, c, indexing="xy")
    x, y = X.ravel(), Y.ravel()
    if profile == "uniform":
        q = np.ones(x.size)
    elif profile == "center":
        r2 = x * x + y * y
        q = 1 - 0.5 * r2 / (B * B / 2)
    else:
        raise ConfigurationError(f"unknown source profile {profile!r}")
    return PointSourceSet(x, y, q / q.sum(), B)


def dense_grid_flux(grid_n: int, B: float, lens: LensSurface, plane: ImagePlane,
                    profile: str = "uniform", threads: int = 1) -> FluxImage:
    src = dense_grid_sources(grid_n, B, profile)
    return render_flux(src.arrays(), lens, plane, chunk_sources=8, threads=threads)


def dense_grid_render(grid_n: int, B: float, lens: LensSurface, plane: ImagePlane,
                      profile: str = "uniform", exponent: float = GAMMA, threads: int = 1) -> GrayImage:
    """Grayscale caustic of the dense-grid stand-in for an extended source.

    Flux is scaled so the brightest pixel maps to gray level 1.
    """
    flux = dense_grid_flux(grid_n, B, lens, plane, profile, threads)
    peak = flux.data.max()
    if not peak > 0:
        raise ValueError("dense-grid render received no flux")
    return GrayImage(gamma_inv(flux.data / peak, exponent))


# Monte Carlo area ---------------------------------------------------------------


def montecarlo_clip_area(tri: Triangle2D, rect, samples: int, rng=None, batch: int = 1_000_000):
    """Unbiased estimate of ``area(tri & rect)`` and its standard error.

    Points are drawn uniformly in the triangle; the estimate is the hit
    fraction times the triangle area.
    """
    rng = np.random.default_rng(rng)
    area = tri.area
    if area == 0 or samples <= 0:
        return 0.0, 0.0
    a, b, c = (np.asarray(p, dtype=float) for p in (tri.a, tri.b, tri.c))
    xmin, xmax, ymin, ymax = rect
    hits = 0
    left = samples
    while left > 0:
        n = min(batch, left)
        u = rng.random(n)
        v = rng.random(n)
        flip = u + v > 1
        u = np.where(flip, 1 - u, u)
        v = np.where(flip, 1 - v, v)
        p = a + u[:, None] * (b - a) + v[:, None] * (c - a)
        hits += int(np.count_nonzero((p[:, 0] >= xmin) & (p[:, 0] <= xmax) & (p[:, 1] >= ymin) & (p[:, 1] <= ymax)))
        left -= n
    frac = hits / samples
    return area * frac, area * np.sqrt(frac * (1 - frac) / samples)
