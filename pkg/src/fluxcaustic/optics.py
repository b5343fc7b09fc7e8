"""Optical kernels: solid angle, inverse front refraction, back refraction.

Every kernel takes :class:`~fluxcaustic.geometry.Vec3` inputs whose
components may be floats, numpy arrays or :class:`~fluxcaustic.autodiff.Dual`
batches.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .geometry import DegenerateGeometryError, Vec3

log = logging.getLogger(__name__)

AXIAL_R2 = 1e-18


class TotalInternalReflection(ArithmeticError):
    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class RayMissesPlane(ArithmeticError):
    pass


class QuarticRootError(ArithmeticError):
    pass


# solid angle ---------------------------------------------------------------


def solid_angle(apex: Vec3, p1: Vec3, p2: Vec3, p3: Vec3):
    """Solid angle of triangle (p1, p2, p3) seen from ``apex`` (steradians).

    Uses the arctan2 form of the spherical excess, which is positive for
    triangles that are counter-clockwise when viewed from the apex side
    opposite to their normal.
    """
    d1, d2, d3 = p1 - apex, p2 - apex, p3 - apex
    for d in (d1, d2, d3):
        if np.any(ad.value(d.dot(d)) == 0):
            raise DegenerateGeometryError("solid-angle apex coincides with a vertex")
    r1, r2, r3 = d1.normalized(), d2.normalized(), d3.normalized()
    num = r1.dot(r2.cross(r3))
    den = 1.0 + r1.dot(r2) + r1.dot(r3) + r2.dot(r3)
    return 2.0 * ad.arctan2(num, den)


# front surface: quartic ------------------------------------------------------


class QuarticCoeffs(NamedTuple):
    """Coefficients of the incidence quartic in ``k`` (highest degree first)."""

    c4: object
    c3: object
    c2: object
    c1: object
    c0: object

    def __call__(self, k):
        return (((self.c4 * k + self.c3) * k + self.c2) * k + self.c1) * k + self.c0

    def values(self) -> "QuarticCoeffs":
        return QuarticCoeffs(*(np.asarray(ad.value(c), dtype=float) for c in self))


def quartic_coeffs(eta, dx, dy, z_back, z_front) -> QuarticCoeffs:
    """Quartic for the incidence parameter ``k`` with the source at the origin.

    ``(dx, dy, z_back)`` is the back vertex relative to the source and
    ``z_front`` the front plane height relative to the source.
    """
    e2 = eta * eta
    r2 = dx * dx + dy * dy
    a = (e2 - 1.0) * r2
    gap = z_back - z_front
    ez = e2 * (z_front * z_front)
    return QuarticCoeffs(a, -2.0 * a, a + ez - gap * gap, -2.0 * ez, ez)


def _cbrt_complex(z):
    return np.where(z == 0, 0, np.abs(z) ** (1 / 3) * np.exp(1j * np.angle(z) / 3))


def ferrari_roots(c4, c3, c2, c1, c0) -> np.ndarray:
    """All four (complex) roots of a batch of quartics, shape ``(..., 4)``.

    Closed-form resolvent-cubic solution; requires ``c4 != 0``.
    """
    c4 = np.asarray(c4, dtype=complex)
    b, c, d, e = (np.asarray(x, dtype=complex) / c4 for x in (c3, c2, c1, c0))
    p = c - 3 * b * b / 8
    q = b**3 / 8 - b * c / 2 + d
    r = -3 * b**4 / 256 + b * b * c / 16 - b * d / 4 + e
    # resolvent cubic m^3 + p m^2 + (p^2/4 - r) m - q^2/8 = 0
    A, B, C = p, p * p / 4 - r, -q * q / 8
    P = B - A * A / 3
    Q = 2 * A**3 / 27 - A * B / 3 + C
    disc = np.sqrt(Q * Q / 4 + P**3 / 27)
    w1 = -Q / 2 + disc
    w2 = -Q / 2 - disc
    u = _cbrt_complex(np.where(np.abs(w1) >= np.abs(w2), w1, w2))
    omega = np.exp(2j * np.pi / 3)
    cands = []
    for j in range(3):
        uj = u * omega**j
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(uj == 0, 0, uj - P / (3 * uj))
        cands.append(t - A / 3)
    cands = np.stack(cands, axis=-1)
    # the largest resolvent root keeps sqrt(2m) away from zero
    pick = np.argmax(np.abs(cands), axis=-1)
    m = np.take_along_axis(cands, pick[..., None], axis=-1)[..., 0]
    s = np.sqrt(2 * m)
    with np.errstate(divide="ignore", invalid="ignore"):
        qs = np.where(s == 0, 0, q / s)
    roots = []
    for s1 in (1, -1):
        inner = np.sqrt(-(2 * p + 2 * m + s1 * 2 * qs))
        for s2 in (1, -1):
            roots.append((s1 * s + s2 * inner) / 2 - b / 4)
    return np.stack(roots, axis=-1)


def snell_lateral_residual(k, r, z_back, z_front, eta):
    """Signed lateral Snell mismatch ``eta*(1-k)*L1 - k*L2`` (zero at the root).

    L1 and L2 are the lengths of source->A and A->A' with A = k * A'.  The
    function is positive at k=0 and negative at k=1.
    """
    L1 = np.sqrt((k * r) ** 2 + z_front**2)
    L2 = np.sqrt(((1 - k) * r) ** 2 + (z_back - z_front) ** 2)
    return eta * (1 - k) * L1 - k * L2


def solve_incidence_k(coeffs: QuarticCoeffs, r2, z_back, z_front, eta, polish: int = 3):
    """Root of the incidence quartic in [0, 1] (plain values, batched).

    Ferrari gives the candidates; the one in [0, 1] with the smallest Snell
    residual is polished by bracketed Newton steps.  Axial rays (r^2 below
    ``AXIAL_R2``) use the closed form of the reduced quadratic.
    """
    cf = coeffs.values()
    shape = np.broadcast_shapes(*(np.shape(c) for c in cf), np.shape(r2))
    cf = QuarticCoeffs(*(np.broadcast_to(c, shape) for c in cf))
    r2 = np.broadcast_to(np.asarray(r2, dtype=float), shape)
    z_back = np.broadcast_to(np.asarray(z_back, dtype=float), shape)
    z_front = np.broadcast_to(np.asarray(z_front, dtype=float), shape)
    gap = z_back - z_front
    axial_k = eta * z_front / (eta * z_front + gap)
    k = np.array(axial_k, dtype=float, copy=True)

    # quartics whose leading terms are negligible behave like the axial quadratic
    scale = np.maximum(np.abs(cf.c2), np.abs(cf.c0))
    use_ferrari = (r2 >= AXIAL_R2) & (np.abs(cf.c4) > 1e-14 * scale)
    if np.any(use_ferrari):
        sel = use_ferrari
        roots = ferrari_roots(cf.c4[sel], cf.c3[sel], cf.c2[sel], cf.c1[sel], cf.c0[sel])
        re = roots.real
        tol = 1e-6
        ok = (np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(re))) & (re >= -tol) & (re <= 1 + tol)
        re = np.clip(re, 0.0, 1.0)
        r = np.sqrt(r2[sel])[..., None]
        resid = np.abs(snell_lateral_residual(re, r, z_back[sel][..., None], z_front[sel][..., None], eta))
        resid = np.where(ok, resid, np.inf)
        best = np.argmin(resid, axis=-1)
        found = np.isfinite(np.take_along_axis(resid, best[..., None], -1)[..., 0])
        kf = np.take_along_axis(re, best[..., None], -1)[..., 0]
        if not np.all(found):
            n_bad = int(np.sum(~found))
            log.warning("Ferrari produced no root in [0,1] for %d rays; using axial guess", n_bad)
        kf = np.where(found, kf, k[sel])
        k[sel] = kf

    # bracketed Newton polish on the quartic
    lo = np.zeros(shape)
    hi = np.ones(shape)
    for _ in range(polish):
        f = cf(k)
        df = ((4 * cf.c4 * k + 3 * cf.c3) * k + 2 * cf.c2) * k + cf.c1
        # F(0) > 0 > F(1): keep the sign-change bracket
        lo = np.where(f > 0, np.maximum(lo, k), lo)
        hi = np.where(f < 0, np.minimum(hi, k), hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(df != 0, f / df, 0.0)
        kn = k - step
        k = np.where((kn > lo) & (kn < hi), kn, 0.5 * (lo + hi))
        k = np.where(f == 0, k + step, k)
    resid = np.abs(cf(k))
    cmax = np.maximum.reduce([np.abs(c) for c in cf])
    bad = (k < 0) | (k > 1) | (resid > 1e-6 * cmax)
    if np.any(bad):
        raise QuarticRootError(
            f"no incidence root in [0,1] for {int(bad.sum())} rays "
            f"(worst residual {float((resid / cmax)[bad].max()):.3e})"
        )
    return k


def incident_point(source: Vec3, back_vertex: Vec3, front_z: float, eta: float) -> Vec3:
    """Point on the front plane where the ray from ``source`` to ``back_vertex`` enters.

    Coordinates are translated so the source sits at the origin, the
    incidence quartic is solved for ``k`` and its derivatives are attached by
    implicit differentiation; the result is ``source + k * (A' - source)``
    with the z-coordinate pinned to ``front_z``.
    """
    dx = back_vertex.x - source.x
    dy = back_vertex.y - source.y
    zb = back_vertex.z - source.z
    zf = front_z - source.z
    if np.any(ad.value(zb) <= ad.value(zf)) or np.any(ad.value(zf) <= 0):
        raise DegenerateGeometryError("need source below front plane below back vertex")
    coeffs = quartic_coeffs(eta, dx, dy, zb, zf)
    r2 = ad.value(dx * dx + dy * dy)
    k_val = solve_incidence_k(coeffs, r2, ad.value(zb), ad.value(zf), eta)
    k = ad.implicit_root_derivative(list(coeffs), k_val)
    return Vec3(source.x + k * dx, source.y + k * dy, _full_like(k, front_z))


# back surface ----------------------------------------------------------------


def refract_exit(incident_dir: Vec3, normal: Vec3, eta: float, return_mask: bool = False):
    """Exit direction after leaving glass of index ``eta`` through ``normal``.

    With ``return_mask`` the total-internal-reflection rays are reported as a
    boolean mask (their direction is set to the normal) instead of raising.
    """
    c = incident_dir.dot(normal)
    disc = 1.0 + eta * eta * (c * c - 1.0)
    dv = ad.value(disc)
    tir = np.asarray(dv < 0)
    if np.any(tir) and not return_mask:
        raise TotalInternalReflection(
            "total internal reflection at back surface", np.flatnonzero(tir)
        )
    root = ad.sqrt(ad.where(tir, 1.0, disc))
    tang = incident_dir - normal.scale(c)
    out = normal.scale(root) + tang.scale(eta)
    if np.any(tir):
        out = Vec3(*(ad.where(tir, nc, oc) for nc, oc in zip(normal, out)))
    return (out, tir) if return_mask else out


def project_to_plane(point: Vec3, direction: Vec3, plane_z: float) -> Vec3:
    dz = ad.value(direction.z)
    if np.any(np.asarray(dz) <= 0):
        raise RayMissesPlane("ray travels away from the receiving plane")
    t = (plane_z - point.z) / direction.z
    x = point.x + direction.x * t
    return Vec3(x, point.y + direction.y * t, _full_like(x, plane_z))


def _full_like(like, fill):
    full = np.full(np.shape(ad.value(like)), float(fill))
    return ad.constant(full, like.width) if isinstance(like, ad.Dual) else full
