"""Compiled pixel-overlap kernel.

Same quadrant-integral construction as :func:`fluxrender.quadrant_area`, with
the partials of each edge integral written out by hand so that a pair's
tangent (K partials of its six projected coordinates and of its flux) can be
pushed through in one pass.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _edge(x0, y0, x1, y1, a, b, g):
    """Integral of min(x, a) dy over the edge clipped to y <= b.

    Adds the partials w.r.t. (x0, y0, x1, y1) into g[0:4] and returns the value.
    """
    if y0 == y1 or (y0 > b and y1 > b):
        return 0.0
    dy = y1 - y0
    # partials of xa, ya, xb, yb w.r.t. (x0, y0, x1, y1)
    t = (b - y0) / dy
    xc = x0 + t * (x1 - x0)
    dt0 = (b - y1) / (dy * dy)
    dt1 = -(b - y0) / (dy * dy)
    if y0 <= b:
        xa = x0
        ya = y0
        ax0, ay0, ax1, ay1 = 1.0, 0.0, 0.0, 0.0
        yay0, yay1 = 1.0, 0.0
    else:
        xa = xc
        ya = b
        ax0, ay0, ax1, ay1 = 1.0 - t, (x1 - x0) * dt0, t, (x1 - x0) * dt1
        yay0, yay1 = 0.0, 0.0
    if y1 <= b:
        xb = x1
        yb = y1
        bx0, by0, bx1, by1 = 0.0, 0.0, 1.0, 0.0
        yby0, yby1 = 0.0, 1.0
    else:
        xb = xc
        yb = b
        bx0, by0, bx1, by1 = 1.0 - t, (x1 - x0) * dt0, t, (x1 - x0) * dt1
        yby0, yby1 = 0.0, 0.0

    lo = min(xa, xb)
    hi = max(xa, xb)
    if lo >= a:
        m = a
        ma = 0.0
        mb = 0.0
    elif hi > a:
        span = hi - lo
        over = hi - a
        m = 0.5 * (xa + xb) - over * over / (2.0 * span)
        dhi = 0.5 - over / span + over * over / (2.0 * span * span)
        dlo = 0.5 - over * over / (2.0 * span * span)
        if xa >= xb:
            ma, mb = dhi, dlo
        else:
            ma, mb = dlo, dhi
    else:
        m = 0.5 * (xa + xb)
        ma = 0.5
        mb = 0.5
    h = yb - ya
    g[0] += h * (ma * ax0 + mb * bx0)
    g[1] += (yby0 - yay0) * m + h * (ma * ay0 + mb * by0)
    g[2] += h * (ma * ax1 + mb * bx1)
    g[3] += (yby1 - yay1) * m + h * (ma * ay1 + mb * by1)
    return h * m


@njit(cache=True)
def _quadrant(X, Y, a, b, g):
    """Signed area of the triangle inside {x <= a, y <= b}; partials into g[6]
    ordered (x0, y0, x1, y1, x2, y2)."""
    for i in range(6):
        g[i] = 0.0
    e = np.zeros(4)
    total = 0.0
    for i in range(3):
        j = (i + 1) % 3
        e[:] = 0.0
        total += _edge(X[i], Y[i], X[j], Y[j], a, b, e)
        g[2 * i] += e[0]
        g[2 * i + 1] += e[1]
        g[2 * j] += e[2]
        g[2 * j + 1] += e[3]
    return total


@njit(cache=True)
def allocate_kernel(px, py, dpx, dpy, flux, dflux, ulo, vlo, nu, nv, offsets,
                    x0, y0, pw, ph, res_w, out_pix, out_pair, out_val, out_der, image):
    n = px.shape[0]
    K = dflux.shape[1]
    X = np.zeros(3)
    Y = np.zeros(3)
    g = np.zeros(6)
    dA = np.zeros(6)
    dfrac = np.zeros(6)
    cap = 64
    Fv = np.zeros(cap)
    Fg = np.zeros((cap, 6))
    for i in range(n):
        if nu[i] == 0:
            continue
        ox = x0 + ulo[i] * pw
        oy = y0 + vlo[i] * ph
        for c in range(3):
            X[c] = px[i, c] - ox
            Y[c] = py[i, c] - oy
        area = 0.5 * ((X[1] - X[0]) * (Y[2] - Y[0]) - (X[2] - X[0]) * (Y[1] - Y[0]))
        dA[0] = 0.5 * (Y[1] - Y[2])
        dA[1] = 0.5 * (X[2] - X[1])
        dA[2] = 0.5 * (Y[2] - Y[0])
        dA[3] = 0.5 * (X[0] - X[2])
        dA[4] = 0.5 * (Y[0] - Y[1])
        dA[5] = 0.5 * (X[1] - X[0])
        ncu = nu[i] + 1
        ncv = nv[i] + 1
        if ncu * ncv > cap:
            cap = ncu * ncv
            Fv = np.zeros(cap)
            Fg = np.zeros((cap, 6))
        for cu in range(ncu):
            for cv in range(ncv):
                k = cu * ncv + cv
                Fv[k] = _quadrant(X, Y, cu * pw, cv * ph, g)
                for s in range(6):
                    Fg[k, s] = g[s]
        o = offsets[i]
        f = flux[i]
        for iu in range(nu[i]):
            for iv in range(nv[i]):
                k00 = iu * ncv + iv
                k01 = k00 + 1
                k10 = k00 + ncv
                k11 = k10 + 1
                pa = Fv[k11] - Fv[k01] - Fv[k10] + Fv[k00]
                frac = pa / area
                for s in range(6):
                    dfrac[s] = (Fg[k11, s] - Fg[k01, s] - Fg[k10, s] + Fg[k00, s] - frac * dA[s]) / area
                pix = (vlo[i] + iv) * res_w + (ulo[i] + iu)
                val = f * frac
                out_pix[o] = pix
                out_pair[o] = i
                out_val[o] = val
                for kk in range(K):
                    d = dflux[i, kk] * frac
                    for c in range(3):
                        d += f * (dfrac[2 * c] * dpx[i, c, kk] + dfrac[2 * c + 1] * dpy[i, c, kk])
                    out_der[o, kk] = d
                image[pix] += val
                o += 1
