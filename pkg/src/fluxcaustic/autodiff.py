"""Vectorized forward-mode dual numbers.

A :class:`Dual` carries a value array of shape ``S`` and a partials array of
shape ``S + (K,)``.  All arithmetic broadcasts like numpy, so one ``Dual``
holds an entire batch of independent width-K tangents (for instance one
width-3 tangent per (source, triangle) pair).

The module-level functions (:func:`sqrt`, :func:`arctan2`, ...) accept plain
floats/arrays as well as duals, which lets the optical kernels be written once
and evaluated either way.
"""

from __future__ import annotations

import numpy as np

DEBUG = False


class Dual:
    """Value plus K partial derivatives, batched over numpy arrays."""

    __slots__ = ("val", "der")
    # make ndarray operators defer to our reflected methods
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)
        if DEBUG:
            _check_finite(self)

    @property
    def width(self) -> int:
        return self.der.shape[-1]

    @property
    def shape(self):
        return self.val.shape

    def __len__(self):
        return len(self.val)

    def __getitem__(self, idx):
        return Dual(self.val[idx], self.der[idx])

    def __repr__(self):
        return f"Dual(val={self.val!r}, der={self.der!r})"

    # arithmetic -----------------------------------------------------------
    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        other = np.asarray(other, dtype=float)
        return Dual(self.val + other, np.broadcast_to(self.der, np.broadcast_shapes(self.der.shape, other.shape + (1,))))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        other = np.asarray(other, dtype=float)
        return Dual(self.val - other, np.broadcast_to(self.der, np.broadcast_shapes(self.der.shape, other.shape + (1,))))

    def __rsub__(self, other):
        other = np.asarray(other, dtype=float)
        return Dual(other - self.val, np.broadcast_to(-self.der, np.broadcast_shapes(self.der.shape, other.shape + (1,))))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.der * other.val[..., None] + other.der * self.val[..., None],
            )
        other = np.asarray(other, dtype=float)
        return Dual(self.val * other, self.der * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            if DEBUG and np.any(other.val == 0):
                raise ZeroDivisionError("dual division by zero value")
            inv = 1.0 / other.val
            q = self.val * inv
            return Dual(q, (self.der - other.der * q[..., None]) * inv[..., None])
        other = np.asarray(other, dtype=float)
        inv = 1.0 / other
        return Dual(self.val * inv, self.der * inv[..., None])

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=float)
        inv = 1.0 / self.val
        q = other * inv
        return Dual(q, -self.der * (q * inv)[..., None])

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("dual exponents are not supported")
        if p == 2:
            return self * self
        v = self.val**p
        return Dual(v, self.der * (p * self.val ** (p - 1))[..., None])

    # comparisons act on the value only
    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)


def _check_finite(d: Dual):
    if not (np.all(np.isfinite(d.val)) and np.all(np.isfinite(d.der))):
        raise FloatingPointError("non-finite value in dual arithmetic")


def value(x):
    """Strip the tangent part (identity on plain numbers)."""
    return x.val if isinstance(x, Dual) else x


def partials(x, width: int):
    """Partials of ``x``; zeros of matching shape for constants."""
    if isinstance(x, Dual):
        return x.der
    return np.zeros(np.shape(x) + (width,))


def constant(val, width: int) -> Dual:
    val = np.asarray(val, dtype=float)
    return Dual(val, np.zeros(val.shape + (width,)))


def variable(val, slot, width: int) -> Dual:
    """Seed an independent variable: partial 1 in ``slot``, 0 elsewhere.

    ``slot`` may be an int or an integer array broadcastable against ``val``.
    """
    val = np.asarray(val, dtype=float)
    slot = np.asarray(slot)
    shape = np.broadcast_shapes(val.shape, slot.shape)
    der = (np.arange(width) == np.broadcast_to(slot, shape)[..., None]).astype(float)
    return Dual(np.broadcast_to(val, shape).copy(), der)


def seed(values, width: int | None = None) -> list[Dual]:
    """One dual per scalar in ``values`` with identity seeding."""
    values = np.asarray(values, dtype=float).ravel()
    width = len(values) if width is None else width
    return [variable(v, i, width) for i, v in enumerate(values)]


# elementary functions -----------------------------------------------------


def sqrt(x):
    if not isinstance(x, Dual):
        return np.sqrt(x)
    if DEBUG and np.any(x.val < 0):
        raise FloatingPointError("sqrt of negative dual value")
    r = np.sqrt(x.val)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(r > 0, 0.5 / r, 0.0)
    return Dual(r, x.der * scale[..., None])


def arctan2(y, x):
    if not isinstance(y, Dual) and not isinstance(x, Dual):
        return np.arctan2(y, x)
    yv, xv = value(y), value(x)
    r2 = yv * yv + xv * xv
    with np.errstate(divide="ignore", invalid="ignore"):
        dy = np.where(r2 > 0, xv / r2, 0.0)
        dx = np.where(r2 > 0, -yv / r2, 0.0)
    K = y.width if isinstance(y, Dual) else x.width
    der = partials(y, K) * dy[..., None] + partials(x, K) * dx[..., None]
    return Dual(np.arctan2(yv, xv), der)


def absolute(x):
    """|x| with subgradient 0 at x = 0."""
    if not isinstance(x, Dual):
        return np.abs(x)
    return Dual(np.abs(x.val), x.der * np.sign(x.val)[..., None])


def power(x, p: float):
    if not isinstance(x, Dual):
        return np.power(x, p)
    v = np.power(x.val, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(x.val > 0, p * np.power(x.val, p - 1.0), 0.0)
    return Dual(v, x.der * d[..., None])


def maximum(x, y):
    """Elementwise max; ties take the first argument (the ">=" side)."""
    return where(value(x) >= value(y), x, y)


def minimum(x, y):
    return where(value(x) <= value(y), x, y)


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def where(cond, x, y):
    """Branch on values; partials follow the taken branch."""
    if not isinstance(x, Dual) and not isinstance(y, Dual):
        return np.where(cond, x, y)
    K = x.width if isinstance(x, Dual) else y.width
    cond = np.asarray(cond)
    return Dual(
        np.where(cond, value(x), value(y)),
        np.where(cond[..., None], partials(x, K), partials(y, K)),
    )


def take(x, idx, axis=0):
    if not isinstance(x, Dual):
        return np.take(x, idx, axis=axis)
    ax = axis if axis >= 0 else axis - 1
    return Dual(np.take(x.val, idx, axis=axis), np.take(x.der, idx, axis=ax))


def stack(items, axis=0):
    if not any(isinstance(i, Dual) for i in items):
        return np.stack(items, axis=axis)
    K = next(i.width for i in items if isinstance(i, Dual))
    ax = axis if axis >= 0 else axis - 1
    vals = [value(i) for i in items]
    shape = np.broadcast_shapes(*[np.shape(v) for v in vals])
    return Dual(
        np.stack([np.broadcast_to(v, shape) for v in vals], axis=axis),
        np.stack([np.broadcast_to(partials(i, K), shape + (K,)) for i in items], axis=ax),
    )


def total(x, axis=None):
    """Sum over ``axis`` of the value axes (never over the partials axis)."""
    if not isinstance(x, Dual):
        return np.sum(x, axis=axis)
    if axis is None:
        axes = tuple(range(x.val.ndim))
        return Dual(np.sum(x.val), np.sum(x.der, axis=axes))
    ax = axis if axis >= 0 else axis - 1
    return Dual(np.sum(x.val, axis=axis), np.sum(x.der, axis=ax))


def expand_slots(x, slot, width: int) -> Dual:
    """Embed width-1 partials into slot ``slot`` of a width-``width`` tangent."""
    if not isinstance(x, Dual):
        return constant(x, width)
    assert x.width == 1
    slot = np.asarray(slot)
    onehot = (np.arange(width) == slot[..., None]).astype(float)
    return Dual(x.val, x.der * onehot)


class IllConditionedRoot(ArithmeticError):
    """Raised when implicit differentiation hits a (near) multiple root."""

    def __init__(self, message, condition):
        super().__init__(message)
        self.condition = condition


def implicit_root_derivative(coeffs, k, rtol: float = 1e-12):
    """Attach derivatives to a polynomial root via the implicit function theorem.

    ``coeffs`` is a highest-degree-first sequence whose entries may be duals
    (they carry the dependence on the problem parameters); ``k`` is the root
    value.  For ``F(k; p) = sum c_i(p) k^i = 0`` we return ``k`` with partials
    ``-(dF/dp) / (dF/dk)``.
    """
    k = np.asarray(value(k), dtype=float)
    duals = [c for c in coeffs if isinstance(c, Dual)]
    if not duals:
        return k
    K = duals[0].width
    n = len(coeffs) - 1
    dFdp = np.zeros(np.broadcast_shapes(k.shape, *[np.shape(value(c)) for c in coeffs]) + (K,))
    dFdk = 0.0
    scale = 0.0
    for i, c in enumerate(coeffs):
        deg = n - i
        if isinstance(c, Dual):
            dFdp = dFdp + c.der * (k**deg)[..., None]
        if deg > 0:
            dFdk = dFdk + deg * value(c) * k ** (deg - 1)
        scale = np.maximum(scale, np.abs(value(c)))
    dFdk = np.asarray(dFdk, dtype=float)
    cond = np.abs(dFdk) / np.maximum(scale, np.finfo(float).tiny)
    bad = cond <= rtol
    if np.any(bad):
        raise IllConditionedRoot(
            f"root is (nearly) multiple: |dF/dk|/max|c| = {cond[bad].min():.3e}",
            float(cond[bad].min()),
        )
    return Dual(np.broadcast_to(k, dFdk.shape), -dFdp / dFdk[..., None])
