"""Point-emitter model of a planar surface light source."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ConfigurationError


class BoundaryError(ValueError):
    pass


@dataclass
class PointSourceSet:
    """N emitters on the plane z = 0 inside a square of side ``B`` (cm)."""

    x: np.ndarray
    y: np.ndarray
    q: np.ndarray
    B: float

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        if not (len(self.x) == len(self.y) == len(self.q)) or len(self.x) < 1:
            raise ConfigurationError("source set needs N >= 1 emitters with x, y, q each")

    @property
    def n(self) -> int:
        return len(self.x)

    def arrays(self):
        return self.x, self.y, self.q

    def normalized(self) -> "PointSourceSet":
        """Copy with intensities rescaled to sum to one."""
        return PointSourceSet(self.x.copy(), self.y.copy(), self.q / self.q.sum(), self.B)

    def is_physical(self) -> bool:
        h = self.B / 2
        return bool(np.all(np.abs(self.x) <= h) and np.all(np.abs(self.y) <= h) and np.all(self.q >= 0))

    def __or__(self, other: "PointSourceSet") -> "PointSourceSet":
        return PointSourceSet(
            np.concatenate([self.x, other.x]), np.concatenate([self.y, other.y]),
            np.concatenate([self.q, other.q]), max(self.B, other.B),
        )


# contraction -------------------------------------------------------------------


def contract(u, B: float):
    """Monotone C^1 map of ``u >= 0`` onto ``[-B/2, B/2)``.

    Linear on [0, 1] (from -B/2 up to 0) and ``B/2 * (1 - 1/u)`` beyond.
    Applied to ``|x_hat|``.
    """
    u = np.abs(np.asarray(u, dtype=float))
    with np.errstate(divide="ignore"):
        return np.where(u <= 1, 0.5 * B * (u - 1), 0.5 * B * (1 - 1 / np.maximum(u, 1)))


def contract_derivative(u, B: float):
    u = np.abs(np.asarray(u, dtype=float))
    return np.where(u <= 1, 0.5 * B, 0.5 * B / np.maximum(u, 1) ** 2)


def uncontract(x, B: float):
    """Nonnegative preimage of ``x`` under :func:`contract`."""
    x = np.asarray(x, dtype=float)
    h = B / 2
    if np.any(np.abs(x) >= h):
        raise BoundaryError("positions on or outside the emitter boundary cannot be encoded")
    return np.where(x <= 0, 1 + x / h, 1 / (1 - x / h))


@dataclass
class ContractionParams:
    """Unconstrained parameters ``(x_hat, y_hat, q_hat)`` per free emitter.

    With ``symmetric=True`` each free emitter stands for four mirrored copies
    ``(+-x, +-y)`` sharing one intensity.
    """

    xh: np.ndarray
    yh: np.ndarray
    qh: np.ndarray
    B: float
    symmetric: bool = False

    def vector(self) -> np.ndarray:
        return np.column_stack([self.xh, self.yh, self.qh]).ravel()

    @classmethod
    def from_vector(cls, v, B: float, symmetric: bool = False) -> "ContractionParams":
        v = np.asarray(v, dtype=float).reshape(-1, 3)
        return cls(v[:, 0].copy(), v[:, 1].copy(), v[:, 2].copy(), B, symmetric)


_MIRRORS = np.array([[1, 1], [-1, 1], [1, -1], [-1, -1]], dtype=float)


def mirror(x, y, q):
    """Four-fold mirror copies, emitter-major: copies of emitter 0 first."""
    x = np.asarray(x)[:, None] * _MIRRORS[:, 0]
    y = np.asarray(y)[:, None] * _MIRRORS[:, 1]
    q = np.repeat(np.asarray(q)[:, None], 4, axis=1)
    return x.ravel(), y.ravel(), q.ravel()


def decode(params: ContractionParams) -> PointSourceSet:
    x = contract(params.xh, params.B)
    y = contract(params.yh, params.B)
    q = np.abs(params.qh)
    if params.symmetric:
        x, y, q = mirror(x, y, q)
    return PointSourceSet(x, y, q, params.B)


def decode_jacobian(params: ContractionParams) -> np.ndarray:
    """Diagonal of d(x, y, q)/d(x_hat, y_hat, q_hat), interleaved like ``vector()``.

    ``q = |q_hat|`` uses subgradient 0 at 0.
    """
    dx = contract_derivative(params.xh, params.B) * np.sign(params.xh)
    dy = contract_derivative(params.yh, params.B) * np.sign(params.yh)
    dq = np.sign(params.qh)
    return np.column_stack([dx, dy, dq]).ravel()


def pullback_gradient(params: ContractionParams, grad_sources: np.ndarray) -> np.ndarray:
    """Map a gradient over decoded ``(x_k, y_k, q_k)`` back to the free parameters."""
    g = np.asarray(grad_sources, dtype=float).reshape(-1, 3)
    if params.symmetric:
        g = (g.reshape(-1, 4, 3) * np.column_stack([_MIRRORS, np.ones(4)])[None]).sum(axis=1)
    return g.ravel() * decode_jacobian(params)


def encode(sources: PointSourceSet, symmetric: bool = False) -> ContractionParams:
    x, y, q = sources.x, sources.y, sources.q
    if np.any(q < 0):
        raise BoundaryError("intensities must be nonnegative")
    if symmetric:
        if sources.n % 4:
            raise ConfigurationError("symmetric encoding needs N divisible by 4")
        x, y, q = x[::4], y[::4], q[::4]
    return ContractionParams(uncontract(x, sources.B), uncontract(y, sources.B), q.copy(), sources.B, symmetric)


# initialization ----------------------------------------------------------------


def init_sources(N: int, B: float, mode: str = "grid") -> PointSourceSet:
    """Uniform start: a sqrt(N) x sqrt(N) lattice with equal intensities 1/N.

    ``mode="quadrant"`` lays a sqrt(N/4) lattice over the first quadrant and
    mirrors it; the result equals the full lattice but is ordered in groups of
    four mirror copies (see :func:`mirror`).
    """
    if mode == "grid":
        n = math.isqrt(N)
        if n * n != N or N < 1:
            raise ConfigurationError(f"grid initialization needs a perfect square, got N={N}")
        c = (np.arange(n) + 0.5) / n * B - B / 2
        X, Y = np.meshgrid(c, c, indexing="xy")
        return PointSourceSet(X.ravel(), Y.ravel(), np.full(N, 1.0 / N), B)
    if mode == "quadrant":
        if N % 4 or N < 4:
            raise ConfigurationError(f"quadrant initialization needs N divisible by 4, got N={N}")
        m = N // 4
        n = math.isqrt(m)
        if n * n == m:
            c = (np.arange(n) + 0.5) / n * (B / 2)
            X, Y = np.meshgrid(c, c, indexing="xy")
            fx, fy = X.ravel(), Y.ravel()
        else:
            # non-square count: spread along the quadrant diagonal band
            t = (np.arange(m) + 0.5) / m
            fx = t * (B / 2)
            fy = ((np.arange(m) * 0.618034) % 1 * 0.9 + 0.05) * (B / 2)
        x, y, q = mirror(fx, fy, np.full(m, 1.0 / N))
        return PointSourceSet(x, y, q, B)
    raise ConfigurationError(f"unknown initialization mode {mode!r}")


# penalties ---------------------------------------------------------------------


def _gate(t):
    """Positivity gate: 1 where ``t > 0``."""
    return (np.asarray(t) > 0).astype(float)


def boundary_penalties(sources: PointSourceSet) -> tuple[float, float]:
    h = sources.B / 2
    ox = np.abs(sources.x) - h
    oy = np.abs(sources.y) - h
    e_bp = float(np.sum(_gate(ox) * ox**2 + _gate(oy) * oy**2))
    e_bi = float(np.sum(_gate(-sources.q) * sources.q**2))
    return e_bp, e_bi


def boundary_penalty_gradient(sources: PointSourceSet) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``(E_bp, E_bi)`` w.r.t. interleaved ``(x, y, q)``."""
    h = sources.B / 2
    ox = np.abs(sources.x) - h
    oy = np.abs(sources.y) - h
    gbp = np.column_stack([
        2 * _gate(ox) * ox * np.sign(sources.x),
        2 * _gate(oy) * oy * np.sign(sources.y),
        np.zeros(sources.n),
    ]).ravel()
    gbi = np.column_stack([np.zeros(sources.n), np.zeros(sources.n), 2 * _gate(-sources.q) * sources.q]).ravel()
    return gbp, gbi
