"""Geometric types: vectors, the height-field lens, the image plane."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad

DEGENERATE_AREA = 1e-14  # cm^2


class ConfigurationError(ValueError):
    pass


class DegenerateGeometryError(ArithmeticError):
    pass


class Vec3(NamedTuple):
    """3-vector whose components are floats, arrays or duals (units: cm).

    Components broadcast independently, so a ``Vec3`` of arrays is a batch of
    vectors.
    """

    x: object
    y: object
    z: object

    def __add__(self, o):
        return Vec3(self.x + o.x, self.y + o.y, self.z + o.z)

    def __sub__(self, o):
        return Vec3(self.x - o.x, self.y - o.y, self.z - o.z)

    def __neg__(self):
        return Vec3(-self.x, -self.y, -self.z)

    def scale(self, s):
        return Vec3(self.x * s, self.y * s, self.z * s)

    def dot(self, o):
        return self.x * o.x + self.y * o.y + self.z * o.z

    def cross(self, o):
        return Vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )

    def norm(self):
        return ad.sqrt(self.dot(self))

    def normalized(self):
        n = self.norm()
        if np.any(ad.value(n) == 0):
            raise DegenerateGeometryError("cannot normalize a zero vector")
        return Vec3(self.x / n, self.y / n, self.z / n)

    def take(self, idx):
        return Vec3(ad.take(self.x, idx), ad.take(self.y, idx), ad.take(self.z, idx))

    def value(self) -> np.ndarray:
        """Plain values stacked on the last axis."""
        return np.stack(np.broadcast_arrays(*(ad.value(c) for c in self)), axis=-1)

    @classmethod
    def of(cls, arr) -> "Vec3":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[..., 0], arr[..., 1], arr[..., 2])


def grid_triangles(grid_w: int, grid_h: int) -> np.ndarray:
    """Counter-clockwise triangles of a ``grid_w x grid_h`` vertex grid.

    Vertex (i, j) sits at column i (x) and row j (y) and has flat index
    ``j * grid_w + i``.  Every quad is split along its (i, j)-(i+1, j+1)
    diagonal, giving an upward (+z) normal for a flat height field.
    """
    i, j = np.meshgrid(np.arange(grid_w - 1), np.arange(grid_h - 1), indexing="xy")
    v00 = (j * grid_w + i).ravel()
    v10 = v00 + 1
    v01 = v00 + grid_w
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    return np.stack([lower, upper], axis=1).reshape(-1, 3)


@dataclass
class LensSurface:
    """Planar front face at ``front_z`` plus a triangulated height-field back face.

    Only ``heights`` change during optimization; the (x, y) grid is fixed.
    """

    grid_w: int
    grid_h: int
    front_z: float
    width: float
    height: float
    heights: np.ndarray
    refractive_index: float = 1.49
    triangles: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grid_w < 2 or self.grid_h < 2:
            raise ConfigurationError("lens grid needs at least 2x2 vertices")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("lens extent must be positive")
        self.heights = np.array(self.heights, dtype=float).reshape(self.grid_h, self.grid_w)
        if self.triangles is None:
            self.triangles = grid_triangles(self.grid_w, self.grid_h)
        xs = np.linspace(-self.width / 2, self.width / 2, self.grid_w)
        ys = np.linspace(-self.height / 2, self.height / 2, self.grid_h)
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        self._xy = np.stack([X.ravel(), Y.ravel()], axis=1)
        self._xy.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def xy(self) -> np.ndarray:
        return self._xy

    @property
    def z(self) -> np.ndarray:
        return self.heights.ravel()

    def vertices(self) -> np.ndarray:
        return np.column_stack([self._xy, self.z])

    def with_heights(self, heights) -> "LensSurface":
        return LensSurface(
            self.grid_w, self.grid_h, self.front_z, self.width, self.height,
            np.asarray(heights, dtype=float).reshape(self.grid_h, self.grid_w),
            self.refractive_index, self.triangles,
        )

    def boundary_mask(self) -> np.ndarray:
        m = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        return m.ravel()

    def validate(self):
        if not np.all(np.isfinite(self.heights)):
            raise ConfigurationError("non-finite lens height")
        if np.any(self.heights <= self.front_z):
            raise ConfigurationError("back surface must lie behind the front face")


def build_grid_lens(grid_w, grid_h, extent, front_z, initial_height, eta=1.49) -> LensSurface:
    """Flat lens: back surface at ``initial_height`` over ``extent = (w, h)``."""
    if grid_w < 2 or grid_h < 2:
        raise ConfigurationError("grid_w and grid_h must be >= 2")
    if initial_height <= front_z:
        raise ConfigurationError("initial_height must exceed front_z")
    w, h = extent
    return LensSurface(
        int(grid_w), int(grid_h), float(front_z), float(w), float(h),
        np.full((grid_h, grid_w), float(initial_height)), float(eta),
    )


def triangle_normal(v1: Vec3, v2: Vec3, v3: Vec3) -> Vec3:
    """Unit normal of positively oriented triangles (batched, dual-aware)."""
    return (v2 - v1).cross(v3 - v1).normalized()


def face_normal(lens: LensSurface, triangle_index: int) -> np.ndarray:
    tri = lens.triangles[triangle_index]
    v = lens.vertices()[tri]
    c = np.cross(v[1] - v[0], v[2] - v[0])
    n = np.linalg.norm(c)
    if n / 2 < DEGENERATE_AREA:
        raise DegenerateGeometryError(f"triangle {triangle_index} has zero area")
    return c / n


@dataclass(frozen=True)
class ImagePlane:
    """Receiving plane at height ``z`` covering ``[-W/2, W/2] x [-H/2, H/2]``.

    Pixel (u, v) has column u along x and row v along y; pixel (0, 0) is the
    min-corner pixel.  Images are stored as ``(res_h, res_w)`` arrays indexed
    ``[v, u]``.
    """

    z: float
    width: float
    height: float
    res_w: int
    res_h: int

    def __post_init__(self):
        if self.res_w < 1 or self.res_h < 1 or self.width <= 0 or self.height <= 0:
            raise ConfigurationError("image plane needs positive extent and resolution")

    @property
    def x0(self) -> float:
        return -self.width / 2

    @property
    def y0(self) -> float:
        return -self.height / 2

    @property
    def pixel_w(self) -> float:
        return self.width / self.res_w

    @property
    def pixel_h(self) -> float:
        return self.height / self.res_h

    @property
    def n_pixels(self) -> int:
        return self.res_w * self.res_h

    @property
    def shape(self) -> tuple[int, int]:
        return (self.res_h, self.res_w)

    def x_edges(self) -> np.ndarray:
        return self.x0 + self.pixel_w * np.arange(self.res_w + 1)

    def y_edges(self) -> np.ndarray:
        return self.y0 + self.pixel_h * np.arange(self.res_h + 1)


def pixel_rect(plane: ImagePlane, u: int, v: int) -> tuple[float, float, float, float]:
    """``(xmin, xmax, ymin, ymax)`` of pixel (u, v)."""
    if not (0 <= u < plane.res_w and 0 <= v < plane.res_h):
        raise IndexError(f"pixel ({u}, {v}) outside {plane.res_w}x{plane.res_h} image")
    return (
        plane.x0 + u * plane.pixel_w,
        plane.x0 + (u + 1) * plane.pixel_w,
        plane.y0 + v * plane.pixel_h,
        plane.y0 + (v + 1) * plane.pixel_h,
    )


@dataclass(frozen=True)
class Triangle2D:
    """Triangle in image-plane coordinates (cm)."""

    a: tuple[float, float]
    b: tuple[float, float]
    c: tuple[float, float]

    @property
    def signed_area(self) -> float:
        (ax, ay), (bx, by), (cx, cy) = self.a, self.b, self.c
        return 0.5 * ((bx - ax) * (cy - ay) - (cx - ax) * (by - ay))

    @property
    def area(self) -> float:
        return abs(self.signed_area)

    @property
    def degenerate(self) -> bool:
        return self.area < DEGENERATE_AREA

    def points(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=float)
