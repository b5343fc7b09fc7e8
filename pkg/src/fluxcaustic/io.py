"""File formats: binary PGM (8/16-bit), PFM, OBJ lens meshes, source tables.

Image arrays are indexed ``[v, u]`` with row ``v = 0`` at the bottom of the
image plane (min y).  PGM stores the top row first, so rows are flipped on the
way in and out; PFM stores the bottom row first, matching the arrays.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .fluxrender import FluxImage, GrayImage
from .geometry import LensSurface
from .sourcemodel import PointSourceSet


class FormatError(ValueError):
    pass


def quantize(values, maxval: int) -> np.ndarray:
    """Map [0, 1] to integers 0..maxval, rounding half away from zero."""
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0) * maxval
    return np.floor(v + 0.5).astype(np.int64)


# PGM -----------------------------------------------------------------------------


def write_pgm(path, img, bits: int = 8):
    data = img.data if isinstance(img, GrayImage) else np.asarray(img, dtype=float)
    if bits not in (8, 16):
        raise ValueError("PGM depth must be 8 or 16 bits")
    maxval = 255 if bits == 8 else 65535
    q = quantize(data, maxval)[::-1]
    h, w = q.shape
    raw = q.astype(">u2" if bits == 16 else np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(raw)


def _header_tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (with ``#`` comments) and the data offset."""
    tokens = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated header")
        tokens.append(buf[i:j].decode("ascii"))
        i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_pgm(path) -> GrayImage:
    buf = Path(path).read_bytes()
    tokens, off = _header_tokens(buf, 4)
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM dimensions or maxval")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    need = w * h * np.dtype(dtype).itemsize
    if len(buf) - off < need:
        raise FormatError(f"{path}: truncated raster")
    arr = np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return GrayImage(arr[::-1].astype(float) / maxval)


# PFM -----------------------------------------------------------------------------


def write_pfm(path, img):
    """Single-channel PFM, little-endian (scale -1.0), bottom row first."""
    data = img.data if isinstance(img, FluxImage) else np.asarray(img, dtype=float)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, off = _header_tokens(buf, 4)
    if tokens[0] != "Pf":
        raise FormatError(f"{path}: not a grayscale PFM")
    w, h = int(tokens[1]), int(tokens[2])
    scale = float(tokens[3])
    dtype = "<f4" if scale < 0 else ">f4"
    if len(buf) - off < 4 * w * h:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).reshape(h, w).astype(float) * abs(scale)


# OBJ -----------------------------------------------------------------------------

_META = "# fluxcaustic-lens"


def write_obj(path, lens: LensSurface):
    """Back surface as an OBJ mesh; a comment line keeps the lens parameters."""
    v = lens.vertices()
    with open(path, "w") as fh:
        fh.write(
            f"{_META} grid_w={lens.grid_w} grid_h={lens.grid_h} front_z={float(lens.front_z)!r} "
            f"width={float(lens.width)!r} height={float(lens.height)!r} eta={float(lens.refractive_index)!r}\n"
        )
        for x, y, z in v:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in lens.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_obj(path, front_z: float | None = None, eta: float | None = None) -> LensSurface:
    """Read a grid lens written by :func:`write_obj` (or any OBJ on a regular grid).

    Without the parameter comment, the grid is inferred from the distinct x
    and y coordinates and ``front_z``/``eta`` must be given.
    """
    meta = {}
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith(_META):
                meta = dict(kv.split("=", 1) for kv in line[len(_META):].split())
                continue
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in parts[1:]])
    if not verts:
        raise FormatError(f"{path}: no vertices")
    V = np.array(verts)
    if meta:
        gw, gh = int(meta["grid_w"]), int(meta["grid_h"])
        front_z = float(meta["front_z"]) if front_z is None else front_z
        eta = float(meta["eta"]) if eta is None else eta
        width, height = float(meta["width"]), float(meta["height"])
    else:
        xs = np.unique(np.round(V[:, 0], 9))
        ys = np.unique(np.round(V[:, 1], 9))
        gw, gh = len(xs), len(ys)
        width, height = xs[-1] - xs[0], ys[-1] - ys[0]
        if front_z is None or eta is None:
            raise FormatError(f"{path}: lens parameters missing; pass front_z and eta")
    if gw * gh != len(V):
        raise FormatError(f"{path}: {len(V)} vertices do not form a {gw}x{gh} grid")
    # order vertices row-major (y, then x) to match the grid layout
    order = np.lexsort((V[:, 0], V[:, 1]))
    heights = V[order, 2].reshape(gh, gw)
    tri = None
    if faces:
        inv = np.empty(len(V), dtype=np.int64)
        inv[order] = np.arange(len(V))
        tri = inv[np.array(faces, dtype=np.int64)]
    lens = LensSurface(gw, gh, float(front_z), float(width), float(height), heights, float(eta), tri)
    lens.validate()
    return lens


# source tables -------------------------------------------------------------------


def write_sources(path, sources: PointSourceSet):
    """``N B`` header line, then one ``x y q`` row per emitter."""
    with open(path, "w") as fh:
        fh.write(f"{sources.n} {float(sources.B)!r}\n")
        for x, y, q in zip(sources.x.tolist(), sources.y.tolist(), sources.q.tolist()):
            fh.write(f"{x!r} {y!r} {q!r}\n")


def read_sources(path) -> PointSourceSet:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
    if not rows or len(rows[0]) != 2:
        raise FormatError(f"{path}: missing 'N B' header")
    n, B = int(rows[0][0]), float(rows[0][1])
    body = rows[1:]
    if len(body) != n or any(len(r) != 3 for r in body):
        raise FormatError(f"{path}: expected {n} rows of 'x y q'")
    arr = np.array(body, dtype=float).reshape(n, 3)
    return PointSourceSet(arr[:, 0], arr[:, 1], arr[:, 2], B)


# sidecars ------------------------------------------------------------------------


def write_reference(path, img: GrayImage, params: dict):
    """16-bit PGM plus ``<path>.txt`` with ``key = value`` generator parameters."""
    write_pgm(path, img, bits=16)
    with open(str(path) + ".txt", "w") as fh:
        for k, v in params.items():
            fh.write(f"{k} = {v}\n")


def read_sidecar(path) -> dict:
    out = {}
    with open(str(path) + ".txt") as fh:
        for line in fh:
            m = re.match(r"\s*([^=#]+?)\s*=\s*(.*?)\s*$", line)
            if m:
                out[m.group(1)] = m.group(2)
    return out
