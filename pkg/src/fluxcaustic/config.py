"""Run configuration: INI files with sections, plus named default profiles."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, fields

from .geometry import ConfigurationError, ImagePlane, LensSurface, build_grid_lens
from .solver import SolverConfig

# field name -> INI section
_SECTIONS = {
    "scene": ["B", "front_z", "plane_z", "lens_width", "lens_height", "grid_w", "grid_h", "eta", "thickness"],
    "image": ["image_width", "image_height", "res_w", "res_h", "gamma"],
    "source": ["n_sources", "init", "contraction", "symmetric"],
    "weights": ["lambda1", "lambda2", "lambda3", "mu1", "mu2", "mu3", "mu4"],
    "solver": ["history", "c1", "c2", "max_iters", "grad_tol", "max_line_search", "max_seconds",
               "threads", "chunk_sources", "deterministic"],
    "design": ["pin_boundary", "coarse_levels"],
}


@dataclass
class RunConfig:
    """Every setting of a run.  Defaults are the full-size source-fitting scene."""

    profile: str = "paper-source"
    # scene (cm)
    B: float = 1.0
    front_z: float = 120.0
    plane_z: float = 150.0
    lens_width: float = 10.0
    lens_height: float = 10.0
    grid_w: int = 641
    grid_h: int = 641
    eta: float = 1.49
    thickness: float = 1.0
    # receiving plane
    image_width: float = 9.9
    image_height: float = 9.9
    res_w: int = 640
    res_h: int = 640
    gamma: float = 2.2
    # source model
    n_sources: int = 64
    init: str = "grid"
    contraction: bool = True
    symmetric: bool = False
    # weights
    lambda1: float = 1.0
    lambda2: float = 1e3
    lambda3: float = 1e3
    mu1: float = 1.0
    mu2: float = 0.1
    mu3: float = 1.0
    mu4: float = 1e-3
    # solver
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_iters: int = 300_000
    grad_tol: float = 1e-2
    max_line_search: int = 30
    max_seconds: float | None = None
    threads: int = 1
    chunk_sources: int = 8
    deterministic: bool = True
    # lens design
    pin_boundary: bool = False
    # comma-separated coarse height-grid sizes optimized before the full grid
    coarse_levels: str = ""

    def validate(self) -> "RunConfig":
        for name in ("B", "lens_width", "lens_height", "image_width", "image_height", "thickness", "gamma"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 < self.front_z < self.front_z + self.thickness < self.plane_z:
            raise ConfigurationError("need 0 < front_z < front_z + thickness < plane_z")
        if not self.eta > 1:
            raise ConfigurationError("eta must exceed 1")
        if self.grid_w < 2 or self.grid_h < 2 or self.res_w < 1 or self.res_h < 1:
            raise ConfigurationError("grid and image resolutions must be positive")
        if self.n_sources < 1:
            raise ConfigurationError("n_sources must be >= 1")
        if min(self.lambda1, self.lambda2, self.lambda3, self.mu1, self.mu2, self.mu3, self.mu4) < 0:
            raise ConfigurationError("weights must be nonnegative")
        if self.threads < 1 or self.chunk_sources < 1:
            raise ConfigurationError("threads and chunk_sources must be >= 1")
        self.solver()
        self.levels()
        return self

    # derived objects ---------------------------------------------------------
    def plane(self) -> ImagePlane:
        return ImagePlane(self.plane_z, self.image_width, self.image_height, self.res_w, self.res_h)

    def flat_lens(self) -> LensSurface:
        return build_grid_lens(self.grid_w, self.grid_h, (self.lens_width, self.lens_height),
                               self.front_z, self.front_z + self.thickness, self.eta)

    def solver(self) -> SolverConfig:
        try:
            return SolverConfig(self.history, self.c1, self.c2, self.max_iters, self.grad_tol,
                                self.max_line_search, self.max_seconds)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    def levels(self) -> list[int]:
        text = self.coarse_levels.strip()
        try:
            sizes = [int(t) for t in text.split(",")] if text else []
        except ValueError as exc:
            raise ConfigurationError(f"bad coarse_levels {self.coarse_levels!r}") from exc
        if any(n < 2 for n in sizes):
            raise ConfigurationError("coarse levels need at least 2 nodes per side")
        return sizes

    def source_weights(self):
        return (self.lambda1, self.lambda2, self.lambda3)

    def design_weights(self):
        return (self.mu1, self.mu2, self.mu3, self.mu4)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # INI ---------------------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"profile": self.profile}
        for sec, names in _SECTIONS.items():
            cp[sec] = {n: _fmt(getattr(self, n)) for n in names}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(field, text: str):
    t = text.strip()
    typ = field.type
    if "None" in str(typ) and t.lower() in ("none", ""):
        return None
    try:
        if "bool" in str(typ):
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if "int" in str(typ):
            return int(float(t)) if float(t).is_integer() else int(t)
        if "float" in str(typ):
            return float(t)
        return t
    except ValueError as exc:
        raise ConfigurationError(f"bad value {text!r} for {field.name}") from exc


PROFILES = {
    "paper-source": {},
    "paper-design": dict(B=0.1, plane_z=240.0, image_width=20.0, image_height=20.0, grad_tol=1e-4),
    # laptop-sized versions of the two stages
    "desk-source": dict(grid_w=33, grid_h=33, res_w=64, res_h=64, n_sources=16, grad_tol=1e-6, max_iters=400),
    "desk-design": dict(B=1.0, plane_z=240.0, image_width=20.0, image_height=20.0, grid_w=65, grid_h=65,
                        res_w=128, res_h=128, n_sources=16, grad_tol=1e-4, max_iters=100,
                        coarse_levels="5,9,17,33"),
}


def profile(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return RunConfig(profile=name, **PROFILES[name])


def load_config(path=None, text: str | None = None) -> RunConfig:
    """Read an INI config; keys not given fall back to the named profile."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        if text is not None:
            cp.read_string(text)
        else:
            with open(path) as fh:
                cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from exc
    name = cp.get("run", "profile", fallback="paper-source")
    cfg = profile(name)
    by_name = {f.name: f for f in fields(RunConfig)}
    updates = {}
    for sec in cp.sections():
        if sec == "run":
            extra = set(cp[sec]) - {"profile"}
            if extra:
                raise ConfigurationError(f"unknown keys in [run]: {sorted(extra)}")
            continue
        if sec not in _SECTIONS:
            raise ConfigurationError(f"unknown section [{sec}]")
        for key, text_val in cp[sec].items():
            if key not in _SECTIONS[sec]:
                raise ConfigurationError(f"unknown key {key!r} in [{sec}]")
            updates[key] = _parse(by_name[key], text_val)
    return cfg.replace(**updates).validate()
