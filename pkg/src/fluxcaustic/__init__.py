"""Differentiable flux-transport caustic design for extended light sources."""

from .config import RunConfig, load_config, profile
from .fluxrender import FluxImage, GrayImage, flux_to_gray, gray_to_flux, render_flux, render_flux_with_grads
from .geometry import ImagePlane, LensSurface, Vec3, build_grid_lens
from .objectives import LensDesignProblem, Reference, SourceFitProblem
from .solver import SolverConfig, lbfgs
from .sourcemodel import PointSourceSet, init_sources

__all__ = [
    "FluxImage", "GrayImage", "ImagePlane", "LensDesignProblem", "LensSurface", "PointSourceSet",
    "Reference", "RunConfig", "SolverConfig", "SourceFitProblem", "Vec3", "build_grid_lens",
    "flux_to_gray", "gray_to_flux", "init_sources", "lbfgs", "load_config", "profile",
    "render_flux", "render_flux_with_grads",
]

__version__ = "0.1.0"
