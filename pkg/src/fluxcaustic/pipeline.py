"""End-to-end drivers for the two stages plus synthetic scene builders."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .fluxrender import FluxImage, GrayImage, flux_to_gray, gamma, render_flux
from .geometry import ConfigurationError, LensSurface
from .objectives import LensDesignProblem, Reference, SourceFitProblem
from .solver import SolverResult, TraceRow, lbfgs
from .sourcemodel import PointSourceSet, init_sources

log = logging.getLogger(__name__)


# synthetic scenes --------------------------------------------------------------


def bumpy_lens(cfg: RunConfig, n_bumps: int = 6, amplitude: float = 0.15, width: float = 1.5,
               seed: int = 0) -> LensSurface:
    """Flat lens plus a few random Gaussian bumps and dents on the back face."""
    rng = np.random.default_rng(seed)
    lens = cfg.flat_lens()
    x, y = lens.xy[:, 0], lens.xy[:, 1]
    z = lens.z.copy()
    for _ in range(n_bumps):
        cx = rng.uniform(-0.35, 0.35) * lens.width
        cy = rng.uniform(-0.35, 0.35) * lens.height
        a = amplitude * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
        s = width * rng.uniform(0.6, 1.4)
        z += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
    z = np.maximum(z, lens.front_z + 0.1 * cfg.thickness)
    return lens.with_heights(z)


def disk_target(res_w: int, res_h: int, radius: float = 0.3, center=(0.0, 0.0), soft: float = 0.0) -> GrayImage:
    """Binary disk (radius as a fraction of the image width) on a black background."""
    u = (np.arange(res_w) + 0.5) / res_w - 0.5
    v = (np.arange(res_h) + 0.5) / res_h - 0.5
    U, V = np.meshgrid(u, v, indexing="xy")
    r = np.hypot(U - center[0], V - center[1])
    if soft > 0:
        return GrayImage(np.clip((radius - r) / soft + 0.5, 0.0, 1.0))
    return GrayImage((r <= radius).astype(float))


def ring_target(res_w: int, res_h: int, r_in: float = 0.15, r_out: float = 0.3) -> GrayImage:
    u = (np.arange(res_w) + 0.5) / res_w - 0.5
    v = (np.arange(res_h) + 0.5) / res_h - 0.5
    U, V = np.meshgrid(u, v, indexing="xy")
    r = np.hypot(U, V)
    return GrayImage(((r >= r_in) & (r <= r_out)).astype(float))


def gray_of(flux: FluxImage, target: GrayImage, exponent: float = 2.2) -> GrayImage:
    """Rendered flux as gray levels, brightness-matched to ``target``."""
    return flux_to_gray(flux, float(gamma(target.data, exponent).sum()), exponent)


# stage 1 -----------------------------------------------------------------------


@dataclass
class FitResult:
    sources: PointSourceSet
    solver: SolverResult
    problem: SourceFitProblem
    initial: PointSourceSet


def fit_sources(references, cfg: RunConfig, init: PointSourceSet | None = None, callback=None) -> FitResult:
    """Fit ``cfg.n_sources`` emitters to the reference caustics."""
    if not references:
        raise ConfigurationError("source fitting needs at least one reference")
    for ref in references:
        if not isinstance(ref, Reference):
            raise TypeError("references must be Reference objects")
    start = init or init_sources(cfg.n_sources, cfg.B, "quadrant" if cfg.symmetric else cfg.init)
    problem = SourceFitProblem(references, cfg.B, cfg.source_weights(), cfg.contraction, cfg.symmetric,
                               cfg.gamma, cfg.chunk_sources, cfg.threads)
    x0 = problem.initial_vector(start)
    res = lbfgs(problem, x0, cfg.solver(), callback)
    fitted = problem.sources(res.x)
    problem(res.x)  # refresh per-term diagnostics at the returned iterate
    if cfg.contraction or np.all(fitted.q >= 0):
        fitted = fitted.normalized()
    return FitResult(fitted, res, problem, start)


# stage 2 -----------------------------------------------------------------------


@dataclass
class DesignResult:
    lens: LensSurface
    solver: SolverResult
    problem: LensDesignProblem
    flux: FluxImage


def interpolation_matrix(n_fine: int, n_coarse: int) -> np.ndarray:
    """Piecewise-linear prolongation from ``n_coarse`` to ``n_fine`` equispaced nodes."""
    xf = np.linspace(0.0, 1.0, n_fine)
    xc = np.linspace(0.0, 1.0, n_coarse)
    eye = np.eye(n_coarse)
    return np.column_stack([np.interp(xf, xc, eye[i]) for i in range(n_coarse)])


class CoarseHeights:
    """A lens-design problem seen through a bilinear coarse-grid height offset.

    ``z = z0 + Py @ C @ Px.T`` with ``C`` of shape ``(n, n)`` (clipped to the
    lens grid); gradients are pulled back with the transposed prolongation.
    """

    def __init__(self, problem: LensDesignProblem, n: int):
        lens = problem.lens
        self.problem = problem
        self.Px = interpolation_matrix(lens.grid_w, min(n, lens.grid_w))
        self.Py = interpolation_matrix(lens.grid_h, min(n, lens.grid_h))
        self.z0 = lens.z.copy()
        self.shape = (self.Py.shape[1], self.Px.shape[1])

    def heights(self, c) -> np.ndarray:
        return self.z0 + (self.Py @ np.reshape(c, self.shape) @ self.Px.T).ravel()

    def __call__(self, c):
        p = self.problem
        z = self.heights(c)
        E, g = p(z[p.free])
        full = np.zeros(p.lens.n_vertices)
        full[p.free] = g
        full = full.reshape(p.lens.grid_h, p.lens.grid_w)
        return E, (self.Py.T @ full @ self.Px).ravel()


def _concat_results(results) -> SolverResult:
    last = results[-1]
    trace, offset = list(results[0].trace), results[0].iterations
    for r in results[1:]:
        # each level restarts at the previous level's final iterate; drop the duplicate row
        trace += [TraceRow(row.iter + offset, row.E, row.grad_norm, row.step) for row in r.trace[1:]]
        offset += r.iterations
    return SolverResult(last.x, last.f, last.grad, offset, last.status, trace,
                        sum(r.n_evals for r in results), sum(r.rejected_pairs for r in results))


def design_lens(sources: PointSourceSet, target: GrayImage, cfg: RunConfig, lens0: LensSurface | None = None,
                callback=None) -> DesignResult:
    """Optimize the back-face heights so the caustic of ``sources`` matches ``target``.

    With ``cfg.coarse_levels`` the heights are first optimized through
    coarse bilinear grids of the listed sizes, each level starting from the
    previous result, before the final run over every vertex.
    """
    plane = cfg.plane()
    lens = lens0 if lens0 is not None else cfg.flat_lens()
    solver_cfg = cfg.solver()
    results = []
    for n in cfg.levels():
        problem = LensDesignProblem(sources, lens, plane, target, cfg.design_weights(), cfg.gamma,
                                    cfg.chunk_sources, cfg.threads, cfg.pin_boundary)
        coarse = CoarseHeights(problem, n)
        res = lbfgs(coarse, np.zeros(coarse.shape[0] * coarse.shape[1]), solver_cfg, callback)
        lens = lens.with_heights(coarse.heights(res.x))
        log.info("coarse level %d: %s after %d iterations, E=%g", n, res.status, res.iterations, res.f)
        results.append(res)
    problem = LensDesignProblem(sources, lens, plane, target, cfg.design_weights(), cfg.gamma,
                                cfg.chunk_sources, cfg.threads, cfg.pin_boundary)
    res = lbfgs(problem, problem.initial_vector(), solver_cfg, callback)
    results.append(res)
    out = problem.lens_at(res.x)
    problem(res.x)
    res = _concat_results(results) if len(results) > 1 else res
    flux = render_flux(sources.arrays(), out, plane, cfg.chunk_sources, cfg.threads)
    if flux.tir_count > 0.01 * out.n_triangles * sources.n:
        log.warning("total internal reflection on %d (source, triangle) pairs", flux.tir_count)
    return DesignResult(out, res, problem, flux)
