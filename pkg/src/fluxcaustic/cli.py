"""Command-line entry point.

Exit codes: 0 success, 1 bad input, 2 optimizer stopped without converging.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, load_config, profile
from .fluxrender import flux_to_gray, render_flux
from .geometry import ConfigurationError
from .metrics import error_map, format_psnr, mae, psnr
from .objectives import Reference
from .oracle import dense_grid_flux
from .pipeline import design_lens, fit_sources, gray_of
from .solver import write_trace_csv

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("fluxcaustic")


class InputError(Exception):
    pass


def _config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = profile(args.profile).validate()
    if getattr(args, "threads", None):
        cfg = cfg.replace(threads=args.threads)
    return cfg


def _outdir(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    return out


def _check_shape(img, cfg: RunConfig, what: str):
    if img.shape != (cfg.res_h, cfg.res_w):
        raise InputError(f"{what} is {img.shape[1]}x{img.shape[0]} but the config expects {cfg.res_w}x{cfg.res_h}")


def _write_pair_outputs(out: Path, stem: str, flux, target):
    gray = gray_of(flux, target)
    io.write_pgm(out / f"{stem}_render.pgm", gray)
    io.write_pfm(out / f"{stem}_flux.pfm", flux)
    io.write_pgm(out / f"{stem}_error.pgm", error_map(gray, target))
    return gray


def cmd_fit_source(args) -> int:
    cfg = _config(args)
    if not args.reference:
        raise InputError("fit-source needs at least one --reference LENS.obj IMAGE.pgm")
    if args.n_sources:
        cfg = cfg.replace(n_sources=args.n_sources).validate()
    out = _outdir(args, cfg)
    plane = cfg.plane()
    refs = []
    for lens_path, img_path in args.reference:
        lens = io.read_obj(lens_path, cfg.front_z, cfg.eta)
        img = io.read_pgm(img_path)
        _check_shape(img, cfg, img_path)
        refs.append(Reference(lens, plane, img))
    fit = fit_sources(refs, cfg)
    io.write_sources(out / "sources.txt", fit.sources)
    write_trace_csv(fit.solver.trace, out / "trace.csv")
    lines = []
    for m, ref in enumerate(refs):
        flux = render_flux(fit.sources.arrays(), ref.lens, plane, cfg.chunk_sources, cfg.threads)
        gray = _write_pair_outputs(out, f"ref{m}", flux, ref.image)
        lines.append(f"ref{m}: MAE {mae(gray, ref.image):.6g} PSNR {format_psnr(psnr(gray, ref.image))}")
    _report(out, fit.solver, lines + [f"E_flux per reference: {fit.problem.last_terms['E_flux']}"])
    return EXIT_OK if fit.solver.converged else EXIT_NOT_CONVERGED


def cmd_design_lens(args) -> int:
    cfg = _config(args)
    sources = io.read_sources(args.sources)
    target = io.read_pgm(args.target)
    _check_shape(target, cfg, args.target)
    out = _outdir(args, cfg)
    lens0 = io.read_obj(args.initial_lens, cfg.front_z, cfg.eta) if args.initial_lens else None
    res = design_lens(sources, target, cfg, lens0)
    io.write_obj(out / "lens.obj", res.lens)
    write_trace_csv(res.solver.trace, out / "trace.csv")
    gray = _write_pair_outputs(out, "design", res.flux, target)
    lines = [f"MAE {mae(gray, target):.6g} PSNR {format_psnr(psnr(gray, target))}",
             f"terms {res.problem.last_terms}",
             f"total internal reflection pairs {res.flux.tir_count}"]
    if res.flux.tir_count > 0.01 * res.lens.n_triangles * sources.n:
        lines.append("WARNING: more than 1% of (source, triangle) pairs hit total internal reflection")
    _report(out, res.solver, lines)
    return EXIT_OK if res.solver.converged else EXIT_NOT_CONVERGED


def _report(out: Path, result, lines):
    text = [f"status {result.status}", f"iterations {result.iterations}", f"evaluations {result.n_evals}",
            f"final E {result.f!r}", f"final grad norm {float(np.linalg.norm(result.grad))!r}"] + lines
    (out / "report.txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))


def _render_common(args, flux, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    io.write_pfm(out / "flux.pfm", flux)
    if args.target:
        target = io.read_pgm(args.target)
        _check_shape(target, cfg, args.target)
        gray = gray_of(flux, target)
    else:
        # brightest pixel at full white
        gray = flux_to_gray(flux, float(flux.data.sum() / flux.data.max()))
    io.write_pgm(out / "render.pgm", gray)
    print(f"flux total {flux.total!r} escaped {flux.escaped!r} tir pairs {flux.tir_count}")
    return gray


def cmd_render(args) -> int:
    cfg = _config(args)
    sources = io.read_sources(args.sources)
    lens = io.read_obj(args.lens, cfg.front_z, cfg.eta)
    flux = render_flux(sources.arrays(), lens, cfg.plane(), cfg.chunk_sources, cfg.threads)
    _render_common(args, flux, cfg)
    return EXIT_OK


def cmd_oracle_render(args) -> int:
    cfg = _config(args)
    lens = io.read_obj(args.lens, cfg.front_z, cfg.eta)
    flux = dense_grid_flux(args.grid_n, args.B or cfg.B, lens, cfg.plane(), args.profile_shape, cfg.threads)
    gray = _render_common(args, flux, cfg)
    if args.reference:
        io.write_reference(Path(args.out) / "reference.pgm", gray, {
            "generator": "dense-grid", "grid_n": args.grid_n, "B": args.B or cfg.B,
            "profile": args.profile_shape, "lens": args.lens,
        })
    return EXIT_OK


def cmd_metrics(args) -> int:
    a, b = io.read_pgm(args.image), io.read_pgm(args.target)
    if a.shape != b.shape:
        raise InputError(f"image sizes differ: {a.shape} vs {b.shape}")
    bits = 8 if args.quantized else None
    print(f"MAE {mae(a, b, quantized_bits=bits):.10g}")
    print(f"PSNR {format_psnr(psnr(a, b, quantized_bits=bits))}")
    return EXIT_OK


def cmd_errormap(args) -> int:
    a, b = io.read_pgm(args.image), io.read_pgm(args.target)
    if a.shape != b.shape:
        raise InputError(f"image sizes differ: {a.shape} vs {b.shape}")
    emap = error_map(a, b)
    io.write_pgm(args.out, emap, bits=16 if args.bits16 else 8)
    summary = (f"MAE {mae(a, b):.10g}\nPSNR {format_psnr(psnr(a, b))}\n"
               f"max_error {float(emap.data.max()):.10g}\n")
    Path(str(args.out) + ".txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fluxcaustic", description="Caustic design for extended light sources.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--profile", default="desk-source", help="defaults when no --config is given")
        sp.add_argument("--threads", type=int)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("fit-source", help="fit point emitters to reference caustics")
    common(sp)
    sp.add_argument("--reference", nargs=2, action="append", metavar=("LENS_OBJ", "IMAGE_PGM"))
    sp.add_argument("--n-sources", type=int)
    sp.set_defaults(func=cmd_fit_source)

    sp = sub.add_parser("design-lens", help="optimize a lens back surface for a target image")
    common(sp)
    sp.add_argument("--sources", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--initial-lens")
    sp.set_defaults(func=cmd_design_lens)

    sp = sub.add_parser("render", help="render a source table through a lens")
    common(sp)
    sp.add_argument("--sources", required=True)
    sp.add_argument("--lens", required=True)
    sp.add_argument("--target", help="match brightness to this image")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("oracle-render", help="render the dense-grid extended source")
    common(sp)
    sp.add_argument("--lens", required=True)
    sp.add_argument("--grid-n", type=int, default=32)
    sp.add_argument("--B", type=float)
    sp.add_argument("--profile-shape", default="uniform", choices=["uniform", "center"])
    sp.add_argument("--target", help="match brightness to this image")
    sp.add_argument("--reference", action="store_true", help="also write a 16-bit reference with sidecar")
    sp.set_defaults(func=cmd_oracle_render)

    sp = sub.add_parser("metrics", help="MAE and PSNR between two images")
    sp.add_argument("image")
    sp.add_argument("target")
    sp.add_argument("--quantized", action="store_true", help="compare 8-bit quantized values")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("errormap", help="absolute-error image")
    sp.add_argument("image")
    sp.add_argument("target")
    sp.add_argument("--out", required=True)
    sp.add_argument("--bits16", action="store_true")
    sp.set_defaults(func=cmd_errormap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigurationError, io.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
