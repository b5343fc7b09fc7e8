"""Both stages on a small scene, start to finish.

1. Render references of a 1 cm square source through two bumpy lenses
   with the dense-grid generator.
2. Fit 16 point emitters to those references.
3. Design a lens for a disk target, once for a single point source and
   once for the fitted emitters, and compare both under the dense grid.

Runs in a few minutes on one core.  Outputs land in ``demo_out/``.

    python3 demos/two_stage.py [outdir]
"""

import sys
import time
from pathlib import Path

import numpy as np

from fluxcaustic import PointSourceSet, Reference, io, profile
from fluxcaustic.metrics import mae, psnr
from fluxcaustic.oracle import dense_grid_flux, dense_grid_render
from fluxcaustic.pipeline import bumpy_lens, design_lens, disk_target, fit_sources, gray_of

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# stage 1 at reduced size
src_cfg = profile("desk-source").replace(grid_w=17, grid_h=17, res_w=32, res_h=32, max_iters=200)
plane = src_cfg.plane()
refs = []
for seed in (1, 2):
    lens = bumpy_lens(src_cfg, seed=seed)
    refs.append(Reference(lens, plane, dense_grid_render(8, src_cfg.B, lens, plane)))
    io.write_pgm(out / f"reference{seed}.pgm", refs[-1].image)

t = time.time()
fit = fit_sources(refs, src_cfg)
print(f"source fit: {fit.solver.status} after {fit.solver.iterations} iterations ({time.time() - t:.0f} s)")
io.write_sources(out / "sources.txt", fit.sources)
for s in np.column_stack([fit.sources.x, fit.sources.y, fit.sources.q]):
    print("  x {:+.3f}  y {:+.3f}  q {:.3f}".format(*s))

# stage 2 at reduced size
cfg = profile("desk-design").replace(grid_w=33, grid_h=33, res_w=64, res_h=64, max_iters=60,
                                     coarse_levels="5,9,17")
target = disk_target(cfg.res_w, cfg.res_h)
io.write_pgm(out / "target.pgm", target)
point = PointSourceSet([0.0], [0.0], [1.0], cfg.B)
for name, sources in (("point", point), ("fitted", fit.sources)):
    t = time.time()
    res = design_lens(sources, target, cfg)
    gray = gray_of(dense_grid_flux(8, cfg.B, res.lens, cfg.plane()), target)
    io.write_obj(out / f"lens_{name}.obj", res.lens)
    io.write_pgm(out / f"caustic_{name}.pgm", gray)
    print(f"{name:>6} lens: dense-grid MAE {mae(gray, target):.4f}  PSNR {psnr(gray, target):.2f} dB"
          f"  ({time.time() - t:.0f} s)")
