import subprocess
import sys

import numpy as np
import pytest

from fluxcaustic import io
from fluxcaustic.cli import main
from fluxcaustic.config import load_config, profile
from fluxcaustic.fluxrender import GrayImage
from fluxcaustic.pipeline import bumpy_lens, disk_target
from fluxcaustic.sourcemodel import PointSourceSet

TINY = profile("desk-source").replace(grid_w=9, grid_h=9, res_w=16, res_h=16, n_sources=4, max_iters=15)


@pytest.fixture
def tiny(tmp_path):
    cfg_path = tmp_path / "tiny.ini"
    TINY.save(cfg_path)
    lens = bumpy_lens(TINY, amplitude=0.15, seed=1)
    io.write_obj(tmp_path / "lens.obj", lens)
    io.write_sources(tmp_path / "src.txt", PointSourceSet([0.0], [0.0], [1.0], 1.0))
    return tmp_path, cfg_path


def run(*args):
    return main([str(a) for a in args])


def test_metrics_and_errormap(tmp_path, capsys):
    a = tmp_path / "a.pgm"
    b = tmp_path / "b.pgm"
    io.write_pgm(a, GrayImage(np.full((4, 4), 0.2)))
    io.write_pgm(b, GrayImage(np.full((4, 4), 0.2)))
    assert run("metrics", a, b) == 0
    assert "PSNR inf" in capsys.readouterr().out
    assert run("errormap", a, b, "--out", tmp_path / "e.pgm") == 0
    assert io.read_pgm(tmp_path / "e.pgm").data.max() == 0
    assert (tmp_path / "e.pgm.txt").read_text().startswith("MAE 0")
    io.write_pgm(b, GrayImage(np.zeros((4, 5))))
    assert run("metrics", a, b) == 1
    assert run("errormap", a, b, "--out", tmp_path / "e.pgm") == 1


def test_input_errors(tiny, tmp_path):
    path, cfg = tiny
    assert run("fit-source", "--config", cfg, "--out", tmp_path / "o") == 1
    assert run("render", "--config", cfg, "--sources", path / "missing.txt", "--lens", path / "lens.obj",
               "--out", tmp_path / "o") == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[scene]\neta = 0.5\n")
    assert run("render", "--config", bad, "--sources", path / "src.txt", "--lens", path / "lens.obj",
               "--out", tmp_path / "o") == 1
    assert run("no-such-command") == 1


def test_oracle_render_then_fit(tiny, tmp_path):
    path, cfg = tiny
    ref_dir = tmp_path / "ref"
    assert run("oracle-render", "--config", cfg, "--lens", path / "lens.obj", "--grid-n", 4, "--B", 1.0,
               "--reference", "--out", ref_dir) == 0
    assert io.read_sidecar(ref_dir / "reference.pgm")["grid_n"] == "4"
    out = tmp_path / "fit"
    code = run("fit-source", "--config", cfg, "--reference", path / "lens.obj", ref_dir / "reference.pgm",
               "--out", out)
    assert code in (0, 2)
    for name in ("sources.txt", "trace.csv", "config.ini", "report.txt", "ref0_render.pgm", "ref0_error.pgm"):
        assert (out / name).exists()
    assert load_config(out / "config.ini") == TINY
    assert io.read_sources(out / "sources.txt").n == 4
    # wrong reference size
    io.write_pgm(tmp_path / "small.pgm", GrayImage(np.zeros((8, 8))))
    assert run("fit-source", "--config", cfg, "--reference", path / "lens.obj", tmp_path / "small.pgm",
               "--out", out) == 1


def test_design_fixed_point(tiny, tmp_path):
    path, _ = tiny
    # a receiving plane that catches the whole footprint, so nothing is out of bounds;
    # the 8-bit target leaves a small residual gradient, hence the looser tolerance
    cfg = tmp_path / "wide.ini"
    TINY.replace(image_width=16.0, image_height=16.0, grad_tol=1e-2).save(cfg)
    flat = TINY.flat_lens()
    io.write_obj(tmp_path / "flat.obj", flat)
    assert run("render", "--config", cfg, "--sources", path / "src.txt", "--lens", tmp_path / "flat.obj",
               "--out", tmp_path / "r") == 0
    target = tmp_path / "r" / "render.pgm"
    out = tmp_path / "d"
    code = run("design-lens", "--config", cfg, "--sources", path / "src.txt", "--target", target,
               "--initial-lens", tmp_path / "flat.obj", "--out", out)
    report = (out / "report.txt").read_text()
    assert code == 0, report
    assert float(report.split("final E ")[1].split()[0]) < 1e-3
    assert io.read_obj(out / "lens.obj").n_vertices == 81


def test_design_rejects_mismatched_target(tiny, tmp_path):
    path, cfg = tiny
    io.write_pgm(tmp_path / "t.pgm", disk_target(8, 8))
    assert run("design-lens", "--config", cfg, "--sources", path / "src.txt", "--target", tmp_path / "t.pgm",
               "--out", tmp_path / "d") == 1


def test_module_entry_point(tmp_path):
    a = tmp_path / "a.pgm"
    io.write_pgm(a, GrayImage(np.full((2, 2), 0.5)))
    proc = subprocess.run([sys.executable, "-m", "fluxcaustic.cli", "metrics", str(a), str(a)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "MAE 0" in proc.stdout
