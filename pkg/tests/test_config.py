import pytest

from fluxcaustic.config import PROFILES, RunConfig, load_config, profile
from fluxcaustic.geometry import ConfigurationError


def test_defaults_are_the_full_scene():
    cfg = RunConfig().validate()
    assert (cfg.B, cfg.front_z, cfg.plane_z, cfg.lens_width, cfg.grid_w, cfg.eta) == (1.0, 120.0, 150.0, 10.0, 641, 1.49)
    assert (cfg.res_w, cfg.image_width, cfg.history, cfg.c1, cfg.c2) == (640, 9.9, 10, 1e-4, 0.9)
    assert cfg.flat_lens().n_triangles == 819_200
    design = profile("paper-design")
    assert (design.B, design.plane_z, design.grad_tol, design.max_iters) == (0.1, 240.0, 1e-4, 300_000)


@pytest.mark.parametrize("name", sorted(PROFILES))
def test_ini_roundtrip(name):
    cfg = profile(name).validate()
    assert load_config(text=cfg.to_ini()) == cfg


def test_partial_file_falls_back_to_profile():
    cfg = load_config(text="[run]\nprofile = desk-source\n[scene]\nB = 2.0\n")
    assert cfg.B == 2.0 and cfg.grid_w == profile("desk-source").grid_w


@pytest.mark.parametrize("text", [
    "[scene]\nB = -1\n",
    "[scene]\nfront_z = 200\n",
    "[scene]\neta = 1.0\n",
    "[scene]\nnonsense = 1\n",
    "[other]\nB = 1\n",
    "[solver]\nc1 = 0.95\n",
    "[source]\ncontraction = maybe\n",
    "[design]\ncoarse_levels = 5,x\n",
    "[run]\nprofile = nope\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigurationError):
        load_config(text=text)


def test_levels():
    assert profile("desk-design").levels() == [5, 9, 17, 33]
    assert profile("paper-design").levels() == []
