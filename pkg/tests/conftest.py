"""Shared fixtures: the toy QuickDraw file and tiny model configurations."""

import os

import pytest

import sketchDiffusion as sd

INPUT_DIR = os.path.join(os.path.dirname(__file__), "input")
TOY_NDJSON = os.path.join(INPUT_DIR, "toy_quickdraw.ndjson")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training or end-to-end runs")


@pytest.fixture
def toy_path():
    return TOY_NDJSON


@pytest.fixture
def toy_sketches():
    """The 64 fixture sketches, normalized to [-1, 1]."""
    with open(TOY_NDJSON, "rb") as handle:
        parsed = sd.parse_quickdraw_ndjson(handle.read())
    return [sd.normalize_sketch(s) for s in parsed]


@pytest.fixture
def vector_config():
    """Autoencoder without the image branch."""
    return sd.EncoderConfig(n_points = 8, d_h = 8, n_layers = 1, n_heads = 2, d_f = 4, d_img = 4, gamma = 0.0)


@pytest.fixture
def image_config():
    """Autoencoder with a minimal image branch at R = 64."""
    return sd.EncoderConfig(n_points = 8, d_h = 8, n_layers = 1, n_heads = 2, d_f = 4, d_img = 4, resolution = 64,
                            channels = (2, 2, 2, 2, 2, 2), percep_channels = (2, 2, 2))


@pytest.fixture
def denoiser_config():
    return sd.DenoiserConfig(n_layers = 1, n_heads = 2, d_model = 8, max_strokes = 4, d_latent = 4, t_embed_dim = 8,
                             split_hidden = 8)


@pytest.fixture
def toy_schedule():
    return sd.build_schedule(50, 1e-3, 0.2)


@pytest.fixture
def cli_config(tmp_path):
    """A toy-scale run configuration file; returns its path and work directory."""
    work_dir = tmp_path / "work"
    lines = ["n_points=16", "d_h=8", "n_layers=1", "n_heads=2", "d_f=4", "d_img=4", "channels=2,2,2,2,2,2",
             "diffusion_layers=1", "diffusion_heads=2", "d_model=8", "t_embed_dim=8", "timesteps=20",
             "beta_start=0.001", "beta_end=0.3", "encoder_steps=2", "diffusion_steps=2", "batch_size=4",
             "log_every=0", "knn_k=5", "max_strokes=8", "work_dir={}".format(work_dir)]
    path = tmp_path / "toy.cfg"
    path.write_text("\n".join(lines) + "\n")
    return str(path), str(work_dir)
