"""Unit tests for the run configuration and the shared helpers."""

import numpy as np
import pytest

import sketchDiffusion as sd


def test_defaults_round_trip(tmp_path):
    cfg = sd.RunConfig()
    path = str(tmp_path / "run.cfg")
    cfg.write(path)
    assert sd.RunConfig.from_file(path) == cfg
    assert "channels=4,8,16,32,64,128" in cfg.to_text().splitlines()


def test_resolution_order(tmp_path, monkeypatch):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nd_f = 8\nstroke_norm=false\nchannels=2,2\n\nseed=3  # trailing comment\n")
    cfg = sd.RunConfig.resolve(str(path), {"seed": "5", "conditional": True})
    assert (cfg.d_f, cfg.stroke_norm, cfg.channels, cfg.seed, cfg.conditional) == (8, False, (2, 2), 5, True)
    monkeypatch.setenv(sd.CONFIG_ENV, str(path))
    assert sd.RunConfig.resolve().seed == 3
    monkeypatch.delenv(sd.CONFIG_ENV)
    assert sd.RunConfig.resolve() == sd.RunConfig()


def test_bad_config_values(tmp_path):
    with pytest.raises(sd.ConfigError, match = "bogus"):
        sd.config_from_values(sd.RunConfig, {"bogus": "1"})
    with pytest.raises(sd.ConfigError, match = "seed"):
        sd.config_from_values(sd.RunConfig, {"seed": "three"})
    with pytest.raises(sd.ConfigError, match = "line 1"):
        sd.parse_key_values("seed 3")
    with pytest.raises(sd.ConfigError):
        sd.RunConfig.from_file(str(tmp_path / "missing.cfg"))
    assert issubclass(sd.ConfigError, sd.UsageError)


def test_derived_configs():
    cfg = sd.RunConfig(d_f = 8, max_strokes = 6, knn_k = 3, metric_resolution = 32)
    encoder = cfg.encoder_config()
    denoiser = cfg.denoiser_config(n_classes = 2)
    metric = cfg.metric_config()
    assert encoder.d_f == denoiser.d_latent == 8
    assert (denoiser.max_strokes, denoiser.n_classes, denoiser.width) == (6, 2, 13)
    assert (metric.k, metric.resolution) == (3, 32)


def test_rng_streams_are_independent():
    a = sd.rng_stream(0, "init", "w").standard_normal(4)
    assert np.array_equal(a, sd.rng_stream(0, "init", "w").standard_normal(4))
    assert not np.array_equal(a, sd.rng_stream(0, "init", "b").standard_normal(4))
    assert not np.array_equal(a, sd.rng_stream(1, "init", "w").standard_normal(4))


def test_smooth():
    assert np.allclose(sd.smooth([1.0, 2.0, 3.0, 4.0], 2), [1.5, 2.5, 3.5])
    assert np.allclose(sd.smooth([1.0, 3.0], 10), [2.0])


def test_metric_and_denoiser_training_keys(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("metric_gamma=200\nmetric_threshold=0.25\nsplit_weight=0.5\nsplit_max_t=7\nshuffle_strokes=yes\n"
                    "max_strokes_percentile=99\n")
    cfg = sd.RunConfig.resolve(str(path))
    metric = cfg.metric_config()
    assert (metric.gamma, metric.render_gamma, metric.threshold) == (200.0, 200.0, 0.25)
    assert metric.extractor_id != sd.RunConfig().metric_config().extractor_id
    assert (cfg.split_weight, cfg.split_max_t, cfg.shuffle_strokes, cfg.max_strokes_percentile) == (0.5, 7, True, 99.0)
    assert sd.RunConfig().metric_config().gamma is None
