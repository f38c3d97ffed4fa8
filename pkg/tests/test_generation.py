"""Unit tests for composing generated sketches from denoised sequences."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

import sketchDiffusion as sd


def _latents(d_latent, seed = 0):
    rng = np.random.default_rng(seed)
    counts = np.array([2, 3, 1])
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.1, 0.5, (6, 2))])
    return sd.LatentDataset(rng.normal(size = (6, d_latent)), boxes, counts, np.full(3, -1))


@pytest.fixture
def checkpoints(toy_sketches, vector_config, denoiser_config, toy_schedule):
    encoder = sd.train_autoencoder(sd.build_stroke_dataset(toy_sketches[:2], vector_config), vector_config, steps = 0)
    denoiser = sd.train_diffusion(_latents(4), toy_schedule, denoiser_config, steps = 0)
    return encoder, denoiser


@pytest.fixture
def generator(checkpoints):
    return sd.Generator(*checkpoints)


def _sequence(visibility, seed = 1):
    rng = np.random.default_rng(seed)
    rows = np.zeros((len(visibility), 9))
    rows[:, :4] = rng.normal(size = (len(visibility), 4))
    rows[:, 4:8] = [0.5, 0.5, 0.4, 0.3]
    rows[:, 8] = visibility
    return rows


def test_compose_keeps_visible_rows(generator):
    # the split head is the identity at initialization
    sketch = sd.compose(generator, _sequence([0.05, -0.3, 0.0, 0.2]), {"seed": 7})
    assert sketch.stroke_count == 2
    assert sketch.provenance == {"seed": 7}
    assert all(s.shape == (8, 2) for s in sketch.strokes)
    decoded = sd.decode_strokes(generator.encoder, _sequence([0.05, -0.3, 0.0, 0.2])[[0, 3], :4])
    expected = sd.denormalize_stroke(np.clip(decoded[0], -0.5, 1.5), sd.BBox(0.5, 0.5, 0.4, 0.3))
    assert np.allclose(sketch.strokes[0], expected, atol = 1e-12)


def test_compose_without_visible_rows(generator):
    sketch = sd.compose(generator, _sequence([-0.1, 0.0, -0.2, -0.05]))
    assert sketch.stroke_count == 0
    svg = sd.export_svg(sketch.strokes)
    root = ET.fromstring(svg)
    assert not [e for e in root.iter() if e.tag.split("}")[-1] == "path"]


def test_sanitize_box():
    assert tuple(sd.sanitize_box([0.5, 0.5, 0.4, 0.3])) == pytest.approx((0.5, 0.5, 0.4, 0.3))
    assert tuple(sd.sanitize_box([-0.2, 1.3, -1.0, 2.0])) == (0.0, 1.0, 1e-4, 1.0)


def test_incompatible_checkpoints(checkpoints, denoiser_config, toy_schedule):
    cfg = sd.DenoiserConfig(**dict(vars(denoiser_config), d_latent = 3))
    other = sd.train_diffusion(_latents(3), toy_schedule, cfg, steps = 0)
    with pytest.raises(sd.CompatibilityError):
        sd.Generator(checkpoints[0], other)
    assert issubclass(sd.CompatibilityError, sd.UsageError)


def test_generate_is_deterministic_and_bounded(generator):
    first = sd.generate(generator, seed = 3)
    second = sd.generate(generator, seed = 3)
    assert first.stroke_count == second.stroke_count
    assert all(np.array_equal(a, b) for a, b in zip(first.strokes, second.strokes))
    assert first.provenance["seed"] == 3 and first.provenance["encoder"] == generator.ids["encoder"]
    assert first.stroke_count <= 4
    for stroke in first.strokes:
        assert np.all(np.abs(stroke) <= 2.0)


def test_snapshot_at_last_step_matches_generate(generator):
    final = sd.generate(generator, seed = 5)
    snapshots = sd.snapshot_trajectory(generator, 5, [generator.schedule.T, 25, 1])
    assert [s.provenance["t"] for s in snapshots] == [generator.schedule.T, 25, 1]
    assert snapshots[-1].stroke_count == final.stroke_count
    assert all(np.array_equal(a, b) for a, b in zip(snapshots[-1].strokes, final.strokes))


def test_interpolation(generator):
    rng = np.random.default_rng(2)
    z_a, z_b = rng.normal(size = 4), rng.normal(size = 4)
    strokes = sd.interpolate_strokes(generator, z_a, z_b, 5)
    assert len(strokes) == 5
    ends = sd.decode_strokes(generator.encoder, np.stack([z_a, z_b]))
    assert np.allclose(strokes[0], ends[0], atol = 1e-12)
    assert np.allclose(strokes[-1], ends[1], atol = 1e-12)
    same = sd.interpolate_strokes(generator.encoder, z_a, z_a, 3)
    assert all(np.allclose(s, same[0], atol = 1e-12) for s in same)
    with pytest.raises(sd.UsageError):
        sd.interpolate_strokes(generator, z_a, z_b, 1)


def test_generation_manifest(generator):
    sketches = [sd.generate(generator, seed = seed) for seed in (0, 1)]
    manifest = sd.generation_manifest(sketches)
    assert list(manifest.columns) == ["seed", "stroke_count", "cond", "label"]
    assert list(manifest["seed"]) == [0, 1]
    assert list(manifest["stroke_count"]) == [s.stroke_count for s in sketches]
