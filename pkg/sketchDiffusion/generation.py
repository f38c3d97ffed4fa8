import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd

from .geometry import IDENTITY_BOX, BBox, denormalize_stroke
from .latent_diffusion import load_denoiser, p_sample_loop, split_latent
from .stroke_autoencoder import decode_strokes, load_autoencoder
from .utilities import UsageError

pd.set_option("display.precision", 3)

"""
End-to-end composition of generated sketches: sample composite latents, split each row, keep the rows whose
visibility is strictly positive, decode their strokes and place them with their (sanitized) boxes.
"""

logger = logging.getLogger(__name__)

BOX_MIN = 1e-4
LOCAL_CLIP = (-0.5, 1.5)
SKETCH_CLIP = (-2.0, 2.0)


@dataclass
class GeneratedSketch:
    """Strokes in [-1, 1] sketch space and the provenance (seed, checkpoint ids, cond, timestep)."""
    strokes: List[np.ndarray] = field(default_factory = list)
    provenance: dict = field(default_factory = dict)

    @property
    def stroke_count(self):
        return len(self.strokes)


class Generator:
    """
    A loaded encoder / denoiser pair.

    Parameters
    ----------
    encoder_checkpoint: Checkpoint
        the trained stroke autoencoder
    diffusion_checkpoint: Checkpoint
        the trained denoiser
    """

    def __init__(self, encoder_checkpoint, diffusion_checkpoint):
        check_compatible(encoder_checkpoint, diffusion_checkpoint)
        self.encoder = load_autoencoder(encoder_checkpoint)
        self.denoiser, self.schedule = load_denoiser(diffusion_checkpoint)
        self.ids = {"encoder": encoder_checkpoint.checkpoint_id, "denoiser": diffusion_checkpoint.checkpoint_id}


def check_compatible(encoder_checkpoint, diffusion_checkpoint):
    """
    It rejects checkpoint pairs whose latent widths differ.
    """
    d_f, d_latent = encoder_checkpoint.config.d_f, diffusion_checkpoint.config.d_latent
    if d_f != d_latent:
        raise CompatibilityError("encoder d_f={} does not match denoiser d_latent={}".format(d_f, d_latent))


def sanitize_box(box):
    """
    Clamps w and h to [1e-4, 1] and the center to [0, 1].
    """
    x, y, w, h = (float(v) for v in box)
    return BBox(float(np.clip(x, 0.0, 1.0)), float(np.clip(y, 0.0, 1.0)),
                float(np.clip(w, BOX_MIN, 1.0)), float(np.clip(h, BOX_MIN, 1.0)))


def compose(generator, sequence, provenance = None):
    """
    The function turns one denoised sequence into a sketch. Rows are split by the shared head; only rows with v > 0
    are kept; their strokes are decoded (the auxiliary channel is ignored) and placed with their sanitized box.

    Parameters
    ----------
    generator: Generator
        the loaded models
    sequence: numpy.ndarray
        (N_s, d_f + 5) denoised rows
    provenance: dict
        stored on the result

    Returns
    -------
    sketch: GeneratedSketch
    """
    z, boxes, visibility = split_latent(generator.denoiser, sequence)
    keep = np.flatnonzero(visibility > 0)
    strokes = []
    if len(keep):
        decoded = np.clip(decode_strokes(generator.encoder, z[keep]), *LOCAL_CLIP)
        stroke_norm = generator.encoder.cfg.stroke_norm
        for local, box in zip(decoded, boxes[keep]):
            placed = denormalize_stroke(local, sanitize_box(box) if stroke_norm else IDENTITY_BOX)
            strokes.append(np.clip(placed, *SKETCH_CLIP))
    return GeneratedSketch(strokes, dict(provenance or {}))


def generate(generator, cond = None, seed = 0):
    """
    It samples one sketch.

    Parameters
    ----------
    generator: Generator
        the loaded models
    cond: int
        optional class id
    seed: int
        sampling seed

    Returns
    -------
    sketch: GeneratedSketch
    """
    sequence, _ = p_sample_loop(generator.denoiser, generator.schedule, cond = cond, seed = seed)
    provenance = {"seed": seed, "cond": cond, "encoder": generator.ids["encoder"], "denoiser": generator.ids["denoiser"]}
    sketch = compose(generator, sequence, provenance)
    logger.debug("seed %d: %d visible strokes", seed, sketch.stroke_count)
    return sketch


def interpolate_strokes(generator, z_a, z_b, steps):
    """
    Linear interpolation between two stroke latents at `steps` uniform weights, endpoints included.

    Parameters
    ----------
    generator: Generator or StrokeAutoencoder
        provides the decoder
    z_a, z_b: array_like
        (d_f,) latents
    steps: int
        number of outputs, ≥ 2

    Returns
    -------
    strokes: list of numpy.ndarray
        decoded (N_p, 2) strokes in normalized stroke space
    """
    if steps < 2:
        raise UsageError("interpolation needs at least 2 steps, got {}".format(steps))
    encoder = getattr(generator, "encoder", generator)
    z_a, z_b = np.asarray(z_a, dtype = np.float64), np.asarray(z_b, dtype = np.float64)
    weights = np.linspace(0.0, 1.0, steps)[:, None]
    latents = (1.0 - weights) * z_a + weights * z_b
    return list(decode_strokes(encoder, latents))


def snapshot_trajectory(generator, seed, timesteps, cond = None):
    """
    It samples once and composes the intermediate state recorded after the update at each requested timestep,
    through the same split / threshold / decode path as generate.

    Returns
    -------
    sketches: list of GeneratedSketch
        one per requested timestep, in the order given
    """
    _, recorded = p_sample_loop(generator.denoiser, generator.schedule, cond = cond, seed = seed, snapshots = list(timesteps))
    sketches = []
    for t in timesteps:
        provenance = {"seed": seed, "cond": cond, "t": int(t), "encoder": generator.ids["encoder"],
                      "denoiser": generator.ids["denoiser"]}
        sketches.append(compose(generator, recorded[int(t)], provenance))
    return sketches


def generation_manifest(sketches):
    """The manifest table: seed, stroke_count, cond and class label per generated sketch."""
    rows = [{"seed": s.provenance.get("seed"), "stroke_count": s.stroke_count, "cond": s.provenance.get("cond"),
             "label": s.provenance.get("label")} for s in sketches]
    return pd.DataFrame(rows, columns = ["seed", "stroke_count", "cond", "label"])


class CompatibilityError(UsageError):
    """Raised when an encoder and a denoiser checkpoint do not fit together"""
