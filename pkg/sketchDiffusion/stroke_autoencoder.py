import logging
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import tensor_engine as te
from .geometry import UdfField, denormalize_stroke, prepare_strokes, render_udf, resample_stroke
from .layers import (AdamW, AttentionPooling, Checkpoint, Conv2d, ConvTranspose2d, Linear, Module, TransformerStack,
                     sinusoidal_encoding)
from .tensor_engine import Tensor, ShapeError
from .utilities import UsageError, rescale_ranges, rng_stream

pd.set_option("display.precision", 3)

"""
The dual-modal stroke autoencoder: a transformer encoder over the resampled points, a convolutional encoder over the
stroke's distance field, a fused variational head and two decoders (points and field), with the weighted
reconstruction / KL / auxiliary loss and the training loop.
"""

logger = logging.getLogger(__name__)

KIND = "stroke_autoencoder"
LOSS_COLUMNS = ["step", "total", "vec", "img", "percep", "kl", "ce"]


@dataclass
class EncoderConfig:
    """
    Autoencoder hyper-parameters. gamma = 0 disables the image branch (input and loss); stroke_norm = False feeds
    strokes in their sketch position instead of normalizing them by their own box.
    """
    n_points: int = 64
    d_h: int = 64
    n_layers: int = 6
    n_heads: int = 8
    d_f: int = 32
    d_img: int = 64
    resolution: int = 64
    channels: tuple = (4, 8, 16, 32, 64, 128)
    gamma: float = 50.0
    margin_scale: float = 0.8
    lambda_vec: float = 10.0
    lambda_img: float = 10.0
    lambda_kl: float = 0.001
    lambda_ce: float = 0.1
    pooling: str = "attention"
    positional: str = "sinusoidal"
    pen_channel: bool = False
    stroke_norm: bool = True
    percep_seed: int = 1234
    percep_channels: tuple = (4, 8, 16)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.percep_channels = tuple(int(c) for c in self.percep_channels)
        if self.d_h % self.n_heads:
            raise EncoderConfigError("d_h={} is not divisible by n_heads={}".format(self.d_h, self.n_heads))
        if len(self.channels) != 6:
            raise EncoderConfigError("the image branch needs 6 channel widths, got {}".format(len(self.channels)))
        if self.resolution % 64:
            raise EncoderConfigError("resolution must be a multiple of 64, got {}".format(self.resolution))
        if self.pooling not in ("attention", "mean"):
            raise EncoderConfigError("unknown pooling {}".format(self.pooling))
        if self.positional not in ("sinusoidal", "learned"):
            raise EncoderConfigError("unknown positional encoding {}".format(self.positional))
        if self.gamma < 0:
            raise EncoderConfigError("gamma must be non-negative, got {}".format(self.gamma))

    @property
    def use_image(self):
        return self.gamma > 0

    @property
    def d_seq(self):
        return self.d_h

    @classmethod
    def preset(cls, name, **overrides):
        """
        Named capacity presets: "toy" (the tested defaults) and "full" (512-wide fused latent).
        """
        presets = {"toy": {}, "full": {"d_f": 512}}
        if name not in presets:
            raise EncoderConfigError("unknown preset {}".format(name))
        return replace(cls(**presets[name]), **overrides)


class StrokeLatentPosterior(NamedTuple):
    mean: Tensor
    log_variance: Tensor


class DecodedStroke(NamedTuple):
    """(B, N_p, 3) decoder output: coordinates and the auxiliary point logit."""
    points: Tensor

    @property
    def xy(self):
        return self.points[..., :2]

    @property
    def logits(self):
        return self.points[..., 2]


class StrokeAutoencoder(Module):
    """
    Parameters
    ----------
    cfg: EncoderConfig
        the hyper-parameters
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        in_dim = 3 if cfg.pen_channel else 2
        self.point_proj = self.add_module("point_proj", Linear(in_dim, cfg.d_h))
        if cfg.positional == "learned":
            self.positional = self.add_parameter("positional", (cfg.n_points, cfg.d_h), fan_in = cfg.d_h)
        else:
            self.positional = Tensor(sinusoidal_encoding(np.arange(cfg.n_points), cfg.d_h))
        self.vector_encoder = self.add_module("vector_encoder", TransformerStack(cfg.d_h, cfg.n_heads, cfg.n_layers))
        self.pool = self.add_module("pool", AttentionPooling(cfg.d_h)) if cfg.pooling == "attention" else None
        fused_in = cfg.d_seq
        if cfg.use_image:
            widths = (1,) + cfg.channels
            self.image_encoder = [self.add_module("image_encoder.{}".format(i), Conv2d(widths[i], widths[i + 1]))
                                  for i in range(6)]
            self.image_proj = self.add_module("image_proj", Linear(cfg.channels[-1], cfg.d_img))
            fused_in += cfg.d_img
        self.fusion = self.add_module("fusion", Linear(fused_in, 2 * cfg.d_f))
        # vector decoder
        self.template = self.add_parameter("template", (cfg.n_points, cfg.d_h), fan_in = cfg.d_h)
        self.latent_proj = self.add_module("latent_proj", Linear(cfg.d_f, cfg.d_h))
        self.vector_decoder = self.add_module("vector_decoder", TransformerStack(cfg.d_h, cfg.n_heads, cfg.n_layers))
        self.point_head = self.add_module("point_head", Linear(cfg.d_h, 3))
        if cfg.use_image:
            self.seed_size = cfg.resolution // 64
            self.image_seed = self.add_module("image_seed", Linear(cfg.d_f, cfg.channels[-1] * self.seed_size ** 2))
            widths = tuple(reversed(cfg.channels)) + (cfg.channels[0],)
            self.image_decoder = [self.add_module("image_decoder.{}".format(i), ConvTranspose2d(widths[i], widths[i + 1]))
                                  for i in range(6)]
            self.image_out = self.add_module("image_out", Conv2d(cfg.channels[0], 1, kernel = 3, stride = 1, padding = 1))

    def _as_points(self, points):
        points = te.as_tensor(points)
        if points.ndim == 2:
            points = te.reshape(points, (1,) + points.shape)
        if points.ndim != 3 or points.shape[1] != self.cfg.n_points:
            raise ShapeError("expected strokes of {} points, got shape {}".format(self.cfg.n_points, points.shape))
        if self.cfg.pen_channel and points.shape[2] == 2:
            points = te.concat([points, Tensor(np.ones(points.shape[:2] + (1,)))], axis = -1)
        return points

    def encode_vector(self, points):
        """
        Point sequence (B, N_p, 2) or (N_p, 2) -> z_seq (B, d_seq).
        """
        points = self._as_points(points)
        tokens = self.point_proj(points) + self.positional
        tokens = self.vector_encoder(tokens)
        return self.pool(tokens) if self.pool is not None else te.reduce_mean(tokens, axis = 1)

    def encode_image(self, field):
        """
        Field values (B, R, R) or (R, R) -> z_img (B, d_img).
        """
        if not self.cfg.use_image:
            raise UsageError("the image branch is disabled (gamma = 0)")
        values = te.as_tensor(field.values if isinstance(field, UdfField) else field)
        if values.ndim == 2:
            values = te.reshape(values, (1,) + values.shape)
        r = self.cfg.resolution
        if values.ndim != 3 or values.shape[1:] != (r, r):
            raise ShapeError("expected fields of resolution {}, got shape {}".format(r, values.shape))
        x = te.reshape(values, (values.shape[0], 1, r, r))
        for conv in self.image_encoder:
            x = te.relu(conv(x))
        return self.image_proj(te.global_avg_pool(x))

    def fuse_and_sample(self, z_seq, z_img, noise):
        """
        It concatenates the branch features, maps them to (mean, log_variance) and draws z_f with the supplied noise.

        Returns
        -------
        z_f, posterior: tuple
            the (B, d_f) sample and the StrokeLatentPosterior
        """
        features = te.concat([z_seq, z_img], axis = -1) if z_img is not None else z_seq
        h = self.fusion(features)
        d_f = self.cfg.d_f
        posterior = StrokeLatentPosterior(h[..., :d_f], h[..., d_f:])
        noise = np.asarray(noise, dtype = np.float64).reshape(posterior.mean.shape)
        return te.gaussian_sample(posterior.mean, posterior.log_variance, noise), posterior

    def decode_vector(self, z):
        """
        z (B, d_f) or (d_f,) -> DecodedStroke with (B, N_p, 3) points.
        """
        z = te.as_tensor(z)
        if z.ndim == 1:
            z = te.reshape(z, (1, -1))
        cond = te.reshape(self.latent_proj(z), (z.shape[0], 1, self.cfg.d_h))
        tokens = self.vector_decoder(cond + self.template)
        return DecodedStroke(self.point_head(tokens))

    def decode_image(self, z):
        """
        z (B, d_f) or (d_f,) -> (B, R, R) field values in (0, 1).
        """
        if not self.cfg.use_image:
            raise UsageError("the image branch is disabled (gamma = 0)")
        z = te.as_tensor(z)
        if z.ndim == 1:
            z = te.reshape(z, (1, -1))
        s = self.seed_size
        x = te.reshape(self.image_seed(z), (z.shape[0], self.cfg.channels[-1], s, s))
        for deconv in self.image_decoder:
            x = te.relu(deconv(x))
        x = te.sigmoid(self.image_out(x))
        r = self.cfg.resolution
        return te.reshape(x, (z.shape[0], r, r))

    def forward(self, points, fields, noise):
        z_seq = self.encode_vector(points)
        z_img = self.encode_image(fields) if self.cfg.use_image else None
        z, posterior = self.fuse_and_sample(z_seq, z_img, noise)
        decoded = self.decode_vector(z)
        image = self.decode_image(z) if self.cfg.use_image else None
        return {"z": z, "posterior": posterior, "decoded": decoded, "image": image}


class PerceptualNet(Module):
    """
    A frozen, seed-initialized 3-block conv network whose multi-scale features compare two fields.
    """

    def __init__(self, channels = (4, 8, 16), seed = 1234):
        super().__init__()
        widths = (1,) + tuple(channels)
        self.blocks = [self.add_module("blocks.{}".format(i), Conv2d(widths[i], widths[i + 1])) for i in range(len(channels))]
        self.initialize(seed)
        self.freeze()

    def forward(self, x):
        features = []
        x = te.reshape(x, (x.shape[0], 1) + x.shape[1:])
        for block in self.blocks:
            x = te.relu(block(x))
            features.append(x)
        return features

    def distance(self, target, prediction):
        """Sum over blocks of the mean squared feature difference."""
        total = None
        for f_target, f_pred in zip(self.forward(te.as_tensor(target)), self.forward(prediction)):
            diff = f_pred - Tensor(f_target.data)
            term = te.reduce_mean(diff * diff)
            total = term if total is None else total + term
        return total


def kl_divergence(posterior):
    """
    KL(q || N(0, I)) = 0.5 * sum(exp(lv) + mu^2 - 1 - lv), averaged over the batch.
    """
    mu, lv = posterior
    per_sample = te.reduce_sum(te.exp(lv) + mu * mu - 1.0 - lv, axis = -1) * 0.5
    return te.reduce_mean(per_sample)


def kl_closed_form(mean, log_variance):
    mean, log_variance = np.asarray(mean, dtype = np.float64), np.asarray(log_variance, dtype = np.float64)
    return 0.5 * float(np.sum(np.exp(log_variance) + mean ** 2 - 1.0 - log_variance))


def vector_loss(prediction, target):
    """Mean over points of the Euclidean distance between predicted and target coordinates."""
    return te.reduce_mean(te.norm(prediction - te.as_tensor(target), axis = -1))


def loss_total(points, fields, outputs, cfg, perceptual = None):
    """
    The weighted training objective.

    Parameters
    ----------
    points: array_like
        (B, N_p, 2) target strokes
    fields: array_like
        (B, R, R) target fields (ignored when the image branch is disabled)
    outputs: dict
        the output of StrokeAutoencoder.forward
    cfg: EncoderConfig
        the loss weights
    perceptual: PerceptualNet
        the frozen feature network; the perceptual term is dropped when None

    Returns
    -------
    total, components: tuple
        the scalar loss Tensor and a dict of floats (vec, img, percep, kl, ce, total)
    """
    points = np.asarray(points, dtype = np.float64).reshape(outputs["decoded"].points.shape[:2] + (2,))
    decoded = outputs["decoded"]
    l_vec = vector_loss(decoded.xy, points)
    l_kl = kl_divergence(outputs["posterior"])
    l_ce = te.reduce_mean(te.softplus(-decoded.logits))
    total = l_vec * cfg.lambda_vec + l_kl * cfg.lambda_kl + l_ce * cfg.lambda_ce
    components = {"vec": l_vec.item(), "img": 0.0, "percep": 0.0, "kl": l_kl.item(), "ce": l_ce.item()}
    if cfg.use_image and outputs["image"] is not None:
        target = np.asarray(fields, dtype = np.float64).reshape(outputs["image"].shape)
        diff = outputs["image"] - target
        l_img = te.reduce_mean(diff * diff)
        components["img"] = l_img.item()
        if perceptual is not None:
            l_percep = perceptual.distance(target, outputs["image"])
            components["percep"] = l_percep.item()
            l_img = l_img + l_percep
        total = total + l_img * cfg.lambda_img
    components["total"] = total.item()
    return total, components


## Datasets and training ###############

@dataclass
class StrokeDataset:
    """
    Training strokes: normalized points (M, N_p, 2), fields (M, R, R) or None, boxes (M, 4) and
    an index frame mapping each stroke to (sketch, stroke) positions.
    """
    points: np.ndarray
    fields: Optional[np.ndarray]
    boxes: np.ndarray
    index: pd.DataFrame

    def __len__(self):
        return len(self.points)


def build_stroke_dataset(sketches, cfg):
    """
    The function resamples, normalizes and (when the image branch is on) renders every stroke of the sketches.

    Parameters
    ----------
    sketches: list of Sketch
        sketches in [-1, 1] space
    cfg: EncoderConfig
        supplies N_p, gamma, R, margin and the stroke-normalization switch

    Returns
    -------
    dataset: StrokeDataset
    """
    points, boxes, rows = [], [], []
    for sketch_index, sketch in enumerate(sketches):
        for stroke_index, (local, box) in enumerate(prepare_strokes(sketch, cfg.n_points, cfg.stroke_norm)):
            points.append(local)
            boxes.append(tuple(box))
            rows.append((sketch_index, stroke_index, sketch.source_id))
    points = np.array(points, dtype = np.float64).reshape(-1, cfg.n_points, 2)
    fields = None
    if cfg.use_image:
        fields = np.array([render_udf(p, cfg.gamma, cfg.resolution, cfg.margin_scale).values for p in points])
        fields = fields.reshape(-1, cfg.resolution, cfg.resolution)
    index = pd.DataFrame(rows, columns = ["sketch", "stroke", "source_id"])
    logger.info("built %d strokes from %d sketches", len(points), len(sketches))
    return StrokeDataset(points, fields, np.array(boxes, dtype = np.float64).reshape(-1, 4), index)


def train_autoencoder(dataset, cfg, steps, seed = 0, lr = 1e-4, weight_decay = 0.01, warmup_steps = 0, batch_size = 16,
                      log_every = 100, progress = False):
    """
    The function trains the autoencoder with AdamW. Parameters, batches and reparameterization noise are drawn from
    separate seeded streams, so a run is reproducible bit for bit.

    Parameters
    ----------
    dataset: StrokeDataset
        the training strokes
    cfg: EncoderConfig
        the hyper-parameters
    steps: int
        optimizer steps
    seed: int
        run seed
    lr: float
        peak learning rate
    weight_decay: float
        decoupled weight decay
    warmup_steps: int
        linear warm-up length
    batch_size: int
        strokes per step
    log_every: int
        logging interval in steps
    progress: boolean
        show a progress bar

    Returns
    -------
    checkpoint: Checkpoint
        parameters, config and the per-step loss log
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty stroke dataset")
    model = StrokeAutoencoder(cfg).initialize(seed)
    perceptual = PerceptualNet(cfg.percep_channels, cfg.percep_seed) if cfg.use_image else None
    optimizer = AdamW(model.named_parameters(), lr = lr, weight_decay = weight_decay, warmup_steps = warmup_steps)
    size = min(batch_size, len(dataset))
    log = []
    for step in tqdm(range(1, steps + 1), disable = not progress, desc = "autoencoder"):
        batch = np.sort(rng_stream(seed, "batch", step).choice(len(dataset), size = size, replace = False))
        noise = rng_stream(seed, "noise", step).standard_normal((size, cfg.d_f))
        fields = dataset.fields[batch] if dataset.fields is not None else None
        optimizer.zero_grad()
        outputs = model(dataset.points[batch], fields, noise)
        loss, components = loss_total(dataset.points[batch], fields, outputs, cfg, perceptual)
        loss.backward()
        optimizer.step()
        log.append([step] + [components[c] for c in LOSS_COLUMNS[1:]])
        if log_every and step % log_every == 0:
            logger.info("step %d total %.5f vec %.5f img %.5f kl %.5f ce %.5f", step, components["total"],
                        components["vec"], components["img"], components["kl"], components["ce"])
    loss_log = pd.DataFrame(log, columns = LOSS_COLUMNS)
    return Checkpoint(KIND, cfg, model.state_dict(), {"seed": str(seed), "steps": str(steps)}, loss_log)


def load_autoencoder(checkpoint):
    """A StrokeAutoencoder holding the checkpoint's parameters."""
    if checkpoint.kind != KIND:
        raise UsageError("expected a {} checkpoint, got {}".format(KIND, checkpoint.kind))
    return StrokeAutoencoder(checkpoint.config).load_state_dict(checkpoint.parameters)


## Inference helpers ###############

def encode_strokes(model, points, fields = None, batch_size = 64):
    """
    It returns the posterior means of strokes; these are the latents the diffusion stage trains on.

    Parameters
    ----------
    model: StrokeAutoencoder
        a trained model
    points: numpy.ndarray
        (M, N_p, 2) normalized strokes
    fields: numpy.ndarray
        (M, R, R) fields when the image branch is on

    Returns
    -------
    latents: numpy.ndarray
        (M, d_f)
    """
    latents = []
    with te.no_grad():
        for start in range(0, len(points), batch_size):
            chunk = points[start:start + batch_size]
            z_seq = model.encode_vector(chunk)
            z_img = model.encode_image(fields[start:start + batch_size]) if model.cfg.use_image else None
            _, posterior = model.fuse_and_sample(z_seq, z_img, np.zeros((len(chunk), model.cfg.d_f)))
            latents.append(posterior.mean.numpy())
    return np.concatenate(latents) if latents else np.zeros((0, model.cfg.d_f))


def decode_strokes(model, latents):
    """(M, d_f) latents -> (M, N_p, 2) decoded coordinates, the auxiliary channel dropped."""
    latents = np.asarray(latents, dtype = np.float64).reshape(-1, model.cfg.d_f)
    if len(latents) == 0:
        return np.zeros((0, model.cfg.n_points, 2))
    with te.no_grad():
        return model.decode_vector(latents).points.numpy()[..., :2]


def reconstruct_sketch(model, sketch):
    """
    It encodes every stroke of a normalized sketch, decodes it and places it back with its box.

    Parameters
    ----------
    model: StrokeAutoencoder
        a trained model
    sketch: Sketch
        the sketch in [-1, 1] space

    Returns
    -------
    strokes: list of numpy.ndarray
        reconstructed (N_p, 2) strokes in sketch space
    """
    cfg = model.cfg
    prepared = prepare_strokes(sketch, cfg.n_points, cfg.stroke_norm)
    if not prepared:
        return []
    points = np.array([p for p, _ in prepared])
    fields = None
    if cfg.use_image:
        fields = np.array([render_udf(p, cfg.gamma, cfg.resolution, cfg.margin_scale).values for p in points])
    decoded = decode_strokes(model, encode_strokes(model, points, fields))
    return [denormalize_stroke(local, box) for local, (_, box) in zip(decoded, prepared)]


def reconstruction_report(model, sketches):
    """
    Per-stroke reconstruction error in sketch space: the mean point distance between each resampled stroke and its
    reconstruction, and (with the image branch on) the RMS error of the decoded field.

    Returns
    -------
    report: pandas DataFrame
        columns source_id, stroke, vec_error, udf_rms
    """
    cfg = model.cfg
    rows = []
    for sketch in sketches:
        reconstructed = reconstruct_sketch(model, sketch)
        for stroke_index, (stroke, rebuilt) in enumerate(zip(sketch.strokes, reconstructed)):
            target = resample_stroke(stroke, cfg.n_points)
            udf_rms = np.nan
            if cfg.use_image:
                unit = rescale_ranges(rebuilt, (-1.0, 1.0), (0.0, 1.0))
                udf_rms = float(np.sqrt(np.mean((render_udf(unit, cfg.gamma, cfg.resolution, cfg.margin_scale).values
                                                 - render_udf(rescale_ranges(target, (-1.0, 1.0), (0.0, 1.0)), cfg.gamma,
                                                              cfg.resolution, cfg.margin_scale).values) ** 2)))
            rows.append({"source_id": sketch.source_id, "stroke": stroke_index,
                         "vec_error": float(np.linalg.norm(rebuilt - target, axis = 1).mean()), "udf_rms": udf_rms})
    return pd.DataFrame(rows, columns = ["source_id", "stroke", "vec_error", "udf_rms"])


class EncoderConfigError(UsageError):
    """Raised when the autoencoder configuration is inconsistent"""
