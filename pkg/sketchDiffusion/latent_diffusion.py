import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import tensor_engine as te
from .layers import AdamW, Checkpoint, Linear, Module, TransformerStack, sinusoidal_encoding
from .stroke_autoencoder import build_stroke_dataset, encode_strokes
from .tensor_engine import ShapeError, Tensor
from .utilities import UsageError, rng_stream

pd.set_option("display.precision", 3)

"""
Denoising diffusion over sets of composite stroke latents [z, box, visibility]: the linear beta schedule, the forward
marginal, a transformer denoiser with no positional information (hence equivariant to stroke order), the split
head, training and ancestral sampling. Timesteps are 1-based, t = 1..T.
"""

logger = logging.getLogger(__name__)

KIND = "denoiser"
LOSS_COLUMNS = ["step", "total", "mse", "split"]


@dataclass
class DiffusionSchedule:
    """
    betas, alphas, alpha_bars and posterior_variance are arrays of length T; entry t - 1 belongs to timestep t.
    """
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variance: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    def check_timestep(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T) or not np.all(np.equal(np.mod(t, 1), 0)):
            raise ScheduleError("timesteps must be integers in [1, {}], got {}".format(self.T, t))
        return t.astype(np.int64)


def build_schedule(T = 1000, beta_start = 1e-4, beta_end = 0.02):
    """
    The function builds the linear beta schedule and its derived sequences; alpha_bar is the sequential product
    of the alphas.

    Parameters
    ----------
    T: int
        number of timesteps, ≥ 1
    beta_start: float
        first beta, > 0
    beta_end: float
        last beta, ≥ beta_start and < 1

    Returns
    -------
    schedule: DiffusionSchedule
    """
    if int(T) != T or T < 1:
        raise ScheduleError("T must be a positive integer, got {}".format(T))
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError("need 0 < beta_start <= beta_end < 1, got {} and {}".format(beta_start, beta_end))
    betas = np.linspace(beta_start, beta_end, int(T)) if T > 1 else np.array([float(beta_start)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    previous = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_variance = betas * (1.0 - previous) / (1.0 - alpha_bars)
    if alpha_bars[-1] >= 0.01:
        logger.warning("alpha_bar at T=%d is %.4f; the terminal state is not close to pure noise", T, alpha_bars[-1])
    return DiffusionSchedule(betas, alphas, alpha_bars, posterior_variance)


def q_sample(x0, t, noise, schedule):
    """
    Closed-form forward noising x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise, applied to every channel.

    Parameters
    ----------
    x0: numpy.ndarray
        clean sequences, (N_s, W) or (B, N_s, W)
    t: int or array_like
        one timestep, or one per batch entry
    noise: numpy.ndarray
        standard normal draws of the shape of x0
    schedule: DiffusionSchedule

    Returns
    -------
    x_t: numpy.ndarray
    """
    x0, noise = np.asarray(x0, dtype = np.float64), np.asarray(noise, dtype = np.float64)
    if x0.shape != noise.shape:
        raise ShapeError("noise shape {} does not match x0 shape {}".format(noise.shape, x0.shape))
    t = schedule.check_timestep(t)
    alpha_bar = schedule.alpha_bars[t - 1]
    if alpha_bar.ndim:
        alpha_bar = alpha_bar.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise


@dataclass
class DenoiserConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    max_strokes: int = 32
    d_latent: int = 32
    t_embed_dim: int = 64
    n_classes: int = 0
    v_mag: float = 0.1
    split_hidden: int = 64
    sigma: str = "beta"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise UsageError("d_model={} is not divisible by n_heads={}".format(self.d_model, self.n_heads))
        if self.sigma not in ("beta", "posterior"):
            raise UsageError("unknown sampler variance {}".format(self.sigma))
        if self.v_mag <= 0:
            raise UsageError("v_mag must be positive, got {}".format(self.v_mag))

    @property
    def width(self):
        return self.d_latent + 5


class Denoiser(Module):
    """
    Noise predictor over (B, N_s, d_f + 5) sequences. The timestep embedding and the optional class embedding are
    added to every token; no token index enters the network.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.in_proj = self.add_module("in_proj", Linear(cfg.width, cfg.d_model))
        self.t_mlp1 = self.add_module("t_mlp1", Linear(cfg.t_embed_dim, cfg.d_model))
        self.t_mlp2 = self.add_module("t_mlp2", Linear(cfg.d_model, cfg.d_model))
        if cfg.n_classes:
            self.class_embed = self.add_parameter("class_embed", (cfg.n_classes, cfg.d_model), fan_in = cfg.d_model)
        self.stack = self.add_module("stack", TransformerStack(cfg.d_model, cfg.n_heads, cfg.n_layers))
        self.out_proj = self.add_module("out_proj", Linear(cfg.d_model, cfg.width))
        self.split1 = self.add_module("split1", Linear(cfg.width, cfg.split_hidden))
        self.split2 = self.add_module("split2", Linear(cfg.split_hidden, cfg.width, zero_init = True))

    def _condition(self, cond, batch):
        cond = np.asarray(cond).reshape(-1)
        if not self.cfg.n_classes:
            raise UsageError("the denoiser was trained without conditioning")
        if len(cond) == 1:
            cond = np.repeat(cond, batch)
        if np.any(cond < 0) or np.any(cond >= self.cfg.n_classes):
            raise UsageError("class ids must lie in [0, {}), got {}".format(self.cfg.n_classes, cond))
        one_hot = np.zeros((batch, self.cfg.n_classes))
        one_hot[np.arange(batch), cond.astype(np.int64)] = 1.0
        return te.reshape(te.matmul(Tensor(one_hot), self.class_embed), (batch, 1, self.cfg.d_model))

    def forward(self, x_t, t, cond = None):
        x_t = te.as_tensor(x_t)
        if x_t.ndim == 2:
            x_t = te.reshape(x_t, (1,) + x_t.shape)
        if x_t.ndim != 3 or x_t.shape[1:] != (self.cfg.max_strokes, self.cfg.width):
            raise ShapeError("expected sequences of shape ({}, {}), got {}".format(self.cfg.max_strokes, self.cfg.width, x_t.shape))
        batch = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype = np.float64).reshape(-1), (batch,))
        t_embed = Tensor(sinusoidal_encoding(t, self.cfg.t_embed_dim))
        t_embed = self.t_mlp2(te.relu(self.t_mlp1(t_embed)))
        h = self.in_proj(x_t) + te.reshape(t_embed, (batch, 1, self.cfg.d_model))
        if cond is not None:
            h = h + self._condition(cond, batch)
        return self.out_proj(self.stack(h))

    def split(self, rows):
        """Shared residual MLP over rows (..., d_f + 5); the identity at initialization."""
        rows = te.as_tensor(rows)
        return rows + self.split2(te.relu(self.split1(rows)))


def denoise_step_predict(model, x_t, t, cond = None):
    """
    It predicts the noise of one sequence (N_s, d_f + 5) or a batch of them.

    Returns
    -------
    eps: numpy.ndarray
        the prediction, shaped like x_t
    """
    x_t = np.asarray(x_t, dtype = np.float64)
    with te.no_grad():
        eps = model(x_t, t, cond).numpy()
    return eps.reshape(x_t.shape)


def prepare_training_sequence(strokes, max_strokes = 32, v_mag = 0.1, d_latent = None):
    """
    The function lays out a sketch's composite latents: real rows [z, x, y, w, h, +v_mag], then padding rows that are
    zero except for the visibility -v_mag.

    Parameters
    ----------
    strokes: list of tuple
        (z (d_f,), box (4,)) per stroke
    max_strokes: int
        N_s
    v_mag: float
        visibility magnitude
    d_latent: int
        d_f, needed only when the sketch has no strokes

    Returns
    -------
    sequence: numpy.ndarray
        (N_s, d_f + 5)
    """
    if len(strokes) > max_strokes:
        raise SequenceError("sketch has {} strokes, more than N_s={}".format(len(strokes), max_strokes))
    if not strokes and d_latent is None:
        raise SequenceError("d_latent is required for a sketch without strokes")
    d_f = len(strokes[0][0]) if strokes else d_latent
    sequence = padding_sequence(max_strokes, d_f, v_mag)
    for row, (z, box) in enumerate(strokes):
        sequence[row, :d_f] = z
        sequence[row, d_f:d_f + 4] = tuple(box)
        sequence[row, -1] = v_mag
    return sequence


def padding_sequence(max_strokes, d_latent, v_mag = 0.1):
    """An all-padding sequence (N_s, d_f + 5)."""
    sequence = np.zeros((max_strokes, d_latent + 5))
    sequence[:, -1] = -v_mag
    return sequence


def estimate_max_strokes(counts, percentile = 99):
    """
    The N_s suggestion of a dataset: the given percentile of its per-sketch stroke counts, rounded up.
    """
    if not 0 < percentile <= 100:
        raise UsageError("percentile must be in (0, 100], got {}".format(percentile))
    counts = pd.Series(counts, dtype = np.float64)
    if counts.empty:
        raise UsageError("no stroke counts given")
    return max(1, int(math.ceil(counts.quantile(percentile / 100.0))))


## Latent datasets ###############

@dataclass
class LatentDataset:
    """
    Per-sketch latent records: latents (S, d_f) and boxes (S, 4) of all strokes in sketch order, stroke_counts (n,),
    labels (n,) as class ids (-1 when unlabelled) and the class names.
    """
    latents: np.ndarray
    boxes: np.ndarray
    stroke_counts: np.ndarray
    labels: np.ndarray
    class_names: List[str] = field(default_factory = list)

    def __len__(self):
        return len(self.stroke_counts)

    @property
    def d_latent(self):
        return self.latents.shape[1]

    def sketch_strokes(self, index):
        start = int(self.stroke_counts[:index].sum())
        stop = start + int(self.stroke_counts[index])
        return list(zip(self.latents[start:stop], self.boxes[start:stop]))

    def sequences(self, max_strokes, v_mag):
        """(n, N_s, d_f + 5) training sequences."""
        rows = []
        for index in range(len(self)):
            rows.append(prepare_training_sequence(self.sketch_strokes(index), max_strokes, v_mag, self.d_latent))
        return np.array(rows).reshape(-1, max_strokes, self.d_latent + 5)

    def save(self, path, config_text = ""):
        header = "kind=latent_dataset\nclasses={}\n".format("|".join(self.class_names))
        header += "".join("config.{}\n".format(line) for line in config_text.splitlines() if line)
        te.save_container(path, {"latents": self.latents, "boxes": self.boxes,
                                 "stroke_counts": self.stroke_counts, "labels": self.labels}, header)

    @classmethod
    def load(cls, path):
        entries, header = te.load_container(path)
        values = dict(line.split("=", 1) for line in header.splitlines() if "=" in line)
        if values.get("kind") != "latent_dataset":
            raise te.CheckpointError("{} is not a latent dataset".format(path))
        names = [name for name in values.get("classes", "").split("|") if name]
        return cls(entries["latents"], entries["boxes"], entries["stroke_counts"].astype(np.int64),
                   entries["labels"].astype(np.int64), names)


def build_latent_dataset(model, sketches):
    """
    It encodes every stroke of the sketches with a frozen autoencoder (posterior means) and groups them per sketch.

    Parameters
    ----------
    model: StrokeAutoencoder
        the trained encoder
    sketches: list of Sketch
        normalized sketches

    Returns
    -------
    dataset: LatentDataset
    """
    strokes = build_stroke_dataset(sketches, model.cfg)
    latents = encode_strokes(model, strokes.points, strokes.fields)
    class_names = sorted({s.label for s in sketches if s.label is not None})
    labels = np.array([class_names.index(s.label) if s.label is not None else -1 for s in sketches], dtype = np.int64)
    counts = np.array([s.stroke_count for s in sketches], dtype = np.int64)
    return LatentDataset(latents, strokes.boxes, counts, labels, class_names)


## Training and sampling ###############

def _mean_square(diff):
    return te.reduce_mean(diff * diff)


def train_diffusion(dataset, schedule, cfg, steps, seed = 0, lr = 1e-4, weight_decay = 0.01, warmup_steps = 0,
                    batch_size = 16, log_every = 100, split_weight = 1.0, split_max_t = None, shuffle_strokes = False,
                    progress = False):
    """
    The function trains the denoiser to predict the injected noise (MSE) at uniformly drawn timesteps. The split
    head is trained alongside to refine the clean-sequence estimates of lightly noised inputs
    (t ≤ split_max_t, T // 10 by default) back to the clean rows.

    Parameters
    ----------
    dataset: LatentDataset
        the encoded sketches
    schedule: DiffusionSchedule
    cfg: DenoiserConfig
    steps: int
        optimizer steps
    seed: int
        run seed
    lr, weight_decay, warmup_steps, batch_size, log_every:
        optimizer and logging settings
    split_weight: float
        weight of the split refinement loss
    split_max_t: int
        largest timestep used for the split loss
    shuffle_strokes: boolean
        permute the rows of every sequence at every step
    progress: boolean
        show a progress bar

    Returns
    -------
    checkpoint: Checkpoint
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty latent dataset")
    if dataset.d_latent != cfg.d_latent:
        raise UsageError("latent width {} does not match d_latent={}".format(dataset.d_latent, cfg.d_latent))
    conditional = cfg.n_classes > 0
    if conditional and np.any(dataset.labels < 0):
        raise UsageError("conditional training needs a label for every sketch")
    sequences = dataset.sequences(cfg.max_strokes, cfg.v_mag)
    model = Denoiser(cfg).initialize(seed)
    optimizer = AdamW(model.named_parameters(), lr = lr, weight_decay = weight_decay, warmup_steps = warmup_steps)
    split_max_t = split_max_t or max(1, schedule.T // 10)
    size = min(batch_size, len(dataset))
    log = []
    for step in tqdm(range(1, steps + 1), disable = not progress, desc = "diffusion"):
        rng = rng_stream(seed, "step", step)
        batch = np.sort(rng.choice(len(dataset), size = size, replace = False))
        x0 = sequences[batch]
        if shuffle_strokes:
            x0 = np.array([row[rng.permutation(cfg.max_strokes)] for row in x0])
        cond = dataset.labels[batch] if conditional else None
        t = rng.integers(1, schedule.T + 1, size = size)
        noise = rng.standard_normal(x0.shape)
        optimizer.zero_grad()
        mse = _mean_square(model(q_sample(x0, t, noise, schedule), t, cond) - noise)
        # split refinement on detached clean estimates
        t_split = rng.integers(1, split_max_t + 1, size = size)
        noise_split = rng.standard_normal(x0.shape)
        x_split = q_sample(x0, t_split, noise_split, schedule)
        alpha_bar = schedule.alpha_bars[t_split - 1].reshape(-1, 1, 1)
        with te.no_grad():
            eps_split = model(x_split, t_split, cond).numpy()
        x0_hat = (x_split - np.sqrt(1.0 - alpha_bar) * eps_split) / np.sqrt(alpha_bar)
        split = _mean_square(model.split(x0_hat) - x0)
        loss = mse + split * split_weight
        loss.backward()
        optimizer.step()
        log.append([step, loss.item(), mse.item(), split.item()])
        if log_every and step % log_every == 0:
            logger.info("step %d total %.5f mse %.5f split %.5f", step, loss.item(), mse.item(), split.item())
    metadata = {"seed": str(seed), "steps": str(steps), "T": str(schedule.T), "beta_start": repr(float(schedule.betas[0])),
                "beta_end": repr(float(schedule.betas[-1])), "classes": "|".join(dataset.class_names)}
    return Checkpoint(KIND, cfg, model.state_dict(), metadata, pd.DataFrame(log, columns = LOSS_COLUMNS))


def load_denoiser(checkpoint):
    """
    Returns
    -------
    model, schedule: tuple
        the Denoiser holding the checkpoint's parameters and the schedule it was trained with
    """
    if checkpoint.kind != KIND:
        raise UsageError("expected a {} checkpoint, got {}".format(KIND, checkpoint.kind))
    model = Denoiser(checkpoint.config).load_state_dict(checkpoint.parameters)
    meta = checkpoint.metadata
    schedule = build_schedule(int(meta.get("T", 1000)), float(meta.get("beta_start", 1e-4)), float(meta.get("beta_end", 0.02)))
    return model, schedule


def class_names_of(checkpoint):
    return [name for name in checkpoint.metadata.get("classes", "").split("|") if name]


def p_sample_loop(model, schedule, cond = None, seed = 0, snapshots = None):
    """
    Ancestral sampling: from x_T ~ N(0, I), x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t)
    + sigma_t eta, without noise at t = 1.

    Parameters
    ----------
    model: Denoiser
    schedule: DiffusionSchedule
    cond: int
        optional class id
    seed: int
        sampling seed
    snapshots: list of int
        timesteps whose post-update state x_{t-1} is recorded

    Returns
    -------
    x0, recorded: tuple
        the final (N_s, d_f + 5) sequence and a dict t -> state
    """
    cfg = model.cfg
    wanted = set(schedule.check_timestep(snapshots).tolist()) if snapshots else set()
    x = rng_stream(seed, "sample", "init").standard_normal((cfg.max_strokes, cfg.width))
    variances = schedule.betas if cfg.sigma == "beta" else schedule.posterior_variance
    recorded = {}
    for t in range(schedule.T, 0, -1):
        eps = denoise_step_predict(model, x, t, cond)
        beta, alpha, alpha_bar = schedule.betas[t - 1], schedule.alphas[t - 1], schedule.alpha_bars[t - 1]
        x = (x - beta / math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha)
        if t > 1:
            x = x + math.sqrt(variances[t - 1]) * rng_stream(seed, "sample", t).standard_normal(x.shape)
        if t in wanted:
            recorded[t] = x.copy()
    return x, recorded


def split_latent(model, row):
    """
    It maps one denoised row (or rows) through the split head.

    Returns
    -------
    z, box, v: tuple
        (..., d_f), (..., 4) and (...) arrays
    """
    d_f = model.cfg.d_latent
    with te.no_grad():
        out = model.split(np.asarray(row, dtype = np.float64)).numpy()
    return out[..., :d_f], out[..., d_f:d_f + 4], out[..., d_f + 4]


class ScheduleError(UsageError):
    """Raised when schedule parameters or timesteps are out of range"""
class SequenceError(UsageError):
    """Raised when a sketch does not fit the sequence length"""
