import logging
import os
from dataclasses import dataclass, fields, replace

from .utilities import UsageError

"""
Run configuration: one flat dataclass covering every default of the pipeline, persisted as key=value text.
Resolution order is dataclass defaults, then the config file (from --config or the SKETCHDIFFUSION_CONFIG
environment variable), then command-line flags.
"""

logger = logging.getLogger(__name__)

CONFIG_ENV = "SKETCHDIFFUSION_CONFIG"


def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if default is None:
            return None if text.lower() == "none" else int(text)
        return text
    except ValueError:
        raise ConfigError("config key {} has invalid value {!r}".format(key, text)) from None


def config_to_text(config, prefix = ""):
    """
    It renders a configuration dataclass as sorted key=value lines.

    Parameters
    ----------
    config: dataclass instance
        the configuration
    prefix: string
        prepended to every key

    Returns
    -------
    text: string
        one key=value per line
    """
    lines = ["{}{}={}".format(prefix, f.name, _format_value(getattr(config, f.name))) for f in fields(config)]
    return "\n".join(sorted(lines)) + "\n"


def parse_key_values(text, source = "<text>"):
    """
    It parses key=value lines, ignoring blank lines and # comments.
    """
    values = {}
    for number, line in enumerate(text.splitlines(), start = 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("{} line {}: expected key=value, got {!r}".format(source, number, line))
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def config_from_values(cls, values, base = None, strict = True):
    """
    It builds a configuration dataclass from string values coerced to the type of each field's default.

    Parameters
    ----------
    cls: dataclass type
        the configuration class
    values: dict
        key -> string value
    base: dataclass instance
        values not given are taken from it (defaults when None)
    strict: boolean
        when True unknown keys are rejected

    Returns
    -------
    config: dataclass instance
    """
    base = base if base is not None else cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown and strict:
        raise ConfigError("unknown config keys: {}".format(", ".join(unknown)))
    updates = {key: _coerce(key, value, getattr(base, key)) if isinstance(value, str) else value
               for key, value in values.items() if key in known}
    return replace(base, **updates)


@dataclass
class RunConfig:
    """
    Every tunable of the pipeline. Defaults are the tested toy scale.
    """
    # strokes and fields
    n_points: int = 64
    gamma: float = 50.0
    resolution: int = 64
    margin_scale: float = 0.8
    max_strokes: int = 32
    # > 0: ingest sets max_strokes to this percentile of the stroke counts
    max_strokes_percentile: float = 0.0
    stroke_norm: bool = True
    # autoencoder
    d_h: int = 64
    n_layers: int = 6
    n_heads: int = 8
    d_f: int = 32
    d_img: int = 64
    channels: tuple = (4, 8, 16, 32, 64, 128)
    pooling: str = "attention"
    positional: str = "sinusoidal"
    pen_channel: bool = False
    lambda_vec: float = 10.0
    lambda_img: float = 10.0
    lambda_kl: float = 0.001
    lambda_ce: float = 0.1
    percep_seed: int = 1234
    # denoiser and schedule
    diffusion_layers: int = 4
    diffusion_heads: int = 4
    d_model: int = 64
    t_embed_dim: int = 64
    v_mag: float = 0.1
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma: str = "beta"
    conditional: bool = False
    split_weight: float = 1.0
    # 0: T // 10
    split_max_t: int = 0
    shuffle_strokes: bool = False
    # training
    seed: int = 0
    encoder_steps: int = 2000
    diffusion_steps: int = 5000
    lr: float = 1e-4
    diffusion_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 0
    batch_size: int = 16
    log_every: int = 100
    # evaluation and export
    rdp_epsilon: float = 0.01
    metric_resolution: int = 64
    # 0: ln 2 (2R)^2, 1-px strokes
    metric_gamma: float = 0.0
    metric_threshold: float = 0.5
    knn_k: int = 20
    extractor_seed: int = 0
    stroke_width: float = 2.0
    canvas: int = 256
    work_dir: str = "work"

    def to_text(self):
        return config_to_text(self)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding = "utf-8") as handle:
                text = handle.read()
        except FileNotFoundError:
            raise ConfigError("config file {} does not exist".format(path)) from None
        return config_from_values(cls, parse_key_values(text, source = path))

    @classmethod
    def resolve(cls, path = None, overrides = None):
        """
        It applies the resolution order: defaults, config file, then explicit overrides.

        Parameters
        ----------
        path: string
            config file; the SKETCHDIFFUSION_CONFIG environment variable is used when None
        overrides: dict
            field -> value given on the command line

        Returns
        -------
        config: RunConfig
        """
        path = path or os.environ.get(CONFIG_ENV)
        config = cls.from_file(path) if path else cls()
        if path:
            logger.info("loaded config from %s", path)
        return config_from_values(cls, overrides or {}, base = config)

    def write(self, path):
        with open(path, "w", encoding = "utf-8") as handle:
            handle.write(self.to_text())

    def encoder_config(self):
        from .stroke_autoencoder import EncoderConfig
        return EncoderConfig(n_points = self.n_points, d_h = self.d_h, n_layers = self.n_layers, n_heads = self.n_heads,
                             d_f = self.d_f, d_img = self.d_img, resolution = self.resolution, channels = self.channels,
                             gamma = self.gamma, margin_scale = self.margin_scale, lambda_vec = self.lambda_vec,
                             lambda_img = self.lambda_img, lambda_kl = self.lambda_kl, lambda_ce = self.lambda_ce,
                             pooling = self.pooling, positional = self.positional, pen_channel = self.pen_channel,
                             stroke_norm = self.stroke_norm, percep_seed = self.percep_seed)

    def denoiser_config(self, n_classes = 0):
        from .latent_diffusion import DenoiserConfig
        return DenoiserConfig(n_layers = self.diffusion_layers, n_heads = self.diffusion_heads, d_model = self.d_model,
                              max_strokes = self.max_strokes, d_latent = self.d_f, t_embed_dim = self.t_embed_dim,
                              n_classes = n_classes, v_mag = self.v_mag, sigma = self.sigma)

    def metric_config(self):
        from .metrics import MetricConfig
        return MetricConfig(resolution = self.metric_resolution, k = self.knn_k, rdp_epsilon = self.rdp_epsilon,
                            extractor_seed = self.extractor_seed, margin_scale = self.margin_scale,
                            threshold = self.metric_threshold, gamma = self.metric_gamma or None)


class ConfigError(UsageError):
    """Raised when a configuration key is unknown or its value cannot be parsed"""
