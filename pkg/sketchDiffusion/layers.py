import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import tensor_engine as te
from .config import config_from_values, config_to_text, parse_key_values
from .tensor_engine import Tensor
from .utilities import DataError, UsageError, rng_stream

"""
Network building blocks on top of the tensor engine: a parameter container with hierarchical names,
linear / normalization / attention / convolution layers and the AdamW optimizer with linear warm-up.
"""

logger = logging.getLogger(__name__)


class Module:
    """
    Container of named parameters and child modules. Parameter names are dotted paths,
    e.g. "vector_encoder.layers.0.attention.wq.weight".
    """

    def __init__(self):
        self._parameters = {}
        self._inits = {}
        self._modules = {}

    def add_parameter(self, name, shape, init = "uniform", fan_in = None):
        """
        It registers a parameter leaf. Values are assigned by initialize().

        Parameters
        ----------
        name: string
            local name
        shape: tuple
            the parameter shape
        init: string
            one of "uniform" (±sqrt(1/fan_in)), "zeros", "ones"
        fan_in: int
            fan-in of the uniform bound; the first dimension when None
        """
        if init not in ("uniform", "zeros", "ones"):
            raise UsageError("unknown initializer {}".format(init))
        tensor = Tensor(np.zeros(shape), requires_grad = True, name = name)
        self._parameters[name] = tensor
        self._inits[name] = (init, fan_in if fan_in is not None else shape[0])
        return tensor

    def add_module(self, name, module):
        self._modules[name] = module
        return module

    def named_parameters(self, prefix = ""):
        params = {}
        for name, tensor in self._parameters.items():
            params[prefix + name] = tensor
        for name, module in self._modules.items():
            params.update(module.named_parameters(prefix + name + "."))
        return params

    def _named_inits(self, prefix = ""):
        inits = {prefix + name: spec for name, spec in self._inits.items()}
        for name, module in self._modules.items():
            inits.update(module._named_inits(prefix + name + "."))
        return inits

    def initialize(self, seed):
        """
        It draws every parameter from its own seeded stream, keyed by the parameter's full name.

        Parameters
        ----------
        seed: int
            the run seed
        """
        inits = self._named_inits()
        for name, tensor in self.named_parameters().items():
            kind, fan_in = inits[name]
            if kind == "zeros":
                tensor.data = np.zeros(tensor.shape)
            elif kind == "ones":
                tensor.data = np.ones(tensor.shape)
            else:
                bound = math.sqrt(1.0 / fan_in)
                tensor.data = rng_stream(seed, "init", name).uniform(-bound, bound, tensor.shape)
        return self

    def state_dict(self):
        return {name: tensor.data.copy() for name, tensor in self.named_parameters().items()}

    def load_state_dict(self, state, prefix = ""):
        """
        It copies arrays into the parameters; every parameter must be present with its exact shape.
        """
        for name, tensor in self.named_parameters().items():
            key = prefix + name
            if key not in state:
                raise ParameterError("missing parameter {}".format(key))
            values = np.asarray(state[key], dtype = np.float64)
            if values.shape != tensor.shape:
                raise ParameterError("parameter {} has shape {}, expected {}".format(key, values.shape, tensor.shape))
            tensor.data = values.copy()
        return self

    def freeze(self):
        for tensor in self.named_parameters().values():
            tensor.requires_grad = False
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """x @ W + b with W of shape (d_in, d_out)."""

    def __init__(self, d_in, d_out, bias = True, zero_init = False):
        super().__init__()
        self.weight = self.add_parameter("weight", (d_in, d_out), "zeros" if zero_init else "uniform", fan_in = d_in)
        self.bias = self.add_parameter("bias", (d_out,), "zeros") if bias else None

    def forward(self, x):
        out = te.matmul(x, self.weight) if x.ndim >= 2 else te.reshape(te.matmul(te.reshape(x, (1, -1)), self.weight), (-1,))
        return te.bias_add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d, eps = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_parameter("gamma", (d,), "ones")
        self.beta = self.add_parameter("beta", (d,), "zeros")

    def forward(self, x):
        return te.bias_add(te.layer_norm(x, self.eps) * self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, d, hidden = None):
        super().__init__()
        hidden = hidden or 4 * d
        self.fc1 = self.add_module("fc1", Linear(d, hidden))
        self.fc2 = self.add_module("fc2", Linear(hidden, d))

    def forward(self, x):
        return self.fc2(te.relu(self.fc1(x)))


class SelfAttention(Module):
    """
    Multi-head scaled dot-product self-attention over x of shape (B, N, d). No positional information is added here,
    so the layer is equivariant to permutations of the N tokens.
    """

    def __init__(self, d, n_heads):
        super().__init__()
        if d % n_heads:
            raise UsageError("width {} is not divisible by {} heads".format(d, n_heads))
        self.d, self.n_heads, self.d_head = d, n_heads, d // n_heads
        self.wq = self.add_module("wq", Linear(d, d))
        self.wk = self.add_module("wk", Linear(d, d))
        self.wv = self.add_module("wv", Linear(d, d))
        self.wo = self.add_module("wo", Linear(d, d))

    def _split(self, x, b, n):
        return te.transpose(te.reshape(x, (b, n, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def forward(self, x):
        b, n, _ = x.shape
        q = self._split(self.wq(x), b, n)
        k = self._split(self.wk(x), b, n)
        v = self._split(self.wv(x), b, n)
        scores = te.matmul(q, te.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.d_head))
        heads = te.matmul(te.softmax(scores, axis = -1), v)
        merged = te.reshape(te.transpose(heads, (0, 2, 1, 3)), (b, n, self.d))
        return self.wo(merged)


class TransformerLayer(Module):
    """Pre-norm residual block: x + attention(norm(x)), then x + feed-forward(norm(x))."""

    def __init__(self, d, n_heads):
        super().__init__()
        self.norm1 = self.add_module("norm1", LayerNorm(d))
        self.attention = self.add_module("attention", SelfAttention(d, n_heads))
        self.norm2 = self.add_module("norm2", LayerNorm(d))
        self.ff = self.add_module("ff", FeedForward(d))

    def forward(self, x):
        x = x + self.attention(self.norm1(x))
        return x + self.ff(self.norm2(x))


class TransformerStack(Module):
    def __init__(self, d, n_heads, n_layers):
        super().__init__()
        self.layers = [self.add_module("layers.{}".format(i), TransformerLayer(d, n_heads)) for i in range(n_layers)]
        self.norm = self.add_module("norm", LayerNorm(d))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class AttentionPooling(Module):
    """Pools (B, N, d) to (B, d) with one learned query."""

    def __init__(self, d):
        super().__init__()
        self.query = self.add_parameter("query", (d,), fan_in = d)

    def forward(self, x):
        return te.attention_pool(x, self.query)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel = 4, stride = 2, padding = 1):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = self.add_parameter("weight", (c_out, c_in, kernel, kernel), fan_in = c_in * kernel * kernel)
        self.bias = self.add_parameter("bias", (c_out,), "zeros")

    def forward(self, x):
        out = te.conv2d(x, self.weight, self.stride, self.padding)
        return out + te.reshape(self.bias, (1, -1, 1, 1))


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel = 4, stride = 2, padding = 1):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = self.add_parameter("weight", (c_in, c_out, kernel, kernel), fan_in = c_in * kernel * kernel)
        self.bias = self.add_parameter("bias", (c_out,), "zeros")

    def forward(self, x):
        out = te.conv_transpose2d(x, self.weight, self.stride, self.padding)
        return out + te.reshape(self.bias, (1, -1, 1, 1))


def sinusoidal_encoding(positions, dim):
    """
    Fixed sinusoidal features of scalar positions.

    Parameters
    ----------
    positions: array_like
        1-D positions (point indices or diffusion timesteps)
    dim: int
        feature width (even)

    Returns
    -------
    encoding: numpy.ndarray
        (len(positions), dim) array, sines in the first half and cosines in the second
    """
    positions = np.asarray(positions, dtype = np.float64).reshape(-1, 1)
    half = dim // 2
    frequencies = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = positions * frequencies
    encoding = np.concatenate([np.sin(angles), np.cos(angles)], axis = 1)
    if dim % 2:
        encoding = np.concatenate([encoding, np.zeros((len(positions), 1))], axis = 1)
    return encoding


class AdamW:
    """
    Adam with decoupled weight decay and a linear learning-rate warm-up.

    Parameters
    ----------
    parameters: dict
        name -> Tensor
    lr: float
        peak learning rate
    betas: tuple
        moment decay rates
    eps: float
        denominator floor
    weight_decay: float
        decoupled decay applied to parameters of rank ≥ 2
    warmup_steps: int
        steps over which the learning rate ramps linearly to lr
    """

    def __init__(self, parameters, lr = 1e-4, betas = (0.9, 0.999), eps = 1e-8, weight_decay = 0.01, warmup_steps = 0):
        self.parameters = {name: p for name, p in parameters.items() if p.requires_grad}
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.warmup_steps = weight_decay, warmup_steps
        self.step_count = 0
        self.m = {name: np.zeros(p.shape) for name, p in self.parameters.items()}
        self.v = {name: np.zeros(p.shape) for name, p in self.parameters.items()}

    def current_lr(self):
        if self.warmup_steps and self.step_count <= self.warmup_steps:
            return self.lr * self.step_count / self.warmup_steps
        return self.lr

    def zero_grad(self):
        for p in self.parameters.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        lr = self.current_lr()
        b1, b2 = self.betas
        for name, p in self.parameters.items():
            grad = p.grad if p.grad is not None else np.zeros(p.shape)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * grad
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * grad * grad
            m_hat = self.m[name] / (1.0 - b1 ** self.step_count)
            v_hat = self.v[name] / (1.0 - b2 ** self.step_count)
            data = p.data
            if self.weight_decay and p.ndim >= 2:
                data = data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


## Checkpoints ###############

@dataclass
class Checkpoint:
    """
    Trained parameters with the configuration that built them.

    Parameters
    ----------
    kind: string
        "stroke_autoencoder" or "denoiser"
    config: dataclass instance
        the model configuration
    parameters: dict
        parameter name -> numpy array
    metadata: dict
        extra string entries (schedule, class names, run config echo)
    loss_log: pandas DataFrame
        per-step training losses, not stored in the container
    """
    kind: str
    config: object
    parameters: dict
    metadata: dict = field(default_factory = dict)
    loss_log: pd.DataFrame = None

    @property
    def checkpoint_id(self):
        digest = hashlib.sha1(self.kind.encode("utf-8"))
        digest.update(config_to_text(self.config).encode("utf-8"))
        for name in sorted(self.parameters):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.parameters[name], dtype = "<f8").tobytes())
        return digest.hexdigest()[:12]


def save_checkpoint(checkpoint, path):
    """
    It writes a checkpoint through the tensor container; kind, config and metadata go to the key=value header.
    """
    header = "kind={}\n".format(checkpoint.kind)
    header += config_to_text(checkpoint.config, prefix = "config.")
    header += "".join("meta.{}={}\n".format(key, value) for key, value in sorted(checkpoint.metadata.items()))
    te.save_container(path, checkpoint.parameters, header)


def load_checkpoint(path, config_cls, kind):
    """
    It reads a checkpoint written by save_checkpoint and checks its kind.

    Parameters
    ----------
    path: string
        the container file
    config_cls: dataclass type
        class of the stored configuration
    kind: string
        the expected kind

    Returns
    -------
    checkpoint: Checkpoint
    """
    entries, header = te.load_container(path)
    values = parse_key_values(header, source = str(path))
    if values.get("kind") != kind:
        raise te.CheckpointError("{} holds a {} checkpoint, expected {}".format(path, values.get("kind"), kind))
    config = config_from_values(config_cls, {k[len("config."):]: v for k, v in values.items() if k.startswith("config.")})
    metadata = {k[len("meta."):]: v for k, v in values.items() if k.startswith("meta.")}
    return Checkpoint(kind, config, entries, metadata)


class ParameterError(DataError):
    """Raised when a state dict does not match the module parameters"""
