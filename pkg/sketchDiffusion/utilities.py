import logging
import sys
import zlib

import numpy as np
import pandas as pd

pd.set_option("display.precision", 3)

"""
Shared helpers: the package exception hierarchy, seeded counter-based random streams,
logging set-up and the small range and smoothing helpers used across modules.
"""

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1


def rng_stream(seed, *names):
    """
    It returns a numpy Generator driven by the counter-based Philox bit generator. Each (seed, names) pair
    identifies an independent stream: the 128-bit Philox key holds the seed in its low 64 bits and the CRC-32 of
    the joined names in the high bits, so parameters, batches and noise draws never share a stream.

    Parameters
    ----------
    seed: int
        the run seed
    names: str
        stream identifiers, e.g. ("init", "encoder.layers.0.attention.wq.weight")

    Returns
    -------
    generator: numpy.random.Generator
        the stream
    """
    label = "/".join(str(name) for name in names)
    key = ((zlib.crc32(label.encode("utf-8")) & 0xFFFFFFFF) << 64) | (int(seed) & _SEED_MASK)
    return np.random.Generator(np.random.Philox(key = key))


def log_config(level = logging.INFO, stream = None):
    """
    It configures the root logger once for command-line use.

    Parameters
    ----------
    level: int
        the logging level
    stream: file-like
        where records are written; stderr when None
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    for noisy in ["matplotlib", "PIL"]:
        logging.getLogger(noisy).setLevel(logging.WARNING)


def rescale_ranges(n, range1, range2):
    """
    Given a value n (or an array of values) and the range which it belongs to, the function rescales the value to a different range.

    Parameters
    ----------
    n: float or numpy.ndarray
        a value
    range1: tuple
        a certain range, e.g. (-1, 1). The value n should be within this range
    range2: tuple
        a range, e.g. (0, 1), that should be used to rescale the value.

    Returns
    -------
    value: float or numpy.ndarray
        the rescaled value
    """
    delta1 = range1[1] - range1[0]
    delta2 = range2[1] - range2[0]
    value = (delta2 * (n - range1[0]) / delta1) + range2[0]
    return value


def smooth(values, window):
    """
    Trailing moving average used to judge training trends.

    Parameters
    ----------
    values: sequence of float
        the raw series
    window: int
        the averaging window

    Returns
    -------
    smoothed: numpy.ndarray
        the smoothed series (length len(values) - window + 1)
    """
    values = np.asarray(values, dtype = np.float64)
    window = max(1, min(int(window), len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode = "valid")


class Error(Exception):
    """Base class for other exceptions"""
class UsageError(Error):
    """Raised when an operation is invoked with invalid arguments or an invalid configuration"""
class DataError(Error):
    """Raised when input data or an artifact file is malformed or missing"""
class NumericError(Error):
    """Raised when a numeric computation fails: shape mismatch, non-finite values, non-PSD matrices"""
