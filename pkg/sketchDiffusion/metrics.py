import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import cdist

from . import tensor_engine as te
from .config import config_to_text
from .geometry import render_sketch_udf
from .layers import Conv2d, Module
from .sketch_io import rdp_simplify
from .utilities import NumericError, UsageError

pd.set_option("display.precision", 3)

"""
Evaluation of generated sketches against real ones: a shared render path (per-stroke RDP, 1-px rasterization through
the distance-field renderer), a fixed seed-frozen convolutional feature extractor, FID and kNN-threshold
precision / recall.
"""

logger = logging.getLogger(__name__)

EIGEN_TOLERANCE = 1e-8


@dataclass
class MetricConfig:
    """
    Render and extractor settings. gamma None gives 1-px strokes: with gamma = ln 2 (2R)^2 the field drops to 0.5
    at half a cell from the stroke.
    """
    resolution: int = 64
    k: int = 20
    rdp_epsilon: float = 0.01
    extractor_seed: int = 0
    channels: tuple = (8, 16, 32)
    margin_scale: float = 0.8
    threshold: float = 0.5
    gamma: Optional[float] = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    @property
    def render_gamma(self):
        return self.gamma if self.gamma else math.log(2.0) * (2.0 * self.resolution) ** 2

    @property
    def extractor_id(self):
        return hashlib.sha1(config_to_text(self).encode("utf-8")).hexdigest()[:12]


@dataclass
class FeatureSet:
    vectors: np.ndarray
    extractor_id: str

    def __len__(self):
        return len(self.vectors)


@dataclass
class MetricReport:
    fid: float
    precision: float
    recall: float
    delta: float
    k: int
    n_real: int
    n_gen: int
    extractor_id: str

    def to_json(self):
        return json.dumps(asdict(self), sort_keys = True)


def rasterize_sketch(strokes, cfg):
    """
    The shared metric render path: each stroke is RDP-simplified, then the sketch is drawn through the distance-field
    renderer and thresholded.

    Parameters
    ----------
    strokes: list of array_like
        strokes in [-1, 1] sketch space
    cfg: MetricConfig

    Returns
    -------
    raster: numpy.ndarray
        (R, R) array of 0.0 / 1.0
    """
    simplified = [rdp_simplify(s, cfg.rdp_epsilon) for s in strokes]
    field = render_sketch_udf(simplified, cfg.render_gamma, cfg.resolution, cfg.margin_scale)
    return (field.values >= cfg.threshold).astype(np.float64)


class FeatureExtractor(Module):
    """
    Seed-frozen stride-2 conv blocks; the feature vector concatenates the global average of every block.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        widths = (1,) + cfg.channels
        self.blocks = [self.add_module("blocks.{}".format(i), Conv2d(widths[i], widths[i + 1])) for i in range(len(cfg.channels))]
        self.initialize(cfg.extractor_seed)
        self.freeze()

    def forward(self, raster):
        r = self.cfg.resolution
        x = te.Tensor(np.asarray(raster, dtype = np.float64).reshape(1, 1, r, r))
        pooled = []
        for block in self.blocks:
            x = te.relu(block(x))
            pooled.append(te.global_avg_pool(x))
        return te.concat(pooled, axis = -1).numpy().reshape(-1)


def _strokes_of(sketch):
    return sketch.strokes if hasattr(sketch, "strokes") else list(sketch)


def extract_features(sketches, cfg, extractor = None):
    """
    It renders every sketch and maps it through the feature extractor, one sketch at a time.

    Parameters
    ----------
    sketches: list
        Sketch, GeneratedSketch or lists of strokes in [-1, 1] space
    cfg: MetricConfig
    extractor: FeatureExtractor
        reused when given

    Returns
    -------
    features: FeatureSet
        (M, D) vectors and the extractor id
    """
    extractor = extractor or FeatureExtractor(cfg)
    with te.no_grad():
        rows = [extractor(rasterize_sketch(_strokes_of(s), cfg)) for s in sketches]
    width = sum(cfg.channels)
    vectors = np.array(rows, dtype = np.float64).reshape(-1, width)
    return FeatureSet(vectors, cfg.extractor_id)


def _check_pair(real, gen):
    if real.extractor_id != gen.extractor_id:
        raise MetricError("feature sets come from different extractors: {} and {}".format(real.extractor_id, gen.extractor_id))
    if real.vectors.shape[1] != gen.vectors.shape[1]:
        raise MetricError("feature widths differ: {} and {}".format(real.vectors.shape[1], gen.vectors.shape[1]))


def _psd_sqrt(matrix, name):
    matrix = (matrix + matrix.T) / 2.0
    eigenvalues, eigenvectors = linalg.eigh(matrix)
    if eigenvalues.min() < -EIGEN_TOLERANCE:
        raise NumericError("{} is not positive semi-definite: smallest eigenvalue {:.3e}".format(name, eigenvalues.min()))
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T, eigenvalues


def fid_from_moments(mu_r, sigma_r, mu_g, sigma_g):
    """
    Frechet distance between two Gaussians, |mu_r - mu_g|^2 + Tr(S_r + S_g - 2 sqrt(S_r S_g)). The trace of the
    matrix square root is taken from the symmetric product sqrt(S_r) S_g sqrt(S_r), which has the same spectrum.

    Parameters
    ----------
    mu_r, mu_g: array_like
        means
    sigma_r, sigma_g: array_like
        covariances

    Returns
    -------
    fid: float
    """
    mu_r, mu_g = np.atleast_1d(np.asarray(mu_r, dtype = np.float64)), np.atleast_1d(np.asarray(mu_g, dtype = np.float64))
    sigma_r, sigma_g = np.atleast_2d(np.asarray(sigma_r, dtype = np.float64)), np.atleast_2d(np.asarray(sigma_g, dtype = np.float64))
    root_r, _ = _psd_sqrt(sigma_r, "real covariance")
    _, product_eigenvalues = _psd_sqrt(root_r @ sigma_g @ root_r, "covariance product")
    diff = mu_r - mu_g
    value = float(diff @ diff + np.trace(sigma_r) + np.trace(sigma_g) - 2.0 * np.sqrt(product_eigenvalues).sum())
    return max(value, 0.0)


def fid(real, gen):
    """
    FID between two feature sets of at least 2 samples each.
    """
    _check_pair(real, gen)
    if len(real) < 2 or len(gen) < 2:
        raise MetricError("FID needs at least 2 samples per set, got {} and {}".format(len(real), len(gen)))
    moments = [(v.mean(axis = 0), np.cov(v, rowvar = False)) for v in (real.vectors, gen.vectors)]
    return fid_from_moments(moments[0][0], moments[0][1], moments[1][0], moments[1][1])


def knn_threshold(real, k = 20):
    """
    The mean over real samples of the distance to their k-th nearest other real sample.

    Parameters
    ----------
    real: FeatureSet
    k: int
        neighbour rank

    Returns
    -------
    delta: float
    """
    vectors = real.vectors if isinstance(real, FeatureSet) else np.asarray(real, dtype = np.float64)
    if len(vectors) <= k:
        raise MetricError("knn threshold needs more than k={} real samples, got {}".format(k, len(vectors)))
    distances = cdist(vectors, vectors)
    np.fill_diagonal(distances, np.inf)
    kth = np.partition(distances, k - 1, axis = 1)[:, k - 1]
    return float(kth.mean())


def precision_recall(real, gen, delta):
    """
    Precision: fraction of generated samples within delta of any real one. Recall: fraction of real samples within
    delta of any generated one. The boundary counts as inside.

    Returns
    -------
    precision, recall: tuple of float
    """
    if delta < 0:
        raise MetricError("delta must be non-negative, got {}".format(delta))
    real_vectors = real.vectors if isinstance(real, FeatureSet) else np.asarray(real, dtype = np.float64)
    gen_vectors = gen.vectors if isinstance(gen, FeatureSet) else np.asarray(gen, dtype = np.float64)
    if len(real_vectors) == 0 or len(gen_vectors) == 0:
        raise MetricError("precision / recall need non-empty sets")
    distances = cdist(gen_vectors, real_vectors)
    precision = float(np.mean(distances.min(axis = 1) <= delta))
    recall = float(np.mean(distances.min(axis = 0) <= delta))
    return precision, recall


def evaluate(real_sketches, gen_sketches, cfg):
    """
    The function renders both sets through the shared path, extracts features with one extractor and computes FID,
    the kNN threshold of the real set and precision / recall.

    Parameters
    ----------
    real_sketches, gen_sketches: list
        sketches in [-1, 1] space
    cfg: MetricConfig

    Returns
    -------
    report: MetricReport
    """
    extractor = FeatureExtractor(cfg)
    real = extract_features(real_sketches, cfg, extractor)
    gen = extract_features(gen_sketches, cfg, extractor)
    delta = knn_threshold(real, cfg.k)
    precision, recall = precision_recall(real, gen, delta)
    report = MetricReport(fid(real, gen), precision, recall, delta, cfg.k, len(real), len(gen), cfg.extractor_id)
    logger.info("fid %.4f precision %.3f recall %.3f (extractor %s)", report.fid, precision, recall, cfg.extractor_id)
    return report


def report_to_frame(reports):
    """
    A table of reports.

    Parameters
    ----------
    reports: dict
        name -> MetricReport

    Returns
    -------
    table: pandas DataFrame
        one row per report
    """
    return pd.DataFrame({name: asdict(report) for name, report in reports.items()}).T


## Stroke-complexity groups ###############

def stroke_complexity_group(mean_stroke_count):
    """low (< 4 strokes), medium (< 8) or high."""
    if mean_stroke_count < 4:
        return "low"
    if mean_stroke_count < 8:
        return "medium"
    return "high"


def evaluate_by_group(real_sketches, gen_sketches, cfg):
    """
    It assigns every class to a complexity group by the mean stroke count of its real sketches, then evaluates each
    group separately. A generated sketch joins the group of its provenance label when known, else the group of its
    own stroke count. Groups too small for the kNN threshold or FID are skipped.

    Returns
    -------
    reports: dict
        group -> MetricReport
    """
    counts = pd.DataFrame({"label": [s.label for s in real_sketches], "strokes": [len(s.strokes) for s in real_sketches]})
    class_groups = {label: stroke_complexity_group(mean) for label, mean in counts.groupby("label")["strokes"].mean().items()}
    real_groups, gen_groups = {}, {}
    for sketch in real_sketches:
        group = class_groups.get(sketch.label, stroke_complexity_group(len(sketch.strokes)))
        real_groups.setdefault(group, []).append(sketch)
    for sketch in gen_sketches:
        label = getattr(sketch, "provenance", {}).get("label")
        group = class_groups.get(label, stroke_complexity_group(len(_strokes_of(sketch))))
        gen_groups.setdefault(group, []).append(sketch)
    reports = {}
    for group in ("low", "medium", "high"):
        real, gen = real_groups.get(group, []), gen_groups.get(group, [])
        if len(real) <= cfg.k or len(gen) < 2:
            logger.warning("skipping group %s: %d real and %d generated sketches", group, len(real), len(gen))
            continue
        reports[group] = evaluate(real, gen, cfg)
    return reports


class MetricError(UsageError):
    """Raised when metric inputs are incompatible or too small"""
