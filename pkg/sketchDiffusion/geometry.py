import logging
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import LineString

from .sketch_io import RawSketch, Sketch
from .utilities import DataError, UsageError, rescale_ranges

pd.set_option("display.precision", 3)

"""
Stroke geometry: arc-length resampling, sketch-level and stroke-level normalization with their inverse,
bounding boxes and unsigned-distance-field rendering. Sketch space is [-1, 1]^2, unit space is [0, 1]^2,
y grows downward and UDF rows index y.
"""

logger = logging.getLogger(__name__)

EPS_BOX = 1e-6
UDF_MAGIC = b"SKDUDF\x00\x00"
UDF_VERSION = 1


class BBox(NamedTuple):
    """Center (x, y) and extent (w, h) of a stroke in unit space."""
    x: float
    y: float
    w: float
    h: float

    @property
    def scale(self):
        return max(self.w, self.h)

    @property
    def minimum(self):
        return np.array([self.x - self.w / 2.0, self.y - self.h / 2.0])


IDENTITY_BOX = BBox(0.5, 0.5, 1.0, 1.0)


@dataclass
class UdfField:
    """An R x R grid of unsigned-distance-field values in [0, 1]; rows index y."""
    values: np.ndarray
    gamma: float

    @property
    def resolution(self):
        return self.values.shape[0]


## Resampling and normalization ###############

def resample_stroke(polyline, n):
    """
    The function resamples a polyline into n points uniformly spaced by arc length, keeping both endpoints exactly.
    Single-point (or zero-length) input is replicated n times.

    Parameters
    ----------
    polyline: array_like
        (m, 2) points, m ≥ 1
    n: int
        number of output points

    Returns
    -------
    points: numpy.ndarray
        (n, 2) array
    """
    if n < 1:
        raise UsageError("resample size must be at least 1, got {}".format(n))
    points = np.asarray(polyline, dtype = np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise GeometryError("cannot resample an empty polyline")
    if len(points) == 1:
        return np.repeat(points, n, axis = 0)
    line = LineString(points)
    if line.length == 0.0:
        return np.repeat(points[:1], n, axis = 0)
    if n == 1:
        return points[:1].copy()
    distances = np.linspace(0.0, line.length, n)
    sampled = shapely.get_coordinates(shapely.line_interpolate_point(line, distances[1:-1]))
    return np.vstack([points[:1], sampled, points[-1:]])


def normalize_sketch(sketch):
    """
    It centers the sketch bounding box at the origin and scales isotropically so that the longer side spans [-1, 1].
    A sketch whose points all coincide is placed at the origin with zero extent.

    Parameters
    ----------
    sketch: RawSketch
        the parsed sketch

    Returns
    -------
    sketch: Sketch
        the normalized sketch, recording center and scale
    """
    if not sketch.strokes:
        raise GeometryError("sketch {} has no points".format(sketch.source_id))
    points = np.concatenate(sketch.strokes)
    low, high = points.min(axis = 0), points.max(axis = 0)
    center = (low + high) / 2.0
    extent = float((high - low).max())
    factor = 2.0 / extent if extent > 0 else 0.0
    strokes = [(s - center) * factor for s in sketch.strokes]
    return Sketch(strokes, source_id = sketch.source_id, label = sketch.label, center = center, scale = factor)


def stroke_bbox(points):
    """
    Tight bounding box of points in unit space, with zero extents inflated to EPS_BOX.
    """
    points = np.asarray(points, dtype = np.float64).reshape(-1, 2)
    low, high = points.min(axis = 0), points.max(axis = 0)
    extent = high - low
    if extent.min() < EPS_BOX:
        logger.warning("inflating degenerate stroke box of extent (%g, %g) to at least %g", extent[0], extent[1], EPS_BOX)
    w, h = max(float(extent[0]), EPS_BOX), max(float(extent[1]), EPS_BOX)
    return BBox(float(low[0]) + w / 2.0, float(low[1]) + h / 2.0, w, h)


def normalize_stroke(stroke, remap = True):
    """
    The function maps a stroke into the unit square by its own bounding box. The box minimum is subtracted and the
    result divided by max(w, h), so the longer axis spans [0, 1] and the aspect ratio is kept.

    Parameters
    ----------
    stroke: array_like
        (n, 2) points in sketch space [-1, 1]
    remap: boolean
        when True the points are first remapped from [-1, 1] to [0, 1]; when False they are taken as already remapped

    Returns
    -------
    local, box: tuple
        the (n, 2) normalized points and the BBox in unit space
    """
    points = np.asarray(stroke, dtype = np.float64).reshape(-1, 2)
    if remap:
        points = rescale_ranges(points, (-1.0, 1.0), (0.0, 1.0))
    box = stroke_bbox(points)
    return (points - box.minimum) / box.scale, box


def denormalize_stroke(local, box, remap = True):
    """
    The inverse of normalize_stroke.

    Parameters
    ----------
    local: array_like
        (n, 2) normalized points
    box: BBox
        the stroke box in unit space
    remap: boolean
        when True the result is mapped back from [0, 1] to sketch space [-1, 1]

    Returns
    -------
    points: numpy.ndarray
        (n, 2) array
    """
    box = BBox(*box)
    if not (box.w > 0 and box.h > 0):
        raise GeometryError("box extents must be positive, got w={} h={}".format(box.w, box.h))
    points = np.asarray(local, dtype = np.float64).reshape(-1, 2) * box.scale + box.minimum
    if remap:
        points = rescale_ranges(points, (0.0, 1.0), (-1.0, 1.0))
    return points


def prepare_strokes(sketch, n_points, stroke_norm = True):
    """
    It resamples every stroke of a normalized sketch and applies stroke-level normalization. With stroke_norm False
    the strokes keep their position in the unit square and carry the identity box.

    Parameters
    ----------
    sketch: Sketch
        a sketch in [-1, 1] space
    n_points: int
        N_p
    stroke_norm: boolean
        whether stroke-level normalization is applied

    Returns
    -------
    prepared: list of tuple
        (local points (n_points, 2), BBox) per stroke
    """
    prepared = []
    for stroke in sketch.strokes:
        points = resample_stroke(stroke, n_points)
        if stroke_norm:
            prepared.append(normalize_stroke(points))
        else:
            prepared.append((rescale_ranges(points, (-1.0, 1.0), (0.0, 1.0)), IDENTITY_BOX))
    return prepared


## Unsigned distance fields ###############

def cell_centers(resolution):
    """(R*R, 2) cell-center coordinates (x, y), row-major with rows indexing y."""
    ticks = (np.arange(resolution) + 0.5) / resolution
    ys, xs = np.meshgrid(ticks, ticks, indexing = "ij")
    return np.column_stack([xs.ravel(), ys.ravel()])


def squared_distance_to_polyline(grid, points):
    """
    Squared exact distance from every grid point to the nearest segment of the polyline, by clamped projection.
    A single point acts as a degenerate segment.
    """
    points = np.asarray(points, dtype = np.float64).reshape(-1, 2)
    starts = points[:-1] if len(points) > 1 else points
    ends = points[1:] if len(points) > 1 else points
    direction = ends - starts
    length2 = (direction * direction).sum(axis = 1)
    relative = grid[:, None, :] - starts[None, :, :]
    with np.errstate(invalid = "ignore", divide = "ignore"):
        t = np.where(length2 > 0, (relative * direction).sum(axis = 2) / np.where(length2 > 0, length2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    offset = relative - t[:, :, None] * direction[None, :, :]
    return (offset * offset).sum(axis = 2).min(axis = 1)


def _shrink(points, margin_scale):
    return 0.5 + (np.asarray(points, dtype = np.float64).reshape(-1, 2) - 0.5) * margin_scale


def render_udf(stroke, gamma = 50.0, resolution = 64, margin_scale = 0.8):
    """
    The function renders the unsigned distance field of a stroke: every cell holds the maximum over segments of
    exp(-gamma * d^2), d being the exact distance from the cell center to the segment. The stroke is first shrunk
    about the canvas center (0.5, 0.5) by margin_scale.

    Parameters
    ----------
    stroke: array_like
        (n, 2) points in unit space
    gamma: float
        sharpness, > 0
    resolution: int
        R, the grid is R x R
    margin_scale: float
        shrink factor about the canvas center

    Returns
    -------
    field: UdfField
        the rendered field
    """
    if not gamma > 0:
        raise UsageError("gamma must be positive, got {}".format(gamma))
    if resolution < 1:
        raise UsageError("resolution must be positive, got {}".format(resolution))
    distance2 = squared_distance_to_polyline(cell_centers(resolution), _shrink(stroke, margin_scale))
    values = np.exp(-gamma * distance2).reshape(resolution, resolution)
    return UdfField(values, float(gamma))


def render_sketch_udf(strokes, gamma = 50.0, resolution = 64, margin_scale = 0.8):
    """
    It renders a whole sketch given in [-1, 1] space as the cell-wise maximum of its strokes' fields.

    Parameters
    ----------
    strokes: list of array_like
        the strokes in sketch space
    gamma: float
        sharpness, > 0
    resolution: int
        R
    margin_scale: float
        shrink factor about the canvas center

    Returns
    -------
    field: UdfField
        the rendered field; all zeros for an empty sketch
    """
    if not gamma > 0:
        raise UsageError("gamma must be positive, got {}".format(gamma))
    values = np.zeros((resolution, resolution))
    grid = cell_centers(resolution)
    for stroke in strokes:
        unit = rescale_ranges(np.asarray(stroke, dtype = np.float64), (-1.0, 1.0), (0.0, 1.0))
        distance2 = squared_distance_to_polyline(grid, _shrink(unit, margin_scale))
        values = np.maximum(values, np.exp(-gamma * distance2).reshape(resolution, resolution))
    return UdfField(values, float(gamma))


def udf_to_pgm(field):
    """
    Binary PGM (P5) bytes of a field, values scaled to 0-255.
    """
    pixels = np.round(np.clip(field.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = "P5\n{} {}\n255\n".format(pixels.shape[1], pixels.shape[0]).encode("ascii")
    return header + pixels.tobytes()


def write_udf(field, path):
    """
    It stores a field as a versioned little-endian record: magic, u32 version, u32 R, f64 gamma, R*R f32 values.
    """
    resolution = field.resolution
    payload = UDF_MAGIC + struct.pack("<IId", UDF_VERSION, resolution, field.gamma)
    payload += np.asarray(field.values, dtype = "<f4").tobytes()
    with open(path, "wb") as handle:
        handle.write(payload)


def read_udf(path):
    try:
        with open(path, "rb") as handle:
            payload = handle.read()
    except FileNotFoundError:
        raise UdfFormatError("field file {} does not exist".format(path)) from None
    if payload[:len(UDF_MAGIC)] != UDF_MAGIC:
        raise UdfFormatError("{} is not a field file".format(path))
    version, resolution, gamma = struct.unpack_from("<IId", payload, len(UDF_MAGIC))
    if version != UDF_VERSION:
        raise UdfFormatError("{} has field format version {}, expected {}".format(path, version, UDF_VERSION))
    offset = len(UDF_MAGIC) + struct.calcsize("<IId")
    if len(payload) - offset != 4 * resolution * resolution:
        raise UdfFormatError("{} is truncated".format(path))
    values = np.frombuffer(payload, dtype = "<f4", offset = offset).reshape(resolution, resolution).astype(np.float64)
    return UdfField(values, gamma)


## Dataset statistics ###############

def stroke_statistics(sketches):
    """
    Per-sketch stroke statistics.

    Parameters
    ----------
    sketches: list of RawSketch
        the sketches

    Returns
    -------
    stats: pandas DataFrame
        source_id, label, stroke_count, n_points and mean_stroke_length (polyline length in the sketch's coordinates)
    """
    rows = []
    for sketch in sketches:
        lengths = [LineString(s).length if len(s) > 1 else 0.0 for s in sketch.strokes]
        rows.append({"source_id": sketch.source_id, "label": sketch.label, "stroke_count": sketch.stroke_count,
                     "n_points": sketch.n_points, "mean_stroke_length": float(np.mean(lengths)) if lengths else 0.0})
    return pd.DataFrame(rows, columns = ["source_id", "label", "stroke_count", "n_points", "mean_stroke_length"])


class GeometryError(UsageError):
    """Raised when a geometric operation receives degenerate or invalid input"""
class UdfFormatError(DataError):
    """Raised when a field file is missing or has the wrong format"""
