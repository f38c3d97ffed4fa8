import io
import json
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import svgwrite

from .utilities import DataError, UsageError

pd.set_option("display.precision", 3)

"""
This set of functions handles the sketch formats: QuickDraw NDJSON and stroke-3 parsing, the canonical in-memory
sketch model, Ramer-Douglas-Peucker simplification, SVG export (and parse-back) and the ingestion manifest.
Coordinates follow the raster convention, y grows downward.
"""

logger = logging.getLogger(__name__)

SKETCHES_FORMAT = "sketchDiffusion-sketches"
MANIFEST_FORMAT = "sketchDiffusion-manifest"
FORMAT_VERSION = 1


@dataclass
class RawSketch:
    """
    A sketch as parsed: a list of polylines, each an (n, 2) float array with n ≥ 1.
    """
    strokes: List[np.ndarray] = field(default_factory = list)
    source_id: str = ""
    label: Optional[str] = None

    def __post_init__(self):
        strokes = []
        for index, stroke in enumerate(self.strokes):
            points = np.asarray(stroke, dtype = np.float64).reshape(-1, 2)
            if len(points) == 0:
                raise ParseError("sketch {}: stroke {} has no points".format(self.source_id, index))
            if not np.all(np.isfinite(points)):
                raise ParseError("sketch {}: stroke {} has non-finite coordinates".format(self.source_id, index))
            strokes.append(points)
        self.strokes = strokes

    @property
    def stroke_count(self):
        return len(self.strokes)

    @property
    def n_points(self):
        return int(sum(len(s) for s in self.strokes))


@dataclass
class Sketch(RawSketch):
    """
    A sketch normalized to the [-1, 1] canvas; center and scale record the map from the raw coordinates,
    raw = point / scale + center.
    """
    center: np.ndarray = field(default_factory = lambda: np.zeros(2))
    scale: float = 1.0


@dataclass
class LineError:
    """A recoverable per-line parse failure."""
    line_number: int
    message: str

    def __str__(self):
        return "line {}: {}".format(self.line_number, self.message)


class ParsedSketches(list):
    """A list of RawSketch carrying the per-line errors met while parsing."""

    def __init__(self, sketches = (), errors = ()):
        super().__init__(sketches)
        self.errors = list(errors)


## Parsing functions ###############

def _lines(data):
    # bytes are decoded line by line in parse_quickdraw_ndjson
    if isinstance(data, (bytes, bytearray, str)):
        return data.splitlines()
    if hasattr(data, "read"):
        content = data.read()
        return _lines(content)
    return list(data)


def _record_to_sketch(record, line_number):
    if not isinstance(record, dict) or "drawing" not in record:
        raise ValueError("record has no \"drawing\" field")
    drawing = record["drawing"]
    if not isinstance(drawing, list):
        raise ValueError("\"drawing\" is not an array of strokes")
    strokes = []
    for index, stroke in enumerate(drawing):
        if not isinstance(stroke, list) or len(stroke) < 2:
            raise ValueError("stroke {} is not an [xs, ys] pair".format(index))
        xs, ys = stroke[0], stroke[1]
        if len(xs) != len(ys) or len(xs) == 0:
            raise ValueError("stroke {} has coordinate arrays of lengths {} and {}".format(index, len(xs), len(ys)))
        strokes.append(np.column_stack([np.asarray(xs, dtype = np.float64), np.asarray(ys, dtype = np.float64)]))
    source_id = str(record.get("key_id", "line{}".format(line_number)))
    label = record.get("word")
    return RawSketch(strokes, source_id = source_id, label = None if label is None else str(label))


def parse_quickdraw_ndjson(data):
    """
    The function parses QuickDraw newline-delimited JSON: one object per line with a "drawing" field holding per-stroke
    [xs, ys] arrays and an optional "word" label. Malformed lines do not abort the parse; they are collected
    as LineError records in the .errors attribute of the returned list.

    Parameters
    ----------
    data: bytes, string, file-like or iterable of lines
        the NDJSON content

    Returns
    -------
    sketches: ParsedSketches
        one RawSketch per well-formed line, in input order
    """
    sketches, errors = [], []
    for line_number, line in enumerate(_lines(data), start = 1):
        if not line.strip():
            continue
        try:
            if isinstance(line, (bytes, bytearray)):
                line = line.decode("utf-8")
            record = json.loads(line)
            sketches.append(_record_to_sketch(record, line_number))
        except (ValueError, TypeError, ParseError) as error:
            errors.append(LineError(line_number, str(error)))
            logger.warning("skipping malformed line %d: %s", line_number, error)
    return ParsedSketches(sketches, errors)


def parse_stroke3(rows, source_id = "", label = None):
    """
    The function converts stroke-3 rows (dx, dy, pen) into absolute polylines. Coordinates are the prefix sums of the
    offsets; a stroke ends after each point whose pen value is 1.

    Parameters
    ----------
    rows: array_like
        (n, 3) rows of relative offsets and pen-lift flags
    source_id: string
        identifier of the sketch
    label: string
        optional category

    Returns
    -------
    sketch: RawSketch
        the absolute-coordinate sketch; zero strokes for empty input
    """
    rows = np.asarray(rows, dtype = np.float64).reshape(-1, 3)
    if len(rows) == 0:
        return RawSketch([], source_id = source_id, label = label)
    pens = rows[:, 2]
    invalid = np.flatnonzero((pens != 0) & (pens != 1))
    if len(invalid):
        raise ParseError("row {} has pen value {}, expected 0 or 1".format(invalid[0], pens[invalid[0]]))
    points = np.cumsum(rows[:, :2], axis = 0)
    ends = np.flatnonzero(pens == 1) + 1
    strokes = [chunk for chunk in np.split(points, ends) if len(chunk)]
    return RawSketch(strokes, source_id = source_id, label = label)


def to_stroke3(sketch):
    """
    It converts a sketch into stroke-3 rows; the first offset is taken from the origin.

    Parameters
    ----------
    sketch: RawSketch
        the sketch

    Returns
    -------
    rows: numpy.ndarray
        (n, 3) array of (dx, dy, pen)
    """
    if not sketch.strokes:
        return np.zeros((0, 3))
    points = np.concatenate(sketch.strokes)
    offsets = np.diff(points, axis = 0, prepend = np.zeros((1, 2)))
    pens = np.zeros(len(points))
    pens[np.cumsum([len(s) for s in sketch.strokes]) - 1] = 1.0
    return np.column_stack([offsets, pens])


## Simplification ###############

def point_segment_distance(point, start, end):
    """
    Exact Euclidean distance from a point to the closed segment [start, end].
    """
    point, start, end = (np.asarray(p, dtype = np.float64) for p in (point, start, end))
    direction = end - start
    length2 = float(direction @ direction)
    if length2 == 0.0:
        return float(np.hypot(*(point - start)))
    t = min(1.0, max(0.0, float((point - start) @ direction) / length2))
    return float(np.hypot(*(point - start - t * direction)))


def rdp_simplify(polyline, epsilon):
    """
    Ramer-Douglas-Peucker simplification with an explicit stack. The deviation of a point is its distance to the
    anchor-floater segment (not the infinite line), so every removed point lies within epsilon of the output.

    Parameters
    ----------
    polyline: array_like
        (n, 2) points
    epsilon: float
        the tolerance, ≥ 0

    Returns
    -------
    simplified: numpy.ndarray
        a subsequence of the input keeping both endpoints
    """
    if epsilon < 0:
        raise UsageError("rdp epsilon must be non-negative, got {}".format(epsilon))
    points = np.asarray(polyline, dtype = np.float64).reshape(-1, 2)
    if len(points) < 3:
        return points.copy()
    keep = np.zeros(len(points), dtype = bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        anchor, floater = stack.pop()
        if floater - anchor < 2:
            continue
        distances = [point_segment_distance(points[i], points[anchor], points[floater]) for i in range(anchor + 1, floater)]
        farthest = int(np.argmax(distances))
        if distances[farthest] > epsilon:
            index = anchor + 1 + farthest
            keep[index] = True
            stack.append((index, floater))
            stack.append((anchor, index))
    return points[keep]


## SVG export ###############

def _strokes_of(sketch):
    return sketch.strokes if hasattr(sketch, "strokes") else list(sketch)


def _path_data(points, canvas):
    pixels = (np.asarray(points, dtype = np.float64) + 1.0) / 2.0 * canvas
    if len(pixels) == 1:
        pixels = np.vstack([pixels, pixels])
    commands = ["M {:.9f} {:.9f}".format(*pixels[0])]
    commands += ["L {:.9f} {:.9f}".format(*p) for p in pixels[1:]]
    return " ".join(commands)


def export_svg(sketch, stroke_width = 2.0, canvas = 256, description = None):
    """
    It renders a sketch in [-1, 1] canvas space as SVG 1.1 text with one path per stroke and round caps.
    Pixel coordinates are px = (x + 1) / 2 * canvas; single-point strokes become zero-length lines.

    Parameters
    ----------
    sketch: Sketch, GeneratedSketch or list of arrays
        the strokes
    stroke_width: float
        line width in pixels
    canvas: int
        width and height of the image in pixels
    description: string
        optional text stored in the <desc> element (e.g. a config echo)

    Returns
    -------
    svg: string
        the document
    """
    if canvas <= 0:
        raise UsageError("canvas must be a positive integer, got {}".format(canvas))
    strokes = _strokes_of(sketch)
    for index, stroke in enumerate(strokes):
        if not np.all(np.isfinite(np.asarray(stroke, dtype = np.float64))):
            raise ExportError("stroke {} has non-finite coordinates".format(index))
    drawing = svgwrite.Drawing(size = (canvas, canvas), profile = "full", debug = False)
    drawing.attribs["data-format"] = "{} svg {}".format(SKETCHES_FORMAT, FORMAT_VERSION)
    if description:
        drawing.set_desc(desc = description)
    for stroke in strokes:
        drawing.add(drawing.path(d = _path_data(stroke, canvas), fill = "none", stroke = "black", stroke_width = stroke_width,
                                 stroke_linecap = "round", stroke_linejoin = "round"))
    buffer = io.StringIO()
    drawing.write(buffer, pretty = False)
    return buffer.getvalue()


_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def read_svg(text):
    """
    It parses back the paths written by export_svg and inverts the viewport map.

    Parameters
    ----------
    text: string
        the SVG document

    Returns
    -------
    strokes: list of numpy.ndarray
        the strokes in [-1, 1] canvas space
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as error:
        raise ParseError("invalid SVG: {}".format(error)) from None
    expected = "{} svg {}".format(SKETCHES_FORMAT, FORMAT_VERSION)
    if root.get("data-format") != expected:
        raise ArtifactError("SVG data-format is {!r}, expected {!r}".format(root.get("data-format"), expected))
    canvas = float(_NUMBER.match(root.get("width")).group())
    strokes = []
    for element in root.iter():
        if element.tag.split("}")[-1] != "path":
            continue
        values = np.array([float(v) for v in _NUMBER.findall(element.get("d"))])
        points = values.reshape(-1, 2) / canvas * 2.0 - 1.0
        if len(points) == 2 and np.array_equal(points[0], points[1]):
            points = points[:1]
        strokes.append(points)
    return strokes


## Canonical sketch files and ingestion manifest ###############

def write_sketches(sketches, path, config_text = ""):
    """
    It writes sketches as QuickDraw-style JSON lines behind a format header line.

    Parameters
    ----------
    sketches: list of RawSketch
        the sketches
    path: string
        destination file
    config_text: string
        key=value config echo stored in the header
    """
    header = {"format": SKETCHES_FORMAT, "version": FORMAT_VERSION, "config": config_text}
    with open(path, "w", encoding = "utf-8") as handle:
        handle.write(json.dumps(header, sort_keys = True) + "\n")
        for sketch in sketches:
            record = {"key_id": sketch.source_id, "word": sketch.label,
                      "drawing": [[s[:, 0].tolist(), s[:, 1].tolist()] for s in sketch.strokes]}
            handle.write(json.dumps(record) + "\n")


def read_sketches(path):
    """
    It reads a file written by write_sketches, checking its format header.

    Returns
    -------
    sketches: ParsedSketches
        the sketches
    """
    try:
        with open(path, "r", encoding = "utf-8") as handle:
            lines = handle.read().splitlines()
    except FileNotFoundError:
        raise ArtifactError("sketch file {} does not exist".format(path)) from None
    try:
        header = json.loads(lines[0]) if lines else {}
    except ValueError:
        header = {}
    if header.get("format") != SKETCHES_FORMAT:
        raise ArtifactError("{} is not a sketch file".format(path))
    if header.get("version") != FORMAT_VERSION:
        raise ArtifactError("{} has sketch format version {}, expected {}".format(path, header.get("version"), FORMAT_VERSION))
    return parse_quickdraw_ndjson([""] + lines[1:])


@dataclass
class DatasetManifest:
    """
    Entries (source_id, label, stroke_count) of the retained sketches and the maximum stroke count N_s.
    """
    entries: pd.DataFrame
    max_strokes: int

    def __len__(self):
        return len(self.entries)


def build_manifest(sketches, max_strokes):
    """
    The function filters out sketches with more than max_strokes strokes and records the retained ones.

    Parameters
    ----------
    sketches: list of RawSketch
        the parsed sketches
    max_strokes: int
        N_s

    Returns
    -------
    manifest, retained: tuple
        the DatasetManifest and the list of retained sketches
    """
    if max_strokes < 1:
        raise UsageError("max_strokes must be positive, got {}".format(max_strokes))
    retained = []
    for sketch in sketches:
        if sketch.stroke_count > max_strokes:
            logger.warning("dropping sketch %s with %d strokes (limit %d)", sketch.source_id, sketch.stroke_count, max_strokes)
            continue
        retained.append(sketch)
    entries = pd.DataFrame({"source_id": [s.source_id for s in retained],
                            "label": [s.label for s in retained],
                            "stroke_count": [s.stroke_count for s in retained]},
                           columns = ["source_id", "label", "stroke_count"])
    return DatasetManifest(entries, int(max_strokes)), retained


def write_manifest(manifest, path, config_text = ""):
    with open(path, "w", encoding = "utf-8", newline = "") as handle:
        handle.write("# {} {}\n".format(MANIFEST_FORMAT, FORMAT_VERSION))
        handle.write("# max_strokes={}\n".format(manifest.max_strokes))
        for line in config_text.splitlines():
            handle.write("# {}\n".format(line))
        manifest.entries.to_csv(handle, index = False, lineterminator = "\n")


def read_manifest(path):
    try:
        with open(path, "r", encoding = "utf-8") as handle:
            lines = handle.read().splitlines()
    except FileNotFoundError:
        raise ArtifactError("manifest {} does not exist".format(path)) from None
    n_header = 0
    while n_header < len(lines) and lines[n_header].startswith("#"):
        n_header += 1
    first, second = (lines + ["", ""])[:2]
    first = first.split()
    if first[1:] != [MANIFEST_FORMAT, str(FORMAT_VERSION)]:
        raise ArtifactError("{} is not a version {} manifest".format(path, FORMAT_VERSION))
    max_strokes = int(second.strip("# ").split("=")[1])
    # header lines are skipped by count
    entries = pd.read_csv(path, skiprows = n_header, dtype = {"source_id": str, "label": str})
    return DatasetManifest(entries, max_strokes)


class ParseError(DataError):
    """Raised when a sketch record cannot be parsed"""
class ExportError(DataError):
    """Raised when a sketch cannot be exported"""
class ArtifactError(DataError):
    """Raised when a sketch or manifest file is missing or has the wrong format version"""
