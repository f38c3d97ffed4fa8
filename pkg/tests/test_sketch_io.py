"""Unit tests for parsing, simplification, SVG export and the canonical sketch files."""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

import sketchDiffusion as sd

LINE = json.dumps({"word": "line", "key_id": "1", "drawing": [[[0, 10], [0, 0]]]})


def _paths(svg):
    root = ET.fromstring(svg)
    return [e for e in root.iter() if e.tag.split("}")[-1] == "path"]


## Parsing ###############

def test_parse_single_line():
    sketches = sd.parse_quickdraw_ndjson(LINE)
    assert len(sketches) == 1
    assert sketches[0].stroke_count == 1
    assert np.array_equal(sketches[0].strokes[0], [[0.0, 0.0], [10.0, 0.0]])
    assert sketches[0].label == "line"
    assert sketches.errors == []


def test_parse_empty_input():
    sketches = sd.parse_quickdraw_ndjson("")
    assert len(sketches) == 0
    assert sketches.errors == []


def test_parse_corrupted_first_line():
    data = "\n".join([LINE[:-7], LINE, LINE])
    sketches = sd.parse_quickdraw_ndjson(data.encode("utf-8"))
    assert len(sketches) == 2
    assert len(sketches.errors) == 1
    assert sketches.errors[0].line_number == 1
    assert "line 1" in str(sketches.errors[0])


def test_parse_invalid_utf8_line():
    good = LINE.encode("utf-8")
    data = b"\n".join([good, b'{"word":"\xff\xfe","drawing":[]}', good])
    sketches = sd.parse_quickdraw_ndjson(data)
    assert len(sketches) == 2
    assert [e.line_number for e in sketches.errors] == [2]


def test_parse_record_without_drawing():
    data = "\n".join([LINE, json.dumps({"word": "x"}), json.dumps({"drawing": [[[1, 2], [3]]]})])
    sketches = sd.parse_quickdraw_ndjson(data)
    assert len(sketches) == 1
    assert [e.line_number for e in sketches.errors] == [2, 3]


def test_parse_fixture(toy_path):
    with open(toy_path, "rb") as handle:
        sketches = sd.parse_quickdraw_ndjson(handle)
    assert len(sketches) == 64
    assert sketches.errors == []
    assert {s.label for s in sketches} == {"box", "star"}
    assert len({s.source_id for s in sketches}) == 64


def test_stroke3_two_strokes():
    sketch = sd.parse_stroke3([(0, 0, 0), (1, 0, 1), (0, 1, 0), (1, 0, 1)])
    assert sketch.stroke_count == 2
    assert np.array_equal(sketch.strokes[0], [[0, 0], [1, 0]])
    assert np.array_equal(sketch.strokes[1], [[1, 1], [2, 1]])


def test_stroke3_degenerate_inputs():
    single = sd.parse_stroke3([(5, 5, 1)])
    assert single.stroke_count == 1
    assert np.array_equal(single.strokes[0], [[5, 5]])
    assert sd.parse_stroke3([]).stroke_count == 0
    with pytest.raises(sd.ParseError):
        sd.parse_stroke3([(0, 0, 2)])


def test_stroke3_inverse():
    rng = np.random.default_rng(3)
    sketch = sd.RawSketch([rng.uniform(-1, 1, (n, 2)) for n in (3, 1, 5)])
    back = sd.parse_stroke3(sd.to_stroke3(sketch))
    assert back.stroke_count == 3
    for a, b in zip(sketch.strokes, back.strokes):
        assert np.allclose(a, b, atol = 1e-12)


def test_raw_sketch_rejects_non_finite():
    with pytest.raises(sd.ParseError):
        sd.RawSketch([np.array([[0.0, np.nan]])])


## Simplification ###############

def test_rdp_examples():
    assert np.array_equal(sd.rdp_simplify([(0, 0), (1, 0), (2, 0)], 0.01), [[0, 0], [2, 0]])
    assert len(sd.rdp_simplify([(0, 0), (1, 1), (2, 0)], 0.5)) == 3
    with pytest.raises(sd.UsageError):
        sd.rdp_simplify([(0, 0), (1, 1)], -1.0)


def test_rdp_zero_epsilon_keeps_bent_polylines():
    rng = np.random.default_rng(0)
    polyline = np.cumsum(rng.normal(size = (12, 2)), axis = 0)
    assert np.array_equal(sd.rdp_simplify(polyline, 0.0), polyline)


def test_rdp_bounds_deviation():
    rng = np.random.default_rng(1)
    for _ in range(20):
        polyline = np.cumsum(rng.normal(size = (30, 2)), axis = 0)
        epsilon = 0.5
        kept = sd.rdp_simplify(polyline, epsilon)
        assert np.array_equal(kept[0], polyline[0]) and np.array_equal(kept[-1], polyline[-1])
        rows = {tuple(p) for p in polyline}
        assert all(tuple(p) in rows for p in kept)
        # every dropped point lies within epsilon of the simplified polyline
        indices = [int(np.flatnonzero((polyline == p).all(axis = 1))[0]) for p in kept]
        for start, end in zip(indices[:-1], indices[1:]):
            for point in polyline[start + 1:end]:
                assert sd.point_segment_distance(point, polyline[start], polyline[end]) <= epsilon + 1e-12


## SVG ###############

def test_svg_empty_sketch():
    svg = sd.export_svg([])
    assert _paths(svg) == []
    root = ET.fromstring(svg)
    assert float(root.get("width")) == 256


def test_svg_one_stroke():
    svg = sd.export_svg([np.array([[-1.0, -1.0], [1.0, 0.5]])])
    paths = _paths(svg)
    assert len(paths) == 1
    d = paths[0].get("d")
    assert d.count("M") == 1 and d.count("L") == 1
    assert paths[0].get("stroke-linecap") == "round"


def test_svg_round_trip():
    rng = np.random.default_rng(2)
    strokes = [rng.uniform(-1, 1, (n, 2)) for n in (2, 7, 1)]
    back = sd.read_svg(sd.export_svg(strokes, canvas = 300))
    assert len(back) == 3
    for a, b in zip(strokes, back):
        assert a.shape == b.shape
        assert np.allclose(a, b, atol = 1e-6)


def test_svg_description_and_determinism():
    strokes = [np.array([[0.0, 0.0], [0.5, 0.5]])]
    first = sd.export_svg(strokes, description = "seed=1")
    assert first == sd.export_svg(strokes, description = "seed=1")
    assert "seed=1" in first
    assert "data-format" in first


def test_svg_reader_checks_the_format_version():
    svg = sd.export_svg([np.array([[0.0, 0.0], [0.5, 0.5]])])
    with pytest.raises(sd.ArtifactError):
        sd.read_svg(svg.replace(" svg 1\"", " svg 2\""))
    with pytest.raises(sd.ArtifactError):
        sd.read_svg('<svg xmlns="http://www.w3.org/2000/svg" width="10" height="10"><path d="M 0 0 L 1 1"/></svg>')


def test_svg_rejects_non_finite():
    with pytest.raises(sd.ExportError):
        sd.export_svg([np.array([[0.0, np.inf], [1.0, 1.0]])])
    with pytest.raises(sd.UsageError):
        sd.export_svg([], canvas = 0)


## Sketch files and manifest ###############

def test_sketch_file_round_trip(tmp_path, toy_path):
    with open(toy_path, "rb") as handle:
        sketches = sd.parse_quickdraw_ndjson(handle.read())
    path = str(tmp_path / "sketches.ndjson")
    sd.write_sketches(sketches, path, "seed=0\n")
    back = sd.read_sketches(path)
    assert len(back) == len(sketches)
    for a, b in zip(sketches, back):
        assert a.source_id == b.source_id and a.label == b.label
        assert all(np.array_equal(s, t) for s, t in zip(a.strokes, b.strokes))


def test_sketch_file_rejects_foreign_files(tmp_path, toy_path):
    with pytest.raises(sd.ArtifactError):
        sd.read_sketches(toy_path)
    with pytest.raises(sd.ArtifactError):
        sd.read_sketches(str(tmp_path / "missing.ndjson"))


def test_manifest_filters_and_round_trips(tmp_path, toy_path):
    with open(toy_path, "rb") as handle:
        sketches = sd.parse_quickdraw_ndjson(handle.read())
    manifest, retained = sd.build_manifest(sketches, 4)
    assert all(s.stroke_count <= 4 for s in retained)
    assert len(retained) == len(manifest) < len(sketches)
    path = str(tmp_path / "manifest.csv")
    sd.write_manifest(manifest, path)
    back = sd.read_manifest(path)
    assert back.max_strokes == 4
    assert list(back.entries["source_id"]) == list(manifest.entries["source_id"])
    assert list(back.entries["stroke_count"]) == list(manifest.entries["stroke_count"])
    with pytest.raises(sd.UsageError):
        sd.build_manifest(sketches, 0)


def test_manifest_keeps_labels_with_hash(tmp_path):
    sketches = [sd.RawSketch([np.zeros((2, 2))], source_id = "a", label = "#hashtag"),
                sd.RawSketch([np.zeros((2, 2))], source_id = "b", label = "c# note")]
    manifest, _ = sd.build_manifest(sketches, 2)
    path = str(tmp_path / "manifest.csv")
    sd.write_manifest(manifest, path, "seed=0\nlabel_note=#x\n")
    back = sd.read_manifest(path)
    assert list(back.entries["label"]) == ["#hashtag", "c# note"]
    assert list(back.entries["source_id"]) == ["a", "b"]
