import xml.etree.ElementTree as ET

import numpy as np
import pytest

from pwacert.geometry import Partition, Polytope
from pwacert.plotting import SliceView, level_set_svg, marching_squares
from pwacert.relu import PwaFunction
from pwacert.uis import Member, UisBarrier


def test_circle_is_one_closed_polyline():
    xs = ys = np.linspace(-2, 2, 81)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    lines = marching_squares(xs, ys, 1.0 - X ** 2 - Y ** 2)
    assert len(lines) == 1
    line = lines[0]
    np.testing.assert_allclose(line[0], line[-1])
    r = np.linalg.norm(line, axis=1)
    assert np.abs(r - 1.0).max() < 5e-3


def test_two_blobs_and_open_curve():
    xs = ys = np.linspace(-3, 3, 121)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    F = np.maximum(0.5 - (X - 1.5) ** 2 - Y ** 2, 0.5 - (X + 1.5) ** 2 - Y ** 2)
    assert len(marching_squares(xs, ys, F)) == 2
    # a line crossing the square is one open polyline ending on the border
    lines = marching_squares(xs, ys, X - 0.3 * Y - 0.1)
    assert len(lines) == 1
    assert not np.allclose(lines[0][0], lines[0][-1])
    np.testing.assert_allclose(lines[0][:, 0] - 0.3 * lines[0][:, 1], 0.1, atol=1e-12)


def test_saddle_cell_is_resolved():
    xs = ys = np.array([0.0, 1.0])
    F = np.array([[1.0, -1.0], [-1.0, 1.0]])
    lines = marching_squares(xs, ys, F)
    assert sum(len(l) - 1 for l in lines) == 2


def test_flat_field_has_no_curves():
    xs = ys = np.linspace(0, 1, 5)
    assert marching_squares(xs, ys, np.ones((5, 5))) == []


def test_svg_has_members_union_and_markers(tmp_path):
    dom = Polytope.box([-1, -1], [1, 1])
    part = Partition([dom], dom)
    members = [Member(PwaFunction(part, [[1.0, 0.0]], [0.2]), 0.1), Member(PwaFunction(part, [[0.0, 1.0]], [0.3]), 0.4)]
    b = UisBarrier(members)
    counts = level_set_svg(b, tmp_path / "a.svg", grid=60, title="demo",
                           markers=[("unsafe", np.array([-1, -1]), np.array([0, 0]), "#d62728")])
    assert counts == {"alpha=0.1": 1, "alpha=0.4": 1, "union": 1}
    root = ET.parse(tmp_path / "a.svg").getroot()
    ns = "{http://www.w3.org/2000/svg}"
    classes = [p.get("class") for p in root.iter(ns + "polyline")]
    assert sorted(set(classes)) == ["alpha=0.1", "alpha=0.4", "union"]
    assert any(r.find(ns + "title") is not None for r in root.iter(ns + "rect"))


def test_slice_view_lifts_points():
    dom = Polytope.box(-np.ones(4), np.ones(4))
    part = Partition([dom], dom)
    b = UisBarrier([Member(PwaFunction(part, [[1.0, 0.0, -1.0, 0.0]], [0.5]), 0.3)])
    view = SliceView(b, axes=(2, 3))
    X = view.lift(np.array([[0.25, -0.5]]))
    np.testing.assert_allclose(X, [[0.0, 0.0, 0.25, -0.5]])
    vals, _ = view.member_values(np.array([[0.25, -0.5]]))
    assert vals[0, 0] == pytest.approx(0.25)
    np.testing.assert_allclose(view.domain.bbox[0], [-1, -1])
