import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artery_surrogate.geometry import (
    MIN_SPAN_DEG, CalcificationSpec, ClosedSpline, GeometryError, GeometryRanges, GeometrySpec,
    TissueLabel, build_calcification_outline, classify_point, concentric_spec, flip_spec,
    points_in_polygon, polygon_area, polyline_is_simple, rotate_spec_90, sample_geometry,
)


def test_default_ranges():
    r = GeometryRanges()
    assert (r.artery_outer_radius_mm, r.artery_inner_radius_mm, r.lumen_radius_mm) == (2.0, 1.75, 0.75)
    assert r.lumen_offset_x_mm == r.lumen_offset_y_mm == (-0.25, 0.25)
    assert r.calcification_count == (1, 2)
    assert r.calc_inner_radius_mm == (1.0, 1.25)
    assert r.calc_outer_radius_mm == (1.3, 1.5)
    assert r.calc_angle_deg == (0.0, 180.0)


@pytest.mark.parametrize("bad", [
    {"lumen_offset_x_mm": (0.3, 0.1)},
    {"calcification_count": ()},
    {"calcification_count": (3,)},
    {"lumen_radius_mm": 1.9},
    {"calc_angle_deg": (0.0, 200.0)},
])
def test_invalid_ranges_rejected(bad):
    with pytest.raises(GeometryError):
        GeometryRanges(**bad).validate()


def test_ranges_dict_round_trip():
    r = GeometryRanges(calc_angle_deg=(10.0, 90.0))
    assert GeometryRanges.from_dict(r.to_dict()) == r


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_sampled_geometry_satisfies_invariants(seed):
    spec = sample_geometry(seed)
    ranges = GeometryRanges()
    assert spec.invariant_violations() == []
    assert -0.25 <= spec.Lx <= 0.25 and -0.25 <= spec.Ly <= 0.25
    assert len(spec.calcifications) in (1, 2)
    for c in spec.calcifications:
        assert ranges.calc_inner_radius_mm[0] <= c.inner_radius_mm <= ranges.calc_inner_radius_mm[1]
        assert ranges.calc_outer_radius_mm[0] <= c.outer_radius_mm <= ranges.calc_outer_radius_mm[1]
        assert MIN_SPAN_DEG <= c.angular_span_deg <= 180.0
        assert c.outline.n_points == 20


def test_sampling_is_deterministic():
    assert sample_geometry(7).to_json() == sample_geometry(7).to_json()
    assert sample_geometry(7).to_json() != sample_geometry(8).to_json()


def test_over_constrained_ranges_exhaust_retries():
    # inner radius always above the outer one
    ranges = GeometryRanges(calc_inner_radius_mm=(1.4, 1.45), calc_outer_radius_mm=(1.3, 1.35))
    with pytest.raises(GeometryError):
        sample_geometry(0, ranges)


def test_spline_is_closed_and_interpolates_control_points():
    spline = build_calcification_outline(1.1, 1.4, 90.0, 30.0)
    np.testing.assert_allclose(spline.evaluate(0.0), spline.evaluate(1.0), atol=1e-12)
    m = spline.n_points
    np.testing.assert_allclose(spline.evaluate(np.arange(m) / m), spline.control_points, atol=1e-12)


def test_spline_winding_counterclockwise():
    for span, start in [(10.0, 0.0), (90.0, 200.0), (180.0, 300.0)]:
        spline = build_calcification_outline(1.0, 1.5, span, start)
        assert spline.signed_area() > 0


def test_outline_area_close_to_annular_sector():
    cr, cR, span = 1.0, 1.5, 120.0
    spline = build_calcification_outline(cr, cR, span, 10.0)
    sector = 0.5 * math.radians(span) * (cR ** 2 - cr ** 2)
    # the closing end caps of the spline bulge slightly past the sector
    assert sector < spline.signed_area() < 1.06 * sector


def test_outline_control_points_on_arcs():
    c = CalcificationSpec(1.1, 1.4, 60.0, 45.0)
    np.testing.assert_allclose(np.hypot(*c.inner_points.T), 1.1)
    np.testing.assert_allclose(np.hypot(*c.outer_points.T), 1.4)
    ang = np.degrees(np.arctan2(c.outer_points[:, 1], c.outer_points[:, 0]))
    np.testing.assert_allclose([ang[0], ang[-1]], [45.0, 105.0], atol=1e-9)


def test_polygon_helpers():
    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    assert polygon_area(square) == pytest.approx(1.0)
    assert polygon_area(square[::-1]) == pytest.approx(-1.0)
    inside = points_in_polygon(square, np.array([0.5, 1.5, 0.25]), np.array([0.5, 0.5, 0.9]))
    assert inside.tolist() == [True, False, True]
    assert polyline_is_simple(square)
    bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1]], float)
    assert not polyline_is_simple(bowtie)


def test_classify_point_precedence():
    calc = CalcificationSpec(1.0, 1.5, 90.0, 0.0)
    spec = GeometrySpec(0, 2.0, 1.75, 0.75, 0.0, 0.0, [calc])
    assert classify_point(spec, 0.0, 0.0) is TissueLabel.LUMEN
    p = 1.25 * np.array([math.cos(math.radians(45)), math.sin(math.radians(45))])
    assert classify_point(spec, *p) is TissueLabel.CALCIUM
    assert classify_point(spec, -1.25, 0.0) is TissueLabel.FIBROUS
    assert classify_point(spec, -1.9, 0.0) is TissueLabel.ARTERY
    assert classify_point(spec, 1.9, 1.9) is TissueLabel.EXTERIOR
    grid = classify_point(spec, np.zeros((2, 3)), np.zeros((2, 3)))
    assert grid.shape == (2, 3) and np.all(grid == TissueLabel.LUMEN)


def test_labels_partition_plane(default_spec, rng):
    pts = rng.uniform(-2.5, 2.5, size=(2, 5000))
    labels = classify_point(default_spec, *pts)
    assert set(np.unique(labels)) <= {int(t) for t in TissueLabel}


def test_spec_json_round_trip(default_spec):
    back = GeometrySpec.from_json(default_spec.to_json())
    assert back.to_json() == default_spec.to_json()
    for a, b in zip(back.calcifications, default_spec.calcifications):
        np.testing.assert_array_equal(a.outline.control_points, b.outline.control_points)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.booleans(), st.booleans())
def test_flip_spec_mirrors_classification(seed, h, v):
    spec = sample_geometry(seed)
    flipped = flip_spec(spec, horizontal=h, vertical=v)
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-2.1, 2.1, size=(2, 2000))
    sx, sy = (-1 if h else 1), (-1 if v else 1)
    np.testing.assert_array_equal(classify_point(flipped, sx * x, sy * y), classify_point(spec, x, y))
    for c in flipped.calcifications:
        assert c.outline.signed_area() > 0


def test_flip_twice_is_identity(default_spec):
    twice = flip_spec(flip_spec(default_spec))
    for a, b in zip(twice.calcifications, default_spec.calcifications):
        np.testing.assert_allclose(a.outline.control_points, b.outline.control_points, atol=1e-15)


def test_rotate_90_four_times_is_identity(default_spec):
    spec = default_spec
    for _ in range(4):
        spec = rotate_spec_90(spec)
    for a, b in zip(spec.calcifications, default_spec.calcifications):
        np.testing.assert_allclose(a.outline.control_points, b.outline.control_points, atol=1e-12)


def test_concentric_spec_has_no_calcium():
    spec = concentric_spec()
    assert spec.calcifications == []
    assert classify_point(spec, 1.0, 0.0) is TissueLabel.FIBROUS


def test_closed_spline_rejects_bad_points():
    with pytest.raises(GeometryError):
        ClosedSpline(np.zeros((5, 3)))
