"""Randomized idealized artery cross-sections.

A cross-section is a set of circles (artery wall, fibrous layer, lumen) plus
one or two free-form calcifications.  Each calcification is a closed spline
through ten equally spaced points on an inner arc and ten on an outer arc.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "GeometryRanges",
    "ClosedSpline",
    "CalcificationSpec",
    "GeometrySpec",
    "TissueLabel",
    "sample_geometry",
    "build_calcification_outline",
    "classify_point",
    "flip_spec",
    "polygon_area",
    "polyline_is_simple",
    "rotate_spec_90",
    "concentric_spec",
    "points_in_polygon",
    "SOLID_LABELS",
]

POINTS_PER_ARC = 10
POLYLINE_SEGMENTS = 512
MIN_SPAN_DEG = 5.0
LUMEN_MARGIN_MM = 0.01
MAX_SPEC_RETRIES = 1000
MAX_ANGLE_RETRIES = 100


class GeometryError(ValueError):
    """Raised for degenerate inputs or an exhausted sampling budget."""


class TissueLabel(IntEnum):
    EXTERIOR = 0
    ARTERY = 1
    FIBROUS = 2
    CALCIUM = 3
    LUMEN = 4


SOLID_LABELS = (TissueLabel.ARTERY, TissueLabel.FIBROUS, TissueLabel.CALCIUM)


@dataclass(frozen=True)
class GeometryRanges:
    """Sampling ranges; the defaults are the nominal design ranges."""

    artery_outer_radius_mm: float = 2.0
    artery_inner_radius_mm: float = 1.75
    lumen_radius_mm: float = 0.75
    lumen_offset_x_mm: tuple[float, float] = (-0.25, 0.25)
    lumen_offset_y_mm: tuple[float, float] = (-0.25, 0.25)
    calcification_count: tuple[int, ...] = (1, 2)
    calc_inner_radius_mm: tuple[float, float] = (1.0, 1.25)
    calc_outer_radius_mm: tuple[float, float] = (1.3, 1.5)
    calc_angle_deg: tuple[float, float] = (0.0, 180.0)

    def validate(self) -> None:
        for name in ("lumen_offset_x_mm", "lumen_offset_y_mm", "calc_inner_radius_mm",
                     "calc_outer_radius_mm", "calc_angle_deg"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise GeometryError(f"empty interval for {name}: [{lo}, {hi}]")
        if not self.calcification_count:
            raise GeometryError("calcification_count must not be empty")
        if any(c not in (1, 2) for c in self.calcification_count):
            raise GeometryError("calcification_count values must be 1 or 2")
        if not 0 < self.lumen_radius_mm < self.artery_inner_radius_mm < self.artery_outer_radius_mm:
            raise GeometryError("radii must satisfy 0 < Lr < r < R")
        lo, hi = self.calc_angle_deg
        if lo < 0 or hi > 180:
            raise GeometryError("calcification angle must lie within [0, 180]")
        if hi < MIN_SPAN_DEG:
            raise GeometryError(f"calcification angle range lies below the {MIN_SPAN_DEG} deg minimum")

    @classmethod
    def from_dict(cls, data: dict) -> "GeometryRanges":
        kwargs = {}
        for key, value in data.items():
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _centripetal_segment(p0, p1, p2, p3, t):
    """Barry-Goldman evaluation of one centripetal Catmull-Rom span (p1 -> p2).

    ``t`` has shape (m,) in [0, 1]; returns (m, 2).
    """
    def knot(a, b):
        return max(math.sqrt(math.hypot(*(b - a))), 1e-12)

    t0 = 0.0
    t1 = t0 + knot(p0, p1)
    t2 = t1 + knot(p1, p2)
    t3 = t2 + knot(p2, p3)
    s = (t1 + t[:, None] * (t2 - t1))
    a1 = (t1 - s) / (t1 - t0) * p0 + (s - t0) / (t1 - t0) * p1
    a2 = (t2 - s) / (t2 - t1) * p1 + (s - t1) / (t2 - t1) * p2
    a3 = (t3 - s) / (t3 - t2) * p2 + (s - t2) / (t3 - t2) * p3
    b1 = (t2 - s) / (t2 - t0) * a1 + (s - t0) / (t2 - t0) * a2
    b2 = (t3 - s) / (t3 - t1) * a2 + (s - t1) / (t3 - t1) * a3
    return (t2 - s) / (t2 - t1) * b1 + (s - t1) / (t2 - t1) * b2


@dataclass
class ClosedSpline:
    """Closed interpolating spline through ordered control points (mm).

    The curve parameter runs over [0, 1); each control-point span covers an
    equal share of it, so ``evaluate(0) == evaluate(1)``.
    """

    control_points: np.ndarray
    kind: str = "centripetal-catmull-rom"

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float)
        if self.control_points.ndim != 2 or self.control_points.shape[1] != 2:
            raise GeometryError("control points must have shape (m, 2)")
        self._polyline = None

    @property
    def n_points(self) -> int:
        return len(self.control_points)

    def evaluate(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float)) % 1.0
        m = self.n_points
        pos = t * m
        seg = np.minimum(np.floor(pos).astype(int), m - 1)
        local = pos - seg
        out = np.empty((len(t), 2))
        P = self.control_points
        for k in np.unique(seg):
            sel = seg == k
            out[sel] = _centripetal_segment(P[(k - 1) % m], P[k], P[(k + 1) % m],
                                            P[(k + 2) % m], local[sel])
        return out

    def polyline(self, n_segments: int = POLYLINE_SEGMENTS) -> np.ndarray:
        """Vertices of a closed polyline approximating the curve.

        Each span gets the same whole number of samples (at least
        ``n_segments`` in total), so reversing the control points yields the
        same vertex set.
        """
        if n_segments == POLYLINE_SEGMENTS and self._polyline is not None:
            return self._polyline
        m = self.n_points
        per_span = -(-n_segments // m)
        local = np.arange(per_span) / per_span
        P = self.control_points
        out = np.vstack([_centripetal_segment(P[(k - 1) % m], P[k], P[(k + 1) % m],
                                              P[(k + 2) % m], local) for k in range(m)])
        if n_segments == POLYLINE_SEGMENTS:
            self._polyline = out
        return out

    def contains(self, x, y) -> np.ndarray:
        return points_in_polygon(self.polyline(), x, y)

    def signed_area(self, n_segments: int = 4096) -> float:
        return polygon_area(self.polyline(n_segments))


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area of a closed polygon; positive when counterclockwise."""
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def points_in_polygon(vertices: np.ndarray, x, y, chunk: int = 8192) -> np.ndarray:
    """Even-odd crossing test of points against a closed polygon."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast(x, y).shape
    px = np.broadcast_to(x, shape).ravel()
    py = np.broadcast_to(y, shape).ravel()
    inside = np.zeros(px.shape, dtype=bool)

    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    cand = np.flatnonzero((px >= lo[0]) & (px <= hi[0]) & (py >= lo[1]) & (py <= hi[1]))
    x0, y0 = vertices[:, 0], vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle_dy = y1 - y0
    for start in range(0, len(cand), chunk):
        idx = cand[start:start + chunk]
        qx = px[idx, None]
        qy = py[idx, None]
        straddle = (y0 > qy) != (y1 > qy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x0 + (qy - y0) * (x1 - x0) / straddle_dy
        crossings = np.count_nonzero(straddle & (qx < xc), axis=1)
        inside[idx] = crossings % 2 == 1
    return inside.reshape(shape)


def polyline_is_simple(vertices: np.ndarray) -> bool:
    """Brute-force check that no two non-adjacent edges of a closed polyline cross."""
    a = vertices
    b = np.roll(vertices, -1, axis=0)
    n = len(a)

    def orient(p, q, r):
        return np.sign((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                       - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    A, B = a[:, None, :], b[:, None, :]
    C, D = a[None, :, :], b[None, :, :]
    o1 = orient(A, B, C)
    o2 = orient(A, B, D)
    o3 = orient(C, D, A)
    o4 = orient(C, D, B)
    cross = (o1 * o2 < 0) & (o3 * o4 < 0)
    i, j = np.indices((n, n))
    adjacent = (np.abs(i - j) <= 1) | (np.abs(i - j) == n - 1)
    return not bool(np.any(cross & ~adjacent))


def build_calcification_outline(inner_radius, outer_radius, span_deg, start_deg) -> ClosedSpline:
    """Closed spline through 10 inner-arc and 10 outer-arc points.

    The loop runs along the outer arc from ``start_deg`` to ``start_deg +
    span_deg`` and back along the inner arc, so it winds counterclockwise.
    """
    if not 0 < inner_radius < outer_radius:
        raise GeometryError("need 0 < inner radius < outer radius")
    if not 0 <= span_deg <= 180:
        raise GeometryError("angular span must lie within [0, 180] degrees")
    if span_deg < MIN_SPAN_DEG:
        raise GeometryError(f"angular span {span_deg} below minimum {MIN_SPAN_DEG} deg")
    theta = np.deg2rad(start_deg + span_deg * np.arange(POINTS_PER_ARC) / (POINTS_PER_ARC - 1))
    arc = np.column_stack([np.cos(theta), np.sin(theta)])
    points = np.vstack([outer_radius * arc, inner_radius * arc[::-1]])
    return ClosedSpline(points)


@dataclass
class CalcificationSpec:
    inner_radius_mm: float
    outer_radius_mm: float
    angular_span_deg: float
    angular_position_deg: float
    outline: ClosedSpline = field(default=None, repr=False)

    def __post_init__(self):
        if self.outline is None:
            self.outline = build_calcification_outline(
                self.inner_radius_mm, self.outer_radius_mm,
                self.angular_span_deg, self.angular_position_deg)

    @property
    def inner_points(self) -> np.ndarray:
        """Inner-arc control points in order of increasing angle."""
        return self.outline.control_points[POINTS_PER_ARC:][::-1]

    @property
    def outer_points(self) -> np.ndarray:
        return self.outline.control_points[:POINTS_PER_ARC]

    def to_dict(self) -> dict:
        return {
            "inner_radius_mm": self.inner_radius_mm,
            "outer_radius_mm": self.outer_radius_mm,
            "angular_span_deg": self.angular_span_deg,
            "angular_position_deg": self.angular_position_deg,
            "outline": {"kind": self.outline.kind,
                        "control_points": self.outline.control_points.tolist()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalcificationSpec":
        outline = data.get("outline")
        spline = None
        if outline is not None:
            spline = ClosedSpline(np.array(outline["control_points"], dtype=float),
                                  kind=outline.get("kind", "centripetal-catmull-rom"))
        return cls(data["inner_radius_mm"], data["outer_radius_mm"],
                   data["angular_span_deg"], data["angular_position_deg"], spline)


@dataclass
class GeometrySpec:
    seed: int
    R: float
    r: float
    Lr: float
    Lx: float
    Ly: float
    calcifications: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "R": self.R, "r": self.r, "Lr": self.Lr,
            "Lx": self.Lx, "Ly": self.Ly,
            "calcifications": [c.to_dict() for c in self.calcifications],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeometrySpec":
        return cls(int(data["seed"]), float(data["R"]), float(data["r"]), float(data["Lr"]),
                   float(data["Lx"]), float(data["Ly"]),
                   [CalcificationSpec.from_dict(c) for c in data["calcifications"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GeometrySpec":
        return cls.from_dict(json.loads(text))

    def invariant_violations(self) -> list[str]:
        """Human-readable list of broken invariants (empty when valid)."""
        problems = []
        if not 1 <= len(self.calcifications) <= 2:
            problems.append("calcification count must be 1 or 2")
        if math.hypot(self.Lx, self.Ly) + self.Lr >= self.r:
            problems.append("lumen disk is not strictly inside the fibrous circle")
        for k, calc in enumerate(self.calcifications):
            if not calc.inner_radius_mm < calc.outer_radius_mm:
                problems.append(f"calcification {k}: inner radius >= outer radius")
            poly = calc.outline.polyline()
            rad = np.hypot(poly[:, 0], poly[:, 1])
            if rad.max() >= self.r:
                problems.append(f"calcification {k} crosses the artery inner radius")
            dist = np.hypot(poly[:, 0] - self.Lx, poly[:, 1] - self.Ly)
            if dist.min() < self.Lr + LUMEN_MARGIN_MM or calc.outline.contains(self.Lx, self.Ly):
                problems.append(f"calcification {k} within {LUMEN_MARGIN_MM} mm of the lumen")
            if not polyline_is_simple(poly):
                problems.append(f"calcification {k} outline self-intersects")
        if len(self.calcifications) == 2:
            a, b = self.calcifications
            if _arcs_overlap(a.angular_position_deg, a.angular_span_deg,
                             b.angular_position_deg, b.angular_span_deg):
                problems.append("calcification angular intervals overlap")
        return problems


def _arcs_overlap(start_a, span_a, start_b, span_b) -> bool:
    d = (start_b - start_a) % 360.0
    return d <= span_a or (360.0 - d) <= span_b


def _sample_calcification(rng, ranges: GeometryRanges) -> tuple[float, float, float]:
    lo, hi = ranges.calc_angle_deg
    for _ in range(MAX_ANGLE_RETRIES):
        span = rng.uniform(lo, hi)
        if span >= MIN_SPAN_DEG:
            break
    else:
        raise GeometryError("could not sample a calcification span above the minimum")
    return rng.uniform(*ranges.calc_inner_radius_mm), rng.uniform(*ranges.calc_outer_radius_mm), span


def _try_sample(rng, seed: int, ranges: GeometryRanges) -> GeometrySpec | None:
    R = float(ranges.artery_outer_radius_mm)
    r = float(ranges.artery_inner_radius_mm)
    Lr = float(ranges.lumen_radius_mm)
    Lx = float(rng.uniform(*ranges.lumen_offset_x_mm))
    Ly = float(rng.uniform(*ranges.lumen_offset_y_mm))
    count = int(rng.choice(np.asarray(ranges.calcification_count)))
    calcs = []
    for _ in range(count):
        cr, cR, span = _sample_calcification(rng, ranges)
        if cr >= cR:
            return None
        for _ in range(MAX_ANGLE_RETRIES):
            start = rng.uniform(0.0, 360.0)
            if not any(_arcs_overlap(c.angular_position_deg, c.angular_span_deg, start, span)
                       for c in calcs):
                break
        else:
            return None
        calcs.append(CalcificationSpec(float(cr), float(cR), float(span), float(start)))
    spec = GeometrySpec(seed, R, r, Lr, Lx, Ly, calcs)
    return None if spec.invariant_violations() else spec


def sample_geometry(seed: int, ranges: GeometryRanges | None = None) -> GeometrySpec:
    """Draw a valid random cross-section; deterministic in ``seed``.

    Raises
    ------
    GeometryError
        If no valid geometry is found within the retry budget, which means
        the ranges are over-constrained.
    """
    ranges = ranges or GeometryRanges()
    ranges.validate()
    rng = np.random.default_rng(seed)
    for _ in range(MAX_SPEC_RETRIES):
        spec = _try_sample(rng, seed, ranges)
        if spec is not None:
            return spec
    raise GeometryError(f"no valid geometry after {MAX_SPEC_RETRIES} attempts (seed={seed})")


def classify_point(spec: GeometrySpec, x, y):
    """Tissue label at (x, y); works elementwise on arrays.

    Precedence is Lumen > Calcium > Fibrous > Artery > Exterior.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    scalar = x.ndim == 0 and y.ndim == 0
    x, y = np.broadcast_arrays(x, y)
    rad = np.hypot(x, y)
    labels = np.full(x.shape, TissueLabel.EXTERIOR, dtype=np.uint8)
    labels[rad <= spec.R] = TissueLabel.ARTERY
    labels[rad < spec.r] = TissueLabel.FIBROUS
    for calc in spec.calcifications:
        labels[calc.outline.contains(x, y)] = TissueLabel.CALCIUM
    labels[np.hypot(x - spec.Lx, y - spec.Ly) < spec.Lr] = TissueLabel.LUMEN
    if scalar:
        return TissueLabel(int(labels))
    return labels


def flip_spec(spec: GeometrySpec, horizontal: bool = True, vertical: bool = False) -> GeometrySpec:
    """Mirror a geometry: ``horizontal`` negates x, ``vertical`` negates y.

    Outlines are mirrored point-wise (order reversed to keep the winding
    counterclockwise), so the mirrored curve is exactly the reflected curve.
    """
    sx = -1.0 if horizontal else 1.0
    sy = -1.0 if vertical else 1.0
    calcs = []
    for c in spec.calcifications:
        start, span = c.angular_position_deg, c.angular_span_deg
        if horizontal:
            start = 180.0 - start - span
        if vertical:
            start = -start - span
        pts = c.outline.control_points * np.array([sx, sy])
        if horizontal != vertical:
            pts = _reverse_loop(pts)
        calcs.append(CalcificationSpec(c.inner_radius_mm, c.outer_radius_mm, span,
                                       start % 360.0, ClosedSpline(pts, c.outline.kind)))
    return GeometrySpec(spec.seed, spec.R, spec.r, spec.Lr, sx * spec.Lx, sy * spec.Ly, calcs)


def _reverse_loop(points: np.ndarray) -> np.ndarray:
    # Reverse traversal but keep the outer-arc-first layout: after a mirror the
    # outer arc is descending in angle, so reversing each arc restores order.
    outer = points[:POINTS_PER_ARC][::-1]
    inner = points[POINTS_PER_ARC:][::-1]
    return np.vstack([outer, inner])


def rotate_spec_90(spec: GeometrySpec) -> GeometrySpec:
    """Rotate a geometry by +90 degrees about the origin."""
    calcs = []
    for c in spec.calcifications:
        pts = c.outline.control_points @ np.array([[0.0, 1.0], [-1.0, 0.0]])
        calcs.append(CalcificationSpec(c.inner_radius_mm, c.outer_radius_mm, c.angular_span_deg,
                                       (c.angular_position_deg + 90.0) % 360.0,
                                       ClosedSpline(pts, c.outline.kind)))
    return GeometrySpec(spec.seed, spec.R, spec.r, spec.Lr, -spec.Ly, spec.Lx, calcs)


def concentric_spec(R: float = 2.0, r: float = 1.75, Lr: float = 0.75,
                    calcifications: Sequence[CalcificationSpec] = ()) -> GeometrySpec:
    """A centred, calcification-free geometry used for verification cases."""
    return GeometrySpec(0, R, r, Lr, 0.0, 0.0, list(calcifications))
