"""Polygon and oriented-rectangle arithmetic in image coordinates.

Coordinates are continuous pixels with x to the right and y downward; the
origin is the top-left corner of the top-left pixel. Under this frame a
"clockwise" quad (as seen on screen) has a positive shoelace sum, which is
the canonical winding used everywhere in the package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateQuad, InvalidFactor

AREA_EPS = 1e-6  # px^2; anything smaller is degenerate
RIGHT_ANGLE_TOL = 1e-6
SIDE_TOL = 1e-6
_TIE_TOL = 1e-9


@dataclass(frozen=True, slots=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def __iter__(self):
        yield self.x
        yield self.y


@dataclass(frozen=True, slots=True)
class AABB:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin <= self.xmax and self.ymin <= self.ymax):
            raise ValueError(f"inverted AABB {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self) -> Point2:
        return Point2(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=np.float64)


def _as_vertices(vertices) -> np.ndarray:
    if isinstance(vertices, Quad):
        return vertices.v
    pts = np.array([tuple(p) for p in vertices] if not isinstance(vertices, np.ndarray) else vertices,
                   dtype=np.float64)
    return pts.reshape(-1, 2)


def signed_area2(pts: np.ndarray) -> np.ndarray:
    """Twice the shoelace sum over the last two axes (..., n, 2)."""
    x, y = pts[..., 0], pts[..., 1]
    return np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, axis=-1)


def _cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])


def _segments_cross(p1, p2, p3, p4):
    d1 = _cross(p3, p4, p1)
    d2 = _cross(p3, p4, p2)
    d3 = _cross(p1, p2, p3)
    d4 = _cross(p1, p2, p4)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def canonicalize_array(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised canonicalisation of (N, 4, 2) vertex arrays.

    Returns the reordered vertices and a boolean mask of the rows that form a
    valid (simple, non-degenerate) quad. Invalid rows are returned unchanged.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    finite = np.isfinite(pts).all(axis=(1, 2))
    safe = np.where(finite[:, None, None], pts, 0.0)
    a2 = signed_area2(safe)
    crossing = _segments_cross(safe[:, 0], safe[:, 1], safe[:, 2], safe[:, 3]) | _segments_cross(
        safe[:, 1], safe[:, 2], safe[:, 3], safe[:, 0]
    )
    ok = finite & (np.abs(a2) * 0.5 >= AREA_EPS) & ~crossing

    out = np.where((a2 < 0)[:, None, None], safe[:, ::-1], safe)
    s = out[..., 0] + out[..., 1]
    scale = _TIE_TOL * (1.0 + np.abs(out).max(axis=(1, 2)))
    # candidates: minimal x+y, then minimal y, then minimal x, each up to rounding noise
    cand = s <= s.min(axis=1, keepdims=True) + scale[:, None]
    ys = np.where(cand, out[..., 1], np.inf)
    cand &= ys <= ys.min(axis=1, keepdims=True) + scale[:, None]
    xs = np.where(cand, out[..., 0], np.inf)
    start = np.argmin(xs, axis=1)
    idx = (start[:, None] + np.arange(4)[None, :]) % 4
    out = out[np.arange(n)[:, None], idx]
    out = np.where(ok[:, None, None], out, pts)
    return out, ok


class Quad:
    """Four vertices in canonical order (clockwise on screen, see module doc).

    The constructor canonicalises its input, so ``Quad(v)`` and
    ``canonicalize(v)`` are the same thing.
    """

    __slots__ = ("v",)

    def __init__(self, vertices):
        pts = _as_vertices(vertices)
        if pts.shape != (4, 2):
            raise DegenerateQuad(f"expected 4 vertices, got {pts.shape[0]}")
        out, ok = canonicalize_array(pts[None])
        if not ok[0]:
            raise DegenerateQuad("zero-area, non-finite or self-intersecting quad")
        v = out[0].copy()
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @classmethod
    def _trusted(cls, v: np.ndarray) -> "Quad":
        # v already canonical and validated
        q = cls.__new__(cls)
        v = np.array(v, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(q, "v", v)
        return q

    def __setattr__(self, key, value):
        raise AttributeError("Quad is immutable")

    @property
    def vertices(self) -> list[Point2]:
        return [Point2(float(x), float(y)) for x, y in self.v]

    def flat(self) -> list[float]:
        return [float(c) for c in self.v.reshape(-1)]

    @property
    def area(self) -> float:
        return polygon_area(self.v)

    def aabb(self) -> AABB:
        return aabb(self)

    def __eq__(self, other):
        return isinstance(other, Quad) and np.array_equal(self.v, other.v)

    def __hash__(self):
        return hash(self.v.tobytes())

    def __repr__(self):
        pts = ", ".join(f"({x:g},{y:g})" for x, y in self.v)
        return f"{type(self).__name__}({pts})"


class OrientedRect(Quad):
    """A quad with four right angles."""

    __slots__ = ()

    def __init__(self, vertices):
        super().__init__(vertices)
        _check_rect(self.v)

    @classmethod
    def from_quad(cls, q: Quad) -> "OrientedRect":
        _check_rect(q.v)
        return cls._trusted(q.v)

    @property
    def center(self) -> Point2:
        c = self.v.mean(axis=0)
        return Point2(float(c[0]), float(c[1]))

    @property
    def _sides(self) -> tuple[float, float]:
        a = float(np.hypot(*(self.v[1] - self.v[0])))
        b = float(np.hypot(*(self.v[2] - self.v[1])))
        return a, b

    @property
    def first_edge_is_long(self) -> bool:
        a, b = self._sides
        return a >= b - _TIE_TOL * (1.0 + a)

    @property
    def long_side(self) -> float:
        a, b = self._sides
        return a if self.first_edge_is_long else b

    @property
    def short_side(self) -> float:
        a, b = self._sides
        return b if self.first_edge_is_long else a

    @property
    def angle(self) -> float:
        """Direction of the long side in radians, folded into (-pi/2, pi/2]."""
        e = self.v[1] - self.v[0] if self.first_edge_is_long else self.v[2] - self.v[1]
        t = math.atan2(e[1], e[0])
        if t <= -math.pi / 2:
            t += math.pi
        elif t > math.pi / 2:
            t -= math.pi
        return t


def _check_rect(v: np.ndarray) -> None:
    for i in range(4):
        e1 = v[(i + 1) % 4] - v[i]
        e2 = v[(i + 2) % 4] - v[(i + 1) % 4]
        n1, n2 = np.hypot(*e1), np.hypot(*e2)
        cosang = abs(float(e1 @ e2)) / (n1 * n2)
        if cosang > math.sin(RIGHT_ANGLE_TOL):
            raise DegenerateQuad("not a rectangle: corner angle off 90 degrees")
    a = np.hypot(*(v[1] - v[0])), np.hypot(*(v[3] - v[2]))
    b = np.hypot(*(v[2] - v[1])), np.hypot(*(v[0] - v[3]))
    if abs(a[0] - a[1]) > SIDE_TOL * max(1.0, a[0]) or abs(b[0] - b[1]) > SIDE_TOL * max(1.0, b[0]):
        raise DegenerateQuad("not a rectangle: opposite sides differ")


def canonicalize(vertices) -> Quad:
    return Quad(vertices)


def rect_from_center(cx: float, cy: float, long_side: float, short_side: float, angle: float) -> OrientedRect:
    """Rectangle whose long side points along ``angle`` (radians, y-down frame)."""
    u = np.array([math.cos(angle), math.sin(angle)])
    n = np.array([-u[1], u[0]])
    c = np.array([cx, cy])
    hl, hs = 0.5 * long_side, 0.5 * short_side
    pts = np.array([c - hl * u - hs * n, c + hl * u - hs * n, c + hl * u + hs * n, c - hl * u + hs * n])
    return OrientedRect(pts)


def aabb(q) -> AABB:
    v = _as_vertices(q)
    lo, hi = v.min(axis=0), v.max(axis=0)
    return AABB(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def polygon_area(poly) -> float:
    v = _as_vertices(poly)
    if len(v) < 3:
        return 0.0
    return abs(float(signed_area2(v))) * 0.5


def points_in_convex(points: np.ndarray, poly) -> np.ndarray:
    """Boundary-inclusive containment test of (M, 2) points in a convex polygon."""
    v = _as_vertices(poly)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if signed_area2(v) < 0:
        v = v[::-1]
    inside = np.ones(len(pts), dtype=bool)
    for i in range(len(v)):
        a, b = v[i], v[(i + 1) % len(v)]
        e = b - a
        tol = _TIE_TOL * (1.0 + np.hypot(*e)) * (1.0 + np.abs(a).max())
        c = e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0])
        inside &= c >= -tol
    return inside


def point_in_polygon(p, poly) -> bool:
    return bool(points_in_convex(np.array([tuple(p)], dtype=np.float64), poly)[0])


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices with positive winding."""
    pts = sorted(set(map(tuple, _as_vertices(points).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1], dtype=np.float64)
    if signed_area2(hull) < 0:
        hull = hull[::-1]
    return hull


def is_convex(poly) -> bool:
    v = _as_vertices(poly)
    n = len(v)
    signs = set()
    for i in range(n):
        c = float(_cross(v[i], v[(i + 1) % n], v[(i + 2) % n]))
        if abs(c) > 1e-12:
            signs.add(c > 0)
    return len(signs) <= 1


def _clip(subject: list, clipper: list) -> list:
    # Sutherland-Hodgman; clipper must have positive winding
    out = subject
    m = len(clipper)
    for i in range(m):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % m]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return out


def _positive(v: np.ndarray) -> list:
    if signed_area2(v) < 0:
        v = v[::-1]
    return [tuple(p) for p in v.tolist()]


def intersect_convex(a, b) -> np.ndarray:
    """Intersection of two convex polygons as a (k, 2) array; (0, 2) when empty."""
    va, vb = _as_vertices(a), _as_vertices(b)
    if len(va) < 3 or len(vb) < 3:
        return np.zeros((0, 2))
    res = _clip(_positive(va), _positive(vb))
    if len(res) < 3:
        return np.zeros((0, 2))
    return np.array(res, dtype=np.float64)


def _convex_view(v: np.ndarray) -> np.ndarray:
    return v if is_convex(v) else convex_hull(v)


def iou_quad(a, b) -> float:
    """Polygon IoU. Non-convex inputs are replaced by their convex hull."""
    va, vb = _convex_view(_as_vertices(a)), _convex_view(_as_vertices(b))
    area_a, area_b = polygon_area(va), polygon_area(vb)
    inter = polygon_area(intersect_convex(va, vb))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_aabb(a: AABB, b: AABB) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def iou_aabb_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of [xmin, ymin, xmax, ymax]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def min_enclosing_rect(q) -> OrientedRect:
    """Minimum-area enclosing rectangle by rotating calipers over the hull."""
    v = _as_vertices(q)
    if not isinstance(q, Quad):
        v = Quad(v).v
    hull = convex_hull(v)
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        length = math.hypot(e[0], e[1])
        if length == 0:
            continue
        u = e / length
        n = np.array([-u[1], u[0]])
        pu, pn = hull @ u, hull @ n
        area = (pu.max() - pu.min()) * (pn.max() - pn.min())
        if best is None or area < best[0] * (1 - 1e-12):
            best = (area, u, n, pu.min(), pu.max(), pn.min(), pn.max())
    _, u, n, u0, u1, n0, n1 = best
    corners = np.array([u * u0 + n * n0, u * u1 + n * n0, u * u1 + n * n1, u * u0 + n * n1])
    return OrientedRect(corners)


def shrink_rect(r: OrientedRect, short_factor: float = 0.5, long_factor: float = 0.8) -> OrientedRect:
    """Scale a rectangle's sides about its centre; this is the core-region construction."""
    for f in (short_factor, long_factor):
        if not (0 < f <= 1) or not math.isfinite(f):
            raise InvalidFactor(f"shrink factor must lie in (0, 1], got {f}")
    v = r.v
    c = v.mean(axis=0)
    e1 = v[1] - v[0]
    e2 = v[2] - v[1]
    if r.first_edge_is_long:
        e1, e2 = e1 * long_factor, e2 * short_factor
    else:
        e1, e2 = e1 * short_factor, e2 * long_factor
    pts = np.array([c - 0.5 * e1 - 0.5 * e2, c + 0.5 * e1 - 0.5 * e2, c + 0.5 * e1 + 0.5 * e2, c - 0.5 * e1 + 0.5 * e2])
    return OrientedRect(pts)


def quads_to_array(quads: Iterable[Quad]) -> np.ndarray:
    return np.array([q.v for q in quads], dtype=np.float64).reshape(-1, 4, 2)


def aabbs_of(quads: Sequence[Quad]) -> np.ndarray:
    arr = quads_to_array(quads)
    if len(arr) == 0:
        return np.zeros((0, 4))
    return np.concatenate([arr.min(axis=1), arr.max(axis=1)], axis=1)
