import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afrpn.errors import DegenerateQuad, InvalidFactor
from afrpn.geometry import (
    AABB,
    OrientedRect,
    Point2,
    Quad,
    aabb,
    canonicalize,
    intersect_convex,
    iou_aabb,
    iou_quad,
    min_enclosing_rect,
    point_in_polygon,
    polygon_area,
    rect_from_center,
    shrink_rect,
)

from oracles import mc_area, mc_iou, random_convex_quad, random_rect, rect_overlap_area, sweep_min_rect_area

SQ2 = [(0, 0), (2, 0), (2, 2), (0, 2)]


def as_list(q):
    return [tuple(p) for p in q.v.tolist()]


class TestCanonicalize:
    def test_winding_fix(self):
        assert as_list(canonicalize([(0, 0), (0, 2), (2, 2), (2, 0)])) == SQ2

    def test_cyclic_rotation(self):
        assert as_list(canonicalize([(2, 0), (2, 2), (0, 2), (0, 0)])) == SQ2

    def test_bow_tie_rejected(self):
        with pytest.raises(DegenerateQuad):
            canonicalize([(0, 0), (2, 2), (2, 0), (0, 2)])

    def test_zero_area_rejected(self):
        with pytest.raises(DegenerateQuad):
            canonicalize([(0, 0), (1, 1), (2, 2), (3, 3)])

    def test_non_finite_point(self):
        with pytest.raises(ValueError):
            Point2(float("nan"), 0.0)

    def test_diamond_start_vertex(self):
        # (1,0) and (0,1) tie on x+y; smaller y wins
        assert as_list(canonicalize([(0, 1), (1, 2), (2, 1), (1, 0)])) == [(1, 0), (2, 1), (1, 2), (0, 1)]

    @given(st.integers(0, 3), st.booleans(), st.integers(0, 10_000))
    def test_idempotent_and_order_invariant(self, shift, reverse, seed):
        pts = random_convex_quad(np.random.default_rng(seed))
        ref = canonicalize(pts)
        perm = np.roll(pts, shift, axis=0)
        if reverse:
            perm = perm[::-1]
        assert canonicalize(perm) == ref
        assert canonicalize(ref.v) == ref

    def test_positive_signed_area(self):
        q = canonicalize([(0, 0), (0, 2), (2, 2), (2, 0)])
        x, y = q.v[:, 0], q.v[:, 1]
        assert np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) > 0


class TestAreaAndBounds:
    def test_aabb_square(self):
        assert aabb(Quad(SQ2)) == AABB(0, 0, 2, 2)

    def test_aabb_diamond(self):
        assert aabb(Quad([(1, 0), (2, 1), (1, 2), (0, 1)])) == AABB(0, 0, 2, 2)

    def test_aabb_order_independent(self):
        raw = [(3, 1), (0, 4), (-2, 0.5), (1, -1)]
        assert aabb(raw) == aabb(canonicalize(raw))

    def test_unit_square_area(self):
        assert polygon_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == 1.0

    def test_diamond_area(self):
        assert polygon_area([(1, 0), (2, 1), (1, 2), (0, 1)]) == 2.0

    def test_area_matches_monte_carlo(self):
        pts = random_convex_quad(np.random.default_rng(3))
        est = mc_area(pts, n=1_000_000)
        assert polygon_area(pts) == pytest.approx(est, rel=0.01)


class TestPointInPolygon:
    @pytest.mark.parametrize("p,expected", [((1, 1), True), ((0, 1), True), ((3, 3), False), ((2, 2), True)])
    def test_square(self, p, expected):
        assert point_in_polygon(p, Quad(SQ2)) is expected


class TestIntersection:
    def test_self(self):
        q = Quad(SQ2)
        assert polygon_area(intersect_convex(q, q)) == pytest.approx(4.0)

    def test_disjoint(self):
        a = Quad(SQ2)
        b = Quad([(5, 5), (6, 5), (6, 6), (5, 6)])
        assert len(intersect_convex(a, b)) == 0

    def test_half_overlap(self):
        a = [(0, 0), (1, 0), (1, 1), (0, 1)]
        b = [(0.5, 0), (1.5, 0), (1.5, 1), (0.5, 1)]
        expected = rect_overlap_area([0, 0, 1, 1], [0.5, 0, 1.5, 1])
        assert polygon_area(intersect_convex(a, b)) == pytest.approx(expected)
        assert expected == 0.5

    @settings(max_examples=200)
    @given(st.integers(0, 100_000))
    def test_area_bounded_by_operands(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_convex_quad(rng, 20), random_convex_quad(rng, 20)
        inter = polygon_area(intersect_convex(a, b))
        assert inter <= min(polygon_area(a), polygon_area(b)) + 1e-9


class TestIoU:
    def test_identical(self):
        q = Quad([(1, 0), (3, 1), (2, 3), (0, 2)])
        assert iou_quad(q, q) == pytest.approx(1.0)

    def test_disjoint(self):
        assert iou_quad(Quad(SQ2), Quad([(5, 5), (6, 5), (6, 6), (5, 6)])) == 0.0

    def test_half_shift(self):
        a = [(0, 0), (1, 0), (1, 1), (0, 1)]
        b = [(0.5, 0), (1.5, 0), (1.5, 1), (0.5, 1)]
        oracle = mc_iou(np.array(a), np.array(b), n=200_000)
        assert oracle == pytest.approx(1 / 3, abs=0.01)
        assert iou_quad(Quad(a), Quad(b)) == pytest.approx(1 / 3)

    def test_aabb_cases(self):
        assert iou_aabb(AABB(0, 0, 2, 2), AABB(0, 0, 2, 2)) == 1.0
        assert iou_aabb(AABB(0, 0, 2, 2), AABB(2, 0, 4, 2)) == 0.0
        inter = rect_overlap_area([0, 0, 2, 2], [1, 1, 3, 3])
        assert iou_aabb(AABB(0, 0, 2, 2), AABB(1, 1, 3, 3)) == pytest.approx(inter / (8 - inter))
        assert inter / (8 - inter) == pytest.approx(1 / 7)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            a, b = Quad(random_rect(rng)), Quad(random_rect(rng))
            ab, ba = iou_quad(a, b), iou_quad(b, a)
            assert 0.0 <= ab <= 1.0
            assert ab == pytest.approx(ba, abs=1e-12)

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(5)
        for i in range(20):
            a, b = random_rect(rng, span=40), random_rect(rng, span=40)
            assert iou_quad(Quad(a), Quad(b)) == pytest.approx(mc_iou(a, b, 200_000, seed=i), abs=0.015)


class TestMinEnclosingRect:
    def test_axis_aligned_identity(self):
        r = min_enclosing_rect(Quad([(1, 2), (9, 2), (9, 6), (1, 6)]))
        np.testing.assert_allclose(r.v, [(1, 2), (9, 2), (9, 6), (1, 6)], atol=1e-12)

    def test_rotated_square_identity(self):
        r = min_enclosing_rect(Quad([(1, 0), (2, 1), (1, 2), (0, 1)]))
        np.testing.assert_allclose(r.v, [(1, 0), (2, 1), (1, 2), (0, 1)], atol=1e-12)

    def test_parallelogram_vs_sweep(self):
        pts = np.array([(0, 0), (4, 0), (5, 2), (1, 2)], dtype=float)
        r = min_enclosing_rect(Quad(pts))
        assert r.area <= sweep_min_rect_area(pts) + 1e-3
        assert r.area == pytest.approx(sweep_min_rect_area(pts), abs=1e-3)

    def test_contains_vertices_and_beats_sweep(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            pts = random_convex_quad(rng)
            r = min_enclosing_rect(Quad(pts))
            assert all(point_in_polygon(p, r) for p in pts)
            assert r.area <= sweep_min_rect_area(pts) + 1e-6

    def test_result_is_rectangle(self):
        r = min_enclosing_rect(Quad([(0, 0), (4, 0), (5, 2), (1, 2)]))
        assert isinstance(r, OrientedRect)
        assert r.short_side <= r.long_side


class TestShrink:
    def test_axis_aligned(self):
        r = rect_from_center(5, 5, 10, 4, 0.0)
        core = shrink_rect(r)
        np.testing.assert_allclose(core.v, [(1, 4), (9, 4), (9, 6), (1, 6)], atol=1e-12)
        assert core.long_side == pytest.approx(8)
        assert core.short_side == pytest.approx(2)

    def test_square_tie_break(self):
        core = shrink_rect(OrientedRect([(0, 0), (4, 0), (4, 4), (0, 4)]))
        np.testing.assert_allclose(core.v, [(0.4, 1), (3.6, 1), (3.6, 3), (0.4, 3)], atol=1e-12)

    def test_identity(self):
        r = rect_from_center(3, 7, 12, 5, 0.4)
        np.testing.assert_allclose(shrink_rect(r, 1, 1).v, r.v, atol=1e-12)

    @pytest.mark.parametrize("f", [0.0, -0.5])
    def test_bad_factor(self, f):
        with pytest.raises(InvalidFactor):
            shrink_rect(rect_from_center(0, 0, 4, 2, 0), f, 0.8)

    @given(st.floats(-1.5, 1.5), st.floats(2, 80), st.floats(1, 1.0), st.floats(0.1, 1), st.floats(0.1, 1))
    def test_center_orientation_area(self, angle, long_side, ratio, sf, lf):
        r = rect_from_center(20.0, 30.0, long_side, long_side * ratio * 0.5, angle)
        core = shrink_rect(r, sf, lf)
        c0, c1 = r.center, core.center
        assert math.hypot(c0.x - c1.x, c0.y - c1.y) < 1e-9
        assert core.area / r.area == pytest.approx(sf * lf, rel=1e-9)
        # same orientation: every core edge is parallel to some rect edge
        e_r = r.v[1] - r.v[0]
        e_c = core.v[1] - core.v[0]
        cross = abs(e_r[0] * e_c[1] - e_r[1] * e_c[0]) / (np.hypot(*e_r) * np.hypot(*e_c))
        dot = abs(e_r @ e_c) / (np.hypot(*e_r) * np.hypot(*e_c))
        assert min(cross, dot) < 1e-9
