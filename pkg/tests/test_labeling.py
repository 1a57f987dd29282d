import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afrpn.errors import InvalidNorm
from afrpn.geometry import Quad, rect_from_center
from afrpn.labeling import (
    IGNORE,
    NEGATIVE,
    OUT_OF_RANGE,
    POSITIVE,
    LevelSpec,
    PyramidSpec,
    TextInstance,
    assign_scale_group,
    decode_targets,
    encode_targets,
    generate_labels,
    map_sliding_point,
    scale_group,
)

from oracles import brute_force_labels
from scenes import as_oracle_input, random_instances

SPEC = PyramidSpec.default()


class TestScaleGroups:
    @pytest.mark.parametrize("short,group", [(3.99, OUT_OF_RANGE), (4.0, 0), (23.999, 0), (24.0, 1),
                                             (47.9, 1), (48.0, 2), (1e4, 2)])
    def test_boundaries(self, short, group):
        assert scale_group(short, SPEC) == group

    def test_instance_group(self):
        inst = TextInstance(rect_from_center(50, 50, 100, 30, 0.3))
        assert assign_scale_group(inst, SPEC) == 1

    def test_default_norms(self):
        assert [lv.norm for lv in SPEC.levels][:2] == [24.0, 48.0]
        assert SPEC.levels[2].norm == pytest.approx(77.5)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PyramidSpec((LevelSpec("a", 8, 4, 24, 1.0), LevelSpec("b", 4, 24, 48, 1.0)))
        with pytest.raises(ValueError):
            PyramidSpec((LevelSpec("a", 4, 4, 24, 1.0), LevelSpec("b", 8, 30, 48, 1.0)))

    def test_roundtrip_dict(self):
        assert PyramidSpec.from_dict(SPEC.to_dict()) == SPEC


class TestSlidingPoints:
    def test_cell_centres(self):
        p2 = SPEC.levels[0]
        assert tuple(map_sliding_point(p2, 0, 0)) == (2.0, 2.0)
        assert tuple(map_sliding_point(p2, 10, 10)) == (42.0, 42.0)
        assert tuple(map_sliding_point(SPEC.levels[2], 0, 0)) == (8.0, 8.0)

    def test_out_of_grid(self):
        with pytest.raises(IndexError):
            map_sliding_point(SPEC.levels[0], -1, 0)
        with pytest.raises(IndexError):
            map_sliding_point(SPEC.levels[0], 0, 64, grid=(64, 64))


class TestEncoding:
    def test_worked_example(self):
        rect = Quad([(10, 12), (40, 12), (40, 30), (10, 30)])
        off = encode_targets((20.0, 20.0), rect, 24.0)
        assert off == pytest.approx([-10 / 24, -8 / 24, 20 / 24, -8 / 24, 20 / 24, 10 / 24, -10 / 24, 10 / 24])
        assert decode_targets((20.0, 20.0), off, 24.0) == rect

    @pytest.mark.parametrize("norm", [0.0, -1.0, math.nan])
    def test_bad_norm(self, norm):
        with pytest.raises(InvalidNorm):
            encode_targets((0, 0), Quad([(0, 0), (1, 0), (1, 1), (0, 1)]), norm)

    @given(st.floats(-200, 200), st.floats(-200, 200), st.floats(0.5, 300), st.integers(0, 10_000))
    def test_roundtrip(self, px, py, norm, seed):
        rng = np.random.default_rng(seed)
        rect = rect_from_center(*rng.uniform(0, 200, 2), rng.uniform(5, 80), rng.uniform(2, 5), rng.uniform(-1.5, 1.5))
        back = decode_targets((px, py), encode_targets((px, py), rect, norm), norm)
        assert np.abs(back.v - rect.v).max() < 1e-9


class TestGenerateLabels:
    def test_single_bar_on_p2(self):
        inst = TextInstance(Quad([(20, 20), (60, 20), (60, 36), (20, 36)]))
        lm = generate_labels([inst], (64, 64), SPEC)
        p2 = lm[0]
        # core: x in [24, 56], y in [24, 32]; centres 2 + 4k
        rows, cols = np.nonzero(p2.cls == POSITIVE)
        assert set(rows.tolist()) == {6, 7}
        assert cols.min() == 6 and cols.max() == 13
        assert lm[1].counts()["positive"] == 0 and lm[2].counts()["positive"] == 0
        # rect is ignored on the levels that do not own it
        assert lm[1].counts()["ignore"] > 0
        assert p2.targets[6, 6] == pytest.approx(encode_targets((26.0, 26.0), inst.rect, 24.0))

    def test_ignored_instance_has_no_positives(self):
        inst = TextInstance(Quad([(20, 20), (60, 20), (60, 36), (20, 36)]), ignore=True)
        lm = generate_labels([inst], (64, 64), SPEC)
        assert all(lv.counts()["positive"] == 0 for lv in lm.levels)
        assert lm[0].counts()["ignore"] > 0

    def test_tiny_instance_ignored_everywhere(self):
        inst = TextInstance(rect_from_center(32, 34, 20, 3, 0.0))
        lm = generate_labels([inst], (64, 64), SPEC)
        assert all(lv.counts()["positive"] == 0 for lv in lm.levels)
        assert lm[0].cls[8, 8] == IGNORE

    def test_empty_scene_all_negative(self):
        lm = generate_labels([], (64, 32), SPEC)
        assert [lv.cls.shape for lv in lm.levels] == [(16, 8), (8, 4), (4, 2)]
        assert all((lv.cls == NEGATIVE).all() for lv in lm.levels)

    def test_one_level_per_instance(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            insts = random_instances(rng)
            lm = generate_labels(insts, (128, 128), SPEC)
            for k in range(len(insts)):
                owning = [li for li, lv in enumerate(lm.levels) if (lv.ids == k).any()]
                assert len(owning) <= 1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        levels = [(lv.stride, lv.lo, lv.hi) for lv in SPEC.levels]
        for _ in range(20):
            insts = random_instances(rng, size=(96, 96))
            lm = generate_labels(insts, (96, 96), SPEC)
            for lv, (cls, ids) in zip(lm.levels, brute_force_labels(as_oracle_input(insts), (96, 96), levels)):
                np.testing.assert_array_equal(lv.cls, cls)
                np.testing.assert_array_equal(lv.ids, ids)
