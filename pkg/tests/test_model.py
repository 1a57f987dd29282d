import numpy as np
import pytest

from afrpn import tensornet as tn
from afrpn.errors import CompatError, ShapeError
from afrpn.model import (
    LightHeadConfig,
    ModelConfig,
    build_model,
    conv,
    expected_param_count,
    receptive_field_of,
    toy_receptive_field,
)

SMALL = ModelConfig(stem_width=4, stage_widths=(4, 6, 8), fpn_channels=8, head_width=8,
                    lighthead=LightHeadConfig(k=3, per_bin_channels=2, separable_kernel=15, fc_units=16))


def positive_model(cfg):
    """Every weight positive and every bias zero, so no ReLU is ever inactive."""
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    for p in model.params():
        p.value[...] = 0.0 if p.value.ndim == 1 else rng.uniform(0.01, 0.1, size=p.shape)
    return model


def support_extent(model, level, row, col, size=256):
    image = np.random.default_rng(1).uniform(0.6, 1.0, size=(1, 3, size, size))
    out = model.forward(image)
    d = [np.zeros_like(s) for s in out.scores]
    d[level][0, 0, row, col] = 1.0
    tn.zero_grad(model.params())
    g = np.abs(model.backward(d_scores=d)).sum(axis=(0, 1))
    ys, xs = np.nonzero(g)
    return ys.max() - ys.min() + 1, xs.max() - xs.min() + 1


class TestReceptiveField:
    def test_single_and_stacked_3x3(self):
        x = ("input",)
        assert receptive_field_of(conv(3, 1, x)) == 3
        assert receptive_field_of(conv(3, 1, conv(3, 1, x))) == 5

    def test_strided(self):
        assert receptive_field_of(conv(3, 1, conv(3, 2, ("input",)))) == 7

    def test_default_values(self):
        assert [toy_receptive_field(n) for n in ("P2", "P3", "P4")] == [107, 123, 155]

    def test_p4_matches_perturbation(self):
        model = positive_model(SMALL)
        h, w = support_extent(model, 2, 8, 8)
        assert h == w == toy_receptive_field("P4")

    @pytest.mark.parametrize("level,name", [(0, "P2"), (1, "P3")])
    def test_lower_levels_match_perturbation(self, level, name):
        model = positive_model(SMALL)
        ext = [support_extent(model, level, r, r)[0] for r in (20 >> level, (20 >> level) + 1)]
        assert max(ext) == toy_receptive_field(name)


class TestShapes:
    def test_output_shapes(self):
        model = build_model(SMALL)
        out = model.forward(np.zeros((3, 64, 48)))
        assert [s.shape for s in out.scores] == [(1, 2, 16, 12), (1, 2, 8, 6), (1, 2, 4, 3)]
        assert [o.shape for o in out.offsets] == [(1, 8, 16, 12), (1, 8, 8, 6), (1, 8, 4, 3)]

    def test_bad_size(self):
        with pytest.raises(ShapeError):
            build_model(SMALL).forward(np.zeros((3, 40, 48)))

    def test_lighthead_shapes(self):
        model = build_model(SMALL)
        model.forward(np.zeros((3, 64, 64)))
        c, r = model.lighthead_forward(0, np.array([[0, 0, 20, 12], [10, 10, 60, 30]], float))
        assert c.shape == (2, 2) and r.shape == (2, 8)
        c, r = model.lighthead_forward(1, np.zeros((0, 4)))
        assert c.shape == (0, 2)


class TestParams:
    def test_default_count(self):
        model = build_model()
        assert model.param_count() == expected_param_count(model.cfg) == 359_386
        assert model.param_count(("backbone", "fpn", "rpn")) == 88_054

    @pytest.mark.parametrize("cfg", [SMALL, ModelConfig(stage_widths=(8, 8, 8), fpn_channels=16)])
    def test_closed_form(self, cfg):
        assert build_model(cfg).param_count() == expected_param_count(cfg)

    def test_unique_names(self):
        names = [p.name for p in build_model().params()]
        assert len(names) == len(set(names))

    def test_gaussian_init_std(self):
        model = build_model(ModelConfig(init="gaussian"), seed=0)
        w = np.concatenate([p.value.ravel() for p in model.params() if p.value.ndim > 1])
        assert np.std(w) == pytest.approx(0.01, rel=0.02)

    def test_seed_determinism(self):
        a, b = build_model(SMALL, seed=4), build_model(SMALL, seed=4)
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p.value, q.value)

    def test_compat(self):
        model = build_model(SMALL)
        model.check_compatible(model.state_meta())
        with pytest.raises(CompatError):
            model.check_compatible(build_model().state_meta())

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ModelConfig(init="xavier")
        with pytest.raises(ValueError):
            ModelConfig(stage_widths=(4, 4))


class TestBehaviour:
    def test_translation_equivariance(self):
        model = build_model(SMALL, seed=2)
        rng = np.random.default_rng(0)
        big = rng.uniform(0, 1, size=(3, 352, 352))
        a = model.forward(big[:, :320, :320]).scores[2].copy()
        b = model.forward(big[:, 16:336, 16:336]).scores[2]
        # a P4 cell whose whole receptive field lies inside both crops sees identical pixels
        np.testing.assert_allclose(a[..., 10, 10], b[..., 9, 9], atol=1e-10)
        assert not np.allclose(a[..., 1, 1], b[..., 0, 0], atol=1e-10)

    def test_backward_returns_image_gradient_shape(self):
        model = build_model(SMALL)
        out = model.forward(np.zeros((3, 32, 32)))
        d = [np.ones_like(s) for s in out.scores]
        assert model.backward(d_scores=d).shape == (1, 3, 32, 32)
