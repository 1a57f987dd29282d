import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afrpn.data_io import (
    DirDataset,
    Scene,
    SynthConfig,
    SynthDataset,
    dataset_ids,
    decode_pnm,
    encode_pnm,
    gen_scene,
    load_ppm,
    parse_icdar_gt,
    read_dataset,
    render_svg,
    resize_shorter_side,
    save_ppm,
    scene_overlay,
    serialize_icdar_gt,
    write_dataset,
)
from afrpn.errors import DegenerateQuad, FormatError, ParseError
from afrpn.geometry import intersect_convex, polygon_area
from afrpn.labeling import PyramidSpec, scale_group

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "icdar_10.txt")


class TestIcdar:
    def test_fixture(self):
        with open(FIXTURE, "rb") as fh:
            insts, errors = parse_icdar_gt(fh.read(), strict=False)
        assert len(insts) == 9
        assert sum(i.ignore for i in insts) == 1
        assert len(errors) == 1 and isinstance(errors[0], ParseError) and errors[0].line == 8

    def test_fields(self):
        with open(FIXTURE, encoding="utf-8") as fh:
            insts, _ = parse_icdar_gt(fh.read(), strict=False)
        assert insts[0].transcription == "Genaxis Theatre"
        assert insts[2].ignore and insts[2].transcription == "###"
        assert insts[5].script == "abc" and insts[5].transcription == "def"
        assert insts[6].script == "Latin" and insts[6].transcription == "EXIT"
        assert insts[7].script == "hello" and insts[7].transcription == " world"
        assert insts[8].quad.v[0].tolist() == [100.5, 200.25]

    def test_script_field(self):
        (inst,) = parse_icdar_gt("377,117,463,117,465,130,378,130,Latin,GENAXIS")
        assert inst.transcription == "GENAXIS" and inst.script == "Latin" and not inst.ignore

    def test_short_line(self):
        with pytest.raises(ParseError) as exc:
            parse_icdar_gt("1,2,three")
        assert exc.value.line == 1

    def test_strict_raises(self):
        with pytest.raises(ParseError) as exc:
            parse_icdar_gt("1,1,2,1,2,2,1,2,a\n1,2,three\n")
        assert exc.value.line == 2

    def test_degenerate_line(self):
        with pytest.raises(DegenerateQuad):
            parse_icdar_gt("0,0,1,1,2,2,3,3,word")

    def test_bow_tie_rejected(self):
        _, errors = parse_icdar_gt("0,0,2,2,2,0,0,2,x\n", strict=False)
        assert len(errors) == 1

    def test_roundtrip(self):
        with open(FIXTURE, encoding="utf-8") as fh:
            insts, _ = parse_icdar_gt(fh.read(), strict=False)
        again = parse_icdar_gt(serialize_icdar_gt(insts))
        assert [i.quad for i in again] == [i.quad for i in insts]
        assert [i.ignore for i in again] == [i.ignore for i in insts]

    def test_empty(self):
        assert parse_icdar_gt("") == []


class TestPnm:
    def test_roundtrip(self):
        img = np.random.default_rng(0).integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
        np.testing.assert_array_equal(decode_pnm(encode_pnm(img)), img)
        g = img[:1]
        np.testing.assert_array_equal(decode_pnm(encode_pnm(g)), g)

    def test_header_comment(self):
        data = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
        np.testing.assert_array_equal(decode_pnm(data), [[[0, 255]]])

    @pytest.mark.parametrize("data", [b"P3\n1 1\n255\n", b"P6\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00"])
    def test_bad(self, data):
        with pytest.raises(FormatError):
            decode_pnm(data)

    def test_float_quantisation(self, tmp_path):
        img = np.random.default_rng(1).random((3, 4, 4))
        save_ppm(tmp_path / "a.ppm", img)
        back = load_ppm(str(tmp_path / "a.ppm"))
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(seed=3)
        a, b = gen_scene(cfg, 4), gen_scene(cfg, 4)
        np.testing.assert_array_equal(a.image, b.image)
        assert [i.quad for i in a.instances] == [i.quad for i in b.instances]

    def test_valid_scenes(self):
        cfg = SynthConfig(seed=0)
        for i in range(30):
            s = gen_scene(cfg, i)
            assert s.image.shape == (3, 256, 256)
            assert s.image.min() >= 0 and s.image.max() <= 1
            for a in range(len(s.instances)):
                r = s.instances[a].rect
                assert r.v.min() >= 0 and r.v.max() <= 256
                assert 8 - 1e-9 <= r.short_side <= 120 + 1e-9
                for b in range(a):
                    assert polygon_area(intersect_convex(r.v, s.instances[b].rect.v)) == 0.0

    def test_every_group_populated(self):
        spec = PyramidSpec.default()
        groups = {scale_group(i.rect.short_side, spec) for k in range(40) for i in gen_scene(SynthConfig(), k).instances}
        assert groups == {0, 1, 2}

    def test_pixels_inside_bar_are_bright(self):
        s = gen_scene(SynthConfig(seed=1, noise_std=0.0), 0)
        c = s.instances[0].rect.center
        assert s.image[:, int(c.y), int(c.x)].min() >= 0.5

    def test_bad_size(self):
        with pytest.raises(ValueError):
            SynthConfig(image_size=(100, 256))


class TestResize:
    @given(st.integers(16, 300))
    def test_shapes_and_scaling(self, s):
        scene = gen_scene(SynthConfig(image_size=(64, 128)), 0)
        out = resize_shorter_side(scene, s)
        h, w = out.image.shape[1:]
        assert h % 16 == 0 and w % 16 == 0 and h >= s
        sx, sy = out.scale
        for a, b in zip(scene.instances, out.instances):
            np.testing.assert_allclose(b.quad.v, a.quad.v * [sx, sy], atol=1e-9)

    def test_identity(self):
        scene = gen_scene(SynthConfig(image_size=(64, 64)), 2)
        out = resize_shorter_side(scene, 64)
        np.testing.assert_array_equal(out.image, scene.image)


class TestDatasetLayout:
    def test_roundtrip(self, tmp_path):
        scenes = list(SynthDataset(SynthConfig(image_size=(64, 64), short_side=(6, 40)), 3))
        write_dataset(str(tmp_path), scenes)
        assert dataset_ids(str(tmp_path)) == ["img_0", "img_1", "img_2"]
        back = list(read_dataset(str(tmp_path)))
        for a, b in zip(scenes, back):
            np.testing.assert_allclose(a.image, b.image, atol=1e-12)
            assert [i.quad for i in a.instances] == [i.quad for i in b.instances]
        ds = DirDataset(str(tmp_path))
        assert len(ds) == 3 and ds[1].id == "img_1"

    def test_without_manifest(self, tmp_path):
        scenes = list(SynthDataset(SynthConfig(image_size=(32, 32), short_side=(6, 12)), 2))
        write_dataset(str(tmp_path), scenes)
        os.remove(tmp_path / "manifest.json")
        assert dataset_ids(str(tmp_path)) == ["img_0", "img_1"]

    def test_empty(self, tmp_path):
        man = write_dataset(str(tmp_path / "d"), [])
        assert man["count"] == 0 and os.path.exists(tmp_path / "d" / "manifest.json")


class TestSvg:
    def test_polygons(self):
        scene = gen_scene(SynthConfig(image_size=(64, 64), short_side=(6, 20), instances=(2, 2)), 0)
        svg = scene_overlay(scene)
        assert svg.startswith("<svg") and svg.count('class="gt"') == len(scene.instances)
        assert svg.count('class="core"') == len(scene.instances)

    def test_empty(self):
        svg = render_svg((10, 20), [], title="t<1>")
        assert 'width="20"' in svg and "t&lt;1&gt;" in svg and "<polygon" not in svg
        assert isinstance(Scene(np.zeros((3, 16, 16)), []).size, tuple)
