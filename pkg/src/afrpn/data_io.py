"""Synthetic scenes, ICDAR-style ground truth, PPM/PGM images and SVG overlays."""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, Optional, Sequence, Union
from xml.sax.saxutils import escape

import numpy as np

from .errors import DegenerateQuad, FormatError, ParseError
from .geometry import Quad, intersect_convex, polygon_area, rect_from_center
from .labeling import TextInstance

DATASET_SCHEMA = "afrpn.dataset/1"


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) in [0, 1]
    instances: list
    id: str = "scene"
    scale: tuple = (1.0, 1.0)  # (sx, sy) applied relative to the source image

    @property
    def size(self) -> tuple[int, int]:
        return int(self.image.shape[1]), int(self.image.shape[2])


@dataclass
class SynthConfig:
    image_size: tuple = (256, 256)
    instances: tuple = (1, 4)
    short_side: tuple = (8.0, 120.0)
    aspect: tuple = (1.5, 5.0)
    angle: tuple = (-60.0, 60.0)  # degrees
    background: tuple = (0.0, 0.35)
    fill: tuple = (0.6, 1.0)
    noise_std: float = 0.04
    ignore_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "instances", "short_side", "aspect", "angle", "background", "fill"):
            v = tuple(getattr(self, name))
            setattr(self, name, v)
            if len(v) != 2 or v[0] > v[1]:
                raise ValueError(f"{name} must be a non-empty [min, max] range, got {v}")
        if self.short_side[0] < 1:
            raise ValueError("minimum shorter side must be >= 1 px")
        if self.image_size[0] % 16 or self.image_size[1] % 16:
            raise ValueError("synthetic image dims must be multiples of 16")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


MAX_ATTEMPTS = 50


def gen_scene(cfg: SynthConfig, index: int) -> Scene:
    """Render bright rotated bars on a noisy background; fully determined by (seed, index).

    Shorter sides are drawn log-uniformly so every pyramid level sees data.
    A bar that does not fit or whose rectangle touches an earlier one gets a
    new angle and position (at most 50 tries) and is otherwise skipped; this
    also keeps cores disjoint.
    """
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    n = int(rng.integers(cfg.instances[0], cfg.instances[1] + 1))
    lo, hi = math.log(cfg.short_side[0]), math.log(cfg.short_side[1])
    rects = []
    for _ in range(n):
        short = math.exp(rng.uniform(lo, hi))
        long_ = short * rng.uniform(*cfg.aspect)
        long_ = max(short, min(long_, 0.9 * min(h, w)))
        for _attempt in range(MAX_ATTEMPTS):
            ang = math.radians(rng.uniform(*cfg.angle))
            ex = 0.5 * (abs(long_ * math.cos(ang)) + abs(short * math.sin(ang)))
            ey = 0.5 * (abs(long_ * math.sin(ang)) + abs(short * math.cos(ang)))
            if 2 * ex >= w - 2 or 2 * ey >= h - 2:
                continue
            cx = rng.uniform(ex + 1, w - ex - 1)
            cy = rng.uniform(ey + 1, h - ey - 1)
            r = rect_from_center(cx, cy, long_, short, ang)
            if all(polygon_area(intersect_convex(r.v, o.v)) == 0.0 for o in rects):
                rects.append(r)
                break
    bg = rng.uniform(*cfg.background)
    img = np.empty((3, h, w))
    img[:] = (bg + rng.uniform(-0.03, 0.03, size=3))[:, None, None]
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs.ravel() + 0.5, ys.ravel() + 0.5
    instances = []
    for r in rects:
        inside = _inside_rect(px, py, r.v).reshape(h, w)
        fill = rng.uniform(*cfg.fill) + rng.uniform(-0.03, 0.03, size=3)
        img[:, inside] = fill[:, None]
        ignore = bool(rng.random() < cfg.ignore_prob)
        instances.append(TextInstance(r, ignore=ignore, transcription="###" if ignore else "bar"))
    img += rng.standard_normal(img.shape) * cfg.noise_std
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Scene(img, instances, f"img_{index}")


def _inside_rect(px, py, v):
    inside = np.ones(px.shape, dtype=bool)
    for i in range(4):
        a, b = v[i], v[(i + 1) % 4]
        inside &= (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) >= 0
    return inside


# ---------------------------------------------------------------- ICDAR ground truth

_NUM = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)$")


def parse_icdar_gt(text: Union[str, bytes, Iterable[str]], strict: bool = True):
    """Parse ``x1,y1,...,x4,y4[,script],transcription`` lines.

    With ``strict`` the first bad line raises; otherwise returns
    ``(instances, errors)`` with every error carrying its 1-based line number.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = text.splitlines() if isinstance(text, str) else list(text)
    instances, errors = [], []
    for no, raw in enumerate(lines, start=1):
        line = raw.lstrip("\ufeff").strip()
        if not line:
            continue
        try:
            instances.append(_parse_line(line, no))
        except (ParseError, DegenerateQuad) as exc:
            if strict:
                raise
            errors.append(exc)
    return instances if strict else (instances, errors)


def _parse_line(line: str, no: int) -> TextInstance:
    fields = line.split(",")
    if len(fields) < 8:
        raise ParseError(no, f"expected 8 coordinates, got {len(fields)} fields")
    coords = [f.strip() for f in fields[:8]]
    if not all(_NUM.match(c) for c in coords):
        raise ParseError(no, "non-numeric coordinate")
    pts = np.array([float(c) for c in coords]).reshape(4, 2)
    rest = fields[8:]
    script, transcription = None, None
    if rest:
        # the last field is the transcription; whatever sits between it and the coordinates is the script
        transcription = rest[-1]
        if len(rest) > 1:
            script = ",".join(rest[:-1]).strip()
    try:
        quad = Quad(pts)
    except DegenerateQuad as exc:
        raise DegenerateQuad(str(exc), line=no) from None
    ignore = transcription is not None and transcription.strip() == "###"
    return TextInstance(quad, ignore=ignore, transcription=transcription, script=script)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_icdar_gt(instances: Sequence[TextInstance]) -> str:
    out = []
    for inst in instances:
        fields = [_fmt(c) for c in inst.quad.v.reshape(-1)]
        if inst.script is not None:
            fields.append(inst.script)
        fields.append("###" if inst.ignore else (inst.transcription or ""))
        out.append(",".join(fields))
    return "\n".join(out) + ("\n" if out else "")


# ---------------------------------------------------------------- resizing


def _bilinear(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.clip((np.arange(nh) + 0.5) * h / nh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(nw) + 0.5) * w / nw - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def pad_to_multiple(img: np.ndarray, m: int = 16) -> np.ndarray:
    h, w = img.shape[1:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")


def resize_shorter_side(scene: Scene, s: int) -> Scene:
    if s < 16:
        raise ValueError("target shorter side must be >= 16")
    h, w = scene.image.shape[1:]
    f = s / min(h, w)
    nh, nw = (s, max(1, round(w * f))) if h <= w else (max(1, round(h * f)), s)
    img = scene.image if (nh, nw) == (h, w) else _bilinear(scene.image, nh, nw)
    sx, sy = nw / w, nh / h
    instances = [
        TextInstance(Quad(inst.quad.v * np.array([sx, sy])), inst.ignore, inst.transcription, inst.script)
        for inst in scene.instances
    ]
    return Scene(pad_to_multiple(img), instances, scene.id, (scene.scale[0] * sx, scene.scale[1] * sy))


# ---------------------------------------------------------------- PPM / PGM

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)")


def _header(data: bytes):
    pos, vals = 0, []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError("truncated PNM header")
        vals.append(m.group(2))
        pos = m.end()
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError("truncated PNM header")
    return vals, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Binary P5/P6 with maxval 255 -> (C, H, W) uint8."""
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {data[:2]!r}; expected P5 or P6")
    (magic, w, h, maxval), start = _header(data)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("non-integer PNM header field") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    body = data[start:start + n]
    if len(body) != n:
        raise FormatError(f"truncated pixel data: {len(body)} of {n} bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def encode_pnm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise FormatError(f"cannot encode {c} channels")
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.transpose(1, 2, 0).astype(np.uint8).tobytes()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_ppm(src: Union[str, bytes, os.PathLike]) -> np.ndarray:
    """Read a P5/P6 file (path or raw bytes) as float64 (C, H, W) in [0, 1]."""
    if isinstance(src, (bytes, bytearray)):
        data = bytes(src)
    else:
        with open(src, "rb") as fh:
            data = fh.read()
    return decode_pnm(data).astype(np.float64) / 255.0


def save_ppm(path: Optional[Union[str, os.PathLike]], image: np.ndarray) -> bytes:
    """Quantise a [0, 1] image to 8 bits and encode it; also write it when ``path`` is given."""
    data = encode_pnm(to_uint8(image))
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def save_pgm(path: Union[str, os.PathLike], grid: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(np.asarray(grid, dtype=np.uint8)[None]))


# ---------------------------------------------------------------- SVG

SVG_STYLES = {
    "gt": 'fill="none" stroke="yellow" stroke-width="1.5" stroke-dasharray="4,2"',
    "core": 'fill="none" stroke="yellow" stroke-width="1.5"',
    "proposal": 'fill="none" stroke="lime" stroke-width="1"',
    "detection": 'fill="none" stroke="lime" stroke-width="2"',
    "ignore": 'fill="grey" fill-opacity="0.4" stroke="grey" stroke-width="1"',
    "miss": 'fill="none" stroke="red" stroke-width="2"',
}


def render_svg(size: tuple[int, int], boxes: Sequence = (), image_href: Optional[str] = None,
               title: Optional[str] = None) -> str:
    """Image-sized SVG with one polygon per ``(quad, kind)`` entry in ``boxes``."""
    h, w = size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
             f'width="{w}" height="{h}" viewBox="0 0 {w} {h}">']
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    if image_href:
        parts.append(f'<image x="0" y="0" width="{w}" height="{h}" xlink:href="{escape(image_href)}"/>')
    else:
        parts.append(f'<rect x="0" y="0" width="{w}" height="{h}" fill="black"/>')
    for quad, kind in boxes:
        v = quad.v if hasattr(quad, "v") else np.asarray(quad).reshape(4, 2)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in v)
        parts.append(f'<polygon class="{escape(kind)}" points="{pts}" {SVG_STYLES.get(kind, SVG_STYLES["proposal"])}/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def scene_overlay(scene: Scene, extra: Sequence = (), image_href: Optional[str] = None) -> str:
    boxes = []
    for inst in scene.instances:
        if inst.ignore:
            boxes.append((inst.quad, "ignore"))
        else:
            boxes.append((inst.rect, "gt"))
            boxes.append((inst.core, "core"))
    return render_svg(scene.size, boxes + list(extra), image_href, scene.id)


# ---------------------------------------------------------------- dataset layout


def write_scene(directory: str, scene: Scene, n: int) -> dict:
    img_name, gt_name = f"img_{n}.ppm", f"gt_img_{n}.txt"
    save_ppm(os.path.join(directory, img_name), scene.image)
    with open(os.path.join(directory, gt_name), "w", encoding="utf-8") as fh:
        fh.write(serialize_icdar_gt(scene.instances))
    return {"id": f"img_{n}", "image": img_name, "gt": gt_name}


def write_dataset(directory: str, scenes: Iterable[Scene], meta: Optional[dict] = None) -> dict:
    os.makedirs(directory, exist_ok=True)
    entries = [write_scene(directory, s, n) for n, s in enumerate(scenes)]
    manifest = {"schema": DATASET_SCHEMA, "count": len(entries), "entries": entries, "meta": meta or {}}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _dataset_entries(directory: str) -> list[dict]:
    path = os.path.join(directory, "manifest.json")
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)["entries"]
    entries = []
    for name in sorted(os.listdir(directory)):
        m = re.fullmatch(r"img_(\d+)\.ppm", name)
        if m:
            entries.append({"id": f"img_{m.group(1)}", "image": name, "gt": f"gt_img_{m.group(1)}.txt"})
    entries.sort(key=lambda e: int(e["id"].split("_")[1]))
    return entries


def load_scene(directory: str, entry: dict) -> Scene:
    image = load_ppm(os.path.join(directory, entry["image"]))
    gt_path = os.path.join(directory, entry["gt"])
    instances = []
    if os.path.exists(gt_path):
        with open(gt_path, encoding="utf-8-sig") as fh:
            instances = parse_icdar_gt(fh.read())
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return Scene(image, instances, entry["id"])


def read_dataset(directory: str) -> Iterator[Scene]:
    for entry in _dataset_entries(directory):
        yield load_scene(directory, entry)


def dataset_ids(directory: str) -> list[str]:
    return [e["id"] for e in _dataset_entries(directory)]


class SynthDataset:
    """Indexable view of scenes ``start .. start + count - 1`` of a synthetic config."""

    def __init__(self, cfg: SynthConfig, count: int, start: int = 0):
        self.cfg, self.count, self.start = cfg, count, start

    def __len__(self):
        return self.count

    def __getitem__(self, i: int) -> Scene:
        if not 0 <= i < self.count:
            raise IndexError(i)
        return gen_scene(self.cfg, self.start + i)


class DirDataset:
    """Indexable view of a dataset directory; scenes are loaded on access."""

    def __init__(self, directory: str):
        self.directory = directory
        self.entries = _dataset_entries(directory)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i: int) -> Scene:
        return load_scene(self.directory, self.entries[i])
