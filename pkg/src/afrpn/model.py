"""Toy backbone, FPN neck, AF-RPN heads and light-head second stage."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CompatError, ShapeError
from .tensornet import Conv2d, Linear, Parameter, PSRoIPool, ReLU, UpsampleNearest2

LEVELS = ("P2", "P3", "P4")


@dataclass
class LightHeadConfig:
    k: int = 7
    per_bin_channels: int = 2
    separable_kernel: int = 15
    fc_units: int = 256

    @property
    def thin_channels(self) -> int:
        return self.k * self.k * self.per_bin_channels


@dataclass
class ModelConfig:
    in_channels: int = 3
    stem_width: int = 8
    stage_widths: tuple = (16, 24, 32)
    fpn_channels: int = 32
    head_width: int = 32
    lighthead: LightHeadConfig = field(default_factory=LightHeadConfig)
    init_std: float = 0.01
    # "scaled": He-normal for hidden convs, init_std for output layers; "gaussian": init_std everywhere
    init: str = "scaled"

    def __post_init__(self):
        if isinstance(self.lighthead, dict):
            self.lighthead = LightHeadConfig(**self.lighthead)
        self.stage_widths = tuple(self.stage_widths)
        widths = [self.in_channels, self.stem_width, *self.stage_widths, self.fpn_channels, self.head_width,
                  self.lighthead.k, self.lighthead.per_bin_channels, self.lighthead.fc_units]
        if len(self.stage_widths) != 3 or any(int(w) < 1 for w in widths):
            raise ValueError("all widths must be >= 1 and there must be three stages")
        if self.init not in ("scaled", "gaussian"):
            raise ValueError(f"unknown init scheme {self.init!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d


@dataclass
class AfrpnOutputs:
    scores: list  # per level (N, 2, H, W) logits
    offsets: list  # per level (N, 8, H, W)


# ---------------------------------------------------------------- receptive field


def _interval(node, i):
    kind = node[0]
    if kind == "input":
        return i, i
    if kind == "conv":
        _, k, s, p, parent = node
        lo, _ = _interval(parent, i * s - p)
        _, hi = _interval(parent, i * s - p + k - 1)
        return lo, hi
    if kind == "up":
        return _interval(node[1], i // 2)
    if kind == "add":
        a, b = _interval(node[1], i), _interval(node[2], i)
        return min(a[0], b[0]), max(a[1], b[1])
    raise ValueError(kind)


def receptive_field_of(node, probe: int = 64) -> int:
    """Largest input-pixel extent influencing one unit of ``node`` (1-D, unclipped).

    Nodes are tuples: ("input",), ("conv", k, stride, pad, parent),
    ("up", parent) for nearest 2x upsampling and ("add", a, b).
    """
    return max(hi - lo + 1 for lo, hi in (_interval(node, i) for i in range(probe)))


def conv(k, s, parent):
    return ("conv", k, s, k // 2, parent)


def toy_graph() -> dict:
    x = ("input",)
    c1 = conv(3, 1, conv(3, 2, x))
    c2 = conv(3, 1, conv(3, 2, c1))
    c3 = conv(3, 1, conv(3, 2, c2))
    c4 = conv(3, 1, conv(3, 2, c3))
    p4pre = conv(1, 1, c4)
    p3pre = ("add", conv(1, 1, c3), ("up", p4pre))
    p2pre = ("add", conv(1, 1, c2), ("up", p3pre))
    out = {}
    for name, pre in zip(LEVELS, (p2pre, p3pre, p4pre)):
        out[name] = conv(3, 1, conv(3, 1, pre))  # smoothing conv then head conv
    return out


def toy_receptive_field(level: str) -> int:
    return receptive_field_of(toy_graph()[level])


# ---------------------------------------------------------------- model


class Model:
    def __init__(self, cfg: Optional[ModelConfig] = None, seed: int = 0):
        self.cfg = cfg = cfg or ModelConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        std = cfg.init_std

        def hidden(name, cin, cout, k, s=1, pad=None):
            if cfg.init == "scaled":
                kh, kw = (k, k) if isinstance(k, int) else k
                s_ = math.sqrt(2.0 / (cin * kh * kw))
            else:
                s_ = std
            return Conv2d(name, cin, cout, k, s, pad, rng=rng, std=s_)

        def linear_conv(name, cin, cout, k, pad=None):
            if cfg.init == "scaled":
                kh, kw = (k, k) if isinstance(k, int) else k
                s_ = math.sqrt(1.0 / (cin * kh * kw))
            else:
                s_ = std
            return Conv2d(name, cin, cout, k, 1, pad, rng=rng, std=s_)

        widths = [cfg.stem_width, *cfg.stage_widths]
        self.backbone = []
        cin = cfg.in_channels
        for si, w in enumerate(widths):
            stage = "stem" if si == 0 else f"c{si + 1}"
            self.backbone.append([hidden(f"backbone.{stage}.conv1", cin, w, 3, 2), ReLU(),
                                  hidden(f"backbone.{stage}.conv2", w, w, 3, 1), ReLU()])
            cin = w
        f = cfg.fpn_channels
        self.lateral = [linear_conv(f"fpn.lateral.{n}", widths[i + 1], f, 1) for i, n in enumerate(LEVELS)]
        self.smooth = [linear_conv(f"fpn.smooth.{n}", f, f, 3) for n in LEVELS]
        self.up = [UpsampleNearest2(), UpsampleNearest2()]
        self.heads = []
        for n in LEVELS:
            self.heads.append({
                "conv": hidden(f"rpn.{n}.conv", f, cfg.head_width, 3),
                "relu": ReLU(),
                "cls": Conv2d(f"rpn.{n}.cls", cfg.head_width, 2, 1, rng=rng, std=std),
                "reg": Conv2d(f"rpn.{n}.reg", cfg.head_width, 8, 1, rng=rng, std=std),
            })
        lh = cfg.lighthead
        sk = lh.separable_kernel
        self.lightheads = []
        for li, n in enumerate(LEVELS):
            self.lightheads.append({
                "sep1": linear_conv(f"lighthead.{n}.sep1", f, f, (sk, 1), (sk // 2, 0)),
                "sep2": linear_conv(f"lighthead.{n}.sep2", f, lh.thin_channels, (1, sk), (0, sk // 2)),
                "pool": PSRoIPool(lh.k, 4 * 2 ** li),
                "fc": Linear(f"lighthead.{n}.fc", lh.k * lh.k * lh.per_bin_channels, lh.fc_units, rng=rng,
                             std=math.sqrt(2.0 / (lh.k * lh.k * lh.per_bin_channels)) if cfg.init == "scaled" else std),
                "relu": ReLU(),
                "cls": Linear(f"lighthead.{n}.cls", lh.fc_units, 2, rng=rng, std=std),
                "reg": Linear(f"lighthead.{n}.reg", lh.fc_units, 8, rng=rng, std=std),
            })
        self.strides = (4, 8, 16)
        self._lh_active = [False, False, False]

    # -------------------------------------------------------------- params

    def params(self, groups: Sequence[str] = ("backbone", "fpn", "rpn", "lighthead")) -> list[Parameter]:
        out = []
        if "backbone" in groups:
            for stage in self.backbone:
                for layer in stage:
                    out += layer.params()
        if "fpn" in groups:
            for layer in self.lateral + self.smooth:
                out += layer.params()
        if "rpn" in groups:
            for h in self.heads:
                for key in ("conv", "cls", "reg"):
                    out += h[key].params()
        if "lighthead" in groups:
            for h in self.lightheads:
                for key in ("sep1", "sep2", "fc", "cls", "reg"):
                    out += h[key].params()
        return out

    def param_count(self, groups=("backbone", "fpn", "rpn", "lighthead")) -> int:
        return sum(p.value.size for p in self.params(groups))

    def receptive_field(self, level: str) -> int:
        return toy_receptive_field(level)

    # -------------------------------------------------------------- forward

    def backbone_forward(self, image: np.ndarray) -> list[np.ndarray]:
        x = image - 0.5
        feats = []
        for stage in self.backbone:
            for layer in stage:
                x = layer.forward(x)
            feats.append(x)
        return feats[1:]  # C2, C3, C4

    def fpn_forward(self, c2, c3, c4):
        if c3.shape[2] * 2 != c2.shape[2] or c4.shape[2] * 2 != c3.shape[2] or \
                c3.shape[3] * 2 != c2.shape[3] or c4.shape[3] * 2 != c3.shape[3]:
            raise ShapeError("pyramid spatial sizes must halve exactly; input dims must be multiples of 16")
        p4pre = self.lateral[2].forward(c4)
        p3pre = self.lateral[1].forward(c3) + self.up[1].forward(p4pre)
        p2pre = self.lateral[0].forward(c2) + self.up[0].forward(p3pre)
        return [self.smooth[i].forward(p) for i, p in enumerate((p2pre, p3pre, p4pre))]

    def detection_head_forward(self, level: int, p: np.ndarray):
        h = self.heads[level]
        x = h["relu"].forward(h["conv"].forward(p))
        return h["cls"].forward(x), h["reg"].forward(x)

    def forward(self, image: np.ndarray) -> AfrpnOutputs:
        if image.ndim == 3:
            image = image[None]
        if image.shape[2] % 16 or image.shape[3] % 16:
            raise ShapeError(f"image dims {image.shape[2:]} must be multiples of 16")
        self._image_shape = image.shape
        c2, c3, c4 = self.backbone_forward(image)
        self.P = self.fpn_forward(c2, c3, c4)
        self._thin = [None, None, None]
        self._lh_active = [False, False, False]
        scores, offsets = [], []
        for i, p in enumerate(self.P):
            s, o = self.detection_head_forward(i, p)
            scores.append(s)
            offsets.append(o)
        return AfrpnOutputs(scores, offsets)

    def lighthead_forward(self, level: int, rois: np.ndarray):
        """Per-roi (class logits (R, 2), offsets (R, 8)) from the given level.

        Must follow :meth:`forward` on the same image. ``rois`` are
        [xmin, ymin, xmax, ymax] rows in image pixels.
        """
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        h = self.lightheads[level]
        if len(rois) == 0:
            self._lh_active[level] = False
            return np.zeros((0, 2)), np.zeros((0, 8))
        if self._thin[level] is None:
            self._thin[level] = h["sep2"].forward(h["sep1"].forward(self.P[level]))
        pooled = h["pool"].forward(self._thin[level], rois)
        x = h["relu"].forward(h["fc"].forward(pooled.reshape(len(rois), -1)))
        self._lh_active[level] = True
        return h["cls"].forward(x), h["reg"].forward(x)

    # -------------------------------------------------------------- backward

    def backward(self, d_scores=None, d_offsets=None, d_light=None):
        """Backpropagate head gradients to every parameter; returns d(image).

        ``d_scores`` / ``d_offsets`` are per-level lists (entries may be None);
        ``d_light`` maps level index -> (d_cls (R, 2), d_reg (R, 8)) for the
        most recent :meth:`lighthead_forward` call on that level.
        """
        d_p = [np.zeros_like(p) for p in self.P]
        for i in range(3):
            ds = None if d_scores is None else d_scores[i]
            do = None if d_offsets is None else d_offsets[i]
            if ds is None and do is None:
                continue
            h = self.heads[i]
            dx = 0.0
            if ds is not None:
                dx = dx + h["cls"].backward(ds)
            if do is not None:
                dx = dx + h["reg"].backward(do)
            d_p[i] += h["conv"].backward(h["relu"].backward(dx))
        for i, (dc, dr) in (d_light or {}).items():
            if not self._lh_active[i]:
                continue
            h = self.lightheads[i]
            dx = h["cls"].backward(dc) + h["reg"].backward(dr)
            dx = h["fc"].backward(h["relu"].backward(dx))
            lh = self.cfg.lighthead
            dthin = h["pool"].backward(dx.reshape(-1, lh.k, lh.k, lh.per_bin_channels))
            d_p[i] += h["sep1"].backward(h["sep2"].backward(dthin))
        d_pre = [self.smooth[i].backward(d_p[i]) for i in range(3)]
        # top-down: P2pre = lat2(C2) + up(P3pre); P3pre = lat3(C3) + up(P4pre)
        d_p3pre = d_pre[1] + self.up[0].backward(d_pre[0])
        d_p4pre = d_pre[2] + self.up[1].backward(d_p3pre)
        d_c = [self.lateral[0].backward(d_pre[0]), self.lateral[1].backward(d_p3pre),
               self.lateral[2].backward(d_p4pre)]
        dx = None
        for si in range(len(self.backbone) - 1, -1, -1):
            if si >= 1:
                g = d_c[si - 1]
                dx = g if dx is None else dx + g
            for layer in reversed(self.backbone[si]):
                dx = layer.backward(dx)
        return dx

    # -------------------------------------------------------------- state

    def state_meta(self) -> dict:
        return {"model_config": self.cfg.to_dict(), "seed": self.seed}

    def check_compatible(self, meta: dict):
        stored = meta.get("model_config")
        if stored is not None and stored != self.cfg.to_dict():
            raise CompatError("checkpoint was written by a model with a different configuration")


def build_model(cfg: Optional[ModelConfig] = None, seed: int = 0) -> Model:
    return Model(cfg, seed)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a configuration."""
    def conv(cin, cout, kh, kw=None):
        kw = kh if kw is None else kw
        return cout * cin * kh * kw + cout

    w = [cfg.stem_width, *cfg.stage_widths]
    n, cin = 0, cfg.in_channels
    for width in w:
        n += conv(cin, width, 3) + conv(width, width, 3)
        cin = width
    f = cfg.fpn_channels
    n += sum(conv(w[i + 1], f, 1) for i in range(3)) + 3 * conv(f, f, 3)
    n += 3 * (conv(f, cfg.head_width, 3) + conv(cfg.head_width, 2, 1) + conv(cfg.head_width, 8, 1))
    lh = cfg.lighthead
    pooled = lh.k * lh.k * lh.per_bin_channels
    per = conv(f, f, lh.separable_kernel, 1) + conv(f, lh.thin_channels, 1, lh.separable_kernel)
    per += pooled * lh.fc_units + lh.fc_units + lh.fc_units * 2 + 2 + lh.fc_units * 8 + 8
    return n + 3 * per
