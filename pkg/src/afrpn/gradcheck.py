"""Finite-difference checks for every layer of the engine and for the whole detector.

Each check builds a scalar objective ``sum(R * layer(x))`` (or a real loss
for the loss layers), compares the hand-written backward pass with central
differences, and reports the worst relative error over several random
shapes. ``corrupt=True`` perturbs one analytic gradient on purpose so the
harness can prove it notices.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensornet as tn
from .model import LightHeadConfig, ModelConfig, build_model

TOLERANCE = 1e-4
H = 1e-5


@dataclass
class CheckResult:
    name: str
    worst: float
    shapes: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.worst < TOLERANCE


def _away_from(x: np.ndarray, kinks, margin: float = 1e-3) -> np.ndarray:
    """Nudge entries off non-differentiable points so central differences stay valid."""
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.where(x[near] >= k, margin, -margin) * 2
    return x


def _conv_case(rng, kernel, stride, corrupt):
    kh, kw = kernel
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(kh, kh + 6)), int(rng.integers(kw, kw + 6))
    pad = (kh // 2, kw // 2)
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, kh, kw))
    b = rng.standard_normal(cout)
    out, cache = tn.conv2d_forward(x, wt, b, stride, pad)
    r = rng.standard_normal(out.shape)
    dx, dw, db = tn.conv2d_backward(r, cache)
    if corrupt:
        dw = dw + 0.1
    f = lambda: float(np.sum(r * tn.conv2d_forward(x, wt, b, stride, pad)[0]))
    return tn.grad_check(f, [x, wt, b], [dx, dw, db], H, max_entries=40, rng=rng)


def check_conv2d(rng, corrupt=False):
    cases = [((3, 3), 1), ((3, 3), 2), ((1, 1), 1), ((15, 1), 1), ((1, 15), 1), ((5, 3), (2, 1))]
    return max(_conv_case(rng, k, s, corrupt) for k, s in cases), len(cases)


def check_relu(rng, corrupt=False):
    worst = 0.0
    for _ in range(5):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        x = _away_from(rng.standard_normal(shape), [0.0])
        layer = tn.ReLU()
        r = rng.standard_normal(shape)
        layer.forward(x)
        dx = layer.backward(r)
        worst = max(worst, tn.grad_check(lambda: float(np.sum(r * tn.relu(x))), [x], [dx], H))
    return worst, 5


def check_upsample(rng, corrupt=False):
    worst = 0.0
    for _ in range(5):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
        x = rng.standard_normal(shape)
        layer = tn.UpsampleNearest2()
        r = rng.standard_normal(layer.forward(x).shape)
        dx = layer.backward(r)
        worst = max(worst, tn.grad_check(lambda: float(np.sum(r * tn.upsample_nearest2(x))), [x], [dx], H))
    return worst, 5


def check_linear(rng, corrupt=False):
    worst = 0.0
    for _ in range(5):
        n, fi, fo = (int(v) for v in rng.integers(1, 9, size=3))
        layer = tn.Linear("lin", fi, fo, rng=rng, std=1.0)
        layer.bias.value[:] = rng.standard_normal(fo)
        x = rng.standard_normal((n, fi))
        r = rng.standard_normal((n, fo))
        layer.forward(x)
        dx = layer.backward(r)
        w, b = layer.weight.value, layer.bias.value
        f = lambda: float(np.sum(r * tn.linear(x, w, b)))
        worst = max(worst, tn.grad_check(f, [x, w, b], [dx, layer.weight.grad, layer.bias.grad], H))
    return worst, 5


def check_softmax_ce(rng, corrupt=False):
    worst = 0.0
    for _ in range(5):
        n, k = int(rng.integers(1, 12)), int(rng.integers(2, 5))
        x = rng.standard_normal((n, k)) * 3
        y = rng.integers(0, k, size=n)
        wts = rng.uniform(0.1, 2.0, size=n)
        _, dx = tn.softmax_ce_loss(x, y, wts)
        worst = max(worst, tn.grad_check(lambda: tn.softmax_ce_loss(x, y, wts)[0], [x], [dx], H))
    return worst, 5


def check_smooth_l1(rng, corrupt=False):
    worst = 0.0
    for _ in range(5):
        n, d = int(rng.integers(1, 12)), int(rng.integers(1, 9))
        t = rng.standard_normal((n, d)) * 2
        p = t + _away_from(rng.standard_normal((n, d)) * 2, [-1.0, 0.0, 1.0])
        wts = rng.uniform(0.0, 2.0, size=n)
        _, dp = tn.smooth_l1_loss(p, t, wts)
        worst = max(worst, tn.grad_check(lambda: tn.smooth_l1_loss(p, t, wts)[0], [p], [dp], H))
    return worst, 5


def check_ps_roi_pool(rng, corrupt=False):
    worst = 0.0
    for _ in range(5):
        k, d, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.choice([4, 8]))
        h, w = (int(v) for v in rng.integers(3, 10, size=2))
        feats = rng.standard_normal((k * k * d, h, w))
        r = int(rng.integers(1, 4))
        lo = rng.uniform(-stride, stride * (w - 1), size=(r, 2))
        rois = np.concatenate([lo, lo + rng.uniform(1, stride * 5, size=(r, 2))], axis=1)
        layer = tn.PSRoIPool(k, stride)
        g = rng.standard_normal(layer.forward(feats, rois).shape)
        df = layer.backward(g)
        f = lambda: float(np.sum(g * tn.ps_roi_pool(feats, rois, k, stride)))
        worst = max(worst, tn.grad_check(f, [feats], [df], H))
    return worst, 5


TINY_MODEL = ModelConfig(stem_width=2, stage_widths=(3, 3, 4), fpn_channels=4, head_width=4,
                         lighthead=LightHeadConfig(k=2, per_bin_channels=2, separable_kernel=15, fc_units=6),
                         init_std=0.5)


def _graph_loss(model, image, targets):
    """Scalar detector loss with its head gradients: CE + smooth-L1 on every level and light head."""
    out = model.forward(image)
    total = 0.0
    d_scores, d_offsets, d_light = [], [], {}
    for li in range(3):
        s, o = out.scores[li], out.offsets[li]
        lab, reg_t, rois, lab2, reg2 = targets[li]
        logits = s[0].reshape(2, -1).T
        l1, dl = tn.softmax_ce_loss(logits, lab)
        l2, dr = tn.smooth_l1_loss(o[0].reshape(8, -1).T, reg_t)
        d_scores.append(dl.T.reshape(s.shape))
        d_offsets.append(dr.T.reshape(o.shape))
        c, r = model.lighthead_forward(li, rois)
        l3, dc = tn.softmax_ce_loss(c, lab2)
        l4, dr2 = tn.smooth_l1_loss(r, reg2)
        d_light[li] = (dc, dr2)
        total += l1 + l2 + l3 + l4
    return total, d_scores, d_offsets, d_light


GRAPH_SHAPES = ((32, 32), (32, 48), (48, 32), (16, 64), (64, 16))


def check_full_graph(rng, corrupt=False):
    """Image -> backbone -> FPN -> dense heads and light heads -> loss."""
    worst = 0.0
    for hw in GRAPH_SHAPES:
        model = build_model(TINY_MODEL, seed=int(rng.integers(1 << 30)))
        params = model.params()
        for p in params:
            if p.value.ndim == 1:
                p.value[:] = rng.standard_normal(p.value.shape) * 0.1
        image = rng.uniform(0, 1, size=(1, 3) + hw)
        targets = []
        for li, stride in enumerate((4, 8, 16)):
            m = (hw[0] // stride) * (hw[1] // stride)
            # rows [xmin, ymin, xmax, ymax], at least 4 px on a side
            corners = np.sort(rng.uniform(0, 1, size=(3, 2, 2)), axis=1) * np.array([hw[1], hw[0]])
            rois = corners.reshape(3, 4)
            rois[:, 2:] += 4
            targets.append((rng.integers(0, 2, size=m), rng.standard_normal((m, 8)) * 3, rois,
                            rng.integers(0, 2, size=3), rng.standard_normal((3, 8)) * 3))
        tn.zero_grad(params)
        _, ds, do, dlt = _graph_loss(model, image, targets)
        dimg = model.backward(ds, do, dlt)
        grads = [p.grad.copy() for p in params]
        if corrupt:
            dimg = dimg + 0.1
        f = lambda: _graph_loss(model, image, targets)[0]
        worst = max(worst, tn.grad_check(f, [image] + [p.value for p in params], [dimg] + grads, H,
                                         max_entries=2, rng=rng))
    return worst, len(GRAPH_SHAPES)


CHECKS: dict[str, Callable] = {
    "conv2d": check_conv2d,
    "relu": check_relu,
    "upsample_nearest2": check_upsample,
    "linear": check_linear,
    "softmax_ce": check_softmax_ce,
    "smooth_l1": check_smooth_l1,
    "ps_roi_pool": check_ps_roi_pool,
    "image_to_loss": check_full_graph,
}


def run_suite(seed: int = 0, corrupt: bool = False, only: Optional[list] = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        t = time.perf_counter()
        worst, shapes = fn(rng, corrupt)
        results.append(CheckResult(name, float(worst), shapes, time.perf_counter() - t))
    return results
