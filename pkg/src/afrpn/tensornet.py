"""A small reverse-mode engine over float64 numpy arrays.

There is no general autograd: every layer caches what its backward pass
needs during ``forward`` and returns the input gradient from ``backward``
while accumulating parameter gradients into :class:`Parameter.grad`.
Feature maps use N x C x H x W layout.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CompatError, EmptyBatch, FormatError, ShapeError

DTYPE = np.float64
CHECKPOINT_TAG = "DTF1"


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def gaussian(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


# ---------------------------------------------------------------- conv2d


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d_forward(x, w, b, stride=1, padding=0):
    """Cross-correlation; returns (output, cache)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weights {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ShapeError("stride must be >= 1")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(cout, -1).T
    if b is not None:
        out += b
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, (sh, sw), (ph, pw), (ho, wo))


def conv2d_backward(dout, cache):
    xshape, cols, w, (sh, sw), (ph, pw), (ho, wo) = cache
    n, c, h, wd = xshape
    cout, _, kh, kw = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(cout, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph : ph + h, pw : pw + wd]
    return dx, dw, db


class Layer:
    kind = "layer"

    def params(self) -> list[Parameter]:
        return []


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name, cin, cout, kernel, stride=1, padding=None, rng=None, std=0.01, bias=True):
        kh, kw = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding) if padding is not None else (kh // 2, kw // 2)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(f"{name}.weight", gaussian(rng, (cout, cin, kh, kw), std))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout)) if bias else None
        self.name = name
        self._cache = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.weight.value, None if self.bias is None else self.bias.value,
                                          self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


def relu(x):
    return np.maximum(x, 0.0)


class UpsampleNearest2(Layer):
    kind = "upsample_nearest2"

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dout):
        n, c, h, w = dout.shape
        return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def upsample_nearest2(x):
    return UpsampleNearest2().forward(x)


class Linear(Layer):
    kind = "linear"

    def __init__(self, name, fan_in, fan_out, rng=None, std=0.01):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(f"{name}.weight", gaussian(rng, (fan_out, fan_in), std))
        self.bias = Parameter(f"{name}.bias", np.zeros(fan_out))
        self.name = name

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[1]:
            raise ShapeError(f"linear expects (N, {self.weight.value.shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


def linear(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects (N, {w.shape[1]}), got {x.shape}")
    return x @ w.T + b


# ---------------------------------------------------------------- losses


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce_per_sample(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return logsum - z[np.arange(len(labels)), labels]


def softmax_ce_loss(logits, labels, weights=None):
    """Weighted mean cross-entropy; returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    k = len(labels)
    if k == 0:
        raise EmptyBatch("softmax_ce_loss on an empty batch")
    if logits.shape[0] != k:
        raise ShapeError(f"{logits.shape[0]} logits for {k} labels")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=DTYPE)
    wsum = w.sum()
    if wsum <= 0:
        raise EmptyBatch("all sample weights are zero")
    ce = softmax_ce_per_sample(logits, labels)
    p = softmax(logits)
    p[np.arange(k), labels] -= 1.0
    return float((w * ce).sum() / wsum), p * (w / wsum)[:, None]


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def smooth_l1_loss(pred, target, weights=None):
    """Sum over coordinates, weighted mean over rows; returns (loss, dpred).

    An empty batch (or all-zero weights) is a zero loss with zero gradient.
    """
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    k = pred.shape[0]
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=DTYPE)
    if w.shape != (k,):
        raise ShapeError(f"{w.shape[0]} weights for {k} rows")
    wsum = w.sum()
    if k == 0 or wsum <= 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    per = smooth_l1(diff).sum(axis=1)
    return float((w * per).sum() / wsum), smooth_l1_grad(diff) * (w / wsum)[:, None]


# ---------------------------------------------------------------- PS-ROI pooling


def _bins(lo, hi, k, limit):
    edges = lo[:, None] + (hi - lo)[:, None] * np.arange(k + 1)[None, :] / k
    start = np.clip(np.floor(edges[:, :-1]), 0, limit).astype(np.int64)
    end = np.clip(np.ceil(edges[:, 1:]), 0, limit).astype(np.int64)
    return start, end


def _roi_array(rois) -> np.ndarray:
    if hasattr(rois, "xmin"):
        rois = [rois]
    out = []
    for r in rois:
        out.append(r.as_array() if hasattr(r, "as_array") else np.asarray(r, dtype=DTYPE))
    return np.array(out, dtype=DTYPE).reshape(-1, 4)


def _psroi_index(fshape, rois, k, stride):
    c, h, w = fshape
    if c % (k * k):
        raise ShapeError(f"{c} channels not divisible by k^2 = {k * k}")
    d = c // (k * k)
    r = _roi_array(rois) / stride
    xs, xe = _bins(r[:, 0], r[:, 2], k, w)
    ys, ye = _bins(r[:, 1], r[:, 3], k, h)
    ch = (np.arange(k)[:, None, None] * k + np.arange(k)[None, :, None]) * d + np.arange(d)[None, None, :]
    # broadcast to (R, k, k, d): bin row i uses y-bin i, bin col j uses x-bin j
    yb0, yb1 = ys[:, :, None, None], ye[:, :, None, None]
    xb0, xb1 = xs[:, None, :, None], xe[:, None, :, None]
    count = np.clip(yb1 - yb0, 0, None) * np.clip(xb1 - xb0, 0, None)
    shape = (len(r), k, k, d)
    idx = [np.broadcast_to(a, shape) for a in (ch[None], yb0, yb1, xb0, xb1)]
    return idx, np.broadcast_to(count, shape), d


def ps_roi_pool(features, rois, k: int, level_stride: int):
    """Position-sensitive average pooling of (k^2 d, H, W) features.

    ``rois`` is an AABB or a sequence of AABB / [xmin, ymin, xmax, ymax] in
    image pixels. Returns (R, k, k, d), or (k, k, d) for a single AABB.
    """
    single = hasattr(rois, "xmin")
    out, _ = ps_roi_pool_forward(features, rois, k, level_stride)
    return out[0] if single else out


def ps_roi_pool_forward(features, rois, k, level_stride):
    f = features[0] if features.ndim == 4 else features
    if f.ndim != 3:
        raise ShapeError(f"ps_roi_pool expects (C, H, W) features, got {features.shape}")
    (ch, y0, y1, x0, x1), count, d = _psroi_index(f.shape, rois, k, level_stride)
    c, h, w = f.shape
    sat = np.zeros((c, h + 1, w + 1), dtype=DTYPE)
    sat[:, 1:, 1:] = f.cumsum(axis=1).cumsum(axis=2)
    total = sat[ch, y1, x1] - sat[ch, y0, x1] - sat[ch, y1, x0] + sat[ch, y0, x0]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return out, ((ch, y0, y1, x0, x1), count, features.shape)


def ps_roi_pool_backward(dout, cache):
    (ch, y0, y1, x0, x1), count, fshape = cache
    c, h, w = fshape[-3:]
    g = np.where(count > 0, dout / np.maximum(count, 1), 0.0)
    diff = np.zeros((c, h + 1, w + 1), dtype=DTYPE)
    np.add.at(diff, (ch, y0, x0), g)
    np.add.at(diff, (ch, y0, x1), -g)
    np.add.at(diff, (ch, y1, x0), -g)
    np.add.at(diff, (ch, y1, x1), g)
    grad = diff.cumsum(axis=1).cumsum(axis=2)[:, :h, :w]
    return grad.reshape(fshape)


class PSRoIPool(Layer):
    kind = "ps_roi_pool"

    def __init__(self, k: int, stride: int):
        self.k = k
        self.stride = stride

    def forward(self, features, rois):
        out, self._cache = ps_roi_pool_forward(features, rois, self.k, self.stride)
        return out

    def backward(self, dout):
        return ps_roi_pool_backward(dout, self._cache)


# ---------------------------------------------------------------- optimiser


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0005):
    for p in params:
        p.momentum *= momentum
        p.momentum += p.grad + weight_decay * p.value
        p.value -= lr * p.momentum


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- gradient check


def grad_check(
    f: Callable[[], float],
    arrays: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest |analytic - central difference| / max(1, |analytic|, |numeric|).

    ``f`` must recompute the scalar output from the current contents of
    ``arrays``, which are perturbed in place and restored. With
    ``max_entries`` only a random subset of each array's entries is probed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for arr, ana in zip(arrays, analytic):
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError("grad_check needs contiguous arrays")
        ana_flat = np.asarray(ana).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = ana_flat[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str, params: Sequence[Parameter], meta: Optional[dict] = None, with_momentum=True):
    """Write ``path``/manifest.json and ``path``/params.bin (little-endian f8)."""
    os.makedirs(path, exist_ok=True)
    entries, offset = [], 0
    blobs = []
    for p in params:
        arrays = [("value", p.value)] + ([("momentum", p.momentum)] if with_momentum else [])
        for slot, arr in arrays:
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": p.name, "slot": slot, "shape": list(arr.shape), "dtype": "<f8",
                            "offset": offset, "nbytes": len(data)})
            offset += len(data)
            blobs.append(data)
    manifest = {"format": CHECKPOINT_TAG, "entries": entries, "meta": meta or {}}
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for b in blobs:
            fh.write(b)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_checkpoint(path: str) -> tuple[dict, dict]:
    """Return ({(name, slot): array}, meta)."""
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
        with open(os.path.join(path, "params.bin"), "rb") as fh:
            blob = fh.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_TAG:
        raise FormatError(f"{path}: not a {CHECKPOINT_TAG} checkpoint")
    out = {}
    for e in manifest["entries"]:
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"{path}: truncated blob at {e['name']}")
        out[(e["name"], e["slot"])] = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"]).astype(DTYPE)
    return out, manifest.get("meta", {})


def load_into(params: Sequence[Parameter], arrays: dict, strict: bool = True):
    names = {p.name for p in params}
    stored = {n for n, _ in arrays}
    if strict and names - stored:
        raise CompatError(f"checkpoint lacks parameters: {sorted(names - stored)[:5]}")
    for p in params:
        if (p.name, "value") not in arrays:
            continue
        v = arrays[(p.name, "value")]
        if v.shape != p.value.shape:
            raise CompatError(f"{p.name}: checkpoint shape {v.shape} != model shape {p.value.shape}")
        p.value[...] = v
        if (p.name, "momentum") in arrays:
            p.momentum[...] = arrays[(p.name, "momentum")]
        else:
            p.momentum[...] = 0.0
