"""Sliding points, scale-group assignment and per-level training labels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidNorm
from .geometry import (
    OrientedRect,
    Point2,
    Quad,
    canonicalize_array,
    min_enclosing_rect,
    points_in_convex,
    shrink_rect,
)

NEGATIVE = 0
POSITIVE = 1
IGNORE = -1
OUT_OF_RANGE = -1

SHORT_SHRINK = 0.5
LONG_SHRINK = 0.8
NORM_RF_FRACTION = 0.5


@dataclass(frozen=True)
class LevelSpec:
    name: str
    stride: int
    lo: float  # inclusive lower bound on rect short side, px
    hi: float  # exclusive upper bound
    norm: float

    def contains(self, short_side: float) -> bool:
        return self.lo <= short_side < self.hi


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[LevelSpec, ...]

    def __post_init__(self):
        strides = [lv.stride for lv in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"strides must increase strictly: {strides}")
        for a, b in zip(self.levels, self.levels[1:]):
            if a.hi != b.lo:
                raise ValueError(f"scale ranges of {a.name} and {b.name} are not contiguous")
        for lv in self.levels:
            if not lv.norm > 0:
                raise ValueError(f"norm of {lv.name} must be positive")
            if not lv.lo < lv.hi:
                raise ValueError(f"empty scale range on {lv.name}")

    @classmethod
    def default(cls, p4_norm: Optional[float] = None) -> "PyramidSpec":
        if p4_norm is None:
            from .model import toy_receptive_field

            p4_norm = NORM_RF_FRACTION * toy_receptive_field("P4")
        return cls((
            LevelSpec("P2", 4, 4.0, 24.0, 24.0),
            LevelSpec("P3", 8, 24.0, 48.0, 48.0),
            LevelSpec("P4", 16, 48.0, math.inf, float(p4_norm)),
        ))

    @property
    def names(self) -> list[str]:
        return [lv.name for lv in self.levels]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def grid_shape(self, level: int, image_size: tuple[int, int]) -> tuple[int, int]:
        s = self.levels[level].stride
        return -(-image_size[0] // s), -(-image_size[1] // s)

    def to_dict(self) -> dict:
        return {"levels": [
            {"name": lv.name, "stride": lv.stride, "lo": lv.lo,
             "hi": None if math.isinf(lv.hi) else lv.hi, "norm": lv.norm}
            for lv in self.levels
        ]}

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidSpec":
        return cls(tuple(
            LevelSpec(lv["name"], int(lv["stride"]), float(lv["lo"]),
                      math.inf if lv["hi"] is None else float(lv["hi"]), float(lv["norm"]))
            for lv in d["levels"]
        ))


@dataclass(frozen=True)
class TextInstance:
    quad: Quad
    ignore: bool = False
    transcription: Optional[str] = None
    script: Optional[str] = None
    rect: OrientedRect = field(init=False, repr=False, compare=False)
    core: OrientedRect = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.quad, Quad):
            object.__setattr__(self, "quad", Quad(self.quad))
        rect = min_enclosing_rect(self.quad)
        object.__setattr__(self, "rect", rect)
        object.__setattr__(self, "core", shrink_rect(rect, SHORT_SHRINK, LONG_SHRINK))


@dataclass
class LevelLabels:
    cls: np.ndarray  # (H, W) int8 of NEGATIVE / POSITIVE / IGNORE
    targets: np.ndarray  # (H, W, 8) float64, zero outside positives
    ids: np.ndarray  # (H, W) int32 instance index, -1 outside positives

    def counts(self) -> dict:
        return {
            "positive": int((self.cls == POSITIVE).sum()),
            "negative": int((self.cls == NEGATIVE).sum()),
            "ignore": int((self.cls == IGNORE).sum()),
        }


@dataclass
class LabelMap:
    levels: list[LevelLabels]
    image_size: tuple[int, int]

    def __getitem__(self, i) -> LevelLabels:
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


def sliding_points(stride: int, grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centre x and y coordinates for a grid of the given shape."""
    h, w = grid
    xs = (np.arange(w, dtype=np.float64) + 0.5) * stride
    ys = (np.arange(h, dtype=np.float64) + 0.5) * stride
    return xs, ys


def map_sliding_point(level: LevelSpec, row: int, col: int, grid: Optional[tuple[int, int]] = None) -> Point2:
    if row < 0 or col < 0:
        raise IndexError(f"cell ({row}, {col}) outside the grid")
    if grid is not None and (row >= grid[0] or col >= grid[1]):
        raise IndexError(f"cell ({row}, {col}) outside grid {grid}")
    s = level.stride
    return Point2(col * s + s / 2, row * s + s / 2)


def assign_scale_group(inst: TextInstance, spec: PyramidSpec) -> int:
    return scale_group(inst.rect.short_side, spec)


def scale_group(short_side: float, spec: PyramidSpec) -> int:
    for i, lv in enumerate(spec.levels):
        if lv.contains(short_side):
            return i
    return OUT_OF_RANGE


def _check_norm(norm):
    if not (norm > 0) or not math.isfinite(norm):
        raise InvalidNorm(f"norm must be positive, got {norm}")


def encode_offsets(points: np.ndarray, vertices: np.ndarray, norm: float) -> np.ndarray:
    """(M, 2) points and (M, 4, 2) or (4, 2) vertices -> (M, 8) normalised offsets."""
    _check_norm(norm)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 1, 2)
    v = np.asarray(vertices, dtype=np.float64)
    return ((v - pts) / norm).reshape(len(pts), 8)


def decode_offsets(points: np.ndarray, offsets: np.ndarray, norm) -> np.ndarray:
    """Inverse of encode_offsets; ``norm`` may be a scalar or per-point array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 1, 2)
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 4, 2)
    norm = np.asarray(norm, dtype=np.float64).reshape(-1, 1, 1)
    return pts + off * norm


def encode_targets(p_t, rect: Quad, norm: float) -> tuple[float, ...]:
    out = encode_offsets(np.array([tuple(p_t)]), rect.v, norm)
    return tuple(float(x) for x in out[0])


def decode_targets(p_t, offsets: Sequence[float], norm: float) -> Quad:
    _check_norm(norm)
    v = decode_offsets(np.array([tuple(p_t)]), np.asarray(offsets), norm)[0]
    return Quad(v)


def _window(aabb_v: np.ndarray, stride: int, grid: tuple[int, int]):
    # index range of cells whose centres can fall inside the box
    lo = aabb_v.min(axis=0)
    hi = aabb_v.max(axis=0)
    c0 = max(0, int(math.floor(lo[0] / stride - 0.5)))
    c1 = min(grid[1], int(math.ceil(hi[0] / stride - 0.5)) + 1)
    r0 = max(0, int(math.floor(lo[1] / stride - 0.5)))
    r1 = min(grid[0], int(math.ceil(hi[1] / stride - 0.5)) + 1)
    return r0, r1, c0, c1


def generate_labels(instances: Sequence[TextInstance], image_size: tuple[int, int], spec: PyramidSpec) -> LabelMap:
    """Classify every sliding point on every level and attach regression targets.

    A point is positive on level l when it lies in the core of an instance
    assigned to l (the nearest rect centre wins overlaps, lower index on
    ties). It is ignored when it lies inside the enclosing rect of any other
    instance that cannot claim it, and negative otherwise.
    """
    groups = [scale_group(inst.rect.short_side, spec) for inst in instances]
    levels = []
    for li, lv in enumerate(spec.levels):
        grid = spec.grid_shape(li, image_size)
        xs, ys = sliding_points(lv.stride, grid)
        ignore = np.zeros(grid, dtype=bool)
        best_d = np.full(grid, np.inf)
        best_id = np.full(grid, -1, dtype=np.int32)
        for k, inst in enumerate(instances):
            r0, r1, c0, c1 = _window(inst.rect.v, lv.stride, grid)
            if r0 >= r1 or c0 >= c1:
                continue
            gx, gy = np.meshgrid(xs[c0:c1], ys[r0:r1])
            pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
            in_rect = points_in_convex(pts, inst.rect).reshape(gx.shape)
            owns = groups[k] == li and not inst.ignore
            if owns:
                in_core = points_in_convex(pts, inst.core).reshape(gx.shape)
                c = inst.rect.v.mean(axis=0)
                d = (gx - c[0]) ** 2 + (gy - c[1]) ** 2
                sub_d = best_d[r0:r1, c0:c1]
                sub_id = best_id[r0:r1, c0:c1]
                better = in_core & (d < sub_d)
                sub_d[better] = d[better]
                sub_id[better] = k
                ignore[r0:r1, c0:c1] |= in_rect & ~in_core
            else:
                ignore[r0:r1, c0:c1] |= in_rect
        cls = np.full(grid, NEGATIVE, dtype=np.int8)
        cls[ignore] = IGNORE
        pos = best_id >= 0
        cls[pos] = POSITIVE
        targets = np.zeros(grid + (8,), dtype=np.float64)
        if pos.any():
            rr, cc = np.nonzero(pos)
            pts = np.stack([xs[cc], ys[rr]], axis=1)
            verts = np.stack([instances[k].rect.v for k in best_id[rr, cc]])
            targets[rr, cc] = encode_offsets(pts, verts, lv.norm)
        levels.append(LevelLabels(cls=cls, targets=targets, ids=best_id))
    return LabelMap(levels=levels, image_size=tuple(image_size))


def decode_level(offsets: np.ndarray, stride: int, norm: float, rows: np.ndarray, cols: np.ndarray):
    """Decode (K, 8) offsets predicted at the given cells into canonical quads.

    Returns the (K, 4, 2) vertex array and a validity mask.
    """
    pts = np.stack([(cols + 0.5) * stride, (rows + 0.5) * stride], axis=1).astype(np.float64)
    return canonicalize_array(decode_offsets(pts, offsets, norm))
