"""Dense decoding, NMS, proposal selection/routing and second-stage targets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateQuad
from .geometry import AABB, Quad, canonicalize_array, iou_aabb_matrix, iou_quad, min_enclosing_rect
from .labeling import PyramidSpec, TextInstance, decode_level, scale_group
from .tensornet import softmax

PROPOSAL_SCHEMA = "afrpn.proposal/1"
STAGE2_POS_IOU = 0.5
STAGE2_NEG_IOU = 0.3


@dataclass(frozen=True)
class Proposal:
    quad: Quad
    score: float
    level: str = "P2"
    aabb: AABB = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "aabb", self.quad.aabb())

    def to_json(self, image: Optional[str] = None) -> str:
        rec = {"schema": PROPOSAL_SCHEMA, "quad": self.quad.flat(), "score": self.score, "level": self.level}
        if image is not None:
            rec["image"] = image
        return json.dumps(rec)

    @classmethod
    def from_record(cls, rec: dict) -> "Proposal":
        return cls(Quad(np.array(rec["quad"], dtype=np.float64).reshape(4, 2)), float(rec["score"]),
                   rec.get("level", "P2"))


@dataclass(frozen=True)
class Detection:
    quad: Quad
    score: float

    def to_json(self, image: Optional[str] = None) -> str:
        rec = {"schema": PROPOSAL_SCHEMA, "quad": self.quad.flat(), "score": self.score}
        if image is not None:
            rec["image"] = image
        return json.dumps(rec)


@dataclass
class Stage2Label:
    label: Optional[int]  # 1 positive, 0 negative, None excluded
    target: Optional[np.ndarray] = None
    gt: int = -1
    iou: float = 0.0


def _boxes(items: Sequence) -> np.ndarray:
    if not items:
        return np.zeros((0, 4))
    v = np.stack([p.quad.v for p in items])
    return np.concatenate([v.min(axis=1), v.max(axis=1)], axis=1)


def _order(items: Sequence) -> np.ndarray:
    scores = np.array([p.score for p in items], dtype=np.float64)
    return np.argsort(-scores, kind="stable")


# ---------------------------------------------------------------- decoding


def decode_dense(outputs, spec: PyramidSpec, score_floor: float = 0.1, image: int = 0,
                 top_n: Optional[int] = None) -> list[list[Proposal]]:
    """Decode per-level head outputs into proposals, one list per level.

    Every cell whose textness probability reaches ``score_floor`` yields a
    quad decoded from its sliding point; degenerate decodes are dropped.
    With ``top_n`` only the highest-scoring cells of each level are decoded.
    """
    per_level = []
    for li, lv in enumerate(spec.levels):
        logits = outputs.scores[li][image]  # (2, H, W)
        prob = softmax(logits.reshape(2, -1).T)[:, 1].reshape(logits.shape[1:])
        rows, cols = np.nonzero(prob >= score_floor)
        s = prob[rows, cols]
        if top_n is not None and len(s) > top_n:
            keep = np.argsort(-s, kind="stable")[:top_n]
            keep.sort()
            rows, cols, s = rows[keep], cols[keep], s[keep]
        off = outputs.offsets[li][image][:, rows, cols].T
        verts, ok = decode_level(off, lv.stride, lv.norm, rows, cols)
        per_level.append([Proposal(Quad._trusted(verts[i]), float(s[i]), lv.name) for i in np.nonzero(ok)[0]])
    return per_level


# ---------------------------------------------------------------- NMS


def nms(proposals: Sequence, iou_threshold: float = 0.7, mode: str = "aabb") -> list:
    """Greedy NMS: keep a box iff its IoU with every kept box is <= threshold.

    Boxes are visited by descending score, equal scores by input index.
    Works on anything with ``.quad`` and ``.score``.
    """
    if not (0 < iou_threshold <= 1):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if mode not in ("aabb", "quad"):
        raise ValueError(f"unknown NMS mode {mode!r}")
    n = len(proposals)
    if n == 0:
        return []
    order = _order(proposals)
    boxes = _boxes(proposals)[order]
    items = [proposals[i] for i in order]
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = np.nonzero(~suppressed[i + 1:])[0] + i + 1
        if len(rest) == 0:
            continue
        ious = iou_aabb_matrix(boxes[i:i + 1], boxes[rest])[0]
        if mode == "aabb":
            suppressed[rest[ious > iou_threshold]] = True
        else:
            # quad IoU can only be non-zero where the boxes overlap at all
            for j in rest[ious > 0]:
                if iou_quad(items[i].quad, items[j].quad) > iou_threshold:
                    suppressed[j] = True
    return [items[i] for i in keep]


def skewed_nms(detections: Sequence, iou_threshold: float = 0.3) -> list:
    return nms(detections, iou_threshold, mode="quad")


def top_k(items: Sequence, k: int) -> list:
    return [items[i] for i in _order(items)[:k]]


def select_for_stage2(per_module: Sequence[Sequence[Proposal]], n1: int = 2000, n2: int = 300,
                      iou_threshold: float = 0.7, mode: str = "aabb") -> list[Proposal]:
    pooled = []
    for props in per_module:
        pooled.extend(top_k(props, n1))
    return nms(pooled, iou_threshold, mode)[:n2]


def route_proposals(proposals: Sequence[Proposal], spec: PyramidSpec) -> list[list[Proposal]]:
    """Group proposals by the short side of their enclosing rect; tiny ones go to the first level."""
    groups = [[] for _ in spec.levels]
    for p in proposals:
        g = scale_group(min_enclosing_rect(p.quad).short_side, spec)
        groups[max(g, 0)].append(p)
    return groups


# ---------------------------------------------------------------- second stage


def _center_size(box: np.ndarray):
    box = np.asarray(box, dtype=np.float64).reshape(-1, 4)
    w = box[:, 2] - box[:, 0]
    h = box[:, 3] - box[:, 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise DegenerateQuad("proposal box has zero width or height")
    return 0.5 * (box[:, 0] + box[:, 2]), 0.5 * (box[:, 1] + box[:, 3]), w, h


def encode_stage2(box, vertices) -> np.ndarray:
    """Offsets from a proposal box centre to four vertices, scaled by box width/height."""
    px, py, pw, ph = _center_size(box)
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 4, 2)
    out = np.empty(v.shape)
    out[..., 0] = (v[..., 0] - px[:, None]) / pw[:, None]
    out[..., 1] = (v[..., 1] - py[:, None]) / ph[:, None]
    return out.reshape(-1, 8)


def decode_stage2_array(box, offsets) -> tuple[np.ndarray, np.ndarray]:
    px, py, pw, ph = _center_size(box)
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 4, 2)
    v = np.empty(off.shape)
    v[..., 0] = px[:, None] + pw[:, None] * off[..., 0]
    v[..., 1] = py[:, None] + ph[:, None] * off[..., 1]
    return canonicalize_array(v)


def decode_stage2(proposal: Proposal, offsets) -> Quad:
    v, ok = decode_stage2_array(proposal.aabb.as_array(), offsets)
    if not ok[0]:
        raise DegenerateQuad("stage-2 decode produced a degenerate quad")
    return Quad._trusted(v[0])


def assign_stage2_labels(proposals: Sequence[Proposal], instances: Sequence[TextInstance],
                         pos_iou: float = STAGE2_POS_IOU, neg_iou: float = STAGE2_NEG_IOU) -> list[Stage2Label]:
    if not proposals:
        return []
    boxes = _boxes(proposals)
    _center_size(boxes)
    if not instances:
        return [Stage2Label(0) for _ in proposals]
    gt_boxes = np.stack([np.concatenate([i.quad.v.min(axis=0), i.quad.v.max(axis=0)]) for i in instances])
    ious = iou_aabb_matrix(boxes, gt_boxes)
    best = np.argmax(ious, axis=1)  # first maximum on ties
    best_iou = ious[np.arange(len(proposals)), best]
    ignored = np.array([inst.ignore for inst in instances])
    out = []
    for i in range(len(proposals)):
        g, m = int(best[i]), float(best_iou[i])
        if m < neg_iou:
            out.append(Stage2Label(0, gt=-1, iou=m))
        elif ignored[g] or m <= pos_iou:
            out.append(Stage2Label(None, gt=g, iou=m))
        else:
            t = encode_stage2(boxes[i], instances[g].quad.v)[0]
            out.append(Stage2Label(1, t, g, m))
    return out


def read_jsonl(lines: Iterable[str]) -> list[dict]:
    return [json.loads(line) for line in lines if line.strip()]
