"""Proposal recall (R@k, AR) and a simple detection precision/recall/F harness."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import iou_aabb_matrix, iou_quad

REPORT_SCHEMA = "afrpn.recall_report/1"
AR_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_KS = (50, 100, 300)


def _gt_box(inst) -> np.ndarray:
    v = inst.quad.v
    return np.concatenate([v.min(axis=0), v.max(axis=0)])


def iou_matrix(gts: Sequence, proposals: Sequence, mode: str = "aabb") -> np.ndarray:
    """(G, P) IoU between ground-truth instances and anything with a ``.quad``."""
    if mode not in ("aabb", "quad"):
        raise ValueError(f"unknown IoU mode {mode!r}")
    if not gts or not proposals:
        return np.zeros((len(gts), len(proposals)))
    g = np.stack([_gt_box(i) for i in gts])
    pv = np.stack([p.quad.v for p in proposals])
    p = np.concatenate([pv.min(axis=1), pv.max(axis=1)], axis=1)
    m = iou_aabb_matrix(g, p)
    if mode == "quad":
        out = np.zeros_like(m)
        for i, j in zip(*np.nonzero(m > 0)):
            out[i, j] = iou_quad(gts[i].quad, proposals[j].quad)
        m = out
    return m


def best_iou_per_gt(gts, proposals, k: int, mode: str = "aabb") -> np.ndarray:
    """Max IoU of each non-ignored GT over the first ``k`` proposals."""
    keep = [g for g in gts if not g.ignore]
    m = iou_matrix(keep, list(proposals[:k]), mode)
    if m.shape[1] == 0:
        return np.zeros(len(keep))
    return m.max(axis=1)


def recall_at(gts, proposals, k: int, iou_t: float, mode: str = "aabb") -> float:
    best = best_iou_per_gt(gts, proposals, k, mode)
    if len(best) == 0:
        return 1.0
    return float(np.mean(best >= iou_t))


def average_recall(gts, proposals, k: int, mode: str = "aabb") -> float:
    best = best_iou_per_gt(gts, proposals, k, mode)
    if len(best) == 0:
        return 1.0
    return float(np.mean([np.mean(best >= t) for t in AR_THRESHOLDS]))


def detection_counts(detections, gts, iou_t: float = 0.5, mode: str = "quad") -> tuple[int, int, int]:
    """(true positives, detections counted, non-ignored GT) under greedy one-to-one matching."""
    dets = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    dets = [detections[i] for i in dets]
    m = iou_matrix(list(gts), dets, mode)
    ignored = np.array([g.ignore for g in gts], dtype=bool)
    matched = np.zeros(len(gts), dtype=bool)
    tp = counted = 0
    for j in range(len(dets)):
        col = m[:, j] if len(gts) else np.zeros(0)
        cand = np.nonzero(~ignored & ~matched & (col >= iou_t))[0]
        if len(cand):
            best = cand[np.argmax(col[cand])]
            matched[best] = True
            tp += 1
            counted += 1
        elif np.any(ignored & (col >= iou_t)):
            continue
        else:
            counted += 1
    return tp, counted, int((~ignored).sum())


def prf(tp: int, counted: int, n_gt: int) -> tuple[float, float, float]:
    p = tp / counted if counted else 1.0
    r = tp / n_gt if n_gt else 1.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def detection_prf(detections, gts, iou_t: float = 0.5, mode: str = "quad") -> tuple[float, float, float]:
    return prf(*detection_counts(detections, gts, iou_t, mode))


@dataclass
class RecallReport:
    ks: tuple = DEFAULT_KS
    recall50: dict = field(default_factory=dict)
    recall75: dict = field(default_factory=dict)
    ar: dict = field(default_factory=dict)
    n_gt: int = 0
    n_ignored: int = 0
    n_images: int = 0
    mode: str = "aabb"

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA, "mode": self.mode, "ks": list(self.ks),
            "recall50": {str(k): v for k, v in self.recall50.items()},
            "recall75": {str(k): v for k, v in self.recall75.items()},
            "ar": {str(k): v for k, v in self.ar.items()},
            "n_gt": self.n_gt, "n_ignored": self.n_ignored, "n_images": self.n_images,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RecallReport":
        conv = lambda m: {int(k): float(v) for k, v in m.items()}
        return cls(tuple(d["ks"]), conv(d["recall50"]), conv(d["recall75"]), conv(d["ar"]),
                   d["n_gt"], d["n_ignored"], d["n_images"], d["mode"])

    def table(self) -> str:
        cols = []
        for k in self.ks:
            cols += [f"R@{k}/.50", f"R@{k}/.75", f"AR@{k}"]
        vals = []
        for k in self.ks:
            vals += [self.recall50[k], self.recall75[k], self.ar[k]]
        widths = [max(len(c), 6) for c in cols]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = "  ".join(f"{100 * v:.1f}".rjust(w) for v, w in zip(vals, widths))
        return f"{head}\n{row}\n(mode={self.mode}, GT={self.n_gt}, ignored={self.n_ignored}, images={self.n_images})\n"


def build_report(results: Iterable[tuple], ks: Sequence[int] = DEFAULT_KS, mode: str = "aabb") -> RecallReport:
    """Pool per-image recalls over a dataset of ``(gts, proposals)`` pairs.

    Proposals must already be in descending score order. GT counts are pooled
    across images (not averaged per image); images without GT add nothing.
    """
    hits = {k: np.zeros(len(AR_THRESHOLDS)) for k in ks}
    n_gt = n_ign = n_img = 0
    for gts, props in results:
        n_img += 1
        n_ign += sum(1 for g in gts if g.ignore)
        keep = [g for g in gts if not g.ignore]
        n_gt += len(keep)
        if not keep:
            continue
        m = iou_matrix(keep, list(props[:max(ks)]), mode)
        for k in ks:
            best = m[:, :k].max(axis=1) if m.shape[1] and k > 0 else np.zeros(len(keep))
            hits[k] += [(best >= t).sum() for t in AR_THRESHOLDS]
    rep = RecallReport(tuple(ks), mode=mode, n_gt=n_gt, n_ignored=n_ign, n_images=n_img)
    for k in ks:
        frac = hits[k] / n_gt if n_gt else np.ones(len(AR_THRESHOLDS))
        rep.recall50[k] = float(frac[0])
        rep.recall75[k] = float(frac[AR_THRESHOLDS.index(0.75)])
        rep.ar[k] = float(frac.mean())
    return rep
