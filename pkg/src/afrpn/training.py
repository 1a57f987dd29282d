"""Mini-batch sampling, multi-task losses, OHEM and the two training phases."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensornet as tn
from .errors import EmptyBatch, NumericalError
from .geometry import Quad
from .labeling import NEGATIVE, POSITIVE, LevelLabels, PyramidSpec, generate_labels
from .model import Model
from .proposals import (
    Detection,
    Proposal,
    assign_stage2_labels,
    decode_dense,
    decode_stage2_array,
    route_proposals,
    select_for_stage2,
    skewed_nms,
)

log = logging.getLogger(__name__)

LOG_SCHEMA = "afrpn.trainlog/1"


@dataclass
class TrainConfig:
    lr: float = 0.001
    lr_steps: tuple = (1200, 1800)
    lr_decay: float = 0.1
    iterations: int = 2000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    rpn_batch: tuple = (128, 128)
    frcnn_batch: tuple = (64, 64)
    rpn_lambda: tuple = (1.0, 3.0)
    frcnn_lambda: tuple = (1.0, 1.0)
    ohem: bool = True
    ohem_batch: int = 128
    n1: int = 2000
    n2: int = 300
    proposal_nms: float = 0.7
    score_floor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_steps", "rpn_batch", "frcnn_batch", "rpn_lambda", "frcnn_lambda"):
            setattr(self, name, tuple(getattr(self, name)))
        if min(self.rpn_batch + self.frcnn_batch) <= 0 or self.iterations < 0 or self.ohem_batch <= 0:
            raise ValueError("batch sizes must be positive")
        if min(self.rpn_lambda + self.frcnn_lambda) < 0:
            raise ValueError("loss weights must be non-negative")

    def lr_at(self, it: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for s in self.lr_steps if it >= s)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------- sampling


def _fill_sample(pos: np.ndarray, neg: np.ndarray, n_pos: int, n_neg: int, rng: np.random.Generator):
    if len(neg) == 0:
        raise EmptyBatch("no negative samples available")
    take_pos = min(len(pos), n_pos)
    take_neg = min(len(neg), n_pos + n_neg - take_pos)
    p = np.sort(rng.choice(pos, size=take_pos, replace=False)) if take_pos else pos[:0]
    q = np.sort(rng.choice(neg, size=take_neg, replace=False))
    return p, q


def sample_sliding_points(level: LevelLabels, n_pos: int = 128, n_neg: int = 128, rng=None):
    """Flat cell indices (positives, negatives); IGNORE cells are never drawn.

    Short on positives, the batch is topped up with extra negatives.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    cls = level.cls.reshape(-1) if isinstance(level, LevelLabels) else np.asarray(level).reshape(-1)
    return _fill_sample(np.nonzero(cls == POSITIVE)[0], np.nonzero(cls == NEGATIVE)[0], n_pos, n_neg, rng)


def sample_proposals(labels: Sequence, n_pos: int = 64, n_neg: int = 64, rng=None):
    """Same quota and fill rule as sliding points, over stage-2 labels; excluded ones are skipped."""
    rng = rng if rng is not None else np.random.default_rng(0)
    lab = [l.label if hasattr(l, "label") else l for l in labels]
    pos = np.array([i for i, l in enumerate(lab) if l == 1], dtype=np.int64)
    neg = np.array([i for i, l in enumerate(lab) if l == 0], dtype=np.int64)
    return _fill_sample(pos, neg, n_pos, n_neg, rng)


def ohem_select(losses, b: int) -> np.ndarray:
    """Indices of the ``b`` largest losses (lower index wins ties), ascending."""
    losses = np.asarray(losses, dtype=np.float64)
    return np.sort(np.argsort(-losses, kind="stable")[:b])


# ---------------------------------------------------------------- losses


def combine(l_cls: float, l_loc: float, lam_cls: float = 1.0, lam_loc: float = 3.0) -> float:
    return lam_cls * l_cls + lam_loc * l_loc


@dataclass
class LossTerms:
    total: float
    cls: float
    loc: float
    d_logits: np.ndarray
    d_reg: np.ndarray


def multitask_loss(logits, labels, reg, targets, cls_weights=None, lam_cls=1.0, lam_loc=1.0) -> LossTerms:
    """Softmax loss over all rows plus smooth-L1 over the positive rows.

    ``cls_weights`` masks which rows take part (all by default); regression
    uses the participating positives only, and is zero when there are none.
    """
    labels = np.asarray(labels, dtype=np.int64)
    w = np.ones(len(labels)) if cls_weights is None else np.asarray(cls_weights, dtype=np.float64)
    l_cls, d_logits = tn.softmax_ce_loss(logits, labels, w)
    reg_w = w * (labels == 1)
    l_loc, d_reg = tn.smooth_l1_loss(reg, targets, reg_w)
    return LossTerms(combine(l_cls, l_loc, lam_cls, lam_loc), l_cls, l_loc, lam_cls * d_logits, lam_loc * d_reg)


def rpn_module_loss(scores, offsets, level: LevelLabels, pos_idx, neg_idx, lam_cls=1.0, lam_loc=3.0):
    """Loss of one detection module on its sampled cells.

    ``scores`` (1, 2, H, W) and ``offsets`` (1, 8, H, W). Returns the
    :class:`LossTerms` with gradients already scattered back to map shape.
    """
    _, _, h, w = scores.shape
    idx = np.concatenate([pos_idx, neg_idx])
    labels = np.concatenate([np.ones(len(pos_idx), np.int64), np.zeros(len(neg_idx), np.int64)])
    logits = scores[0].reshape(2, -1)[:, idx].T
    reg = offsets[0].reshape(8, -1)[:, idx].T
    targets = level.targets.reshape(-1, 8)[idx]
    terms = multitask_loss(logits, labels, reg, targets, lam_cls=lam_cls, lam_loc=lam_loc)
    ds = np.zeros((2, h * w))
    do = np.zeros((8, h * w))
    np.add.at(ds.T, idx, terms.d_logits)
    np.add.at(do.T, idx, terms.d_reg)
    terms.d_logits = ds.reshape(1, 2, h, w)
    terms.d_reg = do.reshape(1, 8, h, w)
    return terms


def frcnn_loss(batches: Sequence[Optional[LossTerms]]) -> float:
    """Total second-stage loss: the sum over the per-level detectors that had a batch."""
    return float(sum(b.total for b in batches if b is not None))


def per_sample_losses(logits, labels, reg, targets, lam_cls=1.0, lam_loc=1.0) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    ce = tn.softmax_ce_per_sample(logits, labels)
    sl1 = tn.smooth_l1(reg - targets).sum(axis=1) * (labels == 1)
    return lam_cls * ce + lam_loc * sl1


# ---------------------------------------------------------------- training loops


def iteration_rng(seed: int, it: int) -> np.random.Generator:
    return np.random.default_rng([seed, it, 1])


def scene_index(seed: int, it: int, n: int) -> int:
    epoch, pos = divmod(it, n)
    return int(np.random.default_rng([seed, epoch, 2]).permutation(n)[pos])


@dataclass
class TrainState:
    model: Model
    spec: PyramidSpec
    cfg: TrainConfig
    iteration: int = 0
    phase: str = "rpn"
    records: list = field(default_factory=list)


def _check_finite(rec: dict):
    vals = [rec["total"]]
    for m in rec["modules"].values():
        vals += [m["cls"], m["loc"]]
    for m in rec.get("frcnn", {}).values():
        vals += [m["cls"], m["loc"]]
    if not all(math.isfinite(v) for v in vals):
        raise NumericalError(f"non-finite loss at iteration {rec['iteration']}", rec)


def rpn_losses(model: Model, outputs, labels, spec: PyramidSpec, cfg: TrainConfig, rng):
    """Per-module RPN losses with map-shaped gradients; modules without negatives are skipped."""
    modules, d_scores, d_offsets, total = {}, [], [], 0.0
    for li, lv in enumerate(spec.levels):
        try:
            pos, neg = sample_sliding_points(labels[li], *cfg.rpn_batch, rng=rng)
        except EmptyBatch:
            modules[lv.name] = {"cls": 0.0, "loc": 0.0, "pos": 0, "neg": 0}
            d_scores.append(None)
            d_offsets.append(None)
            continue
        t = rpn_module_loss(outputs.scores[li], outputs.offsets[li], labels[li], pos, neg, *cfg.rpn_lambda)
        modules[lv.name] = {"cls": t.cls, "loc": t.loc, "pos": int(len(pos)), "neg": int(len(neg))}
        total += t.total
        d_scores.append(t.d_logits)
        d_offsets.append(t.d_reg)
    return total, modules, d_scores, d_offsets


def stage2_losses(model: Model, outputs, scene, spec: PyramidSpec, cfg: TrainConfig, rng):
    """Second-stage losses per level; proposal coordinates are treated as constants."""
    per_level = decode_dense(outputs, spec, cfg.score_floor, top_n=cfg.n1)
    props = select_for_stage2(per_level, cfg.n1, cfg.n2, cfg.proposal_nms)
    groups = route_proposals(props, spec)
    d_light, stats, total = {}, {}, 0.0
    for li, lv in enumerate(spec.levels):
        group = groups[li]
        labels = assign_stage2_labels(group, scene.instances)
        cand = np.array([i for i, l in enumerate(labels) if l.label is not None], dtype=np.int64)
        n_neg = sum(1 for l in labels if l.label == 0)
        if len(cand) == 0 or n_neg == 0:
            stats[lv.name] = {"cls": 0.0, "loc": 0.0, "pos": 0, "neg": 0, "proposals": len(group)}
            continue
        if not cfg.ohem:
            pos, neg = sample_proposals(labels, *cfg.frcnn_batch, rng=rng)
            cand = np.concatenate([pos, neg])
        boxes = np.stack([group[i].aabb.as_array() for i in cand])
        y = np.array([labels[i].label for i in cand], dtype=np.int64)
        tgt = np.stack([labels[i].target if labels[i].label == 1 else np.zeros(8) for i in cand])
        logits, reg = model.lighthead_forward(li, boxes)
        weights = np.ones(len(cand))
        if cfg.ohem:
            sel = ohem_select(per_sample_losses(logits, y, reg, tgt, *cfg.frcnn_lambda), cfg.ohem_batch)
            weights = np.zeros(len(cand))
            weights[sel] = 1.0
        t = multitask_loss(logits, y, reg, tgt, weights, *cfg.frcnn_lambda)
        d_light[li] = (t.d_logits, t.d_reg)
        total += t.total
        stats[lv.name] = {"cls": t.cls, "loc": t.loc, "pos": int(((y == 1) & (weights > 0)).sum()),
                          "neg": int(((y == 0) & (weights > 0)).sum()), "proposals": len(group)}
    return total, stats, d_light


def train_step(state: TrainState, scenes: Sequence, stage2: bool) -> dict:
    cfg, model, spec = state.cfg, state.model, state.spec
    it = state.iteration
    t0 = time.perf_counter()
    rng = iteration_rng(cfg.seed, it)
    scene = scenes[scene_index(cfg.seed, it, len(scenes))]
    labels = generate_labels(scene.instances, scene.size, spec)
    params = model.params()
    tn.zero_grad(params)
    outputs = model.forward(scene.image[None])
    total, modules, d_scores, d_offsets = rpn_losses(model, outputs, labels, spec, cfg, rng)
    rec = {"schema": LOG_SCHEMA, "phase": state.phase, "iteration": it, "scene": scene.id,
           "modules": modules, "rpn_total": total}
    d_light = None
    if stage2:
        s2_total, s2_stats, d_light = stage2_losses(model, outputs, scene, spec, cfg, rng)
        rec["frcnn"] = s2_stats
        rec["frcnn_total"] = s2_total
        rec["ohem"] = cfg.ohem
        total += s2_total
    rec["total"] = total
    rec["lr"] = cfg.lr_at(it)
    _check_finite(rec)
    model.backward(d_scores, d_offsets, d_light)
    bad = [p.name for p in params if not np.isfinite(p.grad).all()]
    if bad:
        # a finite loss can still overflow in the backward pass; stop before the weights are spoiled
        raise NumericalError(f"non-finite gradient for {bad[0]} at iteration {it}", rec)
    tn.sgd_step(params, rec["lr"], cfg.momentum, cfg.weight_decay)
    rec["wall"] = time.perf_counter() - t0
    state.iteration += 1
    state.records.append(rec)
    return rec


def _run(state: TrainState, scenes, iterations: int, stage2: bool, on_record=None, log_every=100):
    end = state.iteration + iterations if iterations is not None else state.cfg.iterations
    while state.iteration < end:
        rec = train_step(state, scenes, stage2)
        if on_record is not None:
            on_record(rec)
        if log_every and rec["iteration"] % log_every == 0:
            log.info("%s it=%d total=%.4f lr=%g", state.phase, rec["iteration"], rec["total"], rec["lr"])
    return state


def train_afrpn(scenes: Sequence, model: Model, spec: PyramidSpec, cfg: TrainConfig,
                iterations: Optional[int] = None, on_record: Optional[Callable] = None,
                state: Optional[TrainState] = None) -> TrainState:
    """SGD on the summed AF-RPN module losses, one scene per iteration."""
    state = state or TrainState(model, spec, cfg, phase="rpn")
    n = cfg.iterations - state.iteration if iterations is None else iterations
    return _run(state, scenes, n, stage2=False, on_record=on_record)


def train_end2end(scenes: Sequence, model: Model, spec: PyramidSpec, cfg: TrainConfig,
                  iterations: Optional[int] = None, on_record: Optional[Callable] = None,
                  state: Optional[TrainState] = None) -> TrainState:
    """Joint AF-RPN + light-head training from an AF-RPN initialisation."""
    state = state or TrainState(model, spec, cfg, phase="e2e")
    n = cfg.iterations - state.iteration if iterations is None else iterations
    return _run(state, scenes, n, stage2=True, on_record=on_record)


# ---------------------------------------------------------------- checkpoints


def save_state(path: str, state: TrainState):
    meta = state.model.state_meta()
    meta.update({"pyramid": state.spec.to_dict(), "train_config": state.cfg.to_dict(),
                 "iteration": state.iteration, "phase": state.phase})
    tn.save_checkpoint(path, state.model.params(), meta)


def load_state(path: str, model_factory=None) -> TrainState:
    from .model import ModelConfig, build_model

    arrays, meta = tn.read_checkpoint(path)
    mcfg = ModelConfig(**meta["model_config"])
    model = model_factory(mcfg) if model_factory else build_model(mcfg, meta.get("seed", 0))
    tn.load_into(model.params(), arrays)
    spec = PyramidSpec.from_dict(meta["pyramid"])
    cfg = TrainConfig(**meta["train_config"])
    return TrainState(model, spec, cfg, meta.get("iteration", 0), meta.get("phase", "rpn"))


def write_log(path: str, records: Sequence[dict]):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------- inference


def propose(model: Model, image: np.ndarray, spec: PyramidSpec, n1: int = 2000, n2: int = 300,
            score_floor: float = 0.1, nms_iou: float = 0.7):
    outputs = model.forward(image[None] if image.ndim == 3 else image)
    per_level = decode_dense(outputs, spec, score_floor, top_n=n1)
    return select_for_stage2(per_level, n1, n2, nms_iou)


def detect(model: Model, image: np.ndarray, spec: PyramidSpec, n1: int = 2000, n2: int = 300,
           score_floor: float = 0.1, det_threshold: float = 0.5, skew_iou: float = 0.3,
           proposals: Optional[list] = None) -> list[Detection]:
    """Full two-stage inference: proposals, per-level light heads, Skewed NMS."""
    if proposals is None:
        proposals = propose(model, image, spec, n1, n2, score_floor)
    dets = []
    for li, group in enumerate(route_proposals(proposals, spec)):
        if not group:
            continue
        boxes = np.stack([p.aabb.as_array() for p in group])
        logits, reg = model.lighthead_forward(li, boxes)
        prob = tn.softmax(logits)[:, 1]
        verts, ok = decode_stage2_array(boxes, reg)
        for i in np.nonzero(ok & (prob >= det_threshold))[0]:
            dets.append(Detection(Quad._trusted(verts[i]), float(prob[i])))
    return skewed_nms(dets, skew_iou)


def proposals_as_detections(proposals: Sequence[Proposal], det_threshold: float = 0.5,
                            skew_iou: float = 0.3) -> list[Detection]:
    """Stage-1 baseline: thresholded proposals through the same Skewed NMS."""
    dets = [Detection(p.quad, p.score) for p in proposals if p.score >= det_threshold]
    return skewed_nms(dets, skew_iou)
