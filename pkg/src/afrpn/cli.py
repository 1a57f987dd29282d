"""Command-line entry point: ``afrpn <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from typing import Optional

import numpy as np

from . import gradcheck
from .config import CliConfig, config_from_dict, read_config_dict
from .data_io import DirDataset, Scene, SynthDataset, dataset_ids, resize_shorter_side, save_pgm, scene_overlay, write_dataset
from .errors import (CompatError, DegenerateQuad, FormatError, JoinError, NumericalError, ParseError,
                     UsageError)
from .evaluation import build_report, detection_counts, prf
from .geometry import Quad
from .labeling import IGNORE, POSITIVE, generate_labels
from .model import build_model
from .proposals import PROPOSAL_SCHEMA, Detection, Proposal, read_jsonl
from .training import TrainState, load_state, propose, detect, save_state, train_afrpn, train_end2end, write_log

log = logging.getLogger("afrpn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PRF_SCHEMA = "afrpn.prf/1"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; here 2 means a data error, so usage errors exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _config(args) -> CliConfig:
    raw = read_config_dict(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # a bare string
        raw.setdefault(section, {})[name] = value
    return config_from_dict(raw)


def _overrides(args, section: str) -> bool:
    """Whether the config file or a --set flag touches ``section``."""
    if any(item.startswith(section + ".") for item in getattr(args, "set", None) or []):
        return True
    return section in read_config_dict(getattr(args, "config", None))


def _scaled_scene(scene: Scene, scale: Optional[int]) -> Scene:
    return resize_shorter_side(scene, scale) if scale else scene


def _to_original(quad: Quad, scale: tuple) -> Quad:
    sx, sy = scale
    return Quad(quad.v / np.array([sx, sy]))


def _load_model(ckpt: str, cfg: CliConfig, config_given: bool):
    state = load_state(ckpt)
    if config_given:
        # a model section in --config must describe the checkpointed network
        build_model(cfg.model, 0).check_compatible(state.model.state_meta())
    return state


def _write_lines(path: str, lines) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
            n += 1
    return n


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    synth = cfg.synth
    if args.seed is not None:
        synth = type(synth)(**{**synth.to_dict(), "seed": args.seed})
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    man = write_dataset(args.out, SynthDataset(synth, args.count), meta={"synth": synth.to_dict()})
    print(f"wrote {man['count']} scenes to {args.out}")
    return EXIT_OK


def label_grid(cls: np.ndarray) -> np.ndarray:
    """PGM encoding of a label grid: 0 negative, 128 ignore, 255 positive."""
    grid = np.zeros(cls.shape, dtype=np.uint8)
    grid[cls == IGNORE] = 128
    grid[cls == POSITIVE] = 255
    return grid


def cmd_labels(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    summary = []
    for scene in DirDataset(args.data):
        lm = generate_labels(scene.instances, scene.size, cfg.pyramid)
        row = {"image": scene.id}
        for lvl, lab in zip(cfg.pyramid.levels, lm.levels):
            save_pgm(os.path.join(args.out, f"{scene.id}_{lvl.name}.pgm"), label_grid(lab.cls))
            row[lvl.name] = lab.counts()
        with open(os.path.join(args.out, f"{scene.id}.svg"), "w", encoding="utf-8") as fh:
            fh.write(scene_overlay(scene))
        summary.append(row)
    with open(os.path.join(args.out, "labels.json"), "w") as fh:
        json.dump({"schema": "afrpn.labels/1", "pyramid": cfg.pyramid.to_dict(), "images": summary}, fh, indent=1)
    print(f"wrote label grids for {len(summary)} scenes to {args.out}")
    return EXIT_OK


def _train(args, e2e: bool) -> int:
    cfg = _config(args)
    tcfg = cfg.train
    if args.iterations is not None:
        tcfg = type(tcfg)(**{**tcfg.to_dict(), "iterations": args.iterations})
    scenes = DirDataset(args.data)
    if len(scenes) == 0:
        raise UsageError(f"no scenes found in {args.data}")
    if e2e:
        init = _load_model(args.init, cfg, _overrides(args, "model"))
        spec = cfg.pyramid if _overrides(args, "pyramid") else init.spec
        state = TrainState(init.model, spec, tcfg, phase="e2e")
        run = train_end2end
    else:
        state = TrainState(build_model(cfg.model, tcfg.seed), cfg.pyramid, tcfg, phase="rpn")
        run = train_afrpn
    try:
        run(scenes, state.model, state.spec, tcfg, state=state)
    finally:
        os.makedirs(args.out, exist_ok=True)
        write_log(os.path.join(args.out, "train_log.jsonl"), state.records)
    save_state(args.out, state)
    last = state.records[-1]["total"] if state.records else float("nan")
    print(f"{state.phase}: {state.iteration} iterations, final loss {last:.4f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_train_rpn(args) -> int:
    return _train(args, e2e=False)


def cmd_train_e2e(args) -> int:
    return _train(args, e2e=True)


def _infer(args, final: bool) -> int:
    cfg = _config(args)
    inf = cfg.inference
    state = _load_model(args.ckpt, cfg, _overrides(args, "model"))
    scale = args.scale if args.scale is not None else inf.scale
    lines = []
    for scene in DirDataset(args.data):
        s = _scaled_scene(scene, scale)
        props = propose(state.model, s.image, state.spec, inf.n1, inf.n2, inf.score_floor, inf.proposal_nms)
        if final:
            items = detect(state.model, s.image, state.spec, det_threshold=inf.det_threshold,
                           skew_iou=inf.skew_nms, proposals=props)
            items = [Detection(_to_original(d.quad, s.scale), d.score) for d in items]
        else:
            items = [Proposal(_to_original(p.quad, s.scale), p.score, p.level) for p in props]
        lines += [it.to_json(scene.id) for it in items]
    n = _write_lines(args.out, lines)
    print(f"wrote {n} {'detections' if final else 'proposals'} to {args.out}")
    return EXIT_OK


def cmd_propose(args) -> int:
    return _infer(args, final=False)


def cmd_detect(args) -> int:
    return _infer(args, final=True)


def load_predictions(path: str, known_ids) -> dict:
    """Group a JSON-lines prediction file by image id, each list sorted by descending score."""
    known = set(known_ids)
    with open(path, encoding="utf-8") as fh:
        try:
            records = read_jsonl(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    grouped = defaultdict(list)
    for rec in records:
        if rec.get("schema") != PROPOSAL_SCHEMA:
            raise FormatError(f"{path}: unexpected schema {rec.get('schema')!r}")
        image = rec.get("image")
        if image not in known:
            raise JoinError(f"prediction for image {image!r} has no ground truth")
        grouped[image].append(Proposal.from_record(rec))
    for items in grouped.values():
        items.sort(key=lambda p: -p.score)  # stable, so equal scores keep file order
    return grouped


def cmd_eval(args) -> int:
    ids = dataset_ids(args.gt)
    preds = load_predictions(args.proposals, ids)
    data = DirDataset(args.gt)
    results = [(data[i].instances, preds.get(data.entries[i]["id"], [])) for i in range(len(data))]
    report = build_report(results, mode=args.mode)
    out = report.to_dict()
    if args.prf:
        tp = counted = n_gt = 0
        for gts, items in results:
            a, b, c = detection_counts([Detection(p.quad, p.score) for p in items], gts, 0.5, args.mode)
            tp, counted, n_gt = tp + a, counted + b, n_gt + c
        p, r, f = prf(tp, counted, n_gt)
        out["prf"] = {"schema": PRF_SCHEMA, "precision": p, "recall": r, "f": f, "tp": tp,
                      "counted": counted, "n_gt": n_gt, "iou": 0.5}
    text = json.dumps(out, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(report.table(), end="")
    if args.prf:
        print(f"P={out['prf']['precision']:.3f} R={out['prf']['recall']:.3f} F={out['prf']['f']:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _config(args)  # validated for consistency with the other commands
    results = gradcheck.run_suite(seed=args.seed, corrupt=args.corrupt)
    for r in results:
        print(f"{r.name:<14} worst={r.worst:.3e} shapes={r.shapes} {r.seconds:6.2f}s {'ok' if r.ok else 'FAIL'}")
    total = sum(r.seconds for r in results)
    bad = [r.name for r in results if not r.ok]
    print(f"total {total:.1f}s; {'all passed' if not bad else 'failed: ' + ', '.join(bad)}")
    return EXIT_OK if not bad else EXIT_NUMERIC


def cmd_render(args) -> int:
    data = DirDataset(args.data)
    preds = load_predictions(args.predictions, dataset_ids(args.data)) if args.predictions else {}
    os.makedirs(args.out, exist_ok=True)
    for i in range(len(data)):
        scene = data[i]
        extra = [(p.quad, args.kind) for p in preds.get(scene.id, [])]
        href = data.entries[i]["image"] if args.link_images else None
        if href:
            href = os.path.relpath(os.path.join(args.data, href), args.out)
        with open(os.path.join(args.out, f"{scene.id}.svg"), "w", encoding="utf-8") as fh:
            fh.write(scene_overlay(scene, extra, href))
    print(f"wrote {len(data)} overlays to {args.out}")
    return EXIT_OK


def cmd_config(args) -> int:
    print(json.dumps(_config(args).to_dict(), indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="afrpn", description="Anchor-free region proposal network for multi-oriented text.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="JSON config file (defaults used when omitted)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; VALUE is parsed as JSON when possible")
        return sp

    sp = add("synth", cmd_synth, "write a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int)

    sp = add("labels", cmd_labels, "dump per-level label grids (PGM) and overlays (SVG)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    for name, fn, help_ in (("train-rpn", cmd_train_rpn, "train the proposal network"),
                            ("train-e2e", cmd_train_e2e, "train proposals and light heads jointly")):
        sp = add(name, fn, help_)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True, help="checkpoint directory")
        sp.add_argument("--iterations", type=int)
        if name == "train-e2e":
            sp.add_argument("--init", required=True, help="checkpoint from train-rpn")

    for name, fn, help_ in (("propose", cmd_propose, "write scored proposals as JSON lines"),
                            ("detect", cmd_detect, "write final detections as JSON lines")):
        sp = add(name, fn, help_)
        sp.add_argument("--data", required=True)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--scale", type=int, help="shorter side at test time")
        sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "recall report (and P/R/F with --prf)")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--proposals", required=True)
    sp.add_argument("--mode", choices=("aabb", "quad"), default="aabb")
    sp.add_argument("--out")
    sp.add_argument("--prf", action="store_true", help="treat predictions as detections and report P/R/F")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every layer and the full graph")
    sp.add_argument("--corrupt", action="store_true", help="perturb one gradient to prove the check fails")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("render", cmd_render, "SVG overlays of ground truth and predictions")
    sp.add_argument("--data", required=True)
    sp.add_argument("--predictions")
    sp.add_argument("--kind", choices=("proposal", "detection"), default="detection")
    sp.add_argument("--link-images", action="store_true")
    sp.add_argument("--out", required=True)

    add("config", cmd_config, "print the effective configuration")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"afrpn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"afrpn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, FormatError, DegenerateQuad, JoinError, CompatError, OSError) as exc:
        print(f"afrpn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
