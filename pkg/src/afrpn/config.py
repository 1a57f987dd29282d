"""File-based configuration shared by every CLI command.

A config file is a JSON object with optional sections ``synth``, ``model``,
``train``, ``pyramid`` and ``inference``. Missing keys take the defaults
below; unknown sections or keys are rejected so typos never pass silently.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .data_io import SynthConfig
from .errors import UsageError
from .labeling import LONG_SHRINK, SHORT_SHRINK, PyramidSpec
from .model import LightHeadConfig, ModelConfig
from .training import TrainConfig


@dataclass
class InferenceConfig:
    n1: int = 2000
    n2: int = 300
    score_floor: float = 0.1
    proposal_nms: float = 0.7
    det_threshold: float = 0.5
    skew_nms: float = 0.3
    scale: Optional[int] = None  # shorter side at test time; None keeps the native size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CliConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pyramid: PyramidSpec = field(default_factory=PyramidSpec.default)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_dict(self) -> dict:
        pyramid = {**self.pyramid.to_dict(), "core_shrink": [SHORT_SHRINK, LONG_SHRINK]}
        return {"synth": self.synth.to_dict(), "model": self.model.to_dict(), "train": self.train.to_dict(),
                "pyramid": pyramid, "inference": self.inference.to_dict()}


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise UsageError(f"config section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid section {section!r}: {exc}") from exc


def config_from_dict(d: dict) -> CliConfig:
    if not isinstance(d, dict):
        raise UsageError("config must be a JSON object")
    sections = {"synth", "model", "train", "pyramid", "inference"}
    unknown = sorted(set(d) - sections)
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(unknown)}")
    cfg = CliConfig()
    if "synth" in d:
        cfg.synth = _build(SynthConfig, "synth", d["synth"])
    if "model" in d:
        m = dict(d["model"]) if isinstance(d["model"], dict) else d["model"]
        if isinstance(m, dict) and "lighthead" in m:
            m["lighthead"] = _build(LightHeadConfig, "model.lighthead", m["lighthead"])
        cfg.model = _build(ModelConfig, "model", m)
    if "train" in d:
        cfg.train = _build(TrainConfig, "train", d["train"])
    if "inference" in d:
        cfg.inference = _build(InferenceConfig, "inference", d["inference"])
    if "pyramid" in d:
        p = d["pyramid"]
        if not isinstance(p, dict) or not set(p) <= {"levels", "core_shrink"}:
            raise UsageError("section 'pyramid' accepts only 'levels' and 'core_shrink'")
        # the core shrink factors are listed for the record; they are fixed properties of the labels
        if list(p.get("core_shrink", [SHORT_SHRINK, LONG_SHRINK])) != [SHORT_SHRINK, LONG_SHRINK]:
            raise UsageError(f"core_shrink is fixed at [{SHORT_SHRINK}, {LONG_SHRINK}]")
        p = {k: v for k, v in p.items() if k != "core_shrink"}
        if "levels" not in p:
            p = PyramidSpec.default().to_dict()
        for lv in p["levels"]:
            extra = set(lv) - {"name", "stride", "lo", "hi", "norm"}
            if extra:
                raise UsageError(f"unknown key(s) in pyramid level: {', '.join(sorted(extra))}")
        try:
            cfg.pyramid = PyramidSpec.from_dict(p)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid section 'pyramid': {exc}") from exc
    return cfg


def read_config_dict(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def load_config(path: Optional[str]) -> CliConfig:
    return config_from_dict(read_config_dict(path))
