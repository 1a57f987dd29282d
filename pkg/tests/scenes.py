"""Scene builders shared by several test modules.

Unlike ``oracles``, these helpers use package types: they only construct
inputs (random instances, ideal head outputs) and never compute expected values.
"""
import math

import numpy as np

from afrpn.geometry import rect_from_center
from afrpn.labeling import TextInstance, generate_labels
from afrpn.model import AfrpnOutputs


def random_instances(rng, size=(128, 128), n=(1, 6), ignore_p=0.15):
    """Rects that may overlap, with a few ignored and a few tiny ones."""
    h, w = size
    out = []
    for _ in range(int(rng.integers(n[0], n[1] + 1))):
        short = math.exp(rng.uniform(math.log(2.5), math.log(90)))
        long_ = short * rng.uniform(1, 4)
        r = rect_from_center(rng.uniform(0, w), rng.uniform(0, h), long_, short, rng.uniform(-1.5, 1.5))
        out.append(TextInstance(r, ignore=bool(rng.random() < ignore_p)))
    return out


def as_oracle_input(instances):
    return [{"rect": i.rect.v, "core": i.core.v, "short": i.rect.short_side, "ignore": i.ignore}
            for i in instances]


def perfect_outputs(instances, size, spec):
    """Dense head outputs that reproduce the labels exactly."""
    lm = generate_labels(instances, size, spec)
    scores, offsets = [], []
    for lv in lm.levels:
        pos = lv.cls == 1
        s = np.zeros((1, 2) + lv.cls.shape)
        s[0, 1] = np.where(pos, 20.0, -20.0)
        scores.append(s)
        offsets.append(lv.targets.transpose(2, 0, 1)[None].copy())
    return AfrpnOutputs(scores, offsets)
