"""Shared-trunk heads: classification, box regression and segmentation.

Each level first passes through its own 1x1 projection to the trunk width
(pyramid levels carry different channel counts). The four 3x3 trunk convs
are shared by every level and by all three branches; only the final
prediction layers differ per branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, conv2d, relu, xavier_uniform


@dataclass
class HeadConfig:
    width: int = 32
    anchors: int = 2
    num_classes: int = 1
    num_convs: int = 4
    prior: float = 0.01

    def __post_init__(self):
        if self.num_classes != 1:
            raise ValueError("face detection uses a single sigmoid class (num_classes=1)")
        if not 0.0 < self.prior < 1.0:
            raise ValueError("prior must lie in (0, 1)")


@dataclass
class LevelOutput:
    cls_logits: Tensor  # (N, K*A, H, W)
    reg_deltas: Tensor  # (N, 4*A, H, W)
    seg_logits: Tensor | None = None  # (N, K, H, W), train mode only


@dataclass
class HeadOutputs:
    levels: dict[int, LevelOutput] = field(default_factory=dict)

    def __getitem__(self, level: int) -> LevelOutput:
        return self.levels[level]


def prior_bias(prior: float) -> float:
    return -math.log((1.0 - prior) / prior)


def init_heads(config: HeadConfig, level_channels: dict[int, int], seed: int | np.random.Generator,
               dtype=np.float32) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, classification bias at the focal prior."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    w = config.width

    def layer(name, cin, cout, k, bias=0.0):
        fan_in, fan_out = cin * k * k, cout * k * k
        params[f"{name}.weight"] = Tensor(xavier_uniform(rng, (cout, cin, k, k), fan_in, fan_out, dtype), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.full(cout, bias, dtype), requires_grad=True)

    for level in sorted(level_channels):
        layer(f"head.proj.{level}", level_channels[level], w, 1)
    for j in range(config.num_convs):
        layer(f"head.trunk.{j}", w, w, 3)
    k, a = config.num_classes, config.anchors
    layer("head.cls", w, k * a, 3, bias=prior_bias(config.prior))
    layer("head.reg", w, 4 * a, 3)
    layer("head.seg", w, k, 3)
    return params


def trunk_parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for name, p in params.items() if name.startswith("head.trunk."))


def head_forward(params: dict[str, Tensor], pyramid, config: HeadConfig, mode: str = "train") -> HeadOutputs:
    """Per-level predictions. ``pyramid`` maps level -> feature tensor."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    maps = pyramid.maps if hasattr(pyramid, "maps") else pyramid
    out = HeadOutputs()
    for level in sorted(maps):
        x = relu(conv2d(maps[level], params[f"head.proj.{level}.weight"], params[f"head.proj.{level}.bias"]))
        for j in range(config.num_convs):
            x = relu(conv2d(x, params[f"head.trunk.{j}.weight"], params[f"head.trunk.{j}.bias"], pad=1))
        cls = conv2d(x, params["head.cls.weight"], params["head.cls.bias"], pad=1)
        reg = conv2d(x, params["head.reg.weight"], params["head.reg.bias"], pad=1)
        seg = conv2d(x, params["head.seg.weight"], params["head.seg.bias"], pad=1) if mode == "train" else None
        out.levels[level] = LevelOutput(cls, reg, seg)
    return out
