"""Backbone, fusion blocks and the six-level feature fusion pyramid.

The backbone is a small plain conv/ReLU network whose four stages emit
strides 4, 8, 16 and 32. Fusion runs top-down: each shallower map is
gated by a transposed-convolution projection of the fused map above it
and then added back to itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    conv2d,
    conv_transpose2d,
    maxpool2d,
    mul,
    relu,
    sigmoid,
    xavier_uniform,
)

FUSION_MODES = ("multiplicative", "additive")
BACKBONE_LEVELS = (2, 3, 4, 5)
PYRAMID_LEVELS = (2, 3, 4, 5, 6, 7)


@dataclass
class BackboneConfig:
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks: int = 2
    in_channels: int = 1
    stem_width: int = 8

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError(f"backbone needs 4 positive stage widths, got {self.widths}")
        if self.blocks < 1:
            raise ValueError("blocks per stage must be >= 1")


@dataclass
class FusionBlock:
    """Transposed convolution (k=4, s=2, p=1) mapping (C_{i+1}, H/2, W/2) to (C_i, H, W)."""

    weight: Tensor
    bias: Tensor
    gate: str = "none"  # "none" keeps the raw product; "sigmoid" squashes the projection first

    def psi(self, phi_ip1: Tensor) -> Tensor:
        out = conv_transpose2d(phi_ip1, self.weight, self.bias, stride=2, pad=1)
        return sigmoid(out) if self.gate == "sigmoid" else out


@dataclass
class PyramidOutput:
    maps: dict[int, Tensor] = field(default_factory=dict)

    @staticmethod
    def stride(level: int) -> int:
        return 2**level

    def __getitem__(self, level: int) -> Tensor:
        return self.maps[level]

    def levels(self) -> list[int]:
        return sorted(self.maps)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def conv(name, cin, cout):
        params[f"{name}.weight"] = Tensor(_he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True)

    conv("backbone.stem", cfg.in_channels, cfg.stem_width)
    cin = cfg.stem_width
    for s, width in enumerate(cfg.widths):
        for j in range(cfg.blocks):
            conv(f"backbone.stage{s + 2}.{j}", cin, width)
            cin = width
    return params


def backbone_forward(params: dict[str, Tensor], cfg: BackboneConfig, image: Tensor) -> list[Tensor]:
    """Four feature maps at strides 4, 8, 16, 32 for a (C,H,W) or (N,C,H,W) image."""
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        ph, pw = (-h) % 32, (-w) % 32
        raise ShapeError(f"input {h}x{w} must be divisible by 32; pad bottom/right by {ph}x{pw}")
    x = relu(conv2d(image, params["backbone.stem.weight"], params["backbone.stem.bias"], stride=2, pad=1))
    maps = []
    for s in range(len(cfg.widths)):
        for j in range(cfg.blocks):
            name = f"backbone.stage{s + 2}.{j}"
            x = relu(conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=2 if j == 0 else 1, pad=1))
        maps.append(x)
    return maps


def init_fusion(widths, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """One transposed-conv block per fused level (producing FFP2, FFP3, FFP4), Xavier init."""
    params = {}
    for i in range(len(widths) - 1):
        c_lo, c_hi = widths[i], widths[i + 1]
        level = BACKBONE_LEVELS[i]
        fan_in, fan_out = c_hi * 16, c_lo * 16
        params[f"fusion.{level}.weight"] = Tensor(xavier_uniform(rng, (c_hi, c_lo, 4, 4), fan_in, fan_out, dtype), requires_grad=True)
        params[f"fusion.{level}.bias"] = Tensor(np.zeros(c_lo, dtype), requires_grad=True)
    return params


def fusion_blocks(params: dict[str, Tensor], gate: str = "none") -> list[FusionBlock]:
    return [FusionBlock(params[f"fusion.{lv}.weight"], params[f"fusion.{lv}.bias"], gate) for lv in BACKBONE_LEVELS[:3]]


def _checked_psi(phi_i: Tensor, phi_ip1: Tensor, block: FusionBlock) -> Tensor:
    p = block.psi(phi_ip1)
    if p.shape != phi_i.shape:
        raise ShapeError(f"fusion: projected map {p.shape} does not match lower map {phi_i.shape}")
    return p


def fuse(phi_i: Tensor, phi_ip1: Tensor, block: FusionBlock) -> Tensor:
    """phi_i * psi(phi_ip1) + phi_i."""
    return add(mul(phi_i, _checked_psi(phi_i, phi_ip1, block)), phi_i)


def fuse_additive(phi_i: Tensor, phi_ip1: Tensor, block: FusionBlock) -> Tensor:
    """FPN-style baseline: phi_i + psi(phi_ip1)."""
    return add(phi_i, _checked_psi(phi_i, phi_ip1, block))


def build_pyramid(backbone_maps: list[Tensor], blocks: list[FusionBlock], mode: str = "multiplicative") -> PyramidOutput:
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if len(backbone_maps) != 4 or len(blocks) != 3:
        raise ShapeError("build_pyramid needs 4 backbone maps and 3 fusion blocks")
    f = fuse if mode == "multiplicative" else fuse_additive
    out = PyramidOutput()
    top = backbone_maps[3]
    out.maps[5] = top
    for i in (2, 1, 0):
        top = f(backbone_maps[i], top, blocks[i])
        out.maps[BACKBONE_LEVELS[i]] = top
    out.maps[6] = maxpool2d(out.maps[5], 2, 2)
    out.maps[7] = maxpool2d(out.maps[6], 2, 2)
    out.maps = dict(sorted(out.maps.items()))
    return out
