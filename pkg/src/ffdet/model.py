"""The assembled detector: backbone, fusion pyramid and heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heads import HeadConfig, HeadOutputs, head_forward, init_heads
from .pyramid import (
    FUSION_MODES,
    PYRAMID_LEVELS,
    BackboneConfig,
    PyramidOutput,
    backbone_forward,
    build_pyramid,
    fusion_blocks,
    init_backbone,
    init_fusion,
)
from .tensor import Tensor

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    fusion: str = "multiplicative"
    fusion_gate: str = "none"
    precision: str = "float32"

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.fusion_gate not in ("none", "sigmoid"):
            raise ValueError("fusion_gate must be 'none' or 'sigmoid'")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def level_channels(self) -> dict[int, int]:
        w = self.backbone.widths
        return {2: w[0], 3: w[1], 4: w[2], 5: w[3], 6: w[3], 7: w[3]}


class Detector:
    """Parameters plus the forward pass. Parameters live in a flat name -> Tensor dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Detector":
        rng = np.random.default_rng(seed)
        dt = config.dtype
        params = {}
        params.update(init_backbone(config.backbone, rng, dt))
        params.update(init_fusion(config.backbone.widths, rng, dt))
        params.update(init_heads(config.head, config.level_channels(), rng, dt))
        return cls(config, params)

    def pyramid(self, images: Tensor) -> PyramidOutput:
        maps = backbone_forward(self.params, self.config.backbone, images)
        blocks = fusion_blocks(self.params, self.config.fusion_gate)
        return build_pyramid(maps, blocks, self.config.fusion)

    def forward(self, images, mode: str = "train") -> HeadOutputs:
        """``images`` is (N,C,H,W) with H, W multiples of 128."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.config.dtype))
        return head_forward(self.params, self.pyramid(images), self.config.head, mode)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @property
    def levels(self) -> tuple[int, ...]:
        return PYRAMID_LEVELS
