import numpy as np
import pytest

from ffdet.config import RunConfig, TrainConfig
from ffdet.data import Sample, SynthConfig, synth_image
from ffdet.heads import HeadConfig
from ffdet.model import ModelConfig
from ffdet.pyramid import BackboneConfig


def tiny_model_config(**kw):
    return ModelConfig(backbone=BackboneConfig(widths=(4, 4, 8, 8), stem_width=4),
                       head=HeadConfig(width=8, num_convs=1), **kw)


def tiny_run_config(steps=3, **train_kw):
    train = TrainConfig(epochs=2, max_steps=steps, batch_size=2, warmup_steps=0, **train_kw)
    return RunConfig(model=tiny_model_config(), train=train)


def tiny_samples(n=4, size=64):
    cfg = SynthConfig(n=n, image_size=size, face_size=(12, 40), seed=1)
    out = []
    for i in range(n):
        pixels, boxes = synth_image(cfg, i)
        out.append(Sample(pixels[None] / 255.0, boxes, f"{i}"))
    return out


@pytest.fixture
def tiny_config():
    return tiny_run_config()


@pytest.fixture
def samples():
    return tiny_samples()
