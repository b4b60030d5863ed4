"""Training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, config_from_dict
from .data import Sample, pad_to_multiple, random_crop
from .losses import total_loss
from .model import Detector
from .supervision import build_targets
from .tensor import OptimizerState, Tensor, backward, sgd_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_c", "L_r", "L_s", "total", "lr")


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainResult:
    model: Detector
    history: list[dict] = field(default_factory=list)
    step: int = 0
    seconds: float = 0.0

    def checkpoint(self, config: RunConfig) -> Checkpoint:
        return to_checkpoint(self.model, config, self.step)


def to_checkpoint(model: Detector, config: RunConfig, step: int = 0) -> Checkpoint:
    return Checkpoint(
        tensors={k: v.data for k, v in model.params.items()},
        config=config.to_dict(),
        step=step,
        rng={"seed": config.train.seed, "next_step": step},
        precision=model.config.precision,
    )


def from_checkpoint(ckpt: Checkpoint) -> tuple[Detector, RunConfig]:
    cfg = config_from_dict(ckpt.config)
    model = Detector.init(cfg.model, seed=0)
    missing = set(model.params) ^ set(ckpt.tensors)
    if missing:
        raise ValueError(f"checkpoint tensors do not match the model: {sorted(missing)[:5]}")
    for name, p in model.params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {p.shape}")
        p.data = np.array(arr, dtype=cfg.model.dtype)
    return model, cfg


def make_batch(samples: list[Sample], dtype) -> tuple[np.ndarray, tuple[int, int]]:
    padded = [pad_to_multiple(s.image) for s in samples]
    h = max(p.shape[1] for p in padded)
    w = max(p.shape[2] for p in padded)
    batch = np.zeros((len(padded), padded[0].shape[0], h, w), dtype=dtype)
    for i, p in enumerate(padded):
        batch[i, :, : p.shape[1], : p.shape[2]] = p
    return batch, (h, w)


def train(config: RunConfig, samples: list[Sample], log_path=None, init_model: Detector | None = None) -> TrainResult:
    """Seeded mini-batch SGD over ``samples``; deterministic for a fixed seed."""
    if not samples:
        raise ValueError("training set is empty")
    tc = config.train
    model = init_model or Detector.init(config.model, tc.seed)
    state = OptimizerState(lr=tc.base_lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    steps_per_epoch = max(1, len(samples) // tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    if tc.max_steps is not None:
        total_steps = min(total_steps, tc.max_steps)
    result = TrainResult(model)
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(tc.epochs):
            if step >= total_steps:
                break
            order = np.random.default_rng([tc.seed, epoch]).permutation(len(samples))
            for b in range(steps_per_epoch):
                if step >= total_steps:
                    break
                idx = order[b * tc.batch_size : (b + 1) * tc.batch_size]
                batch = [samples[i] for i in idx]
                if tc.augment:
                    batch = [random_crop(s, config.crop, np.random.default_rng([tc.seed, step, j])) for j, s in enumerate(batch)]
                images, hw = make_batch(batch, config.model.dtype)
                targets = [build_targets(s.boxes, hw) for s in batch]
                model.zero_grad()
                out = model.forward(Tensor(images), "train")
                lb = total_loss(out, targets, config.loss, config.focal)
                if not math.isfinite(lb.total_value):
                    raise NumericError(f"non-finite loss at step {step} (epoch {epoch}): {lb.as_row()} images={[s.source for s in batch]}")
                backward(lb.total)
                state.lr = tc.lr_at(epoch, step)
                sgd_step(model.params, state)
                row = {"step": step, **lb.as_row(), "lr": state.lr}
                result.history.append(row)
                if writer:
                    writer.writerow([row[c] for c in LOG_COLUMNS])
                if step % 100 == 0:
                    log.info("step %d epoch %d total %.4f (c %.4f r %.4f s %.4f) lr %.2e", step, epoch,
                             row["total"], row["L_c"], row["L_r"], row["L_s"], state.lr)
                step += 1
    finally:
        if fh:
            fh.close()
    result.step = step
    result.seconds = time.perf_counter() - t0
    return result


def loss_summary(history: list[dict], window: int = 20) -> dict[str, float]:
    """Mean total loss over the first and last ``window`` steps."""
    if not history:
        return {"loss_initial": float("nan"), "loss_final": float("nan")}
    w = max(1, min(window, len(history)))
    totals = [h["total"] for h in history]
    return {"loss_initial": float(np.mean(totals[:w])), "loss_final": float(np.mean(totals[-w:]))}
