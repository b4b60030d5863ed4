"""Variant sweeps: train each (variant, seed) pair, evaluate, tabulate.

A variant is a ``+``-joined list of modifiers applied to a base config:

    eq1          multiplicative fusion (the default)
    fpn          additive top-down fusion
    seg-off      segmentation weight 0
    lambda2=F    segmentation weight F
    aug-off      no random cropping

so ``fpn+seg-off`` is the plain additive pyramid without the auxiliary branch.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import ConfigError, RunConfig, dumps
from .data import Sample
from .evaluation import evaluate
from .inference import detect_many
from .train import from_checkpoint, loss_summary, to_checkpoint, train

log = logging.getLogger(__name__)

DEFAULT_VARIANTS = ("eq1", "fpn", "seg-off")
TABLE_COLUMNS = ("variant", "seed", "fusion", "lambda2", "augment", "ap", "ap_small", "ap_medium", "ap_large",
                 "loss_initial", "loss_final", "steps")


@dataclass
class AblationRow:
    variant: str
    seed: int
    fusion: str
    lambda2: float
    augment: bool
    ap: float
    ap_small: float
    ap_medium: float
    ap_large: float
    loss_initial: float
    loss_final: float
    steps: int
    train_seconds: float = float("nan")  # wall clock, kept out of the CSV table


def apply_variant(base: RunConfig, name: str) -> RunConfig:
    cfg = base
    for mod in name.split("+"):
        mod = mod.strip()
        if mod == "eq1":
            cfg = cfg.replace(model=dataclasses.replace(cfg.model, fusion="multiplicative"))
        elif mod == "fpn":
            cfg = cfg.replace(model=dataclasses.replace(cfg.model, fusion="additive"))
        elif mod == "seg-off":
            cfg = cfg.replace(loss=dataclasses.replace(cfg.loss, lambda2=0.0))
        elif mod.startswith("lambda2="):
            try:
                value = float(mod.split("=", 1)[1])
            except ValueError as e:
                raise ConfigError(f"bad variant modifier {mod!r}") from e
            cfg = cfg.replace(loss=dataclasses.replace(cfg.loss, lambda2=value))
        elif mod == "aug-off":
            cfg = cfg.replace(train=dataclasses.replace(cfg.train, augment=False))
        else:
            raise ConfigError(f"unknown variant modifier {mod!r} in {name!r}; "
                              "use eq1, fpn, seg-off, lambda2=F, aug-off joined by '+'")
    return cfg


def dataset_digest(samples: list[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.source.encode())
        h.update(np.ascontiguousarray(s.image, np.float64).tobytes())
        h.update(np.ascontiguousarray(s.boxes, np.float64).tobytes())
    return h.hexdigest()


def train_cached(cfg: RunConfig, samples: list[Sample], cache_dir=None, digest: str | None = None):
    """Train, or reuse a checkpoint trained earlier on the same config and data.

    Returns (model, summary) where summary holds the initial/final loss and step count.
    """
    if cache_dir is None:
        res = train(cfg, samples)
        return res.model, {**loss_summary(res.history), "steps": res.step, "seconds": res.seconds}
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    key = hashlib.sha256((dumps(cfg) + (digest or dataset_digest(samples))).encode()).hexdigest()[:20]
    ckpt_path, meta_path = cache / f"{key}.ckpt", cache / f"{key}.json"
    if ckpt_path.is_file() and meta_path.is_file():
        model, _ = from_checkpoint(Checkpoint.load(ckpt_path))
        return model, json.loads(meta_path.read_text())
    res = train(cfg, samples, log_path=cache / f"{key}.csv")
    summary = {**loss_summary(res.history), "steps": res.step, "seconds": res.seconds}
    to_checkpoint(res.model, cfg, res.step).save(ckpt_path)
    meta_path.write_text(json.dumps(summary, sort_keys=True))
    return res.model, summary


def ablation_run(base: RunConfig, variants, train_samples: list[Sample], test_samples: list[Sample],
                 seeds=(7,), cache_dir=None, workers: int = 1) -> list[AblationRow]:
    """One row per (variant, seed), variants outer, seeds inner."""
    configs = [(v, apply_variant(base, v)) for v in variants]  # fail fast on bad names
    digest = dataset_digest(train_samples) if cache_dir is not None else None
    gts = [s.boxes for s in test_samples]
    rows = []
    for name, vcfg in configs:
        for seed in seeds:
            cfg = vcfg.replace(train=dataclasses.replace(vcfg.train, seed=int(seed)))
            log.info("ablation: variant %s seed %d", name, seed)
            model, summary = train_cached(cfg, train_samples, cache_dir, digest)
            d = cfg.detect
            dets = detect_many([s.image for s in test_samples], model, d.scales, d.score_thresh,
                               d.nms_thresh, d.max_per_level, workers)
            rep = evaluate(dets, gts)
            rows.append(AblationRow(name, int(seed), cfg.model.fusion, cfg.loss.lambda2, cfg.train.augment,
                                    rep.ap, rep.ap_small, rep.ap_medium, rep.ap_large,
                                    summary["loss_initial"], summary["loss_final"], summary["steps"],
                                    summary.get("seconds", float("nan"))))
    return rows


def summarize(rows: list[AblationRow]) -> list[dict]:
    """Median over seeds per variant, in first-seen variant order."""
    order = list(dict.fromkeys(r.variant for r in rows))
    out = []
    for name in order:
        group = [r for r in rows if r.variant == name]
        out.append({"variant": name, "seeds": len(group),
                    **{k: statistics.median(getattr(r, k) for r in group)
                       for k in ("ap", "ap_small", "ap_medium", "ap_large")}})
    return out


def write_table(rows: list[AblationRow], path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) for c in TABLE_COLUMNS])
    return Path(path)


def write_summary(summary: list[dict], path) -> Path:
    cols = ("variant", "seeds", "ap", "ap_small", "ap_medium", "ap_large")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in summary:
            w.writerow([row[c] for c in cols])
    return Path(path)
