"""Finite-difference gradient suite over every differentiable operation.

All checks run in double precision with central differences (eps 1e-5).
Inputs are drawn away from non-smooth points (ReLU kinks, pooling ties).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .heads import HeadConfig, head_forward, init_heads
from .losses import FocalParams, LossWeights, bce_logits_sum, focal_loss_sum, smooth_l1_sum, total_loss
from .pyramid import FusionBlock, fuse, fuse_additive
from .supervision import build_targets
from .tensor import (
    Tensor,
    add,
    conv2d,
    conv_transpose2d,
    finite_diff_check,
    finite_diff_check_params,
    maxpool2d,
    maxpool_tie_mask,
    mul,
    relu,
    sigmoid,
    sum_all,
)

TOLERANCE = 1e-4
EPS = 1e-5


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _weighted(out: Tensor, c: np.ndarray) -> Tensor:
    """sum(c * out): a generic scalar reduction so every output entry matters."""
    return sum_all(mul(out, Tensor(c)))


def check_conv2d(rng) -> float:
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    c = rng.normal(size=(2, 4, 4, 4))
    errs = [
        finite_diff_check(lambda t: _weighted(conv2d(t, Tensor(w), Tensor(b), 2, 1), c), x, EPS),
        finite_diff_check(lambda t: _weighted(conv2d(Tensor(x), t, Tensor(b), 2, 1), c), w, EPS),
        finite_diff_check(lambda t: _weighted(conv2d(Tensor(x), Tensor(w), t, 2, 1), c), b, EPS),
    ]
    return max(errs)


def check_conv_transpose2d(rng) -> float:
    x = rng.normal(size=(1, 3, 5, 5))
    w = rng.normal(size=(3, 2, 4, 4))
    b = rng.normal(size=2)
    c = rng.normal(size=(1, 2, 10, 10))
    errs = [
        finite_diff_check(lambda t: _weighted(conv_transpose2d(t, Tensor(w), Tensor(b), 2, 1), c), x, EPS),
        finite_diff_check(lambda t: _weighted(conv_transpose2d(Tensor(x), t, Tensor(b), 2, 1), c), w, EPS),
        finite_diff_check(lambda t: _weighted(conv_transpose2d(Tensor(x), Tensor(w), t, 2, 1), c), b, EPS),
    ]
    return max(errs)


def check_elementwise(rng) -> float:
    x = _away_from_zero(rng, (3, 4, 4))
    y = rng.normal(size=(3, 4, 4))
    c = rng.normal(size=(3, 4, 4))
    errs = [
        finite_diff_check(lambda t: _weighted(add(t, Tensor(y)), c), x, EPS),
        finite_diff_check(lambda t: _weighted(mul(t, Tensor(y)), c), x, EPS),
        finite_diff_check(lambda t: _weighted(mul(t, t), c), x, EPS),
        finite_diff_check(lambda t: _weighted(relu(t), c), x, EPS),
        finite_diff_check(lambda t: _weighted(sigmoid(t), c), x, EPS),
    ]
    return max(errs)


def check_maxpool2d(rng) -> float:
    x = rng.normal(size=(2, 8, 8))
    c = rng.normal(size=(2, 4, 4))
    return finite_diff_check(lambda t: _weighted(maxpool2d(t, 2, 2), c), x, EPS, exclude=maxpool_tie_mask(x, 2, 2))


def check_fusion(rng) -> float:
    phi_i = rng.normal(size=(3, 8, 8))
    phi_ip1 = rng.normal(size=(4, 4, 4))
    w = rng.normal(size=(4, 3, 4, 4)) * 0.3
    b = rng.normal(size=3) * 0.3
    c = rng.normal(size=(3, 8, 8))
    errs = []
    for f in (fuse, fuse_additive):
        errs.append(finite_diff_check(lambda t: _weighted(f(t, Tensor(phi_ip1), FusionBlock(Tensor(w), Tensor(b))), c), phi_i, EPS))
        errs.append(finite_diff_check(lambda t: _weighted(f(Tensor(phi_i), t, FusionBlock(Tensor(w), Tensor(b))), c), phi_ip1, EPS))
        errs.append(finite_diff_check(lambda t: _weighted(f(Tensor(phi_i), Tensor(phi_ip1), FusionBlock(t, Tensor(b))), c), w, EPS))
    return max(errs)


def check_losses(rng) -> dict[str, float]:
    # saturated logits have ~1e-9 gradients that central differences cannot resolve
    z = rng.uniform(-3.0, 3.0, size=(2, 2, 4, 4))
    y = (rng.random(z.shape) < 0.3).astype(np.float64)
    w = rng.uniform(0.5, 1.0, size=z.shape)
    d = rng.normal(size=(2, 8, 4, 4)) * 1.5
    d = np.where(np.abs(np.abs(d) - 1.0) < 0.05, d * 1.2, d)  # keep off the |d| = 1 seam
    t_star = np.zeros_like(d)
    wr = rng.random(d.shape)
    return {
        "focal_loss": finite_diff_check(lambda t: focal_loss_sum(t, y, w, FocalParams()), z, EPS),
        "smooth_l1": finite_diff_check(lambda t: smooth_l1_sum(t, t_star, wr), d, EPS),
        "seg_loss": finite_diff_check(lambda t: bce_logits_sum(t, y, w), z, EPS),
    }


def toy_total_loss_check(rng) -> float:
    """Gradient of the full objective on a two-level model (fusion + heads)."""
    image_hw = (32, 32)
    cfg = HeadConfig(width=4, anchors=2, num_convs=2, prior=0.3)
    params = init_heads(cfg, {2: 3, 3: 4}, rng, np.float64)
    for p in params.values():
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)  # non-zero biases
    params["fusion.weight"] = Tensor(rng.normal(size=(4, 3, 4, 4)) * 0.3, requires_grad=True)
    params["fusion.bias"] = Tensor(rng.normal(size=3) * 0.3, requires_grad=True)
    phi2 = Tensor(rng.normal(size=(1, 3, 8, 8)))
    phi3 = Tensor(rng.normal(size=(1, 4, 4, 4)))
    gts = np.array([[2.0, 3.0, 17.0, 19.0], [5.0, 1.0, 30.0, 31.0]])
    targets = [build_targets(gts, image_hw, levels=(2, 3))]
    weights = LossWeights(1.0, 0.5)

    def fn():
        ffp2 = fuse(phi2, phi3, FusionBlock(params["fusion.weight"], params["fusion.bias"]))
        out = head_forward(params, {2: ffp2, 3: phi3}, cfg, "train")
        return total_loss(out, targets, weights).total

    return finite_diff_check_params(fn, params, EPS)


CHECKS: dict[str, Callable] = {
    "conv2d": check_conv2d,
    "conv_transpose2d": check_conv_transpose2d,
    "elementwise": check_elementwise,
    "maxpool2d": check_maxpool2d,
    "fusion_block": check_fusion,
    "total_loss_toy": toy_total_loss_check,
}


def run_suite(seeds=(0, 1, 2, 3, 4)) -> dict[str, float]:
    """Max relative error per operation across ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, check in CHECKS.items():
            err = check(np.random.default_rng([seed, len(name)]))
            worst[name] = max(worst.get(name, 0.0), err)
        for name, err in check_losses(np.random.default_rng([seed, 99])).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
