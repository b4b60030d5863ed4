import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffdet.heads import HeadOutputs, LevelOutput
from ffdet.losses import (
    FocalParams,
    LossWeights,
    focal_loss,
    focal_loss_sum,
    seg_loss,
    smooth_l1,
    total_loss,
)
from ffdet.supervision import IGNORE, NEGATIVE, POSITIVE, LevelTargets
from ffdet.tensor import ShapeError, Tensor, backward

LN2 = math.log(2.0)


def focal_ref(p, y, alpha=0.25, gamma=2.0):
    p = mpmath.mpf(p)
    if y == 1:
        return float(-alpha * (1 - p) ** gamma * mpmath.log(p))
    return float(-(1 - alpha) * p**gamma * mpmath.log(1 - p))


class TestFocal:
    def test_half_positive(self):
        assert focal_loss(0.5, 1) == pytest.approx(0.25 * 0.25 * LN2, abs=1e-12)
        assert focal_loss(0.5, 1) == pytest.approx(0.0433217, abs=1e-7)

    def test_reduces_to_half_ce(self):
        params = FocalParams(alpha=0.5, gamma=0.0)
        for p in (0.1, 0.3, 0.8):
            assert focal_loss(p, 1, params) == pytest.approx(-0.5 * math.log(p))
            assert focal_loss(p, 0, params) == pytest.approx(-0.5 * math.log(1 - p))

    def test_limit(self):
        assert focal_loss(1.0 - 1e-12, 1) < 1e-20
        assert focal_loss(1.0, 1) == 0.0

    @settings(max_examples=100)
    @given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
    def test_matches_mpmath(self, p, y):
        assert focal_loss(p, y) == pytest.approx(focal_ref(p, y), rel=1e-7, abs=1e-14)

    def test_extreme_logits_finite(self):
        z = Tensor(np.array([-800.0, 800.0, -800.0, 800.0]), requires_grad=True)
        out = focal_loss_sum(z, np.array([1.0, 1.0, 0.0, 0.0]), np.ones(4))
        backward(out)
        assert np.isfinite(out.item()) and np.all(np.isfinite(z.grad))

    def test_positive_loss_decreases_with_probability(self):
        vals = [focal_loss(p, 1) for p in np.linspace(0.05, 0.95, 19)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_bad_params(self):
        with pytest.raises(ValueError):
            FocalParams(alpha=1.5)


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1([1, 2, 3, 4], [1, 2, 3, 4]) == 0.0

    def test_quadratic(self):
        assert smooth_l1([0.5, 0, 0, 0], [0, 0, 0, 0]) == 0.125

    def test_linear(self):
        assert smooth_l1([2.0, 0, 0, 0], [0, 0, 0, 0]) == 1.5

    @given(st.floats(-50, 50))
    def test_continuous_and_nonnegative(self, d):
        v = smooth_l1([d, 0, 0, 0], [0, 0, 0, 0])
        assert v >= 0
        assert v <= abs(d) * max(1.0, abs(d))


class TestSeg:
    def test_zero_logits_positive(self):
        assert seg_loss(Tensor(np.zeros((1, 3, 3))), np.ones((1, 3, 3))).item() == pytest.approx(LN2, abs=1e-15)

    def test_zero_logits_negative(self):
        assert seg_loss(Tensor(np.zeros((1, 4, 2))), np.zeros((1, 4, 2))).item() == pytest.approx(LN2, abs=1e-15)

    def test_perfect(self):
        m = (np.random.default_rng(0).random((1, 5, 5)) > 0.5).astype(float)
        assert seg_loss(Tensor(np.where(m > 0, 40.0, -40.0)), m).item() < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            seg_loss(Tensor(np.zeros((1, 3, 3))), np.zeros((1, 3, 4)))


def single_anchor_instance(seg_logit=40.0):
    out = HeadOutputs({2: LevelOutput(
        cls_logits=Tensor(np.zeros((1, 1, 1, 1))),
        reg_deltas=Tensor(np.zeros((1, 4, 1, 1))),
        seg_logits=Tensor(np.full((1, 1, 1, 1), seg_logit)),
    )})
    tgt = [{2: LevelTargets(labels=np.full((1, 1, 1), POSITIVE, np.int8),
                            targets=np.zeros((1, 4, 1, 1)),
                            seg=np.ones((1, 1, 1)))}]
    return out, tgt


def random_instance(rng, n_img=2, a=2, hw=4, levels=(2, 3)):
    out, tgts = {}, [dict() for _ in range(n_img)]
    for k in levels:
        h = w = hw // (k - 1)
        out[k] = LevelOutput(Tensor(rng.normal(size=(n_img, a, h, w))),
                             Tensor(rng.normal(size=(n_img, 4 * a, h, w))),
                             Tensor(rng.normal(size=(n_img, 1, h, w)), requires_grad=True))
        for i in range(n_img):
            labels = rng.choice([POSITIVE, NEGATIVE, IGNORE], size=(a, h, w)).astype(np.int8)
            tgts[i][k] = LevelTargets(labels, rng.normal(size=(a, 4, h, w)) * 0.5,
                                      (rng.random((1, h, w)) > 0.5).astype(float))
    return HeadOutputs(out), tgts


class TestTotal:
    def test_single_anchor_toy(self):
        out, tgt = single_anchor_instance()
        br = total_loss(out, tgt)
        assert br.total_value == pytest.approx(0.0433217, abs=1e-7)
        assert br.n_cls[2] == [1] and br.n_reg[2] == [1]
        assert br.L_r == 0.0

    def test_lambda2_zero_ignores_seg(self):
        rng = np.random.default_rng(0)
        out, tgt = random_instance(rng)
        w = LossWeights(lambda2=0.0)
        a = total_loss(out, tgt, w).total_value
        for o in out.levels.values():
            o.seg_logits.data = o.seg_logits.data + 7.0
        br = total_loss(out, tgt, w)
        assert br.total_value == a
        backward(br.total)
        for o in out.levels.values():
            assert not o.seg_logits.grad.any()

    def test_no_gts(self):
        out, tgt = single_anchor_instance(seg_logit=0.0)
        tgt[0][2] = LevelTargets(np.full((1, 1, 1), NEGATIVE, np.int8), np.zeros((1, 4, 1, 1)), np.zeros((1, 1, 1)))
        br = total_loss(out, tgt)
        assert br.L_r == 0.0
        assert br.L_s == pytest.approx(LN2)

    def test_ignored_anchors_do_not_count(self):
        out, tgt = single_anchor_instance()
        base = total_loss(out, tgt).total_value
        out.levels[2] = LevelOutput(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.zeros((1, 8, 1, 1))),
                                    out.levels[2].seg_logits)
        tgt[0][2] = LevelTargets(np.array([POSITIVE, IGNORE], np.int8).reshape(2, 1, 1),
                                 np.zeros((2, 4, 1, 1)), np.ones((1, 1, 1)))
        br = total_loss(out, tgt)
        assert br.n_cls[2] == [1]
        assert br.total_value == pytest.approx(base, abs=1e-15)

    def test_anchor_order_invariance(self):
        rng = np.random.default_rng(3)
        out, tgt = random_instance(rng, n_img=1, hw=8, levels=(2,))
        base = total_loss(out, tgt).total_value
        perm = rng.permutation(2 * 8 * 8)
        o = out.levels[2]
        n, a, h, w = o.cls_logits.shape
        cls = o.cls_logits.data.reshape(-1)[perm].reshape(n, a, h, w)
        reg = o.reg_deltas.data.reshape(n, a, 4, h * w).transpose(0, 1, 3, 2).reshape(-1, 4)[perm]
        reg = reg.reshape(n, a, h * w, 4).transpose(0, 1, 3, 2).reshape(n, 4 * a, h, w)
        t = tgt[0][2]
        labels = t.labels.reshape(-1)[perm].reshape(a, h, w)
        deltas = t.targets.transpose(0, 2, 3, 1).reshape(-1, 4)[perm].reshape(a, h, w, 4).transpose(0, 3, 1, 2)
        shuffled = HeadOutputs({2: LevelOutput(Tensor(cls), Tensor(reg), o.seg_logits)})
        got = total_loss(shuffled, [{2: LevelTargets(labels, deltas, t.seg)}]).total_value
        assert got == pytest.approx(base, rel=1e-12)

    def test_breakdown_consistent(self):
        out, tgt = random_instance(np.random.default_rng(4))
        w = LossWeights(lambda1=0.7, lambda2=0.3)
        br = total_loss(out, tgt, w)
        assert br.total_value == pytest.approx(br.L_c + 0.7 * br.L_r + 0.3 * br.L_s, rel=1e-12)
        assert set(br.as_row()) == {"L_c", "L_r", "L_s", "total"}

    def test_cls_decreases_as_positive_probability_rises(self):
        out, tgt = random_instance(np.random.default_rng(5), n_img=1)
        prev = total_loss(out, tgt).L_c
        for _ in range(5):
            for k, o in out.levels.items():
                pos = tgt[0][k].labels[None] == POSITIVE
                o.cls_logits.data = o.cls_logits.data + 0.5 * pos
            cur = total_loss(out, tgt).L_c
            assert cur < prev
            prev = cur
