import math

import numpy as np
import pytest

from duospec import tensor as T
from duospec.losses import (ContrastiveConfig, LossWeights, cross_entropy_loss,
                            distill_feat_loss, distill_pred_loss,
                            downsample_labels, pixel_contrastive_loss, seg_loss,
                            soft_cross_entropy, soft_kl)
from duospec.tensor import Parameter


def softmax_np(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def seg_loss_scalar_oracle(logits, labels, smooth=1.0, ignore=255):
    """Independent per-pixel loop implementation of CE + macro dice."""
    n, c, h, w = logits.shape
    probs = softmax_np(logits)
    ce_sum, n_valid = 0.0, 0
    inter = np.zeros(c)
    psum = np.zeros(c)
    ysum = np.zeros(c)
    for i in range(n):
        for y in range(h):
            for x in range(w):
                lab = labels[i, y, x]
                if lab == ignore:
                    continue
                n_valid += 1
                ce_sum -= math.log(probs[i, lab, y, x])
                for k in range(c):
                    p = probs[i, k, y, x]
                    psum[k] += p
                    if lab == k:
                        inter[k] += p
                        ysum[k] += 1.0
    dice = np.mean([1 - (2 * inter[k] + smooth) / (psum[k] + ysum[k] + smooth)
                    for k in range(c)])
    return ce_sum / n_valid + dice


class TestSegLoss:
    def test_perfect_prediction_limit(self):
        labels = np.array([[[0, 1], [2, 3]]])
        logits = np.full((1, 4, 2, 2), -50.0)
        for y in range(2):
            for x in range(2):
                logits[0, labels[0, y, x], y, x] = 50.0
        loss = seg_loss(T.Tensor(logits), labels)
        # CE -> 0 and each dice term -> 1 - (2A+1)/(2A+1) = 0
        assert loss.item() < 1e-6

    def test_uniform_logits_ce_is_log_c(self):
        labels = np.zeros((2, 3, 3), dtype=np.int64)
        ce = cross_entropy_loss(T.Tensor(np.zeros((2, 4, 3, 3))), labels)
        assert abs(ce.item() - math.log(4)) < 1e-6

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((2, 3, 4, 4))
        labels = rng.integers(0, 3, size=(2, 4, 4))
        labels[0, 0, 0] = 255
        got = seg_loss(T.Tensor(logits), labels).item()
        want = seg_loss_scalar_oracle(logits, labels)
        assert abs(got - want) < 1e-6

    def test_out_of_range_label(self):
        with pytest.raises(ValueError, match="out of range"):
            seg_loss(T.Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 7))

    def test_all_ignored_rejected(self):
        with pytest.raises(ValueError, match="no scored pixels"):
            seg_loss(T.Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 255))

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            logits = T.Tensor(rng.standard_normal((1, 4, 4, 4)) * 3)
            labels = rng.integers(0, 4, size=(1, 4, 4))
            assert cross_entropy_loss(logits, labels).item() >= 0.0
            assert seg_loss(logits, labels).item() >= 0.0


class TestDistillPred:
    def test_equal_distributions_give_teacher_entropy(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((2, 4, 3, 3))
        probs = softmax_np(logits)
        loss = distill_pred_loss(T.Tensor(logits), probs)
        entropy = -(probs * np.log(probs)).sum(axis=1).mean()
        assert abs(soft_kl(T.Tensor(logits), probs).item()) < 1e-6
        assert abs(loss.item() - entropy) < 1e-6

    def test_one_hot_teacher_uniform_student(self):
        # KL(q||p) = ln4 and H(q,p) = ln4, so the printed sum is 2 ln 4
        q = np.zeros((1, 4, 2, 2))
        q[:, 1] = 1.0
        logits = T.Tensor(np.zeros((1, 4, 2, 2)))
        assert abs(soft_kl(logits, q).item() - math.log(4)) < 1e-6
        assert abs(soft_cross_entropy(logits, q).item() - math.log(4)) < 1e-6
        assert abs(distill_pred_loss(logits, q).item() - 2 * math.log(4)) < 1e-6

    def test_kl_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            logits = T.Tensor(rng.standard_normal((1, 5, 2, 2)))
            q = softmax_np(rng.standard_normal((1, 5, 2, 2)))
            assert soft_kl(logits, q).item() >= -1e-12
            assert soft_cross_entropy(logits, q).item() >= 0.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((2, 3, 4, 4))
        q = softmax_np(rng.standard_normal((2, 3, 4, 4)))
        got = distill_pred_loss(T.Tensor(logits), q).item()
        p = softmax_np(logits)
        total, count = 0.0, 0
        for i in range(2):
            for y in range(4):
                for x in range(4):
                    count += 1
                    for c in range(3):
                        qv, pv = q[i, c, y, x], p[i, c, y, x]
                        total += qv * math.log(qv / pv) - qv * math.log(pv)
        assert abs(got - total / count) < 1e-6

    def test_unnormalized_teacher_rejected(self):
        with pytest.raises(ValueError, match="distribution"):
            distill_pred_loss(T.Tensor(np.zeros((1, 3, 2, 2))),
                              np.full((1, 3, 2, 2), 0.5))

    def test_gradients_flow_only_into_student(self):
        rng = np.random.default_rng(4)
        logits = Parameter(rng.standard_normal((1, 3, 2, 2)))
        q = softmax_np(rng.standard_normal((1, 3, 2, 2)))
        T.backward(distill_pred_loss(logits, q))
        assert logits.grad is not None and np.abs(logits.grad).max() > 0


class TestDistillFeat:
    def test_identical_features_give_zero(self):
        rng = np.random.default_rng(5)
        f = rng.standard_normal((2, 3, 4, 4))
        assert distill_feat_loss([T.Tensor(f)], [f]).item() == 0.0

    def test_ones_vs_zeros_closed_form(self):
        ones = [T.Tensor(np.ones((1, 2, 3, 3))) for _ in range(3)]
        zeros = [np.zeros((1, 2, 3, 3)) for _ in range(3)]
        assert abs(distill_feat_loss(ones, zeros).item() - 3.0) < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(6)
        feats = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 2, 2))]
        targets = [rng.standard_normal(f.shape) for f in feats]
        got = distill_feat_loss([T.Tensor(f) for f in feats], targets).item()
        want = sum(float(np.mean((f - t) ** 2)) for f, t in zip(feats, targets))
        assert abs(got - want) < 1e-9


class TestPixelContrastive:
    def _two_class_embeddings(self, per_class=8, dim=4):
        """All same-class embeddings identical, classes orthogonal."""
        emb = np.zeros((1, dim, 1, 2 * per_class))
        emb[0, 0, 0, :per_class] = 1.0
        emb[0, 1, 0, per_class:] = 1.0
        labels = np.zeros((1, 1, 2 * per_class), dtype=np.int64)
        labels[0, 0, per_class:] = 1
        return T.Tensor(emb), labels

    def test_orthogonal_classes_closed_form(self):
        per_class = 8
        emb, labels = self._two_class_embeddings(per_class)
        cfg = ContrastiveConfig(temperature=0.1, anchors_per_class=64)
        loss = pixel_contrastive_loss([(emb, labels)], cfg, np.random.default_rng(0))
        # per anchor: ceil(0.1 * 8) = 1 negative kept; r_pos = e^{1/tau} up to
        # the normalization epsilon, each kept negative contributes e^0
        n_neg = math.ceil(cfg.semi_hard_fraction * per_class)
        expected = -math.log(math.exp(10.0) / (math.exp(10.0) + n_neg))
        assert abs(loss.item() - expected) < 1e-6

    def test_single_class_batch_is_zero(self):
        emb = T.Tensor(np.random.default_rng(1).standard_normal((1, 4, 2, 4)))
        labels = np.ones((1, 2, 4), dtype=np.int64)
        loss = pixel_contrastive_loss([(emb, labels)],
                                      ContrastiveConfig(), np.random.default_rng(0))
        assert loss.item() == 0.0

    def test_closer_positive_lowers_loss(self):
        cfg = ContrastiveConfig(temperature=0.1)
        losses = []
        for closeness in (0.2, 0.6, 0.95):
            emb = np.zeros((1, 2, 1, 3))
            emb[0, :, 0, 0] = (1.0, 0.0)                       # anchor, class 0
            emb[0, :, 0, 1] = (closeness, math.sqrt(1 - closeness ** 2))  # positive
            emb[0, :, 0, 2] = (0.0, 1.0)                       # negative, class 1
            labels = np.array([[[0, 0, 1]]])
            losses.append(pixel_contrastive_loss(
                [(T.Tensor(emb), labels)], cfg, np.random.default_rng(0)).item())
        assert losses[0] > losses[1] > losses[2]

    def test_anchor_cap_respected(self):
        rng = np.random.default_rng(2)
        emb = T.Tensor(rng.standard_normal((1, 3, 8, 8)))
        labels = np.zeros((1, 8, 8), dtype=np.int64)
        labels[:, :, 4:] = 1
        cfg = ContrastiveConfig(anchors_per_class=4)
        loss = pixel_contrastive_loss([(emb, labels)], cfg, np.random.default_rng(3))
        assert np.isfinite(loss.item()) and loss.item() > 0

    def test_cross_branch_pool_couples_branches(self):
        # the tap's own anchors are single-class; the partner pool supplies
        # the negatives, so the tap only contributes when pooling is on
        rng = np.random.default_rng(3)
        emb_a = T.Parameter(rng.standard_normal((1, 3, 1, 4)))
        labels_a = np.zeros((1, 1, 4), dtype=np.int64)
        emb_b = T.Parameter(rng.standard_normal((1, 3, 1, 4)))
        labels_b = np.array([[[0, 0, 1, 1]]])

        on = pixel_contrastive_loss(
            [(emb_a, labels_a, (emb_b, labels_b))],
            ContrastiveConfig(cross_branch=True), np.random.default_rng(0))
        off = pixel_contrastive_loss(
            [(emb_a, labels_a, (emb_b, labels_b))],
            ContrastiveConfig(cross_branch=False), np.random.default_rng(0))
        assert on.item() > 0.0
        assert off.item() == 0.0  # single-class tap alone contributes nothing

    def test_gradients_reach_the_partner_pool(self):
        rng = np.random.default_rng(4)
        emb_a = T.Parameter(rng.standard_normal((1, 3, 1, 4)))
        emb_b = T.Parameter(rng.standard_normal((1, 3, 1, 4)))
        labels = np.array([[[0, 0, 1, 1]]])
        loss = pixel_contrastive_loss(
            [(emb_a, labels, (emb_b, labels))],
            ContrastiveConfig(), np.random.default_rng(0))
        T.backward(loss)
        assert emb_a.grad is not None and np.abs(emb_a.grad).max() > 0
        assert emb_b.grad is not None and np.abs(emb_b.grad).max() > 0

    def test_temperature_validation(self):
        with pytest.raises(ValueError):
            ContrastiveConfig(temperature=0.0)

    def test_downsample_labels(self):
        labels = np.arange(16).reshape(1, 4, 4)
        ds = downsample_labels(labels, 2)
        assert np.array_equal(ds, labels[:, ::2, ::2])


class TestLossWeightsAssembly:
    def test_weights_default_to_one_each(self):
        w = LossWeights()
        assert (w.seg, w.distill_pred, w.distill_feat, w.contrastive) == (1, 1, 1, 1)
