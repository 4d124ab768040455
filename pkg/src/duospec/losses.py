"""Training objectives: segmentation, the two distillation terms, the
pixel contrastive term, and their joint assembly.

All losses are built from the autodiff primitives so gradients reach every
trainable parameter; teacher-side quantities enter as detached constants.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError

IGNORE_INDEX = 255


@dataclass
class LossWeights:
    seg: float = 1.0
    distill_pred: float = 1.0
    distill_feat: float = 1.0
    contrastive: float = 1.0


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    anchors_per_class: int = 64
    semi_hard_fraction: float = 0.10
    # keep the farthest positives (hard positives) as read; False drops them
    keep_hard_positives: bool = True
    # pool candidates across the two branches at the same stage, so same-class
    # optical/infrared embeddings become positives and the branches are pulled
    # into one space; False restricts each tap to its own branch
    cross_branch: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.semi_hard_fraction <= 1:
            raise ValueError(f"semi_hard_fraction must be in (0, 1], got {self.semi_hard_fraction}")


@dataclass
class LossReport:
    l_seg: float
    l_d1: float
    l_d2: float
    l_cl: float
    l_total: float
    weights: LossWeights


def _one_hot_valid(labels, num_classes, ignore_index):
    """(one_hot (n,C,H,W), valid (n,1,H,W)) float arrays; ignored pixels zero."""
    labels = np.asarray(labels)
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise ValueError(
            f"label {int(labels[bad].flat[0])} out of range for {num_classes} classes")
    n, h, w = labels.shape
    one_hot = np.zeros((n, num_classes, h, w))
    safe = np.where(valid, labels, 0)
    np.put_along_axis(one_hot, safe[:, None], valid[:, None].astype(np.float64), axis=1)
    return one_hot, valid[:, None].astype(np.float64)


def cross_entropy_loss(logits, labels, ignore_index=IGNORE_INDEX):
    """Cross-entropy over softmax(logits), averaged over scored pixels."""
    num_classes = logits.shape[1]
    one_hot, valid = _one_hot_valid(labels, num_classes, ignore_index)
    n_valid = valid.sum()
    if n_valid == 0:
        raise ValueError("no scored pixels in batch (all ignore-index)")
    logp = T.log_softmax_channel(logits)
    return T.neg(T.tsum(T.mul(logp, T.Tensor(one_hot)))) * (1.0 / n_valid)


def dice_loss(logits, labels, ignore_index=IGNORE_INDEX, smooth=1.0):
    """Macro-averaged dice on softmax probabilities against one-hot labels.

    `smooth` is added to numerator and denominator (the raw ratio divides
    by possibly-zero sums); ignored pixels are excluded from all sums.
    """
    num_classes = logits.shape[1]
    one_hot, valid = _one_hot_valid(labels, num_classes, ignore_index)
    probs = T.mul(T.softmax_channel(logits), T.Tensor(valid))
    inter = T.tsum(T.mul(probs, T.Tensor(one_hot)), (0, 2, 3))   # (1,C,1,1)
    pred_sum = T.tsum(probs, (0, 2, 3))
    label_sum = one_hot.sum(axis=(0, 2, 3)).reshape(1, num_classes, 1, 1)
    per_class = 1.0 - T.div(inter * 2.0 + smooth,
                            pred_sum + T.Tensor(label_sum + smooth))
    return T.tmean(per_class, 1)


def seg_loss(logits, labels, ignore_index=IGNORE_INDEX, dice_smooth=1.0):
    """Segmentation objective: cross-entropy plus macro-averaged dice."""
    return T.add(cross_entropy_loss(logits, labels, ignore_index),
                 dice_loss(logits, labels, ignore_index, dice_smooth))


def _check_probability_field(q, tol=1e-4):
    q = np.asarray(q, dtype=np.float64)
    sums = q.sum(axis=1)
    if np.abs(sums - 1.0).max() > tol or q.min() < -tol:
        raise ValueError(
            f"teacher field is not a per-pixel distribution (sum range "
            f"[{sums.min():.6f}, {sums.max():.6f}])")
    return q


def soft_cross_entropy(logits, target_probs):
    """H(q, p): mean over pixels of -sum_c q log p, with q a constant field."""
    q = np.asarray(target_probs)
    n, _, h, w = logits.shape
    logp = T.log_softmax_channel(logits)
    return T.neg(T.tsum(T.mul(logp, T.Tensor(q)))) * (1.0 / (n * h * w))


def soft_kl(logits, target_probs):
    """KL(q || p), mean over pixels; q constant, gradients reach only p."""
    q = np.asarray(target_probs, dtype=np.float64)
    n = q.shape[0] * q.shape[2] * q.shape[3]
    neg_entropy = float(np.where(q > 0, q * np.log(q, where=q > 0), 0.0).sum()) / n
    return soft_cross_entropy(logits, q) + neg_entropy


def distill_pred_loss(logits, teacher_probs):
    """Prediction distillation: KL(q || p) + H(q, p) against frozen teacher
    probabilities (validated to sum to 1 per pixel)."""
    if logits.shape != np.asarray(teacher_probs).shape:
        raise ShapeError(
            f"teacher field shape {np.asarray(teacher_probs).shape} != logits {logits.shape}")
    q = _check_probability_field(teacher_probs)
    return T.add(soft_kl(logits, q), soft_cross_entropy(logits, q))


def distill_feat_loss(feats, teacher_feats):
    """Sum of per-tensor mean squared errors against frozen teacher features."""
    if len(feats) != len(teacher_feats):
        raise ShapeError(f"feature count mismatch: {len(feats)} vs {len(teacher_feats)}")
    total = None
    for f, ft in zip(feats, teacher_feats):
        ft = np.asarray(ft)
        if f.shape != ft.shape:
            raise ShapeError(f"feature shape mismatch: {f.shape} vs {ft.shape}")
        diff = T.sub(f, T.Tensor(ft))
        term = T.tmean(T.mul(diff, diff))
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# pixel contrastive loss
# ---------------------------------------------------------------------------

def downsample_labels(labels, factor):
    """Nearest (top-left) label subsampling to the embedding resolution."""
    return np.asarray(labels)[:, ::factor, ::factor]


def _sample_anchors(labels, cap, rng, ignore_index):
    """Up to `cap` anchor pixels per class per image; deterministic in rng."""
    idx_n, idx_h, idx_w, idx_cls = [], [], [], []
    n = labels.shape[0]
    for img in range(n):
        present = np.unique(labels[img])
        for cls in present:
            if cls == ignore_index:
                continue
            pos = np.argwhere(labels[img] == cls)
            if len(pos) > cap:
                pos = pos[rng.choice(len(pos), size=cap, replace=False)]
            for ph, pw in pos:
                idx_n.append(img)
                idx_h.append(int(ph))
                idx_w.append(int(pw))
                idx_cls.append(int(cls))
    return (np.array(idx_n, dtype=np.intp), np.array(idx_h, dtype=np.intp),
            np.array(idx_w, dtype=np.intp), np.array(idx_cls))


def _unit_pixels(embedding, idx_n, idx_h, idx_w):
    """L2-normalized embedding vectors gathered at pixel positions."""
    sq = T.tsum(T.mul(embedding, embedding), 1)
    unit = T.div(embedding, T.sqrt(sq + 1e-12))
    return T.take_pixels(unit, idx_n, idx_h, idx_w)


def _tap_contrastive(embedding, labels, cfg, rng, ignore_index, partner=None):
    """Contrastive loss for one tap point, or None when degenerate.

    Anchors are sampled per class per image across the whole batch and
    double as candidates; with `partner` (the other branch's embedding at
    the same stage) and cross_branch enabled, the partner's sampled pixels
    join the candidate pool, so same-class cross-branch pairs count as
    positives. Per anchor the top-`fraction` nearest negatives and farthest
    positives are kept, and each (anchor, positive) pair contributes
    -log(r_pos / (r_pos + sum of selected negatives)).
    """
    n, d, h, w = embedding.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match embedding grid {(n, h, w)}")
    idx_n, idx_h, idx_w, idx_cls = _sample_anchors(
        labels, cfg.anchors_per_class, rng, ignore_index)
    k = idx_cls.size
    if k == 0:
        return None

    cols = [_unit_pixels(embedding, idx_n, idx_h, idx_w)]  # (1, d, 1, K)
    pool_cls = [idx_cls]
    if partner is not None and cfg.cross_branch:
        p_emb, p_labels = partner
        p_n, p_h, p_w, p_cls = _sample_anchors(
            p_labels, cfg.anchors_per_class, rng, ignore_index)
        if p_cls.size:
            cols.append(_unit_pixels(p_emb, p_n, p_h, p_w))
            pool_cls.append(p_cls)
    candidates = cols[0] if len(cols) == 1 else T.concat_width(cols)
    pool_cls = np.concatenate(pool_cls)
    if np.unique(pool_cls).size < 2:
        return None

    sims = T.pair_dot(cols[0], candidates)                 # (1, 1, K, P)
    p = pool_cls.size
    sim_values = sims.data[0, 0]
    same = idx_cls[:, None] == pool_cls[None, :]
    self_mask = np.zeros((k, p), dtype=bool)
    self_mask[:, :k] = np.eye(k, dtype=bool)
    pos_mask = same & ~self_mask
    neg_mask = ~same

    neg_keep = np.zeros((k, p))
    pair_anchor, pair_pos = [], []
    for i in range(k):
        negs = np.flatnonzero(neg_mask[i])
        poss = np.flatnonzero(pos_mask[i])
        if negs.size == 0 or poss.size == 0:
            continue
        k_neg = max(1, math.ceil(cfg.semi_hard_fraction * negs.size))
        nearest = negs[np.argsort(-sim_values[i, negs], kind="stable")[:k_neg]]
        neg_keep[i, nearest] = 1.0
        k_pos = max(1, math.ceil(cfg.semi_hard_fraction * poss.size))
        by_distance = poss[np.argsort(sim_values[i, poss], kind="stable")]
        if cfg.keep_hard_positives:
            chosen = by_distance[:k_pos]
        else:
            chosen = by_distance[k_pos:]
            if chosen.size == 0:
                chosen = by_distance[-1:]
        for j in chosen:
            pair_anchor.append(i)
            pair_pos.append(int(j))
    if not pair_anchor:
        return None

    r = T.exp(sims * (1.0 / cfg.temperature))
    neg_sums = T.tsum(T.mul(r, T.Tensor(neg_keep.reshape(1, 1, k, p))), 3)  # (1,1,K,1)
    zeros = np.zeros(len(pair_anchor), dtype=np.intp)
    a_idx = np.asarray(pair_anchor, dtype=np.intp)
    p_idx = np.asarray(pair_pos, dtype=np.intp)
    r_pos = T.take_pixels(r, zeros, a_idx, p_idx)
    s_pos = T.take_pixels(sims, zeros, a_idx, p_idx)
    denom = T.add(r_pos, T.take_pixels(neg_sums, zeros, a_idx, zeros))
    per_pair = T.sub(T.log(denom), s_pos * (1.0 / cfg.temperature))
    return T.tmean(per_pair)


def pixel_contrastive_loss(taps, cfg, rng, ignore_index=IGNORE_INDEX):
    """Pixel contrastive loss summed over tap points.

    `taps` is a list of (embedding, labels-at-that-resolution) pairs, each
    optionally extended with a (partner embedding, partner labels) third
    element whose pixels join that tap's candidate pool. Tap points whose
    pool holds fewer than two classes contribute zero.
    """
    total = None
    for tap in taps:
        embedding, labels = tap[0], tap[1]
        partner = tap[2] if len(tap) > 2 else None
        term = _tap_contrastive(embedding, labels, cfg, rng, ignore_index,
                                partner=partner)
        if term is not None:
            total = term if total is None else T.add(total, term)
    return T.scalar(0.0) if total is None else total


# ---------------------------------------------------------------------------
# joint assembly
# ---------------------------------------------------------------------------

def joint_loss(outputs, labels, teacher_probs, teacher_feats, weights,
               contrastive_cfg, rng, ignore_index=IGNORE_INDEX):
    """Stage-2 objective: seg loss on the fused and IR heads, prediction and
    feature distillation on the optical branch, and the contrastive term.

    Terms with zero weight are skipped entirely, so their parameters receive
    no gradient. Returns (total loss Tensor, LossReport). The optical head
    is supervised only through distillation.
    """
    total = None
    values = {"seg": 0.0, "d1": 0.0, "d2": 0.0, "cl": 0.0}

    def include(term, weight):
        nonlocal total
        weighted = term * weight if weight != 1.0 else term
        total = weighted if total is None else T.add(total, weighted)
        return term.item()

    if weights.seg != 0.0:
        term = T.add(seg_loss(outputs.logits_fused, labels, ignore_index),
                     seg_loss(outputs.logits_ir, labels, ignore_index))
        values["seg"] = include(term, weights.seg)
    if weights.distill_pred != 0.0:
        term = distill_pred_loss(outputs.logits_eo, teacher_probs)
        values["d1"] = include(term, weights.distill_pred)
    if weights.distill_feat != 0.0:
        feats = (outputs.stage_feats_eo[4], outputs.stage_feats_eo[5], outputs.decoder_eo)
        term = distill_feat_loss(feats, teacher_feats)
        values["d2"] = include(term, weights.distill_feat)
    if weights.contrastive != 0.0:
        full_h = labels.shape[1]
        by_stage = {}
        for _, emb, stage in outputs.embeddings:
            by_stage.setdefault(stage, []).append(emb)
        taps = []
        for stage in sorted(by_stage):
            embs = by_stage[stage]
            stage_labels = downsample_labels(labels, full_h // embs[0].shape[2])
            for i, emb in enumerate(embs):
                partner = (embs[1 - i], stage_labels) if len(embs) == 2 else None
                taps.append((emb, stage_labels, partner))
        term = pixel_contrastive_loss(taps, contrastive_cfg, rng, ignore_index)
        values["cl"] = include(term, weights.contrastive)
    if total is None:
        total = T.scalar(0.0)

    report = LossReport(l_seg=values["seg"], l_d1=values["d1"], l_d2=values["d2"],
                        l_cl=values["cl"], l_total=total.item(), weights=weights)
    return total, report
