"""Segmentation metrics, the three inference modes, and the ablation harness."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import IGNORE_INDEX, load_sample
from .network import BaselineNet, DualBranchNet

# published reference numbers for the ablation table footer (multi-modal
# mIoU at full scale); printed for orientation only, never asserted against
ABLATION_REFERENCE = {
    "full": 69.38,
    "no_contrastive": 68.01,
    "no_fusion": 68.90,
    "no_exchange": 68.54,
    "no_contrastive_no_exchange": 68.37,
}
ABLATION_VARIANTS = tuple(ABLATION_REFERENCE)


class ConfusionMatrix:
    """C x C integer counts; ignore-index pixels are never scored."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt, ignore_index=IGNORE_INDEX):
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction/label extent mismatch: {pred.shape} vs {gt.shape}")
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
        if ((gt < 0) | (gt >= self.num_classes)).any() or \
                ((pred < 0) | (pred >= self.num_classes)).any():
            raise ValueError("label outside [0, num_classes) in confusion update")
        np.add.at(self.counts, (gt, pred), 1)
        return self

    def total(self):
        return int(self.counts.sum())


@dataclass
class EvalReport:
    per_class_iou: list      # one entry per class; None when the class is unscored
    miou: float
    mode: str
    sample_count: int

    def format_lines(self):
        lines = [f"mode\t{self.mode}", f"samples\t{self.sample_count}"]
        for cls, iou in enumerate(self.per_class_iou):
            lines.append(f"iou_class_{cls}\t{'skipped' if iou is None else f'{iou:.6f}'}")
        lines.append(f"miou\t{self.miou:.6f}")
        return lines


def iou_report(cm, mode="fused", sample_count=0):
    """Per-class IoU = TP / (TP + FP + FN); classes absent from both the
    prediction and the ground truth are excluded from the mean."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = [None if union[c] == 0 else float(tp[c] / union[c])
                 for c in range(cm.num_classes)]
    scored = [v for v in per_class if v is not None]
    miou = float(np.mean(scored)) if scored else 0.0
    return EvalReport(per_class_iou=per_class, miou=miou, mode=mode, sample_count=sample_count)


def _predict(model, sample, mode):
    with T.no_grad():
        if mode == "ir_only":
            if isinstance(model, DualBranchNet):
                logits = model.forward_ir_only(T.Tensor(sample.ir[None]))
            else:
                logits = model(T.Tensor(sample.ir[None])).logits
        elif isinstance(model, BaselineNet):
            if mode != "optical":
                raise ValueError(f"mode {mode!r} needs the dual-branch model")
            logits = model(T.Tensor(sample.eo[None])).logits
        else:
            out = model.forward_pair(T.Tensor(sample.eo[None]), T.Tensor(sample.ir[None]))
            logits = {"fused": out.logits_fused, "optical": out.logits_eo}[mode]
    return logits.data[0].argmax(axis=0)


def evaluate_model(model, entries, mode, num_classes=None):
    """Evaluate over manifest entries in one of {fused, optical, ir_only}.

    Batch norm runs in eval mode throughout; the model is not mutated. In
    ir_only mode the optical files are never opened.
    """
    if mode not in ("fused", "optical", "ir_only"):
        raise ValueError(f"unknown mode {mode!r}, expected fused/optical/ir_only")
    if num_classes is None:
        num_classes = model.config.num_classes
    cm = ConfusionMatrix(num_classes)
    for entry in entries:
        sample = load_sample(entry, num_classes, want_eo=(mode != "ir_only"))
        cm.update(_predict(model, sample, mode), sample.label)
    return iou_report(cm, mode=mode, sample_count=len(entries))


def evaluate_samples(model, samples, mode, num_classes=None):
    """Same as evaluate_model but over already-loaded PairedSamples."""
    if num_classes is None:
        num_classes = model.config.num_classes
    cm = ConfusionMatrix(num_classes)
    for sample in samples:
        cm.update(_predict(model, sample, mode), sample.label)
    return iou_report(cm, mode=mode, sample_count=len(samples))


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def variant_settings(variant):
    """(loss-weight overrides, model overrides) for an ablation variant."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    weights = {}
    model = {}
    if "no_contrastive" in variant:
        weights["contrastive"] = 0.0
    if "no_exchange" in variant:
        model["exchange_enabled"] = False
    if variant == "no_fusion":
        model["fusion_mode"] = "sum"
    return weights, model


def ablation_report(train_cfg, model_cfg, train_samples, test_entries, seeds=(0, 1, 2)):
    """Train and evaluate the five component-removal variants per seed.

    Per seed, stage 1 is trained once and shared by all variants; each
    variant retrains stage 2 with the corresponding component disabled and
    is scored by fused-mode mIoU on the test entries. Returns (rows,
    medians, soft_check, table) where rows are (variant, seed, miou)
    triples and soft_check reports whether the full variant's median is at
    least every single-removal median (reported, not asserted).
    """
    from dataclasses import replace

    from . import pipeline  # local import: the harness drives training

    rows = []
    per_variant = {v: [] for v in ABLATION_VARIANTS}
    for seed in seeds:
        seed_train = replace(train_cfg, seed=seed)
        seed_model = replace(model_cfg, seed=seed)
        teacher, _, _ = pipeline.train_stage1(seed_train, seed_model, train_samples)
        for variant in ABLATION_VARIANTS:
            weight_over, model_over = variant_settings(variant)
            v_train = replace(seed_train,
                              loss_weights=replace(seed_train.loss_weights, **weight_over))
            v_model = seed_model
            if "exchange_enabled" in model_over:
                v_model = replace(v_model, exchange=replace(v_model.exchange, enabled=False))
            if "fusion_mode" in model_over:
                v_model = replace(v_model, fusion_mode=model_over["fusion_mode"])
            model, _, _ = pipeline.train_stage2(v_train, v_model, train_samples, teacher)
            miou = evaluate_model(model, test_entries, "fused").miou
            rows.append((variant, seed, miou))
            per_variant[variant].append(miou)
    medians = {v: float(np.median(per_variant[v])) for v in ABLATION_VARIANTS}
    single_removals = ("no_contrastive", "no_fusion", "no_exchange")
    soft_check = all(medians["full"] >= medians[v] for v in single_removals)
    return rows, medians, soft_check, format_ablation_table(rows, medians, soft_check)


def format_ablation_table(rows, medians, soft_check):
    """Tab-separated ablation report with the published reference footer."""
    lines = ["variant\tseed\tmiou"]
    for variant, seed, miou in rows:
        lines.append(f"{variant}\t{seed}\t{miou:.6f}")
    for variant in ABLATION_VARIANTS:
        lines.append(f"{variant}\tmedian\t{medians[variant]:.6f}")
    lines.append("# full-variant median >= each single-removal median: "
                 + ("yes" if soft_check else "no"))
    lines.append("# published full-scale reference (multi-modal mIoU %): "
                 + " / ".join(f"{ABLATION_REFERENCE[v]:.2f}" for v in ABLATION_VARIANTS))
    return "\n".join(lines) + "\n"
