"""Two-stage training: optical baseline pretraining, then dual-branch
training with distillation from the frozen stage-1 model.

Determinism contract: a single seeded RNG stream drives, in order, the
per-epoch shuffle, the per-sample flip draws (batch order), then per batch
the contrastive sampling (taps in stage order, optical before infrared;
anchor draws before the partner-pool draws of each tap). Checkpoints
capture parameters, batch-norm statistics, optimizer buffers and the RNG
state, so resuming reproduces the exact loss trajectory of an
uninterrupted run.
"""

import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import PairedSample
from .evaluate import ConfusionMatrix, iou_report
from .losses import ContrastiveConfig, LossWeights, joint_loss, seg_loss
from .network import (BaselineNet, DualBranchNet, model_config_from_dict,
                      model_config_to_dict)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    base_lr: float = 5e-3
    momentum: float = 0.9
    poly_power: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    hflip: bool = True
    init_eo_from_pretrained: bool = True
    checkpoint_every: int = 0  # extra periodic checkpoints; final/best always kept
    loss_weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")


def desk_train_config(**overrides):
    """The small-scale default: 60 epochs, everything else as published."""
    return replace(TrainConfig(epochs=60), **overrides)


def train_config_to_dict(cfg):
    return asdict(cfg)


def train_config_from_dict(d):
    d = dict(d)
    d["loss_weights"] = LossWeights(**d["loss_weights"])
    d["contrastive"] = ContrastiveConfig(**d["contrastive"])
    return TrainConfig(**d)


def poly_lr(step, total_steps, base_lr, power=0.9):
    """base_lr * (1 - step/total)^power, stepped once per epoch."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


class SGD:
    """Momentum SGD: v <- momentum*v + g; p <- p - lr*v."""

    def __init__(self, named_params, momentum=0.9, weight_decay=0.0):
        self.params = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v
        self.step_count += 1

    def state_arrays(self):
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state_arrays(self, state):
        if set(state) != set(self.velocity):
            raise ValueError("optimizer state does not match the parameter set")
        for name, v in state.items():
            if v.shape != self.velocity[name].shape:
                raise ValueError(f"optimizer buffer {name} has shape {v.shape}, "
                                 f"expected {self.velocity[name].shape}")
            self.velocity[name][...] = v


def augment_hflip(sample, rng):
    """With probability 0.5, reverse optical, infrared and labels in width."""
    if rng.random() >= 0.5:
        return sample
    return PairedSample(
        eo=None if sample.eo is None else np.ascontiguousarray(sample.eo[:, :, ::-1]),
        ir=np.ascontiguousarray(sample.ir[:, :, ::-1]),
        label=np.ascontiguousarray(sample.label[:, ::-1]),
        id=sample.id,
    )


# ---------------------------------------------------------------------------
# logging and checkpoint helpers
# ---------------------------------------------------------------------------

LOG_HEADER = "# epoch\tlr\tl_seg\tl_d1\tl_d2\tl_cl\tl_total\ttrain_miou\n"


def _log_line(entry):
    return "\t".join([str(entry["epoch"]), repr(entry["lr"]),
                      repr(entry["l_seg"]), repr(entry["l_d1"]), repr(entry["l_d2"]),
                      repr(entry["l_cl"]), repr(entry["l_total"]), repr(entry["train_miou"])]) + "\n"


class _MetricsLog:
    def __init__(self, out_dir, name):
        self.path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.path = os.path.join(out_dir, name)
            with open(self.path, "w", encoding="ascii") as f:
                f.write(LOG_HEADER)

    def append(self, entry):
        if self.path is not None:
            with open(self.path, "a", encoding="ascii") as f:
                f.write(_log_line(entry))


def _make_checkpoint(kind, model, optimizer, rng, epoch, model_cfg, train_cfg,
                     modality, best_miou):
    params, buffers = model.state_arrays()
    return Checkpoint(
        kind=kind,
        config={"model": model_config_to_dict(model_cfg),
                "train": train_config_to_dict(train_cfg),
                "modality": modality},
        params=params,
        buffers=buffers,
        optimizer=optimizer.state_arrays(),
        rng_state=rng.bit_generator.state,
        epoch=epoch,
        meta={"best_miou": best_miou, "optimizer_steps": optimizer.step_count},
    )


def model_from_checkpoint(ckpt):
    """Rebuild the saved model (baseline or dual) and load its state."""
    if isinstance(ckpt, str):
        ckpt = load_checkpoint(ckpt)
    model_cfg = model_config_from_dict(ckpt.config["model"])
    model = BaselineNet(model_cfg) if ckpt.kind == "baseline" else DualBranchNet(model_cfg)
    model.load_state_arrays(ckpt.params, ckpt.buffers)
    return model


def _resume_state(resume, model, optimizer, rng, expected_kind):
    if resume is None:
        return 0, -1.0
    ckpt = load_checkpoint(resume) if isinstance(resume, str) else resume
    if ckpt.kind != expected_kind:
        raise ValueError(f"cannot resume a {expected_kind} run from a {ckpt.kind} checkpoint")
    model.load_state_arrays(ckpt.params, ckpt.buffers)
    optimizer.load_state_arrays(ckpt.optimizer)
    optimizer.step_count = int(ckpt.meta.get("optimizer_steps", 0))
    rng.bit_generator.state = ckpt.rng_state
    return ckpt.epoch, float(ckpt.meta.get("best_miou", -1.0))


def _batches(count, batch_size, rng):
    perm = rng.permutation(count)
    return [perm[i:i + batch_size] for i in range(0, count, batch_size)]


def _stack_batch(samples, indices, rng, hflip, modality):
    chosen = [samples[i] for i in indices]
    if hflip:
        chosen = [augment_hflip(s, rng) for s in chosen]
    images = np.stack([(s.eo if modality == "eo" else s.ir) for s in chosen])
    labels = np.stack([s.label for s in chosen])
    return chosen, images, labels


# ---------------------------------------------------------------------------
# stage 1: optical (or infrared) baseline
# ---------------------------------------------------------------------------

def train_stage1(train_cfg, model_cfg, samples, out_dir=None, modality="eo", resume=None):
    """Pretrain the baseline on one modality with the segmentation loss only.

    Returns (model, history, checkpoint paths). `modality` selects which
    image of each pair feeds the model ("eo" for the published scheme; "ir"
    trains the from-scratch infrared reference).
    """
    if not samples:
        raise ValueError("stage-1 training needs a non-empty dataset")
    if modality not in ("eo", "ir"):
        raise ValueError(f"modality must be 'eo' or 'ir', got {modality!r}")
    model = BaselineNet(model_cfg)
    optimizer = SGD(dict(model.named_parameters()),
                    momentum=train_cfg.momentum, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(np.random.PCG64(train_cfg.seed))
    start_epoch, best_miou = _resume_state(resume, model, optimizer, rng, "baseline")

    log = _MetricsLog(out_dir, f"stage1_{modality}_metrics.tsv")
    paths = {}
    history = []
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = poly_lr(epoch, train_cfg.epochs, train_cfg.base_lr, train_cfg.poly_power)
        cm = ConfusionMatrix(model_cfg.num_classes)
        total_loss, n_batches = 0.0, 0
        for indices in _batches(len(samples), train_cfg.batch_size, rng):
            _, images, labels = _stack_batch(samples, indices, rng, train_cfg.hflip, modality)
            out = model(T.Tensor(images), training=True)
            loss = seg_loss(out.logits, labels)
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step(lr)
            total_loss += loss.item()
            n_batches += 1
            cm.update(out.logits.data.argmax(axis=1), labels)
        miou = iou_report(cm).miou
        l_seg = total_loss / n_batches
        entry = {"epoch": epoch, "lr": lr, "l_seg": l_seg, "l_d1": 0.0, "l_d2": 0.0,
                 "l_cl": 0.0, "l_total": l_seg, "train_miou": miou}
        history.append(entry)
        log.append(entry)
        ckpt = _make_checkpoint("baseline", model, optimizer, rng, epoch + 1,
                                model_cfg, train_cfg, modality, max(best_miou, miou))
        paths.update(_write_checkpoints(out_dir, f"stage1_{modality}", ckpt, epoch,
                                        train_cfg, miou > best_miou))
        best_miou = max(best_miou, miou)
    return model, history, paths


# ---------------------------------------------------------------------------
# stage 2: dual-branch training with distillation
# ---------------------------------------------------------------------------

def train_stage2(train_cfg, model_cfg, samples, teacher, out_dir=None, resume=None):
    """Train the dual-branch model while distilling from the frozen teacher.

    The teacher runs in eval mode with no gradient recording; its parameters
    are not in the optimizer and are bitwise unchanged by the run.
    """
    if not samples:
        raise ValueError("stage-2 training needs a non-empty dataset")
    if isinstance(teacher, (str, Checkpoint)):
        teacher = model_from_checkpoint(teacher)
    if tuple(teacher.config.widths) != tuple(model_cfg.widths):
        raise ValueError(
            f"teacher widths {teacher.config.widths} do not match model {model_cfg.widths}")
    model = DualBranchNet(model_cfg)
    if train_cfg.init_eo_from_pretrained and resume is None:
        model.init_eo_branch_from(teacher)
    optimizer = SGD(dict(model.named_parameters()),
                    momentum=train_cfg.momentum, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(np.random.PCG64(train_cfg.seed))
    start_epoch, best_miou = _resume_state(resume, model, optimizer, rng, "dual")

    log = _MetricsLog(out_dir, "stage2_metrics.tsv")
    paths = {}
    history = []
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = poly_lr(epoch, train_cfg.epochs, train_cfg.base_lr, train_cfg.poly_power)
        cm = ConfusionMatrix(model_cfg.num_classes)
        sums = {"l_seg": 0.0, "l_d1": 0.0, "l_d2": 0.0, "l_cl": 0.0, "l_total": 0.0}
        n_batches = 0
        for indices in _batches(len(samples), train_cfg.batch_size, rng):
            chosen, eo_images, labels = _stack_batch(samples, indices, rng, train_cfg.hflip, "eo")
            ir_images = np.stack([s.ir for s in chosen])
            with T.no_grad():
                t_out = teacher(T.Tensor(eo_images), training=False)
                t_probs = T.softmax_channel(t_out.logits).data
                t_feats = (t_out.stage4.data, t_out.stage5.data, t_out.decoder.data)
            out = model.forward_pair(T.Tensor(eo_images), T.Tensor(ir_images), training=True)
            loss, report = joint_loss(out, labels, t_probs, t_feats,
                                      train_cfg.loss_weights, train_cfg.contrastive, rng)
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step(lr)
            for key, value in (("l_seg", report.l_seg), ("l_d1", report.l_d1),
                               ("l_d2", report.l_d2), ("l_cl", report.l_cl),
                               ("l_total", report.l_total)):
                sums[key] += value
            n_batches += 1
            cm.update(out.logits_fused.data.argmax(axis=1), labels)
        miou = iou_report(cm).miou
        entry = {"epoch": epoch, "lr": lr, "train_miou": miou}
        entry.update({k: v / n_batches for k, v in sums.items()})
        history.append(entry)
        log.append(entry)
        ckpt = _make_checkpoint("dual", model, optimizer, rng, epoch + 1,
                                model_cfg, train_cfg, "pair", max(best_miou, miou))
        paths.update(_write_checkpoints(out_dir, "stage2", ckpt, epoch,
                                        train_cfg, miou > best_miou))
        best_miou = max(best_miou, miou)
    return model, history, paths


def _write_checkpoints(out_dir, prefix, ckpt, epoch, train_cfg, is_best):
    if out_dir is None:
        return {}
    paths = {}
    final_path = os.path.join(out_dir, f"{prefix}_final.ckpt")
    save_checkpoint(final_path, ckpt)
    paths["final"] = final_path
    if is_best:
        best_path = os.path.join(out_dir, f"{prefix}_best.ckpt")
        save_checkpoint(best_path, ckpt)
        paths["best"] = best_path
    if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
        periodic = os.path.join(out_dir, f"{prefix}_epoch{epoch + 1:04d}.ckpt")
        save_checkpoint(periodic, ckpt)
        paths[f"epoch{epoch + 1}"] = periodic
    return paths
