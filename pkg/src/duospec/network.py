"""Baseline and dual-branch segmentation models.

The encoder is five conv stages (3x3, stride 2 from stage 2 on). In the
dual-branch model the conv weights of every stage are physically shared
between the optical and infrared paths while each modality keeps its own
batch-norm slot. Each branch has its own light decoder (1x1 conv, x4
nearest upsample, 3x3 conv) and segmentation head; the fused prediction
comes from a gated fusion of the two decoder outputs. The infrared path
alone reproduces the baseline topology exactly, which is what makes
missing-modality inference cost the same as the baseline.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exchange import ExchangeConfig, mixed_exchange
from .fusion import GatedFusion
from .layers import BatchNorm2d, Conv2d, ModalityBatchNorm, Module, ProjectionHead
from .tensor import ShapeError

# total stride between the decoder output and the input image; seg heads
# upsample by this factor to return full-resolution logits
OUTPUT_STRIDE = 4
ENCODER_STRIDE = 16


@dataclass
class ModelConfig:
    widths: tuple = (8, 16, 32, 64, 64)
    num_classes: int = 4
    in_channels: int = 3
    decoder_channels: int = 32
    embed_dim: int = 32
    seed: int = 0
    # "branch_pairs": stages 4 and 5 on each branch (four taps, the default);
    # "last_four": stages 2..5 on each branch (eight taps)
    contrastive_taps: str = "branch_pairs"
    # "gated" uses the fusion unit; "sum" feeds the fused head the elementwise
    # sum of the decoder outputs (the fusion-ablation variant)
    fusion_mode: str = "gated"
    exchange: ExchangeConfig = field(default_factory=ExchangeConfig)

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ValueError(f"exactly five stage widths required, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"stage widths must be positive, got {self.widths}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.contrastive_taps not in ("branch_pairs", "last_four"):
            raise ValueError(f"unknown contrastive_taps {self.contrastive_taps!r}")
        if self.fusion_mode not in ("gated", "sum"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")

    def tap_stages(self):
        return (4, 5) if self.contrastive_taps == "branch_pairs" else (2, 3, 4, 5)


def _check_input_extent(shape):
    n, c, h, w = shape
    if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
        raise ShapeError(f"input extents must be divisible by {ENCODER_STRIDE}, got {h}x{w}")


def _prepare_input(x, in_channels):
    """Replicate single-channel inputs so the shared stage-1 conv fits."""
    c = x.shape[1]
    if c == in_channels:
        return x
    if c == 1:
        return T.concat_channels([x] * in_channels)
    raise ShapeError(f"input must have 1 or {in_channels} channels, got {c}")


class EncoderStage(Module):
    """Shared 3x3 conv + per-modality (or single) batch norm + ReLU."""

    def __init__(self, in_channels, out_channels, rng, stride, norm):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.norm = norm

    def __call__(self, x, training, modality=None):
        y = self.conv(x)
        if isinstance(self.norm, ModalityBatchNorm):
            y = self.norm(y, modality, training)
        else:
            y = self.norm(y, training)
        return T.relu(y)


class Decoder(Module):
    """Light decoder: 1x1 conv on the bottleneck, x4 nearest upsample, a
    1x1-projected low-level skip (stage 3, already at the output stride),
    then a 3x3 conv. Without the skip the upsampled bottleneck stays
    piecewise-constant over 4x4 cells and cannot localize at the
    prediction stride."""

    def __init__(self, in_channels, skip_channels, out_channels, rng):
        super().__init__()
        self.reduce = Conv2d(in_channels, out_channels, 1, rng)
        self.skip_proj = Conv2d(skip_channels, out_channels, 1, rng)
        self.refine = Conv2d(out_channels, out_channels, 3, rng, padding=1)

    def __call__(self, x, skip):
        y = T.upsample_nearest(T.relu(self.reduce(x)), OUTPUT_STRIDE)
        y = T.add(y, T.relu(self.skip_proj(skip)))
        return self.refine(y)


class SegHead(Module):
    """1x1 conv to class logits, upsampled back to input resolution."""

    def __init__(self, in_channels, num_classes, rng):
        super().__init__()
        self.proj = Conv2d(in_channels, num_classes, 1, rng)

    def __call__(self, x):
        return T.upsample_nearest(self.proj(x), OUTPUT_STRIDE)


@dataclass
class BaselineOutputs:
    logits: T.Tensor
    stage4: T.Tensor
    stage5: T.Tensor
    decoder: T.Tensor


@dataclass
class DualOutputs:
    logits_eo: T.Tensor
    logits_ir: T.Tensor
    logits_fused: T.Tensor
    stage_feats_eo: dict
    stage_feats_ir: dict
    decoder_eo: T.Tensor
    decoder_ir: T.Tensor
    fused_feature: T.Tensor
    gates: tuple
    embeddings: list  # (tap_name, Tensor, stage) triples


class BaselineNet(Module):
    """Single-branch encoder-decoder; the stage-1 pretraining model."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(np.random.PCG64(config.seed))
        widths = config.widths
        ins = (config.in_channels,) + tuple(widths[:-1])
        self.stages = [
            EncoderStage(ins[i], widths[i], rng, stride=1 if i == 0 else 2,
                         norm=BatchNorm2d(widths[i]))
            for i in range(5)
        ]
        self.decoder = Decoder(widths[4], widths[2], config.decoder_channels, rng)
        self.head = SegHead(config.decoder_channels, config.num_classes, rng)
        self.assign_parameter_names()

    def forward(self, image, training=False):
        _check_input_extent(image.shape)
        x = _prepare_input(image, self.config.in_channels)
        feats = {}
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x, training)
            if i >= 3:
                feats[i] = x
        dec = self.decoder(x, feats[3])
        return BaselineOutputs(logits=self.head(dec), stage4=feats[4], stage5=feats[5], decoder=dec)

    def __call__(self, image, training=False):
        return self.forward(image, training)


class DualBranchNet(Module):
    """Dual-branch model: shared encoder convs, per-modality norms, two
    decoders and heads, mixed feature exchange and gated fusion."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(np.random.PCG64(config.seed))
        widths = config.widths
        ins = (config.in_channels,) + tuple(widths[:-1])
        self.stages = [
            EncoderStage(ins[i], widths[i], rng, stride=1 if i == 0 else 2,
                         norm=ModalityBatchNorm(widths[i]))
            for i in range(5)
        ]
        self.decoder_eo = Decoder(widths[4], widths[2], config.decoder_channels, rng)
        self.decoder_ir = Decoder(widths[4], widths[2], config.decoder_channels, rng)
        self.head_eo = SegHead(config.decoder_channels, config.num_classes, rng)
        self.head_ir = SegHead(config.decoder_channels, config.num_classes, rng)
        self.head_fused = SegHead(config.decoder_channels, config.num_classes, rng)
        self.fusion = GatedFusion(config.decoder_channels, rng)
        self.proj_heads = {}
        heads = []
        for branch in ("eo", "ir"):
            for stage in config.tap_stages():
                head = ProjectionHead(widths[stage - 1], config.embed_dim, rng)
                self.proj_heads[(branch, stage)] = head
                heads.append(head)
        self.projections = heads
        self.assign_parameter_names()

    # -- forward modes ------------------------------------------------------

    def forward_pair(self, eo, ir, training=False, exchange=None):
        """Run both branches; `exchange` overrides the config's enabled flag."""
        if eo.shape[2:] != ir.shape[2:]:
            raise ShapeError(
                f"optical and infrared inputs must be co-registered, got {eo.shape} vs {ir.shape}")
        _check_input_extent(eo.shape)
        cfg = self.config
        do_exchange = cfg.exchange.enabled if exchange is None else exchange
        x_eo = _prepare_input(eo, cfg.in_channels)
        x_ir = _prepare_input(ir, cfg.in_channels)
        feats_eo, feats_ir, embeddings = {}, {}, []
        for i, stage in enumerate(self.stages, start=1):
            x_eo = stage(x_eo, training, modality="eo")
            x_ir = stage(x_ir, training, modality="ir")
            if do_exchange:
                x_eo, x_ir = mixed_exchange(
                    i, x_eo, x_ir,
                    stage.norm.gamma_values("eo"), stage.norm.gamma_values("ir"),
                    cfg.exchange)
            feats_eo[i] = x_eo
            feats_ir[i] = x_ir
            if i in cfg.tap_stages():
                embeddings.append((f"eo{i}", self.proj_heads[("eo", i)](x_eo), i))
                embeddings.append((f"ir{i}", self.proj_heads[("ir", i)](x_ir), i))
        dec_eo = self.decoder_eo(x_eo, feats_eo[3])
        dec_ir = self.decoder_ir(x_ir, feats_ir[3])
        if cfg.fusion_mode == "gated":
            fused, gates, _ = self.fusion(dec_ir, dec_eo)
        else:
            fused, gates = T.add(dec_ir, dec_eo), ()
        return DualOutputs(
            logits_eo=self.head_eo(dec_eo),
            logits_ir=self.head_ir(dec_ir),
            logits_fused=self.head_fused(fused),
            stage_feats_eo=feats_eo,
            stage_feats_ir=feats_ir,
            decoder_eo=dec_eo,
            decoder_ir=dec_ir,
            fused_feature=fused,
            gates=gates,
            embeddings=embeddings,
        )

    def forward_ir_only(self, ir, training=False):
        """Missing-modality path: IR norms, no exchange, no fusion.

        Touches no optical-only parameter; same topology and cost as the
        baseline model.
        """
        _check_input_extent(ir.shape)
        x = _prepare_input(ir, self.config.in_channels)
        skip = None
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x, training, modality="ir")
            if i == 3:
                skip = x
        return self.head_ir(self.decoder_ir(x, skip))

    # -- parameter accounting -----------------------------------------------

    def ir_path_parameters(self):
        """Named parameters of the IR-only inference subgraph."""
        out = {}
        for i, stage in enumerate(self.stages):
            for name, p in stage.conv.named_parameters(f"stages.{i}.conv."):
                out[name] = p
            for name, p in stage.norm.bn_ir.named_parameters(f"stages.{i}.norm.bn_ir."):
                out[name] = p
        out.update(dict(self.decoder_ir.named_parameters("decoder_ir.")))
        out.update(dict(self.head_ir.named_parameters("head_ir.")))
        return out

    def eo_only_parameters(self):
        """Parameters that the IR-only path must never read."""
        ir_ids = {id(p) for p in self.ir_path_parameters().values()}
        return {name: p for name, p in self.named_parameters() if id(p) not in ir_ids}

    def init_eo_branch_from(self, baseline):
        """Copy the optical path from a pretrained baseline.

        Copies the shared encoder convs, the optical batch-norm slots
        (affine parameters and running statistics), the optical decoder and
        the optical head, so the distillation targets start aligned. The
        infrared slots, decoder and head keep their fresh initialization.
        """
        if tuple(baseline.config.widths) != tuple(self.config.widths) or \
                baseline.config.num_classes != self.config.num_classes or \
                baseline.config.decoder_channels != self.config.decoder_channels:
            raise ValueError(
                "pretrained model is incompatible: "
                f"widths {baseline.config.widths} classes {baseline.config.num_classes} vs "
                f"{self.config.widths} / {self.config.num_classes}")
        for mine, theirs in zip(self.stages, baseline.stages):
            mine.conv.weight.data[...] = theirs.conv.weight.data
            mine.conv.bias.data[...] = theirs.conv.bias.data
            mine.norm.bn_eo.gamma.data[...] = theirs.norm.gamma.data
            mine.norm.bn_eo.beta.data[...] = theirs.norm.beta.data
            mine.norm.bn_eo.running_mean[...] = theirs.norm.running_mean
            mine.norm.bn_eo.running_var[...] = theirs.norm.running_var
        for src, dst in ((baseline.decoder, self.decoder_eo), (baseline.head, self.head_eo)):
            for (_, p_src), (_, p_dst) in zip(src.named_parameters(), dst.named_parameters()):
                p_dst.data[...] = p_src.data


def model_config_to_dict(cfg):
    return {"widths": list(cfg.widths), "num_classes": cfg.num_classes,
            "in_channels": cfg.in_channels, "decoder_channels": cfg.decoder_channels,
            "embed_dim": cfg.embed_dim, "seed": cfg.seed,
            "contrastive_taps": cfg.contrastive_taps, "fusion_mode": cfg.fusion_mode,
            "exchange": cfg.exchange.to_dict()}


def model_config_from_dict(d):
    return ModelConfig(widths=tuple(d["widths"]), num_classes=int(d["num_classes"]),
                       in_channels=int(d["in_channels"]),
                       decoder_channels=int(d["decoder_channels"]),
                       embed_dim=int(d["embed_dim"]), seed=int(d["seed"]),
                       contrastive_taps=d["contrastive_taps"],
                       fusion_mode=d["fusion_mode"],
                       exchange=ExchangeConfig.from_dict(d["exchange"]))


def build_baseline(config):
    return BaselineNet(config)


def build_dual(config):
    return DualBranchNet(config)


def param_count(model, part="full"):
    """Number of trainable parameters in a model or named subgraph.

    `part` is "full" for any model; "ir_only" or "baseline_equivalent"
    select the missing-modality inference subgraph of a dual-branch model.
    """
    if part == "full":
        return sum(p.size for p in model.parameters() if p.trainable)
    if part in ("ir_only", "baseline_equivalent"):
        if not isinstance(model, DualBranchNet):
            raise ValueError(f"part {part!r} applies to the dual-branch model")
        return sum(p.size for p in model.ir_path_parameters().values() if p.trainable)
    raise ValueError(f"unknown selector {part!r}")
