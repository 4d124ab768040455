"""Flat run configuration: defaults, JSON config files and flag overrides.

Every tunable of the scene generator, the model and the trainer appears as
one typed key. Precedence is defaults < config file < command-line flags,
and the resolved document is echoed as ``config.json`` into every output
directory so a run can be reproduced from its artifacts alone. Unknown keys
are rejected.
"""

import json
import os

from .data import SceneConfig
from .exchange import ExchangeConfig
from .losses import ContrastiveConfig, LossWeights
from .network import ModelConfig


class ConfigError(ValueError):
    pass


# key -> (type, default). `epochs`/`count` default to None and resolve via
# the preset ("desk": 60 epochs, 80 images; "paper": 200 epochs, 1600 images).
SCHEMA = {
    "preset": (str, "desk"),
    "seed": (int, 0),
    # scene
    "image_size": (int, 32),
    "num_classes": (int, 4),
    "count": (int, None),
    "shapes_per_image": (int, 3),
    "texture_amp": (float, 0.15),
    "eo_noise": (float, 0.02),
    "ir_noise": (float, 0.15),
    "ir_gain_jitter": (float, 0.25),
    "night": (bool, False),
    "night_dim": (float, 0.25),
    "night_extra_noise": (float, 0.04),
    "train_ratio": (float, 0.8),
    # model
    "widths": (list, [8, 16, 32, 64, 64]),
    "decoder_channels": (int, 32),
    "embed_dim": (int, 32),
    "contrastive_taps": (str, "branch_pairs"),
    "fusion_mode": (str, "gated"),
    # exchange
    "exchange_enabled": (bool, True),
    "exchange_threshold": (float, 1e-2),
    "exchange_channel_stages": (list, [1, 2, 3, 4, 5]),
    "exchange_spatial_stages": (list, [4, 5]),
    # training
    "epochs": (int, None),
    "batch_size": (int, 8),
    "base_lr": (float, 5e-3),
    "momentum": (float, 0.9),
    "poly_power": (float, 0.9),
    "weight_decay": (float, 0.0),
    "hflip": (bool, True),
    "init_eo_from_pretrained": (bool, True),
    "checkpoint_every": (int, 0),
    # loss weights
    "w_seg": (float, 1.0),
    "w_distill_pred": (float, 1.0),
    "w_distill_feat": (float, 1.0),
    "w_contrastive": (float, 1.0),
    # contrastive sampling
    "temperature": (float, 0.1),
    "anchors_per_class": (int, 64),
    "semi_hard_fraction": (float, 0.10),
    "keep_hard_positives": (bool, True),
}

PRESETS = {
    "desk": {"epochs": 60, "count": 80},
    "paper": {"epochs": 200, "count": 1600},
}


def _check_value(key, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    expected, _ = SCHEMA[key]
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if expected is list:
        if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return {key: _check_value(key, value) for key, value in doc.items()}


def resolve_config(file_values=None, overrides=None):
    """Merge defaults, config-file values and flag overrides into one dict."""
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            cfg[key] = _check_value(key, value)
    preset = cfg["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    for key, value in PRESETS[preset].items():
        if cfg[key] is None:
            cfg[key] = value
    return cfg


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# -- builders for the typed configs -----------------------------------------

def scene_config(cfg):
    return SceneConfig(
        size=cfg["image_size"], num_classes=cfg["num_classes"],
        shapes_per_image=cfg["shapes_per_image"], texture_amp=cfg["texture_amp"],
        eo_noise=cfg["eo_noise"], ir_noise=cfg["ir_noise"],
        ir_gain_jitter=cfg["ir_gain_jitter"], night=cfg["night"],
        night_dim=cfg["night_dim"], night_extra_noise=cfg["night_extra_noise"],
        seed=cfg["seed"])


def model_config(cfg):
    return ModelConfig(
        widths=tuple(cfg["widths"]), num_classes=cfg["num_classes"],
        decoder_channels=cfg["decoder_channels"], embed_dim=cfg["embed_dim"],
        seed=cfg["seed"], contrastive_taps=cfg["contrastive_taps"],
        fusion_mode=cfg["fusion_mode"],
        exchange=ExchangeConfig(
            enabled=cfg["exchange_enabled"],
            channel_threshold=cfg["exchange_threshold"],
            channel_stages=frozenset(cfg["exchange_channel_stages"]),
            spatial_stages=frozenset(cfg["exchange_spatial_stages"])))


def train_config(cfg):
    from .pipeline import TrainConfig  # local import to keep layering one-way

    return TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], base_lr=cfg["base_lr"],
        momentum=cfg["momentum"], poly_power=cfg["poly_power"],
        weight_decay=cfg["weight_decay"], seed=cfg["seed"], hflip=cfg["hflip"],
        init_eo_from_pretrained=cfg["init_eo_from_pretrained"],
        checkpoint_every=cfg["checkpoint_every"],
        loss_weights=LossWeights(seg=cfg["w_seg"], distill_pred=cfg["w_distill_pred"],
                                 distill_feat=cfg["w_distill_feat"],
                                 contrastive=cfg["w_contrastive"]),
        contrastive=ContrastiveConfig(
            temperature=cfg["temperature"], anchors_per_class=cfg["anchors_per_class"],
            semi_hard_fraction=cfg["semi_hard_fraction"],
            keep_hard_positives=cfg["keep_hard_positives"]))
