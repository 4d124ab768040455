"""Mixed feature exchange between the two branches.

Channel exchange replaces a branch's channels whose batch-norm scale is
near zero with the other branch's channels (default: every encoder stage).
Spatial exchange swaps the two branches at odd width indices (default: the
last two stages). There is no sparsity penalty anywhere; the scale magnitude
alone drives the channel routing.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError


@dataclass
class ExchangeConfig:
    enabled: bool = True
    channel_threshold: float = 1e-2
    channel_stages: frozenset = field(default_factory=lambda: frozenset({1, 2, 3, 4, 5}))
    spatial_stages: frozenset = field(default_factory=lambda: frozenset({4, 5}))

    def __post_init__(self):
        if self.channel_threshold < 0:
            raise ValueError(f"channel threshold must be non-negative, got {self.channel_threshold}")
        for s in set(self.channel_stages) | set(self.spatial_stages):
            if not 1 <= s <= 5:
                raise ValueError(f"exchange stages must be in 1..5, got {s}")

    def to_dict(self):
        return {"enabled": self.enabled,
                "channel_threshold": self.channel_threshold,
                "channel_stages": sorted(self.channel_stages),
                "spatial_stages": sorted(self.spatial_stages)}

    @classmethod
    def from_dict(cls, d):
        return cls(enabled=bool(d["enabled"]),
                   channel_threshold=float(d["channel_threshold"]),
                   channel_stages=frozenset(d["channel_stages"]),
                   spatial_stages=frozenset(d["spatial_stages"]))


def exchange_mask(shape):
    """Binary swap mask: 0 at even width indices, 1 at odd ones."""
    n, c, h, w = shape
    row = (np.arange(w) % 2).astype(bool)
    return np.broadcast_to(row.reshape(1, 1, 1, w), shape)


def spatial_exchange(fa, fb):
    """Swap the two branches at odd width indices; an exact involution.

    Gradients route through the swap: the downstream gradient of an
    exchanged position lands on the branch it was taken from.
    """
    if fa.shape != fb.shape:
        raise ShapeError(f"spatial exchange needs equal shapes, got {fa.shape} vs {fb.shape}")
    mask = exchange_mask(fa.shape)
    return T.masked_swap(fa, fb, mask), T.masked_swap(fb, fa, mask)


def channel_exchange(fa, fb, gamma_a, gamma_b, threshold):
    """Replace channels with |gamma| below `threshold` by the partner's.

    The decision is directional and per channel: fa gives up channel k when
    |gamma_a[k]| < threshold, independently of what fb does. The selection is
    a constant routing decision; gradients follow the selected source.
    """
    gamma_a = np.asarray(gamma_a, dtype=np.float64).reshape(-1)
    gamma_b = np.asarray(gamma_b, dtype=np.float64).reshape(-1)
    c = fa.shape[1]
    if gamma_a.size != c or gamma_b.size != c:
        raise ShapeError(
            f"gamma lengths ({gamma_a.size}, {gamma_b.size}) must equal channel count {c}")
    if fa.shape != fb.shape:
        raise ShapeError(f"channel exchange needs equal shapes, got {fa.shape} vs {fb.shape}")
    mask_a = (np.abs(gamma_a) < threshold).reshape(1, c, 1, 1)
    mask_b = (np.abs(gamma_b) < threshold).reshape(1, c, 1, 1)
    return T.masked_swap(fa, fb, mask_a), T.masked_swap(fb, fa, mask_b)


def mixed_exchange(stage, fa, fb, gamma_a, gamma_b, config):
    """Per-stage exchange: channel first (where configured), then spatial."""
    if not 1 <= stage <= 5:
        raise ValueError(f"stage must be in 1..5, got {stage}")
    if stage in config.channel_stages:
        fa, fb = channel_exchange(fa, fb, gamma_a, gamma_b, config.channel_threshold)
    if stage in config.spatial_stages:
        fa, fb = spatial_exchange(fa, fb)
    return fa, fb
