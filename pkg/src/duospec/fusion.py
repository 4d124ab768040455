"""Gated fusion of the two decoder outputs into one feature map.

Each branch (and their sum) proposes a tanh candidate through its own 3x3
conv; three sigmoid gates computed from the concatenation of all three
inputs decide how much each candidate contributes:

    h1 = tanh(W1 * f_ir)          z1 = sigmoid(Wz1 * [f_ir, f_eo, f_ir+f_eo])
    h2 = tanh(W2 * f_eo)          z2 = sigmoid(Wz2 * [...])
    h3 = tanh(W3 * (f_ir+f_eo))   z3 = sigmoid(Wz3 * [...])
    fused = z1*h1 + z2*h2 + z3*h3

Candidate convs are 3x3 (padding 1), gate convs 1x1; all preserve the
channel count. The unit is omitted entirely on the IR-only inference path.
"""

from . import tensor as T
from .layers import Conv2d, Module
from .tensor import ShapeError


class GatedFusion(Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.channels = channels
        self.cand_a = Conv2d(channels, channels, 3, rng, padding=1)
        self.cand_b = Conv2d(channels, channels, 3, rng, padding=1)
        self.cand_sum = Conv2d(channels, channels, 3, rng, padding=1)
        self.gate_a = Conv2d(3 * channels, channels, 1, rng)
        self.gate_b = Conv2d(3 * channels, channels, 1, rng)
        self.gate_sum = Conv2d(3 * channels, channels, 1, rng)

    def __call__(self, fa, fb, force_gates=None):
        """Fuse two same-shape feature maps.

        Returns (fused, gates, candidates) with the three gate and candidate
        maps exposed for inspection. `force_gates` overrides the three gate
        activations with constants (test harness hook for checking that the
        gates fully select).
        """
        if fa.shape != fb.shape:
            raise ShapeError(f"fusion inputs must match, got {fa.shape} vs {fb.shape}")
        both = T.add(fa, fb)
        h1 = T.tanh(self.cand_a(fa))
        h2 = T.tanh(self.cand_b(fb))
        h3 = T.tanh(self.cand_sum(both))
        stacked = T.concat_channels([fa, fb, both])
        if force_gates is None:
            z1 = T.sigmoid(self.gate_a(stacked))
            z2 = T.sigmoid(self.gate_b(stacked))
            z3 = T.sigmoid(self.gate_sum(stacked))
        else:
            z1 = T.scalar(force_gates[0])
            z2 = T.scalar(force_gates[1])
            z3 = T.scalar(force_gates[2])
        fused = T.add(T.add(T.mul(z1, h1), T.mul(z2, h2)), T.mul(z3, h3))
        return fused, (z1, z2, z3), (h1, h2, h3)
