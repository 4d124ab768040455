"""Layer building blocks: module registry, convolution, per-modality batch norm."""

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError


class Module:
    """Minimal module base: tracks Parameters, sub-modules and buffers.

    Attribute assignment registers children automatically (including lists
    of modules). Buffers are non-trainable state (BN running statistics)
    that still belongs in checkpoints.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self._children[key] = list(value)
        object.__setattr__(self, key, value)

    def register_buffer(self, key, array):
        self._buffers[key] = np.asarray(array, dtype=np.float64)
        object.__setattr__(self, key, self._buffers[key])

    def named_parameters(self, prefix=""):
        for key, p in self._params.items():
            yield (f"{prefix}{key}", p)
        for key, child in self._children.items():
            if isinstance(child, list):
                for i, sub in enumerate(child):
                    yield from sub.named_parameters(f"{prefix}{key}.{i}.")
            else:
                yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key in self._buffers:
            yield (f"{prefix}{key}", self._buffers[key])
        for key, child in self._children.items():
            if isinstance(child, list):
                for i, sub in enumerate(child):
                    yield from sub.named_buffers(f"{prefix}{key}.{i}.")
            else:
                yield from child.named_buffers(f"{prefix}{key}.")

    def set_buffer(self, name, value):
        """Assign a buffer by dotted name (in-place, keeps identity)."""
        head, _, rest = name.partition(".")
        if rest:
            child = self._children[head]
            if isinstance(child, list):
                idx, _, rest2 = rest.partition(".")
                child[int(idx)].set_buffer(rest2, value)
            else:
                child.set_buffer(rest, value)
        else:
            buf = self._buffers[head]
            if buf.shape != value.shape:
                raise ShapeError(f"buffer {name} has shape {buf.shape}, got {value.shape}")
            buf[...] = value

    def assign_parameter_names(self, prefix=""):
        """Stamp unique dotted paths onto every Parameter; call once per model."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self):
        """(params, buffers) as name -> array copies, for checkpointing."""
        params = {name: p.data.copy() for name, p in self.named_parameters()}
        buffers = {name: b.copy() for name, b in self.named_buffers()}
        return params, buffers

    def load_state_arrays(self, params, buffers):
        own = dict(self.named_parameters())
        if set(own) != set(params):
            missing = sorted(set(own) ^ set(params))
            raise ValueError(f"parameter name mismatch on load: {missing[:6]}")
        for name, p in own.items():
            if p.data.shape != params[name].shape:
                raise ShapeError(
                    f"parameter {name} has shape {p.data.shape}, checkpoint has {params[name].shape}")
            p.data[...] = params[name]
        own_b = dict(self.named_buffers())
        if set(own_b) != set(buffers):
            missing = sorted(set(own_b) ^ set(buffers))
            raise ValueError(f"buffer name mismatch on load: {missing[:6]}")
        for name, b in own_b.items():
            self.set_buffer(name, buffers[name])

    def buffer_snapshot(self):
        return {name: b.copy() for name, b in self.named_buffers()}

    def restore_buffers(self, snapshot):
        for name, value in snapshot.items():
            self.set_buffer(name, value)


def kaiming_uniform(rng, shape):
    """Fan-in Kaiming-uniform init for conv weights (ReLU gain)."""
    fan_in = shape[1] * shape[2] * shape[3]
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ValueError(f"conv needs positive channel counts, got {in_channels}->{out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros((1, out_channels, 1, 1))) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Batch normalization with running statistics (one modality slot).

    Train mode normalizes by batch statistics and updates the running
    mean/variance by EMA (momentum 0.1, biased variance); eval mode uses the
    running statistics. The epsilon stabilizer is added to the variance.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones((1, channels, 1, 1)))
        self.beta = Parameter(np.zeros((1, channels, 1, 1)))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x, training, update_stats=True):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"batch norm over {self.channels} channels got input with {c}")
        if training:
            if n * h * w == 1:
                raise ShapeError("batch norm in train mode needs n*h*w > 1 (zero variance)")
            mean = T.tmean(x, (0, 2, 3))
            centered = T.sub(x, mean)
            var = T.tmean(T.mul(centered, centered), (0, 2, 3))
            xn = T.div(centered, T.sqrt(var + self.eps))
            if update_stats:
                m = self.momentum
                self.running_mean += m * (mean.data.reshape(-1) - self.running_mean)
                self.running_var += m * (var.data.reshape(-1) - self.running_var)
        else:
            rm = T.Tensor(self.running_mean.reshape(1, c, 1, 1).copy())
            inv = T.Tensor((1.0 / np.sqrt(self.running_var + self.eps)).reshape(1, c, 1, 1))
            xn = T.mul(T.sub(x, rm), inv)
        return T.add(T.mul(xn, self.gamma), self.beta)


class ModalityBatchNorm(Module):
    """One batch-norm slot per modality over a shared feature map.

    The slots are disjoint storage: a forward tagged with one modality never
    touches the other's affine parameters or running statistics.
    """

    MODALITIES = ("eo", "ir")

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.bn_eo = BatchNorm2d(channels, eps=eps, momentum=momentum)
        self.bn_ir = BatchNorm2d(channels, eps=eps, momentum=momentum)

    def slot(self, modality):
        if modality not in self.MODALITIES:
            raise ValueError(f"unknown modality {modality!r}, expected one of {self.MODALITIES}")
        return self.bn_eo if modality == "eo" else self.bn_ir

    def __call__(self, x, modality, training, update_stats=True):
        return self.slot(modality)(x, training, update_stats=update_stats)

    def gamma_values(self, modality):
        """Current scale vector of the given slot, as a flat copy."""
        return self.slot(modality).gamma.data.reshape(-1).copy()


class ProjectionHead(Module):
    """Two 1x1 convs mapping branch features into the contrastive space."""

    def __init__(self, in_channels, embed_dim, rng):
        super().__init__()
        self.conv1 = Conv2d(in_channels, embed_dim, 1, rng)
        self.conv2 = Conv2d(embed_dim, embed_dim, 1, rng)

    def __call__(self, x):
        return self.conv2(T.relu(self.conv1(x)))
