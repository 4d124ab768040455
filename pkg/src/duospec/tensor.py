"""Dense NCHW tensors with reverse-mode autodiff and a finite-difference oracle.

Everything downstream (layers, the dual-branch nets, the losses) is expressed
through the primitives in this module. Conventions:

- tensors are strictly rank-4 ``(batch, channel, height, width)``; scalars are
  ``1x1x1x1`` and per-channel vectors ``1xCx1x1``
- storage is float64 (gradient checks need the headroom; the models are small
  enough that training in double costs nothing)
- the graph is a dynamic tape: each op records its parents and a backward
  closure, and ``backward()`` walks the tape in reverse topological order;
  the tape is rebuilt on every forward pass
- repeated ``backward()`` calls accumulate into ``.grad`` (reset with
  ``zero_grads``); a parameter used on several paths receives the summed
  gradient automatically
- graph recording and backward are single-threaded per graph; tensors are
  plain values and safe to hand between threads. The numpy kernels may use
  BLAS threads internally and are bitwise deterministic for a fixed thread
  count (the CLI pins it to DUOSPEC_THREADS, default 1)
"""

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an op's contract."""


_grad_enabled = True
_trace_sets = []  # active Parameter-read traces, innermost last
_op_count = 0  # monotone count of op outputs ever built (cost accounting)

# When true, every op output is checked for NaN/Inf. Off by default for
# training speed; the test suite and the gradcheck CLI switch it on.
CHECK_FINITE = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher forwards, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def trace_parameter_reads():
    """Collect every Parameter consumed by any op inside the block.

    Used to assert subgraph isolation (e.g. an IR-only forward never touches
    EO-only or fusion parameters). Tracing works with or without grad mode.
    """
    trace = set()
    _trace_sets.append(trace)
    try:
        yield trace
    finally:
        _trace_sets.remove(trace)


class Tensor:
    """A rank-4 float64 array, optionally attached to the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 NCHW, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A constant copy that shares no tape history."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = "param" if isinstance(self, Parameter) else "tensor"
        return f"<{tag} {self.shape} grad={'yes' if self.requires_grad else 'no'}>"

    # arithmetic sugar; scalars are promoted to 1x1x1x1 constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None):
        return tsum(self, axes)

    def mean(self, axes=None):
        return tmean(self, axes)


class Parameter(Tensor):
    """A named, trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name=None, trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable


def scalar(value):
    """A 1x1x1x1 constant."""
    return Tensor(np.full((1, 1, 1, 1), float(value)))


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return scalar(x)
    return Tensor(np.asarray(x))


def _accum(t, g):
    """Accumulate `g` (broadcastable) into t.grad, allocating on first use."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` along the broadcast axes."""
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def op_count():
    """Monotone counter of op outputs built so far; diff around a forward
    pass to compare computational footprints of two code paths."""
    return _op_count


def _node(data, parents, backward_fn):
    """Create an op output, recording it on the tape when grads are enabled."""
    global _op_count
    _op_count += 1
    for trace in _trace_sets:
        trace.update(p for p in parents if isinstance(p, Parameter))
    out = Tensor(data)
    if CHECK_FINITE and not np.isfinite(out.data).all():
        raise FloatingPointError("op produced NaN/Inf")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Populate ``.grad`` for everything reachable from the scalar `loss`.

    Gradients accumulate across calls; shared parameters used on several
    paths receive the sum over all use sites.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a 1x1x1x1 scalar loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to a recorded gradient graph")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    # each call contributes exactly one dL/dp to every leaf: intermediate
    # accumulators are cleared so stale values cannot be re-propagated,
    # while leaf (parameter/input) gradients keep accumulating across calls
    for node in topo:
        if node._backward is not None:
            node.grad = None
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    def back(out):
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    return _node(a.data + b.data, (a, b), back)


def sub(a, b):
    def back(out):
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    return _node(a.data - b.data, (a, b), back)


def mul(a, b):
    def back(out):
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    return _node(a.data * b.data, (a, b), back)


def div(a, b):
    def back(out):
        _accum(a, _unbroadcast(out.grad / b.data, a.shape))
        _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), back)


def neg(a):
    def back(out):
        _accum(a, -out.grad)

    return _node(-a.data, (a,), back)


def relu(a):
    mask = a.data > 0

    def back(out):
        _accum(a, out.grad * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), back)


def tanh(a):
    t = np.tanh(a.data)

    def back(out):
        _accum(a, out.grad * (1.0 - t * t))

    return _node(t, (a,), back)


def sigmoid(a):
    # split by sign so exp never overflows
    s = np.where(a.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def back(out):
        _accum(a, out.grad * s * (1.0 - s))

    return _node(s, (a,), back)


def exp(a):
    e = np.exp(a.data)

    def back(out):
        _accum(a, out.grad * e)

    return _node(e, (a,), back)


def log(a):
    """Natural log; domain x > 0."""

    def back(out):
        _accum(a, out.grad / a.data)

    return _node(np.log(a.data), (a,), back)


def sqrt(a):
    """Square root; domain x >= 0 (gradient needs x > 0)."""
    r = np.sqrt(a.data)

    def back(out):
        _accum(a, out.grad * 0.5 / r)

    return _node(r, (a,), back)


# ---------------------------------------------------------------------------
# reductions (always keep rank 4)
# ---------------------------------------------------------------------------

def tsum(a, axes=None):
    if axes is None:
        axes = (0, 1, 2, 3)
    elif isinstance(axes, int):
        axes = (axes,)

    def back(out):
        _accum(a, out.grad)  # broadcast over the reduced axes

    return _node(a.data.sum(axis=tuple(axes), keepdims=True), (a,), back)


def tmean(a, axes=None):
    if axes is None:
        axes = (0, 1, 2, 3)
    elif isinstance(axes, int):
        axes = (axes,)
    count = 1
    for ax in axes:
        count *= a.shape[ax]

    def back(out):
        _accum(a, out.grad / count)

    return _node(a.data.mean(axis=tuple(axes), keepdims=True), (a,), back)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def concat_channels(tensors):
    tensors = list(tensors)
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels needs matching n/h/w, got {tensors[0].shape} vs {t.shape}")
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def back(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, out.grad[:, lo:hi])

    return _node(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), back)


def concat_width(tensors):
    tensors = list(tensors)
    n, c, h, _ = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[1], t.shape[2]) != (n, c, h):
            raise ShapeError(
                f"concat_width needs matching n/c/h, got {tensors[0].shape} vs {t.shape}")
    offsets = np.cumsum([0] + [t.shape[3] for t in tensors])

    def back(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, out.grad[:, :, :, lo:hi])

    return _node(np.concatenate([t.data for t in tensors], axis=3), tuple(tensors), back)


def slice_channels(a, start, stop):
    def back(out):
        g = np.zeros_like(a.data)
        g[:, start:stop] = out.grad
        _accum(a, g)

    return _node(a.data[:, start:stop].copy(), (a,), back)


def slice_width(a, start, stop, step=1):
    def back(out):
        g = np.zeros_like(a.data)
        g[:, :, :, start:stop:step] = out.grad
        _accum(a, g)

    return _node(a.data[:, :, :, start:stop:step].copy(), (a,), back)


def upsample_nearest(a, factor):
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = a.shape

    def back(out):
        g = out.grad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        _accum(a, g)

    return _node(np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3), (a,), back)


def downsample(a):
    """2x2 average pooling with stride 2."""
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even extents, got {h}x{w}")

    def back(out):
        g = np.repeat(np.repeat(out.grad, 2, axis=2), 2, axis=3) / 4.0
        _accum(a, g)

    return _node(a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), (a,), back)


def masked_swap(a, b, mask):
    """Where `mask` is true take `b`, else `a`; values are exact copies.

    `mask` is a boolean array broadcastable to the (equal) shapes of a and b.
    The routing decision is a constant; gradients follow the selected source.
    """
    if a.shape != b.shape:
        raise ShapeError(f"masked_swap needs equal shapes, got {a.shape} vs {b.shape}")
    m = np.broadcast_to(mask, a.shape)

    def back(out):
        _accum(a, np.where(m, 0.0, out.grad))
        _accum(b, np.where(m, out.grad, 0.0))

    return _node(np.where(m, b.data, a.data), (a, b), back)


def take_pixels(a, n_idx, h_idx, w_idx):
    """Gather pixel vectors: (n,c,h,w) -> (1, c, 1, K) for K index triples.

    Backward scatter-adds, so repeated indices accumulate correctly.
    """
    n_idx = np.asarray(n_idx, dtype=np.intp)
    h_idx = np.asarray(h_idx, dtype=np.intp)
    w_idx = np.asarray(w_idx, dtype=np.intp)
    c = a.shape[1]
    got = a.data[n_idx, :, h_idx, w_idx]  # (K, c)

    def back(out):
        g = np.zeros_like(a.data)
        np.add.at(
            g,
            (n_idx[:, None], np.arange(c)[None, :], h_idx[:, None], w_idx[:, None]),
            out.grad[0, :, 0, :].T,
        )
        _accum(a, g)

    return _node(got.T.reshape(1, c, 1, -1), (a,), back)


def pair_dot(a, b):
    """Channel-wise dot products between pixel columns.

    a: (1, c, 1, Ka), b: (1, c, 1, Kb) -> (1, 1, Ka, Kb) of inner products.
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"pair_dot channel mismatch: {a.shape} vs {b.shape}")
    av = a.data[0, :, 0, :]  # (c, Ka)
    bv = b.data[0, :, 0, :]  # (c, Kb)

    def back(out):
        g = out.grad[0, 0]  # (Ka, Kb)
        _accum(a, (bv @ g.T).reshape(a.shape))
        _accum(b, (av @ g).reshape(b.shape))

    return _node((av.T @ bv).reshape(1, 1, av.shape[1], bv.shape[1]), (a, b), back)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution (cross-correlation) over NCHW with a square kernel.

    weight: (c_out, c_in, k, k); output spatial extent is
    floor((h + 2*padding - k) / stride) + 1. Direct computation, one
    tensordot per kernel tap; deterministic for a fixed thread count.
    """
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv weight must be (c_out, c_in, k, k), got {weight.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    n, ci, h, w = x.shape
    co, ci_w, k, _ = weight.shape
    if ci != ci_w:
        raise ShapeError(f"conv input has {ci} channels but weight expects {ci_w}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv output would be {oh}x{ow} for input {h}x{w}, kernel {k}")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ShapeError(f"conv bias must be (1, {co}, 1, 1), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, co, oh, ow))
    for ki in range(k):
        for kj in range(k):
            xs = xp[:, :, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride]
            out += np.tensordot(xs, weight.data[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(o):
        g = o.grad
        if weight.requires_grad:
            dw = np.zeros_like(weight.data)
            for ki in range(k):
                for kj in range(k):
                    xs = xp[:, :, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride]
                    dw[:, :, ki, kj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
            _accum(weight, dw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride] += \
                        np.tensordot(g, weight.data[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
            if padding:
                _accum(x, gxp[:, :, padding:padding + h, padding:padding + w])
            else:
                _accum(x, gxp)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1))

    return _node(out, parents, back)


# ---------------------------------------------------------------------------
# channel softmax
# ---------------------------------------------------------------------------

def softmax_channel(a):
    """Per-pixel softmax over channels, stabilized by max subtraction."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(out):
        dot = (out.grad * p).sum(axis=1, keepdims=True)
        _accum(a, p * (out.grad - dot))

    return _node(p, (a,), back)


def log_softmax_channel(a):
    """Per-pixel log-softmax over channels, stabilized by max subtraction."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(ls)

    def back(out):
        _accum(a, out.grad - p * out.grad.sum(axis=1, keepdims=True))

    return _node(ls, (a,), back)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_gradient(f, params, eps=1e-5):
    """Central-difference gradients of a scalar function of `params`.

    `f` is a zero-argument callable returning a float; it must be a
    deterministic function of the current parameter values. Entries are
    perturbed in place and restored. Returns one array per parameter.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_rel_error(analytic, numeric, atol=1e-8):
    """Worst per-tensor relative error between two gradient collections.

    Each pair is compared in the sup norm, normalized by the larger of the
    two tensors' own sup norms. Deviations below `atol` count as exact:
    central differences carry ~1e-11 roundoff noise even where the true
    gradient is zero (a structurally dead parameter would otherwise divide
    noise by the floor).
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        gap = np.abs(a - n).max(initial=0.0)
        if gap <= atol:
            continue
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), atol)
        worst = max(worst, float(gap / scale))
    return worst


def check_gradients(build_loss, params, eps=1e-5):
    """Max relative error between backward() and the finite-difference oracle.

    `build_loss` runs a fresh forward pass and returns the scalar loss
    Tensor; it must be deterministic (restore any state it mutates).
    """
    zero_grads(params)
    loss = build_loss()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = finite_diff_gradient(lambda: build_loss().item(), params, eps=eps)
    return max_rel_error(analytic, numeric)
