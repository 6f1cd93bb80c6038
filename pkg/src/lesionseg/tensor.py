"""Dense 4-D tensors with tape-based reverse-mode differentiation.

Every value in the library is a (batch, channel, height, width) array of
float32 (training) or float64 (gradient checks). Operations record onto
the active :class:`Tape`; :func:`backward` replays the tape in reverse.

Determinism contract: every reduction (convolution via matmul over a
gathered patch matrix, interpolation via fixed matrices, sums) has a
fixed summation order, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class SerializationError(ValueError):
    """Raised on malformed tensor files."""


# ---------------------------------------------------------------------------
# Tape machinery


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; replayed in reverse by backward()."""

    def __init__(self):
        self.nodes = []

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK = [Tape()]
_GRAD_ENABLED = [True]


def active_tape():
    return _TAPE_STACK[-1]


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """Dense (n, c, h, w) array, optionally gradient-tracked."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if data.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n,c,h,w), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"all dimensions must be >= 1, got shape {data.shape}")
        self.data = np.ascontiguousarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def is_leaf(self):
        return self.node is None

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_as_tensor_like(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor_like(other, self), mul_scalar(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _as_tensor_like(value, ref):
    if isinstance(value, Tensor):
        return value
    arr = np.full(ref.shape, float(value), dtype=ref.dtype)
    return Tensor(arr)


def _make(out_data, inputs, backward_builder):
    """Create an op output; record on the tape only when grads are live.

    backward_builder is a zero-arg callable returning backward_fn so that
    closures over forward intermediates are only built when needed.
    """
    req = _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        node = _Node(out, inputs, backward_builder())
        out.node = node
        active_tape().record(node)
    return out


def backward(loss, tape=None):
    """Propagate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls without zeroing accumulate into leaf grads.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf():
        if loss.requires_grad:
            _accumulate_leaf(loss, grads[id(loss)])
        return
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf():
                _accumulate_leaf(t, gi)
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


def _accumulate_leaf(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.dtype, copy=False)


# ---------------------------------------------------------------------------
# Convolution


@dataclass
class ConvParams:
    """Kernel, optional bias and geometry of one 2-D convolution."""

    kernel: Tensor  # (c_out, c_in, k_h, k_w)
    bias: Tensor | None = None  # (1, c_out, 1, 1)
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)


def conv_output_size(size, k, stride, dilation, pad):
    """Closed-form output length for one spatial axis."""
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, params):
    """2-D convolution (cross-correlation) via patch gather + matmul.

    Each output element is a dot product over a gathered patch row; the
    summation order is the fixed row order of the patch matrix.
    """
    kernel = params.kernel
    co, ci, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if c != ci:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} vs kernel shape {kernel.shape}"
        )
    sh, sw = params.stride
    dh, dw = params.dilation
    ph, pw = params.padding
    oh = conv_output_size(h, kh, sh, dh, ph)
    ow = conv_output_size(w, kw, sw, dw, pw)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d produces empty output {oh}x{ow} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {params.stride}, dilation {params.dilation}, "
            f"padding {params.padding}"
        )
    bias = params.bias
    cols = kernels.im2col(x.data, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow)
    wmat = kernel.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, co, oh, ow)
    if bias is not None:
        if bias.shape[1] != co:
            raise ShapeError(f"conv2d bias channels {bias.shape[1]} != c_out {co}")
        out = out + bias.data.reshape(1, co, 1, 1)

    def build():
        def backward_fn(g):
            gm = g.reshape(n, co, oh * ow)
            gx = gw = gb = None
            if x.requires_grad:
                dcols = np.matmul(wmat.T, gm)
                gx = kernels.col2im(
                    dcols, n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow
                )
            if kernel.requires_grad:
                gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
            return (gx, gw, gb) if bias is not None else (gx, gw)

        return backward_fn

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, inputs, build)


# ---------------------------------------------------------------------------
# Batch normalization


def batch_norm(x, gamma, beta, running_mean, running_var, mode,
               momentum=0.1, epsilon=1e-5):
    """Per-channel normalization over (n, h, w).

    Train mode uses batch statistics (population variance) and updates
    the running buffers in place; eval mode uses the running buffers.
    """
    n, c, h, w = x.shape
    if gamma.shape[1] != c or beta.shape[1] != c or len(running_mean) != c:
        raise ShapeError(
            f"batch_norm channel mismatch: input c={c}, gamma c={gamma.shape[1]}, "
            f"beta c={beta.shape[1]}, running c={len(running_mean)}"
        )
    g = gamma.data.reshape(1, c, 1, 1)
    b = beta.data.reshape(1, c, 1, 1)
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    elif mode == "eval":
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    else:
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    invstd = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = g * xhat + b

    def build():
        m = n * h * w
        ivs = invstd.reshape(1, c, 1, 1)

        def backward_fn(gout):
            gx = ggamma = gbeta = None
            if gamma.requires_grad:
                ggamma = (gout * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
            if beta.requires_grad:
                gbeta = gout.sum(axis=(0, 2, 3)).reshape(beta.shape)
            if x.requires_grad:
                dxhat = gout * g
                if mode == "train":
                    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    gx = ivs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
                else:
                    gx = dxhat * ivs
            return gx, ggamma, gbeta

        return backward_fn

    return _make(out, (x, gamma, beta), build)


# ---------------------------------------------------------------------------
# Elementwise ops


def relu(x):
    """max(x, 0); subgradient at 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def build():
        return lambda g: (g * mask,)

    return _make(out, (x,), build)


def sigmoid(x):
    """Numerically stable logistic; output in (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def build():
        return lambda g: (g * out * (1.0 - out),)

    return _make(out, (x,), build)


def tanh(x):
    out = np.tanh(x.data)

    def build():
        return lambda g: (g * (1.0 - out * out),)

    return _make(out, (x,), build)


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    b = _as_tensor_like(b, a)
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def build():
        return lambda g: (g, g)

    return _make(out, (a, b), build)


def mul(a, b):
    b = _as_tensor_like(b, a)
    _check_same_shape(a, b, "multiply")
    out = a.data * b.data

    def build():
        ad, bd = a.data, b.data
        return lambda g: (g * bd, g * ad)

    return _make(out, (a, b), build)


def div(a, b):
    b = _as_tensor_like(b, a)
    _check_same_shape(a, b, "divide")
    out = a.data / b.data

    def build():
        ad, bd = a.data, b.data
        return lambda g: (g / bd, -g * ad / (bd * bd))

    return _make(out, (a, b), build)


def mul_scalar(x, s):
    s = float(s)
    out = x.data * s

    def build():
        return lambda g: (g * s,)

    return _make(out, (x,), build)


def add_scalar(x, s):
    s = float(s)
    out = x.data + s

    def build():
        return lambda g: (g,)

    return _make(out, (x,), build)


def reduce_sum(x):
    """Sum of all elements as a 1x1x1x1 tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def build():
        return lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),)

    return _make(out, (x,), build)


# ---------------------------------------------------------------------------
# Structure ops


def concat_channels(inputs):
    """Concatenate along the channel axis; order preserved."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0]
    for i, t in enumerate(inputs):
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise ShapeError(
                f"concat_channels input {i} has shape {t.shape}, incompatible "
                f"with input 0 of shape {ref.shape}"
            )
    if len(inputs) == 1:
        x = inputs[0]
        return _make(x.data.copy(), (x,), lambda: (lambda g: (g,)))
    out = np.concatenate([t.data for t in inputs], axis=1)

    def build():
        splits = np.cumsum([t.shape[1] for t in inputs])[:-1]
        return lambda g: tuple(np.split(g, splits, axis=1))

    return _make(out, tuple(inputs), build)


def _interp_matrix(size_in, factor, dtype):
    """Dense (size_in*factor, size_in) bilinear map, align_corners=False."""
    size_out = size_in * factor
    mat = np.zeros((size_out, size_in), dtype=dtype)
    for i in range(size_out):
        s = (i + 0.5) / factor - 0.5
        s = min(max(s, 0.0), float(size_in - 1))
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, size_in - 1)
        t = s - i0
        mat[i, i0] += 1.0 - t
        mat[i, i1] += t
    return mat


def upsample_bilinear(x, factor):
    """Scale h and w by an integer factor; align_corners=False convention.

    Backward is the exact transpose of the interpolation map.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda: (lambda g: (g,)))
    n, c, h, w = x.shape
    ah = _interp_matrix(h, factor, x.dtype)
    aw = _interp_matrix(w, factor, x.dtype)
    out = np.einsum("ij,ncjk,lk->ncil", ah, x.data, aw, optimize=True)

    def build():
        return lambda g: (np.einsum("ij,ncik,kl->ncjl", ah, g, aw, optimize=True),)

    return _make(out, (x,), build)


def global_avg_pool(x):
    """Spatial mean, output shape (n, c, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def build():
        scale = 1.0 / (h * w)
        return lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype) * scale,)

    return _make(out, (x,), build)


def broadcast_spatial(x, size):
    """Tile an (n, c, 1, 1) tensor to (n, c, h, w); backward sums."""
    n, c, h1, w1 = x.shape
    if (h1, w1) != (1, 1):
        raise ShapeError(f"broadcast_spatial expects 1x1 spatial dims, got {x.shape}")
    h, w = size
    out = np.broadcast_to(x.data, (n, c, h, w)).astype(x.dtype)

    def build():
        return lambda g: (g.sum(axis=(2, 3), keepdims=True),)

    return _make(out, (x,), build)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)


def grad_check(f, x, epsilon=1e-5, tolerance=1e-6, name="op"):
    """Central-difference check of d f(x) / d x against the tape.

    ``f`` must be scalar-valued and ``x`` double precision. Reports, never
    raises: relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor")
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        loss = f(x)
        backward(loss, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f(x).item()
            flat[i] = orig - epsilon
            fm = f(x).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max())
    return GradCheckReport(
        name=name,
        max_rel_error=max_rel,
        tolerance=tolerance,
        passed=max_rel < tolerance,
        details={"n_elements": int(flat.size)},
    )


# ---------------------------------------------------------------------------
# Serialization

_MAGIC = b"CLCT"
_VERSION = 1


def save_tensor(path, tensor):
    """Write little-endian binary: magic, u32 version, 4xu32 shape, f32 data."""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    data = data.reshape(data.shape if data.ndim == 4 else (1, 1, 1, -1))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<4I", *data.shape))
        fh.write(data.astype("<f4").tobytes(order="C"))


def load_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise SerializationError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise SerializationError(f"{path}: unsupported version {version}")
        shape = struct.unpack("<4I", fh.read(16))
        count = int(np.prod(shape))
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise SerializationError(f"{path}: truncated data section")
        data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return Tensor(data.astype(np.float32))
