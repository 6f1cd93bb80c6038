"""Reusable layers: Conv-BN-ReLU blocks, dilated pyramid branches and the
ConvLSTM cell, plus the named parameter store they register into.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvParams, ShapeError, Tensor


class ParameterStore:
    """Named, ordered collection of trainable tensors and state buffers.

    Buffers (batch-norm running statistics) are plain float32 arrays that
    are checkpointed but never optimized.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def register(self, name, shape):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def register_buffer(self, name, array):
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(array, dtype=np.float32)
        return self.buffers[name]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def total_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def __iter__(self):
        return iter(self.params.items())


class ConvBlock:
    """Convolution followed by batch normalization and optional ReLU.

    The convolution carries no bias (the BN shift covers it). Padding
    defaults to dilation*(k-1)/2 so 3x3 blocks preserve spatial size.
    With ``normalize=False`` the block is a plain biased convolution with
    no batch norm, used for the output head where standardizing the
    logits would be harmful.
    """

    def __init__(self, store, name, c_in, c_out, k=3, stride=1, dilation=1,
                 padding=None, activation="relu", normalize=True):
        if k % 2 == 0:
            raise ShapeError(f"{name}: even kernel size {k} is not supported")
        if activation not in ("relu", "none"):
            raise ValueError(f"{name}: activation must be 'relu' or 'none'")
        if padding is None:
            padding = dilation * (k - 1) // 2
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = store.register(f"{name}.kernel", (c_out, c_in, k, k))
        self.normalize = normalize
        if normalize:
            self.bias = None
            self.gamma = store.register(f"{name}.gamma", (1, c_out, 1, 1))
            self.beta = store.register(f"{name}.beta", (1, c_out, 1, 1))
            self.running_mean = store.register_buffer(
                f"{name}.running_mean", np.zeros(c_out))
            self.running_var = store.register_buffer(
                f"{name}.running_var", np.ones(c_out))
        else:
            self.bias = store.register(f"{name}.bias", (1, c_out, 1, 1))
        self.stride = (stride, stride)
        self.dilation = (dilation, dilation)
        self.padding = (padding, padding)
        self.activation = activation

    def conv_params(self):
        return ConvParams(
            kernel=self.kernel,
            bias=self.bias,
            stride=self.stride,
            dilation=self.dilation,
            padding=self.padding,
        )

    def __call__(self, x, mode):
        y = T.conv2d(x, self.conv_params())
        if self.normalize:
            y = T.batch_norm(y, self.gamma, self.beta, self.running_mean,
                             self.running_var, mode)
        if self.activation == "relu":
            y = T.relu(y)
        return y


def aspp_branch(x, dilation, block, mode):
    """One parallel dilated-convolution branch; preserves spatial size."""
    k = block.kernel.shape[2]
    expected_pad = dilation * (k - 1) // 2
    if block.dilation != (dilation, dilation) or block.padding != (expected_pad, expected_pad):
        raise ShapeError(
            f"{block.name}: branch with dilation {dilation} needs padding "
            f"{expected_pad}, block has dilation {block.dilation} padding {block.padding}"
        )
    return block(x, mode)


@dataclass
class ConvLSTMState:
    """Hidden and cell maps of one ConvLSTM cell; identical shapes."""

    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(
                f"ConvLSTM state shapes differ: h {self.h.shape} vs c {self.c.shape}"
            )


class ConvLSTMCell:
    """ConvLSTM with four 3x3 gate convolutions over concat([x, h]).

    Standard peephole-free gates:
        i = sigmoid(Wi * [x, h] + bi)      f = sigmoid(Wf * [x, h] + bf)
        o = sigmoid(Wo * [x, h] + bo)      g = tanh(Wg * [x, h] + bg)
        c' = f . c + i . g                 h' = o . tanh(c')
    """

    GATES = ("input", "forget", "output", "candidate")

    def __init__(self, store, name, c_in, c_hidden, k=3):
        self.name = name
        self.c_in = c_in
        self.c_hidden = c_hidden
        self.kernels = {}
        self.biases = {}
        for gate in self.GATES:
            self.kernels[gate] = store.register(
                f"{name}.{gate}.kernel", (c_hidden, c_in + c_hidden, k, k))
            self.biases[gate] = store.register(f"{name}.{gate}.bias", (1, c_hidden, 1, 1))
        self.padding = (k - 1) // 2

    def zero_state(self, n, h, w, dtype=np.float32):
        z = np.zeros((n, self.c_hidden, h, w), dtype=dtype)
        return ConvLSTMState(h=Tensor(z.copy()), c=Tensor(z.copy()))

    def _gate(self, gate, xh):
        params = ConvParams(
            kernel=self.kernels[gate],
            bias=self.biases[gate],
            stride=(1, 1),
            dilation=(1, 1),
            padding=(self.padding, self.padding),
        )
        return T.conv2d(xh, params)

    def step(self, x, state):
        if x.shape[2:] != state.h.shape[2:] or x.shape[0] != state.h.shape[0]:
            raise ShapeError(
                f"{self.name}: input shape {x.shape} incompatible with state "
                f"shape {state.h.shape}"
            )
        xh = T.concat_channels([x, state.h])
        i = T.sigmoid(self._gate("input", xh))
        f = T.sigmoid(self._gate("forget", xh))
        o = T.sigmoid(self._gate("output", xh))
        g = T.tanh(self._gate("candidate", xh))
        c_new = f * state.c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, ConvLSTMState(h=h_new, c=c_new)


def convlstm_step(cell, x, state):
    """Functional view of :meth:`ConvLSTMCell.step`."""
    return cell.step(x, state)
