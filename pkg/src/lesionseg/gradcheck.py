"""Named finite-difference checks over every differentiable operation.

Each check builds double-precision inputs, compares the tape gradient
against central differences, and returns a GradCheckReport. Setting the
environment variable ``LESIONSEG_FAULT_INJECT`` to a check name corrupts
that check's analytic path (a negative control for the harness itself).
"""

from __future__ import annotations

import os

import numpy as np

from . import tensor as T
from .blocks import ConvLSTMCell, ConvLSTMState, ParameterStore
from .metrics import dice_loss
from .tensor import ConvParams, GradCheckReport, Tensor, grad_check


def _rand(rng, shape):
    return Tensor(rng.normal(0.0, 1.0, size=shape).astype(np.float64))


def _weighted_sum(y, weights):
    """Scalar projection so the check exercises non-uniform output grads."""
    return T.reduce_sum(y * weights)


def _maybe_corrupt(name, x):
    if os.environ.get("LESIONSEG_FAULT_INJECT") == name:
        # poison the analytic gradient only, leaving forward values intact
        original = T.backward

        def corrupted(loss, tape=None):
            original(loss, tape)
            if x.grad is not None:
                x.grad += 0.5
        return corrupted
    return None


def _run(name, f, x, epsilon, tolerance):
    corrupt = _maybe_corrupt(name, x)
    if corrupt is None:
        return grad_check(f, x, epsilon=epsilon, tolerance=tolerance, name=name)
    saved = T.backward
    T.backward = corrupt
    try:
        return grad_check(f, x, epsilon=epsilon, tolerance=tolerance, name=name)
    finally:
        T.backward = saved


def _conv_checks(rng, epsilon, tolerance):
    reports = []
    geometries = [
        ("conv2d_3x3_s1_d1", 3, 1, 1, 1),
        ("conv2d_3x3_s2_d1", 3, 2, 1, 1),
        ("conv2d_1x1_s1_d1", 1, 1, 1, 0),
        ("conv2d_1x1_s2_d1", 1, 2, 1, 0),
        ("conv2d_3x3_s1_d2", 3, 1, 2, 2),
        ("conv2d_3x3_s1_d6", 3, 1, 6, 6),  # pyramid-rate geometry at desk scale
    ]
    for name, k, stride, dil, pad in geometries:
        h = max(6, dil * (k - 1) + 2)
        x = _rand(rng, (2, 3, h, h))
        kernel = _rand(rng, (2, 3, k, k))
        bias = _rand(rng, (1, 2, 1, 1))
        out_h = T.conv_output_size(h, k, stride, dil, pad)
        weights = _rand(rng, (2, 2, out_h, out_h))

        def f_x(t, kernel=kernel, bias=bias, stride=stride, dil=dil, pad=pad,
                weights=weights):
            params = ConvParams(kernel=kernel, bias=bias, stride=(stride, stride),
                                dilation=(dil, dil), padding=(pad, pad))
            return _weighted_sum(T.conv2d(t, params), weights)

        reports.append(_run(name + "_wrt_input", f_x, x, epsilon, tolerance))

        def f_k(t, x=x, bias=bias, stride=stride, dil=dil, pad=pad,
                weights=weights):
            params = ConvParams(kernel=t, bias=bias, stride=(stride, stride),
                                dilation=(dil, dil), padding=(pad, pad))
            return _weighted_sum(T.conv2d(x, params), weights)

        reports.append(_run(name + "_wrt_kernel", f_k, kernel, epsilon, tolerance))

        def f_b(t, x=x, kernel=kernel, stride=stride, dil=dil, pad=pad,
                weights=weights):
            params = ConvParams(kernel=kernel, bias=t, stride=(stride, stride),
                                dilation=(dil, dil), padding=(pad, pad))
            return _weighted_sum(T.conv2d(x, params), weights)

        reports.append(_run(name + "_wrt_bias", f_b, bias, epsilon, tolerance))
    return reports


def _batch_norm_checks(rng, epsilon, tolerance):
    reports = []
    x = _rand(rng, (3, 2, 4, 4))
    gamma = Tensor(rng.uniform(0.5, 1.5, size=(1, 2, 1, 1)))
    beta = _rand(rng, (1, 2, 1, 1))
    weights = _rand(rng, (3, 2, 4, 4))
    for mode in ("train", "eval"):
        rm = rng.normal(0.0, 0.2, size=2)
        rv = rng.uniform(0.5, 1.5, size=2)

        def f_x(t, mode=mode, rm=rm, rv=rv):
            return _weighted_sum(
                T.batch_norm(t, gamma, beta, rm.copy(), rv.copy(), mode), weights)

        reports.append(_run(f"batch_norm_{mode}_wrt_input", f_x, x, epsilon, tolerance))

        def f_g(t, mode=mode, rm=rm, rv=rv):
            return _weighted_sum(
                T.batch_norm(x, t, beta, rm.copy(), rv.copy(), mode), weights)

        reports.append(_run(f"batch_norm_{mode}_wrt_gamma", f_g, gamma, epsilon, tolerance))

        def f_b(t, mode=mode, rm=rm, rv=rv):
            return _weighted_sum(
                T.batch_norm(x, gamma, t, rm.copy(), rv.copy(), mode), weights)

        reports.append(_run(f"batch_norm_{mode}_wrt_beta", f_b, beta, epsilon, tolerance))
    return reports


def _elementwise_checks(rng, epsilon, tolerance):
    reports = []
    shape = (2, 2, 3, 3)
    weights = _rand(rng, shape)
    x = _rand(rng, shape)
    reports.append(_run("relu", lambda t: _weighted_sum(T.relu(t), weights),
                        # keep values away from the ReLU kink
                        Tensor(np.where(np.abs(x.data) < 0.1, 0.5, x.data)),
                        epsilon, tolerance))
    reports.append(_run("sigmoid", lambda t: _weighted_sum(T.sigmoid(t), weights),
                        _rand(rng, shape), epsilon, tolerance))
    reports.append(_run("tanh", lambda t: _weighted_sum(T.tanh(t), weights),
                        _rand(rng, shape), epsilon, tolerance))
    other = _rand(rng, shape)
    reports.append(_run("add", lambda t: _weighted_sum(T.add(t, other), weights),
                        _rand(rng, shape), epsilon, tolerance))
    reports.append(_run("multiply", lambda t: _weighted_sum(T.mul(t, other), weights),
                        _rand(rng, shape), epsilon, tolerance))
    denom = Tensor(rng.uniform(0.5, 2.0, size=shape))
    reports.append(_run("divide", lambda t: _weighted_sum(T.div(t, denom), weights),
                        _rand(rng, shape), epsilon, tolerance))
    return reports


def _structure_checks(rng, epsilon, tolerance):
    reports = []
    x = _rand(rng, (2, 2, 3, 3))
    other = _rand(rng, (2, 3, 3, 3))
    weights = _rand(rng, (2, 5, 3, 3))
    reports.append(_run(
        "concat_channels",
        lambda t: _weighted_sum(T.concat_channels([t, other]), weights),
        x, epsilon, tolerance))
    up_w = _rand(rng, (2, 2, 6, 6))
    reports.append(_run(
        "upsample_bilinear",
        lambda t: _weighted_sum(T.upsample_bilinear(t, 2), up_w),
        _rand(rng, (2, 2, 3, 3)), epsilon, tolerance))
    pool_w = _rand(rng, (2, 2, 1, 1))
    reports.append(_run(
        "global_avg_pool",
        lambda t: _weighted_sum(T.global_avg_pool(t), pool_w),
        _rand(rng, (2, 2, 4, 4)), epsilon, tolerance))
    bcast_w = _rand(rng, (2, 2, 4, 4))
    reports.append(_run(
        "broadcast_spatial",
        lambda t: _weighted_sum(T.broadcast_spatial(t, (4, 4)), bcast_w),
        _rand(rng, (2, 2, 1, 1)), epsilon, tolerance))
    return reports


def _dice_loss_check(rng, epsilon, tolerance):
    target = Tensor((rng.uniform(size=(2, 1, 4, 4)) > 0.6).astype(np.float64))

    def f(t):
        return dice_loss(T.sigmoid(t), target)

    return [_run("dice_loss", f, _rand(rng, (2, 1, 4, 4)), epsilon, tolerance)]


def _convlstm_checks(rng, epsilon, tolerance):
    """Full step check against every gate kernel and bias."""
    store = ParameterStore()
    cell = ConvLSTMCell(store, "check.lstm", c_in=2, c_hidden=2)
    for _, p in store:
        p.data = rng.normal(0.0, 0.4, size=p.shape)
        p.requires_grad = True
    x = _rand(rng, (1, 2, 4, 4))
    h0 = _rand(rng, (1, 2, 4, 4))
    c0 = _rand(rng, (1, 2, 4, 4))
    weights = _rand(rng, (1, 2, 4, 4))

    reports = []

    def step_loss():
        state = ConvLSTMState(h=Tensor(h0.data.copy()), c=Tensor(c0.data.copy()))
        h_new, _ = cell.step(Tensor(x.data.copy()), state)
        return _weighted_sum(h_new, weights)

    for gate in cell.GATES:
        for kind, table in (("kernel", cell.kernels), ("bias", cell.biases)):
            def f(t, gate=gate, table=table):
                saved = table[gate]
                table[gate] = t
                try:
                    return step_loss()
                finally:
                    table[gate] = saved

            target = Tensor(table[gate].data.copy())
            reports.append(_run(f"convlstm_{gate}_{kind}", f, target,
                                epsilon, tolerance))

    def f_x(t):
        state = ConvLSTMState(h=Tensor(h0.data.copy()), c=Tensor(c0.data.copy()))
        h_new, _ = cell.step(t, state)
        return _weighted_sum(h_new, weights)

    reports.append(_run("convlstm_wrt_input", f_x, Tensor(x.data.copy()),
                        epsilon, tolerance))
    return reports


_GROUPS = {
    "conv2d": _conv_checks,
    "batch_norm": _batch_norm_checks,
    "elementwise": _elementwise_checks,
    "structure": _structure_checks,
    "dice_loss": _dice_loss_check,
    "convlstm": _convlstm_checks,
}


def available_ops():
    return sorted(_GROUPS)


def run_checks(ops="all", seed=0, epsilon=1e-5, tolerance=1e-6):
    """Run the requested groups; returns the list of GradCheckReport."""
    if ops == "all":
        names = list(_GROUPS)
    else:
        names = [n.strip() for n in ops.split(",") if n.strip()]
        unknown = [n for n in names if n not in _GROUPS]
        if unknown:
            raise ValueError(
                f"unknown ops {unknown}; available: {available_ops()}"
            )
    reports: list[GradCheckReport] = []
    for name in names:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        reports.extend(_GROUPS[name](rng, epsilon, tolerance))
    return reports
