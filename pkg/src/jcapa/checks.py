"""Registered gradient-check suite behind the gradcheck command.

One entry per differentiable building block: every tensor primitive, the
channel and pyramid attention blocks, the fused joint block, the transformer
encoder layer, and the training loss. Each check samples at most 64 parameter
coordinates in total, splitting the budget evenly across its tensors, and
probes non-scalar outputs through a mean-normalized random functional so the
float32 difference noise stays under the absolute floor.
"""

from __future__ import annotations

import numpy as np

from .attention import (cam_forward, init_cam_params, init_joint_params,
                        init_pam_params, joint_forward, pam_forward)
from .gradcheck import CheckResult, check_gradients, probe_weights, weighted_mean
from .network import NetworkConfig, build_model, loss
from .network import _transformer_layer
from .tensor import (Tensor, add, add_bias, add_scalar, avg_pool2d,
                     bilinear_resize, concat, conv2d,
                     cross_entropy_with_softmax, div, layer_norm, matmul, mul,
                     permute, relu, reshape, scale, scale_by, slice_batch,
                     slice_cols, softmax_rows, stack_batch, sum_all, transpose)

BUDGET = 64


def _rand(rng, *dims) -> Tensor:
    return Tensor(rng.standard_normal(dims).astype(np.float32),
                  requires_grad=True)


def _run(name: str, build, params, rng) -> CheckResult:
    per_tensor = max(1, BUDGET // len(params))
    return check_gradients(name, build, params, max_entries=per_tensor,
                           rng=rng)


def _pairwise(name: str):
    def runner() -> CheckResult:
        rng = np.random.default_rng(100)
        a = _rand(rng, 4, 6)
        b = _rand(rng, 4, 6)
        wts = probe_weights(rng, (4, 6))
        wts_t = probe_weights(rng, (6, 4))
        wts_cat = probe_weights(rng, (4, 12))
        gain, shift = _rand(rng, 6), _rand(rng, 6)
        gamma = Tensor(np.array([0.7], dtype=np.float32), requires_grad=True)
        builders = {
            "add": (lambda: weighted_mean(add(a, b), wts), {"a": a, "b": b}),
            "mul": (lambda: weighted_mean(mul(a, b), wts), {"a": a, "b": b}),
            # the denominator is kept >= 1 so the quotient stays smooth
            "div": (lambda: weighted_mean(div(a, add_scalar(relu(b), 1.0)), wts),
                    {"a": a, "b": b}),
            "scale": (lambda: sum_all(scale(a, -1.7)), {"a": a}),
            "add_scalar": (lambda: weighted_mean(add_scalar(a, 0.5), wts),
                           {"a": a}),
            "scale_by": (lambda: weighted_mean(scale_by(a, gamma), wts),
                         {"a": a, "gamma": gamma}),
            "relu": (lambda: weighted_mean(relu(a), wts), {"a": a}),
            "add_bias": (lambda: weighted_mean(add_bias(a, gain), wts),
                         {"a": a, "bias": gain}),
            "concat": (lambda: weighted_mean(concat([a, b], axis=1), wts_cat),
                       {"a": a, "b": b}),
            "slice_cols": (lambda: sum_all(slice_cols(a, 1, 4)), {"a": a}),
            "slice_batch": (lambda: sum_all(slice_batch(a, 2)), {"a": a}),
            "stack_batch": (lambda: sum_all(stack_batch([a, b])),
                            {"a": a, "b": b}),
            "layer_norm": (lambda: weighted_mean(layer_norm(a, gain, shift), wts),
                           {"a": a, "gain": gain, "shift": shift}),
            "reshape": (lambda: weighted_mean(reshape(a, (6, 4)), wts_t),
                        {"a": a}),
            "permute": (lambda: weighted_mean(permute(a, (1, 0)), wts_t),
                        {"a": a}),
            "transpose": (lambda: weighted_mean(transpose(a), wts_t),
                          {"a": a}),
            "softmax_rows": (lambda: weighted_mean(softmax_rows(a), wts),
                             {"a": a}),
            "sum_all": (lambda: sum_all(a), {"a": a}),
        }
        build, params = builders[name]
        return _run(name, build, params, rng)
    return runner


def _rowmax_minus():
    from .tensor import rowmax_minus
    rng = np.random.default_rng(101)
    a = _rand(rng, 4, 6)
    wts = probe_weights(rng, (4, 6))
    return _run("rowmax_minus", lambda: weighted_mean(rowmax_minus(a), wts),
                {"a": a}, rng)


def _matmul():
    rng = np.random.default_rng(102)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    wts = probe_weights(rng, (3, 2))
    return _run("matmul", lambda: weighted_mean(matmul(a, b), wts),
                {"a": a, "b": b}, rng)


def _cross_entropy():
    rng = np.random.default_rng(103)
    logits = Tensor(0.5 * rng.standard_normal((3, 4)).astype(np.float32),
                    requires_grad=True)
    labels = rng.integers(0, 4, size=3)
    return _run("cross_entropy", lambda: cross_entropy_with_softmax(logits, labels),
                {"logits": logits}, rng)


def _conv(stride: int, pad: int):
    def runner() -> CheckResult:
        rng = np.random.default_rng(110 + 10 * stride + pad)
        x = _rand(rng, 2, 3, 6, 6)
        w = _rand(rng, 4, 3, 3, 3)
        bias = _rand(rng, 4)
        out_dims = conv2d(x, w, bias, stride=stride, pad=pad).dims
        wts = probe_weights(rng, out_dims)
        return _run(
            f"conv2d stride{stride} pad{pad}",
            lambda: weighted_mean(conv2d(x, w, bias, stride=stride, pad=pad), wts),
            {"x": x, "w": w, "b": bias}, rng)
    return runner


def _avg_pool():
    rng = np.random.default_rng(120)
    x = _rand(rng, 1, 2, 4, 4)
    wts = probe_weights(rng, (1, 2, 2, 2))
    return _run("avg_pool2d", lambda: weighted_mean(avg_pool2d(x, 2), wts),
                {"x": x}, rng)


def _bilinear(out_side: int, name: str):
    def runner() -> CheckResult:
        rng = np.random.default_rng(121 + out_side)
        x = _rand(rng, 1, 2, 6, 6)
        wts = probe_weights(rng, (1, 2, out_side, out_side))
        return _run(name,
                    lambda: weighted_mean(bilinear_resize(x, out_side, out_side),
                                          wts),
                    {"x": x}, rng)
    return runner


def _cam():
    rng = np.random.default_rng(130)
    x = _rand(rng, 1, 8, 4, 4)
    p = init_cam_params(8, rng)
    p.gamma_ca.data[:] = 0.4
    wts = probe_weights(rng, (1, 8, 4, 4))
    return _run("cam_forward", lambda: weighted_mean(cam_forward(x, p), wts),
                {"x": x, "wq": p.wq, "wk": p.wk, "gamma": p.gamma_ca}, rng)


def _pam():
    rng = np.random.default_rng(131)
    x = _rand(rng, 1, 8, 4, 4)
    p = init_pam_params(8, rng, scales=(1.0, 0.5))
    p.gamma_pa.data[:] = -0.3
    wts = probe_weights(rng, (1, 8, 4, 4))
    return _run("pam_forward", lambda: weighted_mean(pam_forward(x, p), wts),
                {"x": x, "wq": p.wq, "wk": p.wk, "wv": p.wv,
                 "gamma": p.gamma_pa}, rng)


def _joint():
    rng = np.random.default_rng(132)
    x = _rand(rng, 1, 8, 4, 4)
    p = init_joint_params(8, rng, scales=(1.0, 0.5))
    p.cam.gamma_ca.data[:] = 0.3
    p.pam.gamma_pa.data[:] = -0.25
    p.refine_b.data[:] = 0.05
    wts = probe_weights(rng, (1, 8, 4, 4))
    params = {"x": x, "cam_wq": p.cam.wq, "cam_wk": p.cam.wk,
              "gamma_ca": p.cam.gamma_ca, "pam_wq": p.pam.wq,
              "pam_wk": p.pam.wk, "pam_wv": p.pam.wv,
              "gamma_pa": p.pam.gamma_pa, "refine_w": p.refine_w,
              "refine_b": p.refine_b}
    return _run("joint_forward", lambda: weighted_mean(joint_forward(x, p), wts),
                params, rng)


def _transformer():
    rng = np.random.default_rng(133)
    cfg = NetworkConfig(base_channels=8, input_size=16, embed_dim=32,
                        attention="none")
    m = build_model(cfg, seed=5)
    tokens = _rand(rng, 6, 32)
    wts = probe_weights(rng, (6, 32))
    params = {name: t for name, t in m.params.items()
              if name.startswith("tr1.")}
    return _run("transformer layer",
                lambda: weighted_mean(_transformer_layer(tokens, m, 1, None), wts),
                dict(params, tokens=tokens), rng)


def _loss():
    rng = np.random.default_rng(134)
    logits = _rand(rng, 1, 3, 4, 4)
    labels = rng.integers(0, 3, size=(1, 4, 4))
    return _run("segmentation loss", lambda: loss(logits, labels, 3),
                {"logits": logits}, rng)


def build_all_checks():
    entries = []
    for name in ("add", "mul", "div", "scale", "add_scalar", "scale_by",
                 "relu", "add_bias", "concat", "slice_cols", "slice_batch",
                 "stack_batch", "layer_norm", "reshape", "permute",
                 "transpose", "softmax_rows", "sum_all"):
        entries.append((name, _pairwise(name)))
    entries.append(("rowmax_minus", _rowmax_minus))
    entries.append(("matmul", _matmul))
    entries.append(("cross_entropy", _cross_entropy))
    entries.append(("conv2d stride1 pad1", _conv(1, 1)))
    entries.append(("conv2d stride2 pad1", _conv(2, 1)))
    entries.append(("conv2d stride1 pad0", _conv(1, 0)))
    entries.append(("avg_pool2d", _avg_pool))
    entries.append(("bilinear upsample", _bilinear(12, "bilinear upsample")))
    entries.append(("bilinear downsample", _bilinear(3, "bilinear downsample")))
    entries.append(("cam_forward", _cam))
    entries.append(("pam_forward", _pam))
    entries.append(("joint_forward", _joint))
    entries.append(("transformer layer", _transformer))
    entries.append(("segmentation loss", _loss))
    return entries
