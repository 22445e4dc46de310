"""Channel attention, pyramid attention, and the joint fusion block.

Both attention paths are residual blends `gamma * attended + input` with
`gamma` a learnable scalar initialized to zero, so a freshly built block is
an exact identity. Channel attention reweights channel maps through a C x C
affinity; pyramid attention runs spatial self-attention at several pooled
scales, upsamples each result back, and averages them. The joint block runs
the two in parallel, sums their outputs, and refines with a 3x3 convolution.

`capture`, when given, collects every row-stochastic attention matrix as a
plain array (one per batch element, per scale for the pyramid path).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (Tensor, add, avg_pool2d, bilinear_resize, conv2d, matmul,
                     relu, reshape, rowmax_minus, scale, scale_by,
                     slice_batch, softmax_rows, stack_batch, transpose)

DEFAULT_SCALES = (1.0, 0.5, 0.25)


@dataclass
class CamParams:
    """Channel-attention weights: 1x1 query/key projections and the blend."""
    wq: Tensor
    wk: Tensor
    gamma_ca: Tensor

    @property
    def channels(self) -> int:
        return self.wq.dims[0]


@dataclass
class PamParams:
    """Pyramid-attention weights, shared by every scale."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    gamma_pa: Tensor
    scales: tuple[float, ...] = DEFAULT_SCALES

    @property
    def channels(self) -> int:
        return self.wv.dims[0]


@dataclass
class JointBlockParams:
    cam: CamParams
    pam: PamParams
    refine_w: Tensor
    refine_b: Tensor


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32),
                  requires_grad=True)


def init_cam_params(channels: int, rng: np.random.Generator) -> CamParams:
    return CamParams(
        wq=_uniform(rng, (channels, channels, 1, 1), channels),
        wk=_uniform(rng, (channels, channels, 1, 1), channels),
        gamma_ca=Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
    )


def init_pam_params(channels: int, rng: np.random.Generator,
                    scales: tuple[float, ...] = DEFAULT_SCALES) -> PamParams:
    if channels % 8:
        raise ShapeError(f"pyramid attention needs channels divisible by 8, got {channels}")
    reduced = channels // 8
    return PamParams(
        wq=_uniform(rng, (reduced, channels, 1, 1), channels),
        wk=_uniform(rng, (reduced, channels, 1, 1), channels),
        wv=_uniform(rng, (channels, channels, 1, 1), channels),
        gamma_pa=Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
        scales=tuple(scales),
    )


def init_joint_params(channels: int, rng: np.random.Generator,
                      scales: tuple[float, ...] = DEFAULT_SCALES) -> JointBlockParams:
    return JointBlockParams(
        cam=init_cam_params(channels, rng),
        pam=init_pam_params(channels, rng, scales),
        refine_w=_uniform(rng, (channels, channels, 3, 3), channels * 9),
        refine_b=Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True),
    )


def scale_factor(s: float) -> int:
    f = round(1.0 / s)
    if f < 1 or abs(1.0 / f - s) > 1e-9:
        raise ShapeError(f"scale {s} is not the reciprocal of a positive integer")
    return f


def cam_forward(x: Tensor, p: CamParams,
                capture: list[np.ndarray] | None = None) -> Tensor:
    """Channel attention over a B x C x H x W map.

    Per batch element: project 1x1 queries/keys, flatten to C x N, form the
    C x C energy, normalize it as rowmax - energy, softmax the rows, and apply
    the weights to the unprojected input values.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"cam_forward: rank-4 input expected, got dims {x.dims}")
    b, c, h, w = x.dims
    if p.channels != c:
        raise ShapeError(f"cam_forward: input has {c} channels, params expect {p.channels}")
    n = h * w
    q = conv2d(x, p.wq)
    k = conv2d(x, p.wk)
    outs = []
    for i in range(b):
        qi = reshape(slice_batch(q, i), (c, n))
        ki = reshape(slice_batch(k, i), (c, n))
        energy = matmul(qi, transpose(ki))
        attn = softmax_rows(rowmax_minus(energy))
        if capture is not None:
            capture.append(attn.data)
        vi = reshape(slice_batch(x, i), (c, n))
        outs.append(reshape(matmul(attn, vi), (c, h, w)))
    out = stack_batch(outs)
    return add(scale_by(out, p.gamma_ca), x)


def pam_forward(x: Tensor, p: PamParams,
                capture: list[np.ndarray] | None = None) -> Tensor:
    """Pyramid attention over a B x C x H x W map.

    Each scale pools the input, projects shared queries/keys/values, attends
    over the N_s pooled positions (rows are query positions), and is resized
    back to H x W; the scale outputs are averaged before the gamma blend.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"pam_forward: rank-4 input expected, got dims {x.dims}")
    b, c, h, w = x.dims
    if p.channels != c:
        raise ShapeError(f"pam_forward: input has {c} channels, params expect {p.channels}")
    reduced = p.wq.dims[0]
    for s in p.scales:
        f = scale_factor(s)
        if h % f or w % f:
            raise ShapeError(f"pam_forward: scale {s} does not divide {h}x{w}")

    per_scale = []
    for s in p.scales:
        f = scale_factor(s)
        xs = avg_pool2d(x, f)
        hs, ws = h // f, w // f
        ns = hs * ws
        qs = conv2d(xs, p.wq)
        ks = conv2d(xs, p.wk)
        vs = conv2d(xs, p.wv)
        outs = []
        for i in range(b):
            qi = reshape(slice_batch(qs, i), (reduced, ns))
            ki = reshape(slice_batch(ks, i), (reduced, ns))
            attn = softmax_rows(matmul(transpose(qi), ki))
            if capture is not None:
                capture.append(attn.data)
            vi = reshape(slice_batch(vs, i), (c, ns))
            outs.append(reshape(matmul(vi, transpose(attn)), (c, hs, ws)))
        per_scale.append(bilinear_resize(stack_batch(outs), h, w))

    acc = per_scale[0]
    for extra in per_scale[1:]:
        acc = add(acc, extra)
    combined = scale(acc, 1.0 / len(per_scale))
    return add(scale_by(combined, p.gamma_pa), x)


def joint_forward(x: Tensor, p: JointBlockParams,
                  capture: list[np.ndarray] | None = None) -> Tensor:
    """Run both attention paths, fuse by elementwise sum, refine with 3x3 conv."""
    fused = add(pam_forward(x, p.pam, capture), cam_forward(x, p.cam, capture))
    return relu(conv2d(fused, p.refine_w, p.refine_b, stride=1, pad=1))
