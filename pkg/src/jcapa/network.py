"""Encoder-transformer-decoder segmentation network with attention-refined skips.

Encoder: three stages of (3x3 conv, relu, 3x3 stride-2 conv, relu) taking the
channel count through base, 2*base, 4*base while halving the grid each stage.
The deepest map runs through pre-norm transformer encoder layers over its
flattened token sequence. The decoder refines the bottleneck and both skip
maps with the configured attention block, then repeats (2x bilinear upsample,
concat skip, 3x3 conv, relu) and finishes with a relu-activated 3x3 head and
a 1x1 projection to class logits.

Training loss: 0.5 * pixel cross-entropy + 0.5 * (1 - mean soft Dice over all
classes), Dice smoothed by 1e-5 in numerator and denominator.

Pyramid scales are clipped per site: a pooling factor is used only when it
divides the map side and leaves a pooled side of at least 4 for factors >= 4,
so small maps simply run fewer scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (CamParams, JointBlockParams, PamParams, cam_forward,
                        init_cam_params, init_joint_params, init_pam_params,
                        joint_forward, pam_forward, scale_factor)
from .errors import ConfigError, ShapeError
from .tensor import (Tensor, add, add_bias, add_scalar, bilinear_resize,
                     concat, conv2d, cross_entropy_with_softmax, div,
                     layer_norm, matmul, mul, permute, relu, reshape, scale,
                     slice_batch, slice_cols, softmax_rows, stack_batch,
                     transpose)

ATTENTION_KINDS = ("none", "cam", "pam", "joint")
DICE_SMOOTH = 1e-5


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 9
    base_channels: int = 16
    input_size: int = 64
    embed_dim: int = 64
    heads: int = 2
    mlp_ratio: int = 2
    layers: int = 1
    scales: tuple[float, ...] = (1.0, 0.5, 0.25)
    attention: str = "joint"

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(
                f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if self.input_size % 8:
            raise ConfigError(f"input_size must be divisible by 8, got {self.input_size}")
        if self.base_channels % 8:
            raise ConfigError(
                f"base_channels must be divisible by 8, got {self.base_channels}")
        if self.embed_dim != 4 * self.base_channels:
            raise ConfigError(
                f"embed_dim must equal 4*base_channels "
                f"({4 * self.base_channels}), got {self.embed_dim}; "
                "tokens are the deepest feature map without projection")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if self.layers < 1 or self.mlp_ratio < 1:
            raise ConfigError("need layers >= 1 and mlp_ratio >= 1")
        for s in self.scales:
            scale_factor(s)


@dataclass
class ModelState:
    config: NetworkConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def site_scales(scales: tuple[float, ...], size: int) -> tuple[float, ...]:
    """Clip the configured pyramid to factors usable on a size x size map."""
    kept = []
    for s in scales:
        f = scale_factor(s)
        if size % f:
            continue
        if f >= 4 and size // f < 4:
            continue
        kept.append(s)
    if not kept:
        raise ConfigError(f"no usable pyramid scale for map size {size}")
    return tuple(kept)


def _uniform(rng, shape, fan_in) -> Tensor:
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32),
                  requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


# decoder sites, outermost map last: (name, channel multiple, downsample)
_SITES = (("bottleneck", 4, 8), ("skip2", 2, 4), ("skip1", 1, 2))


def build_model(cfg: NetworkConfig, seed: int) -> ModelState:
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}

    chans = [cfg.in_channels, cfg.base_channels, 2 * cfg.base_channels,
             4 * cfg.base_channels]
    for i in (1, 2, 3):
        c_in, c_out = chans[i - 1], chans[i]
        p[f"enc.stage{i}.conv1.w"] = _uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        p[f"enc.stage{i}.conv1.b"] = _zeros(c_out)
        p[f"enc.stage{i}.conv2.w"] = _uniform(rng, (c_out, c_out, 3, 3), c_out * 9)
        p[f"enc.stage{i}.conv2.b"] = _zeros(c_out)

    d = cfg.embed_dim
    hidden = cfg.mlp_ratio * d
    for i in range(1, cfg.layers + 1):
        pre = f"tr{i}"
        p[f"{pre}.ln1.gain"] = _ones(d)
        p[f"{pre}.ln1.shift"] = _zeros(d)
        for proj in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{proj}"] = _uniform(rng, (d, d), d)
            p[f"{pre}.attn.{proj[1]}b"] = _zeros(d)
        p[f"{pre}.ln2.gain"] = _ones(d)
        p[f"{pre}.ln2.shift"] = _zeros(d)
        p[f"{pre}.mlp.fc1.w"] = _uniform(rng, (d, hidden), d)
        p[f"{pre}.mlp.fc1.b"] = _zeros(hidden)
        p[f"{pre}.mlp.fc2.w"] = _uniform(rng, (hidden, d), hidden)
        p[f"{pre}.mlp.fc2.b"] = _zeros(d)

    for name, mult, down in _SITES:
        c = mult * cfg.base_channels
        size = cfg.input_size // down
        if cfg.attention == "none":
            continue
        if cfg.attention in ("cam", "joint"):
            cam = init_cam_params(c, rng)
            p[f"att.{name}.cam.wq"] = cam.wq
            p[f"att.{name}.cam.wk"] = cam.wk
            p[f"att.{name}.cam.gamma"] = cam.gamma_ca
        if cfg.attention in ("pam", "joint"):
            pam = init_pam_params(c, rng, site_scales(cfg.scales, size))
            p[f"att.{name}.pam.wq"] = pam.wq
            p[f"att.{name}.pam.wk"] = pam.wk
            p[f"att.{name}.pam.wv"] = pam.wv
            p[f"att.{name}.pam.gamma"] = pam.gamma_pa
        if cfg.attention == "joint":
            p[f"att.{name}.refine.w"] = _uniform(rng, (c, c, 3, 3), c * 9)
            p[f"att.{name}.refine.b"] = _zeros(c)

    b = cfg.base_channels
    p["dec.up1.conv.w"] = _uniform(rng, (2 * b, 6 * b, 3, 3), 6 * b * 9)
    p["dec.up1.conv.b"] = _zeros(2 * b)
    p["dec.up2.conv.w"] = _uniform(rng, (b, 3 * b, 3, 3), 3 * b * 9)
    p["dec.up2.conv.b"] = _zeros(b)
    p["head.conv1.w"] = _uniform(rng, (b, b, 3, 3), b * 9)
    p["head.conv1.b"] = _zeros(b)
    p["head.conv2.w"] = _uniform(rng, (cfg.num_classes, b, 1, 1), b)
    p["head.conv2.b"] = _zeros(cfg.num_classes)

    return ModelState(config=cfg, params=p)


def _transformer_layer(tokens: Tensor, m: ModelState, idx: int,
                       capture=None) -> Tensor:
    p = m.params
    cfg = m.config
    pre = f"tr{idx}"
    d = cfg.embed_dim
    dh = d // cfg.heads

    normed = layer_norm(tokens, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.shift"])
    q = add_bias(matmul(normed, p[f"{pre}.attn.wq"]), p[f"{pre}.attn.qb"])
    k = add_bias(matmul(normed, p[f"{pre}.attn.wk"]), p[f"{pre}.attn.kb"])
    v = add_bias(matmul(normed, p[f"{pre}.attn.wv"]), p[f"{pre}.attn.vb"])
    head_outs = []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        attn = softmax_rows(scale(matmul(qh, transpose(kh)),
                                  1.0 / float(np.sqrt(dh))))
        if capture is not None:
            capture.append(attn.data)
        head_outs.append(matmul(attn, vh))
    merged = concat(head_outs, axis=1) if len(head_outs) > 1 else head_outs[0]
    projected = add_bias(matmul(merged, p[f"{pre}.attn.wo"]),
                         p[f"{pre}.attn.ob"])
    tokens = add(tokens, projected)

    normed = layer_norm(tokens, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.shift"])
    mid = relu(add_bias(matmul(normed, p[f"{pre}.mlp.fc1.w"]),
                        p[f"{pre}.mlp.fc1.b"]))
    out = add_bias(matmul(mid, p[f"{pre}.mlp.fc2.w"]), p[f"{pre}.mlp.fc2.b"])
    return add(tokens, out)


def encode(x: Tensor, m: ModelState, capture=None):
    cfg = m.config
    p = m.params
    if x.data.ndim != 4 or x.dims[1] != cfg.in_channels:
        raise ShapeError(
            f"encode: expected B x {cfg.in_channels} x H x W, got {x.dims}")
    if x.dims[2] != cfg.input_size or x.dims[3] != cfg.input_size:
        raise ShapeError(
            f"encode: configured for {cfg.input_size}x{cfg.input_size} input, "
            f"got {x.dims[2]}x{x.dims[3]}")

    f = x
    skips = []
    for i in (1, 2, 3):
        f = relu(conv2d(f, p[f"enc.stage{i}.conv1.w"],
                        p[f"enc.stage{i}.conv1.b"], stride=1, pad=1))
        f = relu(conv2d(f, p[f"enc.stage{i}.conv2.w"],
                        p[f"enc.stage{i}.conv2.b"], stride=2, pad=1))
        if i < 3:
            skips.append(f)

    bsz, c, h, w = f.dims
    per_image = []
    for i in range(bsz):
        tokens = transpose(reshape(slice_batch(f, i), (c, h * w)))
        for layer in range(1, cfg.layers + 1):
            tokens = _transformer_layer(tokens, m, layer, capture)
        per_image.append(reshape(transpose(tokens), (c, h, w)))
    bottleneck = stack_batch(per_image)
    return skips, bottleneck


def _site_params(m: ModelState, name: str, size: int):
    cfg = m.config
    p = m.params
    if cfg.attention == "none":
        return None
    cam = pam = None
    if cfg.attention in ("cam", "joint"):
        cam = CamParams(wq=p[f"att.{name}.cam.wq"], wk=p[f"att.{name}.cam.wk"],
                        gamma_ca=p[f"att.{name}.cam.gamma"])
    if cfg.attention in ("pam", "joint"):
        pam = PamParams(wq=p[f"att.{name}.pam.wq"], wk=p[f"att.{name}.pam.wk"],
                        wv=p[f"att.{name}.pam.wv"],
                        gamma_pa=p[f"att.{name}.pam.gamma"],
                        scales=site_scales(cfg.scales, size))
    if cfg.attention == "cam":
        return cam
    if cfg.attention == "pam":
        return pam
    return JointBlockParams(cam=cam, pam=pam, refine_w=p[f"att.{name}.refine.w"],
                            refine_b=p[f"att.{name}.refine.b"])


def _refine(x: Tensor, m: ModelState, name: str, capture=None) -> Tensor:
    site = _site_params(m, name, x.dims[2])
    if site is None:
        return x
    if isinstance(site, CamParams):
        return cam_forward(x, site, capture)
    if isinstance(site, PamParams):
        return pam_forward(x, site, capture)
    return joint_forward(x, site, capture)


def decode(bottleneck: Tensor, skips, m: ModelState, capture=None) -> Tensor:
    p = m.params
    f1, f2 = skips
    d = _refine(bottleneck, m, "bottleneck", capture)
    r2 = _refine(f2, m, "skip2", capture)
    r1 = _refine(f1, m, "skip1", capture)

    d = bilinear_resize(d, 2 * d.dims[2], 2 * d.dims[3])
    d = relu(conv2d(concat([d, r2], axis=1), p["dec.up1.conv.w"],
                    p["dec.up1.conv.b"], stride=1, pad=1))
    d = bilinear_resize(d, 2 * d.dims[2], 2 * d.dims[3])
    d = relu(conv2d(concat([d, r1], axis=1), p["dec.up2.conv.w"],
                    p["dec.up2.conv.b"], stride=1, pad=1))
    d = bilinear_resize(d, 2 * d.dims[2], 2 * d.dims[3])
    d = relu(conv2d(d, p["head.conv1.w"], p["head.conv1.b"], stride=1, pad=1))
    return conv2d(d, p["head.conv2.w"], p["head.conv2.b"])


def forward(x: Tensor, m: ModelState, capture=None) -> Tensor:
    skips, bottleneck = encode(x, m, capture)
    return decode(bottleneck, skips, m, capture)


def loss_terms(logits: Tensor, labels: np.ndarray,
               num_classes: int) -> tuple[Tensor, Tensor]:
    """Cross-entropy and (1 - mean soft Dice) as separate scalars."""
    if logits.data.ndim != 4 or logits.dims[1] != num_classes:
        raise ShapeError(
            f"loss: expected B x {num_classes} x H x W logits, got {logits.dims}")
    labels = np.asarray(labels)
    if labels.shape != (logits.dims[0], logits.dims[2], logits.dims[3]):
        raise ShapeError(
            f"loss: labels {labels.shape} do not match logits {logits.dims}")
    flat_labels = labels.reshape(-1).astype(np.int64)
    n = flat_labels.size

    rows = reshape(permute(logits, (0, 2, 3, 1)), (n, num_classes))
    ce = cross_entropy_with_softmax(rows, flat_labels)

    probs = softmax_rows(rows)
    onehot = np.zeros((n, num_classes), dtype=np.float32)
    onehot[np.arange(n), flat_labels] = 1.0
    target = Tensor(onehot)
    ones_row = Tensor(np.ones((1, n), dtype=np.float32))
    inter = matmul(ones_row, mul(probs, target))              # 1 x K
    denom = add(matmul(ones_row, probs), matmul(ones_row, target))
    dice_k = div(add_scalar(scale(inter, 2.0), DICE_SMOOTH),
                 add_scalar(denom, DICE_SMOOTH))
    mean_dice = scale(reshape(matmul(dice_k, Tensor(
        np.ones((num_classes, 1), dtype=np.float32))), (1,)),
        1.0 / num_classes)
    dice_loss = add_scalar(scale(mean_dice, -1.0), 1.0)
    return ce, dice_loss


def loss(logits: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    """0.5 * cross-entropy + 0.5 * (1 - mean soft Dice over all classes)."""
    ce, dice_loss = loss_terms(logits, labels, num_classes)
    return add(scale(ce, 0.5), scale(dice_loss, 0.5))


def predict_labels(m: ModelState, images: np.ndarray) -> np.ndarray:
    """Argmax class map for a batch outside any tape."""
    logits = forward(Tensor(images), m)
    return np.argmax(logits.data, axis=1).astype(np.uint8)
