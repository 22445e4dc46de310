"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

Every operation is a pure function: it computes a new `Tensor` and, when a
`Tape` is active and any input requires gradients, appends a node holding the
inputs, the output, and a backward rule. `backward(tape, loss)` replays the
nodes in reverse, accumulating gradients additively across fan-out into the
`.grad` slot of every `requires_grad` leaf.

Storage is 32-bit floats with 32-bit accumulation throughout. Tensors are
dense and row-major; a "scalar" is represented with dims = (1,). Convolution
uses the cross-correlation convention (no kernel flip). Double backward is
not supported: gradients are plain arrays, and replaying a consumed tape
raises `ContractError`.

Not thread-safe while a tape is active: a single tape must not be appended
from two threads.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, ShapeError, ValidationError

Array = np.ndarray


class Tensor:
    """A dense float32 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: Array = arr
        self.requires_grad = requires_grad
        self.grad: Array | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.numel != 1:
            raise ContractError(f"item() on tensor of {self.numel} elements")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(*dims: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(dims, dtype=np.float32), requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs: tuple[Tensor, ...], out: Tensor,
                 bwd: Callable[[Array], tuple[Array | None, ...]]):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of operations; inputs of every node precede it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.remove(self)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_STACK: list[Tape] = []


def _record(inputs: tuple[Tensor, ...], out_data: Array,
            bwd: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    tape = _STACK[-1] if _STACK else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(Node(inputs, out, bwd))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep over the tape; accumulates into `.grad` of leaves.

    The tape is cleared afterward and cannot be replayed.
    """
    if tape.consumed:
        raise ContractError(
            "tape already consumed; double backward is not supported")
    if loss.numel != 1:
        raise ContractError(f"loss must be scalar, got dims {loss.dims}")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss is not a node recorded on this tape")

    flowing: dict[int, Array] = {id(loss): np.ones(loss.dims, dtype=np.float32)}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node.out), None)
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.bwd(g)):
            if gt is None or not t.requires_grad:
                continue
            if id(t) in produced:
                acc = flowing.get(id(t))
                flowing[id(t)] = gt if acc is None else acc + gt
            else:
                t.grad = gt.copy() if t.grad is None else t.grad + gt
    tape.nodes.clear()
    tape.consumed = True


# ---------------------------------------------------------------------------
# Elementwise and shape primitives
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: operand dims {a.dims} vs {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record((a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _record((a, b), a.data * b.data,
                   lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    return _record((a, b), a.data / b.data,
                   lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def scale(x: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    return _record((x,), x.data * c32, lambda g: (g * c32,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _record((x,), x.data + np.float32(c), lambda g: (g,))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a learnable scalar (dims (1,)); grad flows to both."""
    if s.numel != 1:
        raise ShapeError(f"scale_by: scalar tensor expected, got dims {s.dims}")
    sv = s.data.reshape(-1)[0]

    def bwd(g: Array):
        return g * sv, np.array([np.sum(g * x.data)], dtype=np.float32)

    return _record((x, s), x.data * sv, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record((x,), np.where(mask, x.data, np.float32(0)),
                   lambda g: (g * mask,))


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != x.numel:
        raise ShapeError(f"reshape: {x.dims} -> {dims} changes element count")
    src = x.dims
    return _record((x,), x.data.reshape(dims),
                   lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for dims {x.dims}")
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    return _record((x,), np.ascontiguousarray(x.data.transpose(axes)),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: rank-2 tensor expected, got dims {x.dims}")
    return permute(x, (1, 0))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: no tensors given")
    sizes = [p.dims[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(outs)

    return _record(tuple(parts), np.concatenate([p.data for p in parts], axis=axis), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols: rank-2 tensor expected, got dims {x.dims}")

    def bwd(g: Array):
        dx = np.zeros(x.dims, dtype=np.float32)
        dx[:, start:stop] = g
        return (dx,)

    return _record((x,), np.ascontiguousarray(x.data[:, start:stop]), bwd)


def slice_batch(x: Tensor, index: int) -> Tensor:
    """Select one element along the leading (batch) axis."""

    def bwd(g: Array):
        dx = np.zeros(x.dims, dtype=np.float32)
        dx[index] = g
        return (dx,)

    return _record((x,), np.ascontiguousarray(x.data[index]), bwd)


def stack_batch(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-N tensors into a rank-(N+1) tensor along a new batch axis."""

    def bwd(g: Array):
        return tuple(np.ascontiguousarray(g[i]) for i in range(len(parts)))

    return _record(tuple(parts), np.stack([p.data for p in parts], axis=0), bwd)


# ---------------------------------------------------------------------------
# Linear algebra and normalization
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: rank-2 operands expected, got {a.dims} and {b.dims}")
    if a.dims[1] != b.dims[0]:
        raise ShapeError(
            f"matmul: inner dims differ, left is {a.dims}, right is {b.dims}")
    return _record((a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias row vector to every row of an m-by-n tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.dims[1] != b.dims[0]:
        raise ShapeError(f"add_bias: dims {x.dims} cannot take bias {b.dims}")
    return _record((x, b), x.data + b.data[None, :],
                   lambda g: (g, g.sum(axis=0)))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: rank-2 tensor expected, got dims {x.dims}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g: Array):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner),)

    return _record((x,), y, bwd)


def rowmax_minus(x: Tensor) -> Tensor:
    """out[i, j] = max_k x[i, k] - x[i, j]; gradient routes through the max."""
    if x.data.ndim != 2:
        raise ShapeError(f"rowmax_minus: rank-2 tensor expected, got dims {x.dims}")
    idx = np.argmax(x.data, axis=1)
    mx = x.data[np.arange(x.dims[0]), idx][:, None]

    def bwd(g: Array):
        dx = -g
        dx[np.arange(x.dims[0]), idx] += g.sum(axis=1)
        return (dx,)

    return _record((x,), mx - x.data, bwd)


def sum_all(x: Tensor) -> Tensor:
    shape = x.dims
    return _record((x,), np.array([x.data.sum(dtype=np.float32)], dtype=np.float32),
                   lambda g: (np.full(shape, g.reshape(-1)[0], dtype=np.float32),))


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the channel (last) axis of a rank-2 tensor, then scale/shift."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: rank-2 tensor expected, got dims {x.dims}")
    n = x.dims[1]
    if gain.dims != (n,) or shift.dims != (n,):
        raise ShapeError(
            f"layer_norm: gain/shift dims {gain.dims}/{shift.dims} do not match width {n}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * ivar
    y = xhat * gain.data[None, :] + shift.data[None, :]

    def bwd(g: Array):
        dgain = (g * xhat).sum(axis=0)
        dshift = g.sum(axis=0)
        dxhat = g * gain.data[None, :]
        # standard layer-norm backward over the normalized axis
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * ivar
        return dx.astype(np.float32, copy=False), dgain, dshift

    return _record((x, gain, shift), y, bwd)


def cross_entropy_with_softmax(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows; labels are integer class ids."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: rank-2 logits expected, got dims {logits.dims}")
    n, k = logits.dims
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {labels.shape[0]} labels")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(
            f"label {int(labels[i])} at index {i} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(p[np.arange(n), labels])
    out = np.array([nll.mean(dtype=np.float32)], dtype=np.float32)

    def bwd(g: Array):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g.reshape(-1)[0] / np.float32(n)),)

    return _record((logits,), out, bwd)


# ---------------------------------------------------------------------------
# Spatial ops on B x C x H x W feature maps
# ---------------------------------------------------------------------------


def _check_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: rank-4 feature map expected, got dims {x.dims}")


def _im2col(xp: Array, kh: int, kw: int, stride: int) -> tuple[Array, int, int]:
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return win.reshape(b, c * kh * kw, ho * wo), ho, wo


def _corr2d(xp: Array, w: Array, stride: int) -> tuple[Array, Array]:
    """Cross-correlate a padded batch with a Cout x Cin x kh x kw kernel."""
    cout = w.shape[0]
    cols, ho, wo = _im2col(xp, w.shape[2], w.shape[3], stride)
    out = np.matmul(w.reshape(cout, -1), cols)
    return out.reshape(xp.shape[0], cout, ho, wo), cols


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation; output side = floor((H + 2*pad - kh)/stride) + 1.

    The kernel must fit inside the padded input; bias, when given, is one
    value per output channel.
    """
    _check_rank4(x, "conv2d")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel dims {w.dims} not rank 4")
    b, cin, h, wd = x.dims
    cout, kcin, kh, kw = w.dims
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")
    if bias is not None and bias.dims != (cout,):
        raise ShapeError(f"conv2d: bias dims {bias.dims}, expected ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out, cols = _corr2d(xp, w.data, stride)
    ho, wo = out.shape[2], out.shape[3]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bwd(g: Array):
        gm = g.reshape(b, cout, ho * wo)
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.dims)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        # dX: dilate the output grad by the stride, then full-correlate with
        # the channel-swapped, spatially flipped kernel.
        if stride > 1:
            gd = np.zeros((b, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                          dtype=np.float32)
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        wt = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dxe, _ = _corr2d(gp, wt, 1)
        hp, wp = h + 2 * pad, wd + 2 * pad
        dxp = np.zeros((b, cin, hp, wp), dtype=np.float32)
        dxp[:, :, :dxe.shape[2], :dxe.shape[3]] = dxe
        dx = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    return _record(inputs, out, bwd)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor mean pooling."""
    _check_rank4(x, "avg_pool2d")
    b, c, h, w = x.dims
    if factor < 1:
        raise ShapeError(f"avg_pool2d: factor {factor} < 1")
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: dims {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return _record((x,), x.data.copy(), lambda g: (g,))
    ho, wo = h // factor, w // factor
    out = x.data.reshape(b, c, ho, factor, wo, factor).mean(axis=(3, 5),
                                                            dtype=np.float32)
    inv = np.float32(1.0 / (factor * factor))

    def bwd(g: Array):
        gx = np.repeat(np.repeat(g * inv, factor, axis=2), factor, axis=3)
        return (np.ascontiguousarray(gx),)

    return _record((x,), out, bwd)


@lru_cache(maxsize=128)
def _resize_matrices(in_h: int, in_w: int, out_h: int, out_w: int):
    """Sparse interpolation matrix (and its transpose) for one geometry.

    Source coordinate convention: s = (i + 0.5) * (in/out) - 0.5, clamped to
    [0, in-1]; the backward scatter reuses exactly the forward weights.
    """
    def axis_weights(n_in: int, n_out: int):
        s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        s = np.clip(s, 0.0, n_in - 1)
        i0 = np.floor(s).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        f = s - i0
        return i0, i1, f

    y0, y1, fy = axis_weights(in_h, out_h)
    x0, x1, fx = axis_weights(in_w, out_w)
    rows, cols, vals = [], [], []
    out_idx = np.arange(out_h * out_w)
    oy, ox = np.divmod(out_idx, out_w)
    for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
        for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
            rows.append(out_idx)
            cols.append(yi[oy] * in_w + xi[ox])
            vals.append(wy[oy] * wx[ox])
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(out_h * out_w, in_h * in_w), dtype=np.float32).tocsr()
    m.sum_duplicates()
    return m, m.T.tocsr()


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of each channel plane; exact identity at equal sizes."""
    _check_rank4(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output dims {out_h}x{out_w} invalid")
    b, c, h, w = x.dims
    if (out_h, out_w) == (h, w):
        return _record((x,), x.data.copy(), lambda g: (g,))
    m, mt = _resize_matrices(h, w, out_h, out_w)
    planes = x.data.reshape(b * c, h * w)
    out = np.ascontiguousarray(m.dot(planes.T).T).reshape(b, c, out_h, out_w)

    def bwd(g: Array):
        gp = g.reshape(b * c, out_h * out_w)
        return (np.ascontiguousarray(mt.dot(gp.T).T).reshape(b, c, h, w),)

    return _record((x,), out, bwd)
