"""Differentiable 3D kernels on (N, C, D, H, W) tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, emit

SPATIAL = (2, 3, 4)


def _check_rank5(t: Tensor, what: str) -> None:
    if t.ndim != 5:
        raise ValueError(f"{what} must be rank 5 (N, C, D, H, W), got shape {t.shape}")


# -- convolution -------------------------------------------------------------


def _pad_same(x: np.ndarray, k: Sequence[int]) -> np.ndarray:
    pads = [(0, 0), (0, 0)] + [(kk // 2, kk // 2) for kk in k]
    return np.pad(x, pads)


def _im2col(x: np.ndarray, k: Sequence[int]) -> np.ndarray:
    """Patch matrix of shape (C*kd*kh*kw, N*D*H*W), rows ordered (c, i, j, k)."""
    n, c, d, h, w = x.shape
    kd, kh, kw = k
    if (kd, kh, kw) == (1, 1, 1):
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(c, -1)
    xp = _pad_same(x, k).transpose(1, 0, 2, 3, 4)
    col = np.empty((c, kd * kh * kw, n, d, h, w), dtype=x.dtype)
    t = 0
    for i in range(kd):
        for j in range(kh):
            for kk in range(kw):
                col[:, t] = xp[:, :, i : i + d, j : j + h, kk : kk + w]
                t += 1
    return col.reshape(c * kd * kh * kw, -1)


def _col_matmul(col: np.ndarray, w: np.ndarray, x_shape) -> np.ndarray:
    n, _, d, h, wd = x_shape
    out = w.reshape(w.shape[0], -1) @ col
    return np.ascontiguousarray(out.reshape(w.shape[0], n, d, h, wd).transpose(1, 0, 2, 3, 4))


def _conv_im2col(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _col_matmul(_im2col(x, w.shape[2:]), w, x.shape)


def _conv_loop(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Accumulate one channel-mixing product per kernel tap."""
    n, _, d, h, wd = x.shape
    kd, kh, kw = w.shape[2:]
    xp = _pad_same(x, (kd, kh, kw))
    out = np.zeros((n, w.shape[0], d, h, wd), dtype=np.result_type(x, w))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                patch = xp[:, :, i : i + d, j : j + h, k : k + wd]
                out += np.einsum("oc,ncdhw->nodhw", w[:, :, i, j, k], patch)
    return out


_CONV_BACKENDS = {"im2col": _conv_im2col, "loop": _conv_loop}


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, backend: str = "im2col") -> np.ndarray:
    out = _CONV_BACKENDS[backend](x, w)
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out


def _conv_weight_grad(col: np.ndarray, w_shape, g: np.ndarray) -> np.ndarray:
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(g.shape[1], -1)
    return (g2 @ col.T).reshape(w_shape)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "same", backend: str = "im2col") -> Tensor:
    """Stride-1 3D cross-correlation with zero same-padding.

    ``weight`` has shape (C_out, C_in, kd, kh, kw) with odd spatial extents;
    ``bias`` has shape (C_out,).
    """
    _check_rank5(x, "conv3d input")
    if padding != "same":
        raise ValueError(f"only same-padding is supported, got {padding!r}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d kernel must be rank 5, got shape {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv3d shape mismatch: input {x.shape} has {x.shape[1]} channels "
            f"but kernel {weight.shape} expects {weight.shape[1]}"
        )
    if any(k % 2 == 0 for k in weight.shape[2:]):
        raise ValueError(f"conv3d same-padding needs odd kernel extents, got kernel {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv3d bias shape {bias.shape} does not match kernel {weight.shape}")

    xd, wd = x.data, weight.data
    col = None
    if backend == "im2col":
        col = _im2col(xd, wd.shape[2:])
        out = _col_matmul(col, wd, xd.shape)
    else:
        out = _conv_loop(xd, wd)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = conv3d_forward(g, flipped, None, backend)
        if weight.requires_grad:
            gw = _conv_weight_grad(col if col is not None else _im2col(xd, wd.shape[2:]), wd.shape, g)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit("conv3d", out, inputs, grad_fn)


# -- resampling --------------------------------------------------------------


def avg_pool3d(x: Tensor, window: int = 2) -> Tensor:
    """Mean over non-overlapping ``window``-cubed blocks."""
    _check_rank5(x, "avg_pool3d input")
    n, c, d, h, w = x.shape
    if d % window or h % window or w % window:
        raise ValueError(f"avg_pool3d needs spatial extents divisible by {window}, got {x.shape}")
    s = window
    if s != 2:
        raise ValueError(f"only window 2 is supported, got {window}")
    # pairwise summation in a fixed order: exact for equal values, independent of numpy's reductions
    v = x.data
    pairs = [v[:, :, i::2, j::2, 0::2] + v[:, :, i::2, j::2, 1::2] for i in (0, 1) for j in (0, 1)]
    out = (pairs[0] + pairs[1]) + (pairs[2] + pairs[3])
    out /= s**3

    def grad_fn(g):
        gx = np.broadcast_to((g / s**3)[:, :, :, None, :, None, :, None], (n, c, d // s, s, h // s, s, w // s, s))
        return (np.ascontiguousarray(gx).reshape(x.shape),)

    return emit("avg_pool3d", out, (x,), grad_fn)


def max_pool3d_array(x: np.ndarray, window: int = 2) -> np.ndarray:
    """Blockwise max over the three trailing axes (no gradient; used for labels)."""
    d, h, w = x.shape[-3:]
    s = window
    if d % s or h % s or w % s:
        raise ValueError(f"max pooling needs spatial extents divisible by {s}, got {x.shape}")
    blocks = x.reshape(*x.shape[:-3], d // s, s, h // s, s, w // s, s)
    nd = blocks.ndim
    return blocks.max(axis=(nd - 5, nd - 3, nd - 1))


def _linear_up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel aligned x2 linear interpolation with clamped borders
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _linear_up_axis_transpose(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even, odd = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (even + odd)
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., 0] += 0.25 * even[..., 0]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., -1] += 0.25 * odd[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample3d(x: Tensor, factor: int = 2, mode: str = "trilinear") -> Tensor:
    """Double every spatial extent.

    ``nearest`` replicates voxels; ``trilinear`` uses the fixed separable
    kernel (1/4, 3/4, 3/4, 1/4) with half-voxel alignment and clamped borders.
    """
    _check_rank5(x, "upsample3d input")
    if factor != 2:
        raise ValueError(f"only factor 2 is supported, got {factor}")
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

        def grad_fn(g):
            n, c, d, h, w = x.shape
            return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    elif mode == "trilinear":
        out = x.data
        for ax in SPATIAL:
            out = _linear_up_axis(out, ax)
        out = np.ascontiguousarray(out)

        def grad_fn(g):
            for ax in reversed(SPATIAL):
                g = _linear_up_axis_transpose(g, ax)
            return (np.ascontiguousarray(g),)

    else:
        raise ValueError(f"unknown upsampling mode {mode!r}")
    return emit(f"upsample3d[{mode}]", out, (x,), grad_fn)


# -- channel and elementwise ops ---------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank5(a, "concat_channels first input")
    _check_rank5(b, "concat_channels second input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def grad_fn(g):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return emit("concat_channels", out, (a, b), grad_fn)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp is only ever taken of -|x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(t: Tensor) -> Tensor:
    s = _stable_sigmoid(t.data)
    return emit("sigmoid", s, (t,), lambda g: (g * s * (1 - s),))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    out = np.where(mask, t.data, 0).astype(t.dtype, copy=False)
    return emit("relu", out, (t,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ValueError(f"add_n shape mismatch: {shape} vs {t.shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data
    return emit("add_n", out, tuple(tensors), lambda g: tuple(g for _ in tensors))


def sum_all(t: Tensor) -> Tensor:
    return emit("sum", np.asarray(t.data.sum()), (t,), lambda g: (np.full(t.shape, g, dtype=t.dtype),))


def inner(t: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(t * weights) for a constant ``weights`` array."""
    weights = np.asarray(weights, dtype=t.dtype)
    if weights.shape != t.shape:
        raise ValueError(f"inner shape mismatch: {t.shape} vs {weights.shape}")
    return emit("inner", np.asarray((t.data * weights).sum()), (t,), lambda g: (g * weights,))


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor, bias: Tensor) -> Tensor:
    """Elementwise sum_m weights[m] * tensors[m] + bias[0]."""
    m = len(tensors)
    if weights.shape != (m,):
        raise ValueError(f"weighted_sum needs {m} weights, got shape {weights.shape}")
    if bias.shape != (1,):
        raise ValueError(f"weighted_sum bias must have shape (1,), got {bias.shape}")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ValueError(f"weighted_sum resolution mismatch: {shape} vs {t.shape}")
    out = np.full(shape, bias.data[0], dtype=tensors[0].dtype)
    for wi, t in zip(weights.data, tensors):
        out = out + wi * t.data

    def grad_fn(g):
        gts = [g * wi for wi in weights.data]
        gw = np.array([(g * t.data).sum() for t in tensors], dtype=weights.dtype)
        gb = np.array([g.sum()], dtype=bias.dtype)
        return (*gts, gw, gb)

    return emit("weighted_sum", out, (*tensors, weights, bias), grad_fn)


def bce_with_logits_sum(logits: Tensor, labels: np.ndarray, pos_weight: float = 1.0, neg_weight: float = 1.0) -> Tensor:
    """Summed binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels.

    Per voxel: -w_y * log P(label), computed as softplus(a) - y*a in the
    overflow-free form max(a, 0) - y*a + log1p(exp(-|a|)).
    """
    a = logits.data
    y = np.asarray(labels, dtype=a.dtype)
    if y.shape != a.shape:
        raise ValueError(f"loss shape mismatch: activations {a.shape} vs labels {y.shape}")
    weight = np.where(y > 0, pos_weight, neg_weight).astype(a.dtype)
    per_voxel = np.maximum(a, 0) - y * a + np.log1p(np.exp(-np.abs(a)))
    total = np.asarray((weight * per_voxel).sum(dtype=np.float64), dtype=a.dtype)

    def grad_fn(g):
        return (g * weight * (_stable_sigmoid(a) - y),)

    return emit("bce_with_logits_sum", total, (logits,), grad_fn)
