"""Direct 3-D convolution primitives (im2col + BLAS, no FFT).

Layouts follow the usual deep-learning convention:

* input ``x``: ``[B, C, D, H, W]``
* conv weight: ``[out, in, k, k, k]``
* transposed-conv weight: ``[in, out, k, k, k]``

The transposed convolution is implemented as the exact adjoint of the
forward convolution, so the two share ``_im2col`` / ``_col2im``.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _record

__all__ = ["conv3d", "conv_transpose3d", "conv_output_size", "conv_transpose_output_size"]


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (n - 1) * stride - 2 * padding + dilation * (k - 1) + 1


def _window(offset: int, dilation: int, stride: int, n_out: int) -> slice:
    start = offset * dilation
    return slice(start, start + stride * (n_out - 1) + 1, stride)


def _im2col(xt: np.ndarray, k: int, stride: int, dilation: int, out: tuple[int, int, int]) -> np.ndarray:
    """``xt`` is channel-major ``[C, B, D, H, W]`` (already padded)."""
    C, B = xt.shape[:2]
    od, oh, ow = out
    cols = np.empty((C, k, k, k, B, od, oh, ow), dtype=xt.dtype)
    for a in range(k):
        sa = _window(a, dilation, stride, od)
        for b in range(k):
            sb = _window(b, dilation, stride, oh)
            for c in range(k):
                cols[:, a, b, c] = xt[:, :, sa, sb, _window(c, dilation, stride, ow)]
    return cols.reshape(C * k * k * k, B * od * oh * ow)


def _col2im(cols: np.ndarray, padded: tuple, k: int, stride: int, dilation: int, out: tuple) -> np.ndarray:
    """Adjoint of ``_im2col``; returns channel-major ``[C, B, D, H, W]``."""
    C, B = padded[:2]
    od, oh, ow = out
    cols = cols.reshape(C, k, k, k, B, od, oh, ow)
    xt = np.zeros(padded, dtype=cols.dtype)
    for a in range(k):
        sa = _window(a, dilation, stride, od)
        for b in range(k):
            sb = _window(b, dilation, stride, oh)
            for c in range(k):
                xt[:, :, sa, sb, _window(c, dilation, stride, ow)] += cols[:, a, b, c]
    return xt


def _pad_channel_major(x: np.ndarray, p: int) -> np.ndarray:
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))
    if p:
        xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    return xt


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects [B,C,D,H,W], got {x.shape}")
    O, C, k = weight.shape[:3]
    B, Cx = x.shape[:2]
    if Cx != C:
        raise ShapeError(f"conv3d channel mismatch: input has {Cx}, weight expects {C}")
    spatial = x.shape[2:]
    out = tuple(conv_output_size(n, k, stride, padding, dilation) for n in spatial)
    if min(out) < 1:
        raise ShapeError(f"conv3d output size {out} is degenerate for input {spatial}")
    xt = _pad_channel_major(x.data, padding)
    cols = _im2col(xt, k, stride, dilation, out)
    w2 = weight.data.reshape(O, -1)
    y = (w2 @ cols).reshape(O, B, *out)
    if bias is not None:
        y += bias.data.reshape(O, 1, 1, 1, 1)
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4))

    def adjoint(g):
        gt = g.transpose(1, 0, 2, 3, 4).reshape(O, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = w2.T @ gt
            gxt = _col2im(gcols, xt.shape, k, stride, dilation, out)
            if padding:
                p = padding
                gxt = gxt[:, :, p:-p, p:-p, p:-p]
            gx = gxt.transpose(1, 0, 2, 3, 4)
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv3d", y, inputs, adjoint)


def conv_transpose3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects [B,C,D,H,W], got {x.shape}")
    Cin, O, k = weight.shape[:3]
    B, Cx = x.shape[:2]
    if Cx != Cin:
        raise ShapeError(f"conv_transpose3d channel mismatch: input has {Cx}, weight expects {Cin}")
    spatial = x.shape[2:]
    out = tuple(conv_transpose_output_size(n, k, stride, padding, dilation) for n in spatial)
    if min(out) < 1:
        raise ShapeError(f"conv_transpose3d output size {out} is degenerate for input {spatial}")
    full = tuple(n + 2 * padding for n in out)
    w2 = weight.data.reshape(Cin, -1)
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(Cin, -1)
    yt = _col2im(w2.T @ xt, (O, B, *full), k, stride, dilation, spatial)
    if padding:
        p = padding
        yt = yt[:, :, p:-p, p:-p, p:-p]
    if bias is not None:
        yt = yt + bias.data.reshape(O, 1, 1, 1, 1)
    y = np.ascontiguousarray(yt.transpose(1, 0, 2, 3, 4))

    def adjoint(g):
        gt = _pad_channel_major(g, padding)
        cols = _im2col(gt, k, stride, dilation, spatial)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (w2 @ cols).reshape(Cin, B, *spatial).transpose(1, 0, 2, 3, 4)
        if weight.requires_grad:
            gw = (xt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv_transpose3d", y, inputs, adjoint)
