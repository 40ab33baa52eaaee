"""im2col-based 2-D convolution primitives with explicit backward passes.

Everything is float64 and single-threaded-deterministic. Large batches are
chunked so the unrolled column matrix stays within a fixed memory budget;
chunking is over the batch axis only, so results are bit-identical to the
unchunked computation.

Weight conventions: conv weights are [Cout, Cin, kh, kw]; transposed-conv
weights are [Cin, Cout, kh, kw] with stride tied to the kernel (2x2/2), so
every input pixel writes a disjoint 2x2 output block and the whole op is a
single matrix product.
"""

from __future__ import annotations

import numpy as np

_COL_BUDGET_BYTES = 96 << 20


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[B, C, H, W] -> [B*oh*ow, C*kh*kw]."""
    b, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            col[:, :, i, j] = x[:, :, i:i_end:stride, j : j + stride * ow : stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)


def col2im(col: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add inverse of im2col."""
    b, c, h, w = x_shape
    oh, ow = conv_out_hw(h, w, kh, kw, stride, pad)
    col = col.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            out[:, :, i:i_end:stride, j : j + stride * ow : stride] += col[:, :, i, j]
    return out[:, :, pad : pad + h, pad : pad + w] if pad else out


def _batch_chunks(b: int, cols: int, itemsize: int = 8) -> int:
    per_row = max(cols * itemsize, 1)
    rows = max(_COL_BUDGET_BYTES // per_row, 1)
    return max(int(rows), 1)


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, pad: int
) -> np.ndarray:
    """x [B, Cin, H, W], w [Cout, Cin, kh, kw] -> [B, Cout, oh, ow]."""
    batch, cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = conv_out_hw(h, width, kh, kw, stride, pad)
    w_mat = w.reshape(cout, -1)
    out = np.empty((batch, cout, oh, ow), dtype=np.float64)
    step = max(_batch_chunks(batch, cin * kh * kw) // max(oh * ow, 1), 1)
    for lo in range(0, batch, step):
        hi = min(lo + step, batch)
        col = im2col(x[lo:hi], kh, kw, stride, pad)
        y = col @ w_mat.T
        out[lo:hi] = y.reshape(hi - lo, oh, ow, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d_backward(
    dy: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: int,
    pad: int,
    with_bias: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients (dx, dw, db). The column matrix is recomputed from the
    cached input instead of stored, trading FLOPs for tape memory."""
    batch, cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = conv_out_hw(h, width, kh, kw, stride, pad)
    w_mat = w.reshape(cout, -1)
    dx = np.empty_like(x)
    dw = np.zeros_like(w_mat)
    step = max(_batch_chunks(batch, cin * kh * kw) // max(oh * ow, 1), 1)
    for lo in range(0, batch, step):
        hi = min(lo + step, batch)
        dy_rows = dy[lo:hi].transpose(0, 2, 3, 1).reshape(-1, cout)
        col = im2col(x[lo:hi], kh, kw, stride, pad)
        dw += dy_rows.T @ col
        dx[lo:hi] = col2im(dy_rows @ w_mat, (hi - lo, cin, h, width), kh, kw, stride, pad)
    db = dy.sum(axis=(0, 2, 3)) if with_bias else None
    return dx, dw.reshape(w.shape), db


def tconv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """2x2 stride-2 transposed conv: x [B, Cin, H, W], w [Cin, Cout, 2, 2]
    -> [B, Cout, 2H, 2W]."""
    batch, cin, h, width = x.shape
    cout = w.shape[1]
    rows = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    y = rows @ w.reshape(cin, -1)  # -> [B*H*W, Cout*4]
    y = y.reshape(batch, h, width, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    out = np.ascontiguousarray(y).reshape(batch, cout, 2 * h, 2 * width)
    if b is not None:
        out += b[None, :, None, None]
    return out


def tconv2d_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray, with_bias: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    batch, cin, h, width = x.shape
    cout = w.shape[1]
    dy_blocks = dy.reshape(batch, cout, h, 2, width, 2).transpose(0, 2, 4, 1, 3, 5)
    dy_rows = np.ascontiguousarray(dy_blocks).reshape(-1, cout * 4)
    x_rows = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    dw = (x_rows.T @ dy_rows).reshape(w.shape)
    dx = (dy_rows @ w.reshape(cin, -1).T).reshape(batch, h, width, cin).transpose(0, 3, 1, 2)
    db = dy.sum(axis=(0, 2, 3)) if with_bias else None
    return np.ascontiguousarray(dx), dw, db
