"""Structured ops on tensors: convolution, bilinear sampling, upsampling.

Convolutions are lowered to gemms through a tap-major im2col buffer that
is kept alive for the backward pass. Bilinear sampling differentiates
with respect to both the source image and the sampling coordinates, which
is what lets box parameters receive gradients through crops and
composites.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, grad_enabled


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,) or None.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, width = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if h + 2 * padding < kh or width + 2 * padding < kw:
        raise ValueError(f"conv2d kernel {w.shape} larger than padded input {x.shape} (pad={padding})")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.ascontiguousarray(x.data)
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    # tap-major im2col: each kernel tap is one contiguous slab copy, the
    # gemm runs per image via a stacked matmul, and the output is already
    # contiguous NCHW (no permute copies anywhere on the hot path)
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols3 = cols.reshape(n, cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, -1)
    out3 = np.matmul(wmat, cols3)
    if b is not None:
        out3 += b.data.reshape(1, cout, 1)
    out_data = out3.reshape(n, cout, ho, wo)

    parents = (x, w) if b is None else (x, w, b)
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs, _parents=parents if needs else ())
    if needs:
        def bw(g):
            g3 = np.ascontiguousarray(g).reshape(n, cout, ho * wo)
            if w.requires_grad:
                dw = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0)
                w._accumulate(dw.reshape(w.data.shape))
            if b is not None and b.requires_grad:
                b._accumulate(g3.sum(axis=(0, 2)))
            if x.requires_grad:
                dcols = np.matmul(wmat.T, g3).reshape(n, cin, kh, kw, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, i, j]
                if padding:
                    x._accumulate(dxp[:, :, padding:padding + h, padding:padding + width])
                else:
                    x._accumulate(dxp)

        out._backward = bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: (N, Din) @ w: (Din, Dout) + b."""
    out = x @ w
    if b is not None:
        out = out + b
    return out


def upsample_nearest2(x: Tensor) -> Tensor:
    """Double spatial resolution by nearest-neighbor repetition (NCHW)."""
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    needs = grad_enabled() and x.requires_grad
    out = Tensor(out_data, requires_grad=needs, _parents=(x,) if needs else ())
    if needs:
        def bw(g):
            x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

        out._backward = bw
    return out


def grid_sample(img: Tensor, gx: Tensor, gy: Tensor, padding: str = "border") -> Tensor:
    """Bilinear sampling of ``img`` at pixel coordinates (gx, gy).

    img: (N, C, H, W); gx, gy: (N, P, Q) in pixel units where integer
    coordinates land on pixel centers. Returns (N, C, P, Q).

    padding="border" clamps coordinates to the image rectangle (samples
    beyond the edge repeat the edge value and receive zero coordinate
    gradient there); padding="zeros" reads 0 outside the image, giving a
    one-pixel linear ramp at the boundary.
    """
    if padding not in ("border", "zeros"):
        raise ValueError(f"grid_sample: unknown padding mode {padding!r}")
    if img.data.ndim != 4 or gx.data.ndim != 3 or gy.data.ndim != 3:
        raise ValueError(
            f"grid_sample expects img (N,C,H,W) and grids (N,P,Q), got {img.shape}, {gx.shape}, {gy.shape}")
    if gx.data.shape != gy.data.shape or gx.data.shape[0] != img.data.shape[0]:
        raise ValueError(f"grid_sample grid mismatch: {gx.shape} vs {gy.shape} for img {img.shape}")

    n, c, h, w = img.data.shape
    _, p, q = gx.data.shape

    if padding == "border":
        # clamp first; the gradient w.r.t. coordinates vanishes outside
        inside_x = ((gx.data >= 0) & (gx.data <= w - 1)).astype(img.dtype)
        inside_y = ((gy.data >= 0) & (gy.data <= h - 1)).astype(img.dtype)
        cx = np.clip(gx.data, 0, w - 1)
        cy = np.clip(gy.data, 0, h - 1)
        x0 = np.minimum(np.floor(cx), w - 2).astype(np.int64) if w > 1 else np.zeros_like(cx, dtype=np.int64)
        y0 = np.minimum(np.floor(cy), h - 2).astype(np.int64) if h > 1 else np.zeros_like(cy, dtype=np.int64)
        x0 = np.maximum(x0, 0)
        y0 = np.maximum(y0, 0)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = (cx - x0).astype(img.dtype)
        fy = (cy - y0).astype(img.dtype)
        vx0, vx1 = np.ones_like(fx), np.ones_like(fx)
        vy0, vy1 = np.ones_like(fy), np.ones_like(fy)
    else:
        x0f = np.floor(gx.data)
        y0f = np.floor(gy.data)
        fx = (gx.data - x0f).astype(img.dtype)
        fy = (gy.data - y0f).astype(img.dtype)
        x0 = x0f.astype(np.int64)
        y0 = y0f.astype(np.int64)
        x1 = x0 + 1
        y1 = y0 + 1
        vx0 = ((x0 >= 0) & (x0 < w)).astype(img.dtype)
        vx1 = ((x1 >= 0) & (x1 < w)).astype(img.dtype)
        vy0 = ((y0 >= 0) & (y0 < h)).astype(img.dtype)
        vy1 = ((y1 >= 0) & (y1 < h)).astype(img.dtype)
        x0c = np.clip(x0, 0, w - 1)
        x1c = np.clip(x1, 0, w - 1)
        y0c = np.clip(y0, 0, h - 1)
        y1c = np.clip(y1, 0, h - 1)
        inside_x = inside_y = None
        x0, x1, y0, y1 = x0c, x1c, y0c, y1c

    # corner weights including validity
    w00 = (1 - fx) * (1 - fy) * vx0 * vy0
    w01 = fx * (1 - fy) * vx1 * vy0
    w10 = (1 - fx) * fy * vx0 * vy1
    w11 = fx * fy * vx1 * vy1

    batch = np.arange(n, dtype=np.int64)[:, None, None]
    flat = img.data.reshape(n, c, h * w)
    i00 = (y0 * w + x0)
    i01 = (y0 * w + x1)
    i10 = (y1 * w + x0)
    i11 = (y1 * w + x1)

    def take(idx):
        # (N, C, P*Q) gather along the flattened spatial axis
        return np.take_along_axis(flat, np.broadcast_to(idx.reshape(n, 1, p * q), (n, c, p * q)), axis=2)

    g00 = take(i00).reshape(n, c, p, q)
    g01 = take(i01).reshape(n, c, p, q)
    g10 = take(i10).reshape(n, c, p, q)
    g11 = take(i11).reshape(n, c, p, q)

    out_data = (g00 * w00[:, None] + g01 * w01[:, None] +
                g10 * w10[:, None] + g11 * w11[:, None])

    parents = (img, gx, gy)
    needs = grad_enabled() and any(t.requires_grad for t in parents)
    out = Tensor(out_data, requires_grad=needs, _parents=parents if needs else ())
    if needs:
        def bw(g):
            if img.requires_grad:
                gimg = np.zeros((n, h * w, c), dtype=img.dtype)
                gmoved = g.transpose(0, 2, 3, 1).reshape(n, p * q, c)
                for idx, wt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                    rows = (np.arange(n)[:, None] * (h * w) + idx.reshape(n, p * q)).reshape(-1)
                    np.add.at(gimg.reshape(n * h * w, c), rows,
                              gmoved.reshape(n * p * q, c) * wt.reshape(n * p * q, 1))
                img._accumulate(gimg.transpose(0, 2, 1).reshape(n, c, h, w))
            if gx.requires_grad or gy.requires_grad:
                # d out / d fx and d out / d fy, summed over channels
                if padding == "border":
                    dfx = (g01 - g00) * (1 - fy)[:, None] + (g11 - g10) * fy[:, None]
                    dfy = (g10 - g00) * (1 - fx)[:, None] + (g11 - g01) * fx[:, None]
                else:
                    # corner validity enters each term independently
                    dfx = (-g00 * ((1 - fy) * vy0 * vx0)[:, None] + g01 * ((1 - fy) * vy0 * vx1)[:, None]
                           - g10 * (fy * vy1 * vx0)[:, None] + g11 * (fy * vy1 * vx1)[:, None])
                    dfy = (-g00 * ((1 - fx) * vx0 * vy0)[:, None] - g01 * (fx * vx1 * vy0)[:, None]
                           + g10 * ((1 - fx) * vx0 * vy1)[:, None] + g11 * (fx * vx1 * vy1)[:, None])
                dgx = (g * dfx).sum(axis=1)
                dgy = (g * dfy).sum(axis=1)
                if padding == "border":
                    dgx = dgx * inside_x
                    dgy = dgy * inside_y
                if gx.requires_grad:
                    gx._accumulate(dgx.astype(gx.dtype))
                if gy.requires_grad:
                    gy._accumulate(dgy.astype(gy.dtype))

        out._backward = bw
    return out
