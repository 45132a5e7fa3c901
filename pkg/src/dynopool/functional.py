"""Convolution and bilinear sampling primitives for the autodiff engine."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy import sparse

from .tensor import ShapeError, Tensor, _make

__all__ = ["conv2d", "bilinear_sample", "pixel_centers", "to_pixel"]

# pixel-space slack when deciding whether a query sits inside the image
_EDGE_TOL = 1e-4


def _im2col(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    """[B,C,H,W] -> [B,Ho,Wo,kh,kw,C] patch buffer (stride 1)."""
    batch, chans, h, w = x.shape
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    cols = np.empty((batch, ho, wo, kh, kw, chans), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + ho, j : j + wo, :]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    batch, c_in, h, w = x.shape
    c_out, w_in, kh, kw = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but weight expects {w_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    cols = _im2col(x.data, kh, kw, padding)
    ho, wo = cols.shape[1:3]
    cols = cols.reshape(batch * ho * wo, kh * kw * c_in)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, -1)  # O, (kh kw C)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(batch, ho, wo, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        gx = gw = gb = None
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(batch, ho, wo, kh, kw, c_in)
            gpad = np.zeros((batch, h + 2 * padding, w + 2 * padding, c_in), dtype=dcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
            gx = gpad[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def pixel_centers(n: int) -> np.ndarray:
    """Normalized centers of the ``n`` pixels along one axis."""
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def to_pixel(q: np.ndarray, n: int) -> np.ndarray:
    """Map normalized coordinates to fractional pixel indices (unclamped)."""
    return ((q + 1.0) * n - 1.0) / 2.0


def _axis_weights(q: np.ndarray, n: int):
    u = to_pixel(q, n)
    inside = (u >= -_EDGE_TOL) & (u <= n - 1 + _EDGE_TOL)
    u = np.clip(u, 0, n - 1)
    if n == 1:
        zeros = np.zeros(q.shape, dtype=np.intp)
        return zeros, zeros, np.zeros_like(u), np.zeros_like(u)
    i0 = np.clip(np.floor(u), 0, n - 2).astype(np.intp)
    frac = u - i0
    slope = np.where(inside, n / 2.0, 0.0).astype(u.dtype)
    return i0, i0 + 1, frac, slope


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample ``x`` [B,C,H,W] at normalized (h, w) points ``coords`` [M,2].

    Pixel (m, n) is centered at (-1 + (2m+1)/H, -1 + (2n+1)/W). Points
    outside the pixel-center hull are clamped onto it, which replicates the
    border pixels. Returns [B,C,M].
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_sample expects [B,C,H,W], got {x.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be [M,2], got {coords.shape}")
    batch, chans, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"bilinear_sample needs a non-empty image, got {h}x{w}")
    m = coords.shape[0]
    dtype = np.result_type(x.dtype, coords.dtype)

    qh = coords.data[:, 0].astype(dtype)
    qw = coords.data[:, 1].astype(dtype)
    h0, h1, fh, dh = _axis_weights(qh, h)
    w0, w1, fw, dw = _axis_weights(qw, w)

    corners = (h0 * w + w0, h0 * w + w1, h1 * w + w0, h1 * w + w1)
    weights = ((1 - fh) * (1 - fw), (1 - fh) * fw, fh * (1 - fw), fh * fw)
    rows = np.tile(np.arange(m), 4)
    interp = sparse.csr_matrix(
        (np.concatenate(weights), (rows, np.concatenate(corners))), shape=(m, h * w)
    )

    flat = x.data.reshape(batch * chans, h * w).astype(dtype, copy=False)
    out = np.asarray(interp @ flat.T).T.reshape(batch, chans, m)

    def backward(g):
        g2 = g.reshape(batch * chans, m)
        gx = gc = None
        if x.requires_grad:
            gx = np.asarray(interp.T @ g2.T).T.reshape(batch, chans, h, w)
        if coords.requires_grad:
            s00, s01, s10, s11 = ((g2 * flat[:, c]).sum(axis=0) for c in corners)
            g_fh = (1 - fw) * (s10 - s00) + fw * (s11 - s01)
            g_fw = (1 - fh) * (s01 - s00) + fh * (s11 - s10)
            gc = np.stack([g_fh * dh, g_fw * dw], axis=1)
        return (gx, gc)

    return _make(np.ascontiguousarray(out), (x, coords), backward, "bilinear_sample")
