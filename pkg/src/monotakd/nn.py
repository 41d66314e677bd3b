"""Convolutions, bilinear sampling, deformable convolution and squeeze-excite.

Feature maps are channels-last: ``[H, W, C]`` for 2-D and ``[H, W, L, C]`` for
3-D grids. All convolutions use stride 1 and "same" zero padding, so every
map stays on the grid it came from.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, make


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple
    in_channels: int
    out_channels: int
    dilation: int = 1

    def weight_shape(self) -> tuple:
        return (*self.kernel, self.in_channels, self.out_channels)


@dataclass(frozen=True)
class DeformSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)

    @property
    def offset_channels(self) -> int:
        return 2 * self.kernel[0] * self.kernel[1]


@dataclass(frozen=True)
class SESpec:
    channels: int
    reduction: int = 4

    def __post_init__(self):
        if self.reduction <= 0 or self.channels % self.reduction:
            raise ValueError(f"SE reduction {self.reduction} does not divide {self.channels} channels")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction


def _same_pads(kernel, dilation):
    pads = []
    for k in kernel:
        total = dilation * (k - 1)
        pads.append((total // 2, total - total // 2))
    return pads


def _check_conv(x, w, dilation, spatial):
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if x.ndim != spatial + 1:
        raise ValueError(f"expected a {spatial + 1}-D channels-last input, got shape {x.shape}")
    if w.ndim != spatial + 2:
        raise ValueError(f"expected weight of rank {spatial + 2}, got shape {w.shape}")
    if w.shape[-2] != x.shape[-1]:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, weight expects {w.shape[-2]}")
    for n, k in zip(x.shape[:spatial], w.shape[:spatial]):
        extent = dilation * (k - 1) + 1
        if extent > n + dilation * (k - 1):
            raise ValueError("kernel larger than padded input")


def _convnd(x, w, b, dilation: int, spatial: int) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x, w, dilation, spatial)
    xd, wd = x.data, w.data
    dims = xd.shape[:spatial]
    cin = xd.shape[-1]
    kernel = wd.shape[:spatial]
    cout = wd.shape[-1]
    taps = list(np.ndindex(*kernel))
    need_x = x.requires_grad
    wt = wd.reshape(len(taps), cin, cout)
    if len(taps) == 1:
        xp, sls = xd, [tuple(slice(None) for _ in dims)]
    else:
        # accumulate one matmul per kernel tap over shifted views of the padded
        # input; cheaper than materialising the full im2col matrix
        pads = _same_pads(kernel, dilation)
        xp = np.pad(xd, pads + [(0, 0)])
        sls = [tuple(slice(o * dilation, o * dilation + n) for o, n in zip(off, dims)) for off in taps]
    out = np.zeros(dims + (cout,))
    for t, sl in enumerate(sls):
        out += xp[sl] @ wt[t]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = np.empty_like(wt)
        gxp = np.zeros(xp.shape) if need_x else None
        for t, sl in enumerate(sls):
            gw[t] = xp[sl].reshape(-1, cin).T @ g2
            if need_x:
                gxp[sl] += g @ wt[t].T
        gx = None
        if need_x:
            gx = gxp if len(taps) == 1 else gxp[tuple(slice(p[0], p[0] + n) for p, n in zip(pads, dims))]
        grads = [gx, gw.reshape(wd.shape)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make(f"conv{spatial}d", out, parents, vjp)


def conv2d(x, w, b=None, dilation: int = 1) -> Tensor:
    """Same-padded, stride-1 cross-correlation of ``x[H,W,Cin]`` with ``w[kh,kw,Cin,Cout]``."""
    return _convnd(x, w, b, dilation, 2)


def conv3d(x, w, b=None, dilation: int = 1) -> Tensor:
    """Dense 3-D counterpart of :func:`conv2d` on ``x[H,W,L,Cin]``."""
    return _convnd(x, w, b, dilation, 3)


def bilinear_sample(x, coords) -> Tensor:
    """Sample ``x[H,W,C]`` at real ``(row, col)`` locations, returning ``[N,C]``.

    Each of the four neighbours that falls outside the grid contributes zero,
    which is the same convention as zero padding.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    xd, cd = x.data, coords.data.reshape(-1, 2)
    H, W, C = xd.shape
    r, c = cd[:, 0], cd[:, 1]
    r0f, c0f = np.floor(r), np.floor(c)
    fr, fc = r - r0f, c - c0f
    r0, c0 = r0f.astype(np.int64), c0f.astype(np.int64)
    n = len(r)

    corners = ((0, 0), (0, 1), (1, 0), (1, 1))
    wts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    dwr = np.stack([-(1 - fc), -fc, (1 - fc), fc], axis=1)
    dwc = np.stack([-(1 - fr), (1 - fr), -fr, fr], axis=1)
    rows, cols, valid = [], [], []
    for dr, dc in corners:
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        rows.append(np.where(ok, rr, 0))
        cols.append(np.where(ok, cc, 0))
        valid.append(ok)
    valid = np.stack(valid, axis=1)
    flat_idx = np.stack(rows, axis=1) * W + np.stack(cols, axis=1)
    wv = wts * valid
    S = sparse.csr_matrix((wv.ravel(), (np.repeat(np.arange(n), 4), flat_idx.ravel())), shape=(n, H * W))
    x2 = xd.reshape(H * W, C)
    out = S @ x2
    gathered = x2[flat_idx] * valid[..., None]  # [N,4,C]

    def vjp(g):
        gx = (S.T @ g).reshape(H, W, C)
        if not coords.requires_grad:
            return gx, None
        vr = np.einsum("nk,nkc->nc", dwr, gathered)
        vc = np.einsum("nk,nkc->nc", dwc, gathered)
        gc = np.stack([(vr * g).sum(1), (vc * g).sum(1)], axis=1).reshape(coords.shape)
        return gx, gc

    sig = np.concatenate([r0, c0])
    margin = float(min(np.min(np.minimum(fr, 1 - fr)), np.min(np.minimum(fc, 1 - fc)))) if n else float("inf")
    if not coords.requires_grad:
        # the weights are constant, so the op is linear in x: no kinks
        return make("bilinear_sample", out, (x, coords), vjp)
    return make("bilinear_sample", out, (x, coords), vjp, signature=sig, kink_margin=margin)


def _tap_grid(H, W, kernel, dilation=1):
    kh, kw = kernel
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    taps = [((a - kh // 2) * dilation, (b - kw // 2) * dilation) for a in range(kh) for b in range(kw)]
    grid = np.empty((H, W, len(taps), 2))
    for t, (da, db) in enumerate(taps):
        grid[:, :, t, 0] = ii + da
        grid[:, :, t, 1] = jj + db
    return grid


def deformable_conv2d(x, offset_w, offset_b, conv_w, conv_b=None) -> Tensor:
    """Deformable convolution without modulation.

    Offsets ``[H,W,2*kh*kw]`` (row, col pairs per tap in row-major tap order)
    are predicted by a same-padded 3x3 conv of ``x``; each tap is then read
    with :func:`bilinear_sample` at the shifted location.
    """
    x = as_tensor(x)
    conv_w = as_tensor(conv_w)
    H, W, cin = x.shape
    kh, kw, wcin, cout = conv_w.shape
    if wcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weight expects {wcin}")
    ntap = kh * kw
    offsets = conv2d(x, offset_w, offset_b)
    if offsets.shape[-1] != 2 * ntap:
        raise ValueError(f"offset conv must produce {2 * ntap} channels, got {offsets.shape[-1]}")
    base = _tap_grid(H, W, (kh, kw))
    coords = ad.add(ad.reshape(offsets, (H, W, ntap, 2)), base)
    sampled = bilinear_sample(x, ad.reshape(coords, (H * W * ntap, 2)))
    out = ad.matmul(ad.reshape(sampled, (H * W, ntap * cin)), ad.reshape(conv_w, (ntap * cin, cout)))
    if conv_b is not None:
        out = ad.add(out, conv_b)
    return ad.reshape(out, (H, W, cout))


def se_block(x, fc1_w, fc1_b, fc2_w, fc2_b) -> Tensor:
    """Squeeze-and-excitation: global mean, FC-ReLU-FC-sigmoid, channel rescale."""
    x = as_tensor(x)
    C = x.shape[-1]
    if as_tensor(fc1_w).shape[0] != C or as_tensor(fc2_w).shape[-1] != C:
        raise ValueError("SE weights do not match the channel count")
    s = ad.reshape(ad.mean(x, axis=(0, 1)), (1, C))
    h = ad.relu(ad.add(ad.matmul(s, fc1_w), fc1_b))
    gate = ad.sigmoid(ad.add(ad.matmul(h, fc2_w), fc2_b))
    return ad.mul(x, ad.reshape(gate, (C,)))


def softmax_axis(x, axis: int = -1) -> Tensor:
    return ad.softmax(x, axis)


relu = ad.relu
