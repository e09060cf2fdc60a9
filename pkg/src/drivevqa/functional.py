"""Differentiable NN operations on Tensor.

Convolutions run as one BLAS matmul per kernel row: the row's horizontal
taps form a stacked (O*KW, C) weight applied to a contiguous full-width row
slab of the padded input, and each tap's slice of the product is added into
the output at its column shift. This keeps every copy a sequential slab
copy and never materialises a K^2-sized im2col buffer. Bilinear upsampling
has a slab fast path for exact integer factors (the only case the fusion
path uses); Sobel and local variance are compositions of pad/conv/
elementwise nodes so they inherit gradients for free.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import (
    Tensor, ShapeError, astensor, relu, _node, _needs_grad, grad_enabled,
)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


# -- padding ---------------------------------------------------------------

def pad2d(x, pad, mode="zero"):
    """Pad the two trailing (spatial) axes by ``pad`` on each side."""
    x = astensor(x)
    if pad == 0:
        return x
    p = int(pad)
    spec = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    if mode == "zero":
        out_data = np.pad(x.data, spec)
    elif mode == "replicate":
        out_data = np.pad(x.data, spec, mode="edge")
    else:
        raise ValueError(f"unknown pad mode {mode!r}")

    H, W = x.data.shape[-2], x.data.shape[-1]

    def backward(g):
        if not _needs_grad(x):
            return
        if mode == "zero":
            x._accumulate_owned(np.ascontiguousarray(g[..., p:p + H, p:p + W]))
            return
        # replicate: fold the padded margins back onto the edge rows/cols
        t = g.copy()
        t[..., :, p] += t[..., :, :p].sum(axis=-1)
        t[..., :, W + p - 1] += t[..., :, W + p:].sum(axis=-1)
        t = t[..., :, p:p + W]
        t[..., p, :] += t[..., :p, :].sum(axis=-2)
        t[..., H + p - 1, :] += t[..., H + p:, :].sum(axis=-2)
        x._accumulate_owned(np.ascontiguousarray(t[..., p:p + H, :]))

    return _node(out_data, (x,), backward)


# -- convolution -------------------------------------------------------------

def _conv_out_size(n, k, s, p, d):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def _row_slab(xp, ky, OH, SH, dil):
    """(B, C, OH, Wp) slab of the input rows kernel-row ``ky`` sees.

    With unit stride the rows are consecutive, so the slab is a zero-copy
    view whose trailing axes still merge for GEMM; BLAS packs it internally.
    """
    if SH == 1:
        return xp[:, :, ky * dil: ky * dil + OH, :]
    return np.ascontiguousarray(xp[:, :, ky * dil: ky * dil + (OH - 1) * SH + 1: SH, :])


def _row_patches(xp, ky, KW, OH, OW, SH, SW, dil):
    """Tap-stacked patch matrix (B, C*KW, OH*OW) for one kernel row."""
    B, C = xp.shape[0], xp.shape[1]
    rows = xp[:, :, ky * dil: ky * dil + (OH - 1) * SH + 1: SH, :]
    colk = np.empty((B, C, KW, OH, OW), dtype=xp.dtype)
    for kx in range(KW):
        colk[:, :, kx] = rows[:, :, :, kx * dil: kx * dil + (OW - 1) * SW + 1: SW]
    return colk.reshape(B, C * KW, OH * OW)


def _conv_forward(xp, w, OH, OW, SH, SW, dil, keep_slabs=False):
    """Cross-correlation over a padded input; one GEMM per kernel row.

    The row's KW taps are folded into that GEMM on whichever side is
    narrower: for C >= O the taps stack into a (O*KW, C) weight applied to a
    contiguous full-width row slab (output written wide, then shift-added);
    for C < O they stack into a (B, C*KW, OH*OW) patch matrix instead, so
    the GEMM output stays minimal. Either way no K^2-sized buffer exists.
    Returns (out[B,O,OH,OW], per-row slabs/patches or None).
    """
    B, C = xp.shape[0], xp.shape[1]
    O, _, KH, KW = w.shape
    Wp = xp.shape[3]
    if KH == 1 and KW == 1:
        if SH == 1 and SW == 1:
            col = xp.reshape(B, C, OH * OW)
        else:
            col = np.ascontiguousarray(xp[:, :, ::SH, ::SW]).reshape(B, C, OH * OW)
        return np.matmul(w.reshape(O, C)[None], col).reshape(B, O, OH, OW), None
    slabs = [] if keep_slabs else None
    if C < O:
        out = None
        for ky in range(KH):
            colk = _row_patches(xp, ky, KW, OH, OW, SH, SW, dil)
            if keep_slabs:
                slabs.append(colk)
            part = np.matmul(w[:, :, ky].reshape(O, C * KW)[None], colk)
            out = part if out is None else np.add(out, part, out=out)
        return out.reshape(B, O, OH, OW), slabs
    out = np.zeros((B, O, OH, OW), dtype=xp.dtype)
    for ky in range(KH):
        slab = _row_slab(xp, ky, OH, SH, dil)
        if keep_slabs:
            slabs.append(slab)
        wrow = np.ascontiguousarray(w[:, :, ky, :].transpose(0, 2, 1)).reshape(O * KW, C)
        t = np.matmul(wrow[None], slab.reshape(B, C, OH * Wp))
        t = t.reshape(B, O, KW, OH, Wp)
        for kx in range(KW):
            out += t[:, :, kx, :, kx * dil: kx * dil + (OW - 1) * SW + 1: SW]
    return out, slabs


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """2D cross-correlation.

    Args:
        x: Tensor (B, C, H, W).
        weight: Tensor (O, C // groups, KH, KW).
        bias: optional Tensor (O,).
    Returns:
        Tensor (B, O, OH, OW).
    """
    x, weight = astensor(x), astensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {x.ndim}")
    B, C, H, W = x.shape
    O, Cg, KH, KW = weight.shape
    if C % groups != 0 or O % groups != 0:
        raise ShapeError(f"channel axis: in={C}, out={O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"channel axis: weight expects {Cg} in-channels per group, input has {C // groups}")
    OH = _conv_out_size(H, KH, stride, padding, dilation)
    OW = _conv_out_size(W, KW, stride, padding, dilation)
    if OH < 1 or OW < 1:
        raise ShapeError(f"spatial axis: output size {OH}x{OW} collapsed below 1")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    SH = SW = stride
    Wp = xp.shape[3]
    # Row slabs double as the weight-gradient operand, so they are kept on the
    # node whenever the weight participates in the graph (peak extra memory is
    # KH contiguous copies of the padded input, freed with the node).
    keep = grad_enabled() and _needs_grad(weight)

    og = O // groups
    if groups == 1:
        out_data, slabs = _conv_forward(xp, weight.data, OH, OW, SH, SW, dilation, keep)
        slabs = [slabs]
    else:
        out_data = np.empty((B, O, OH, OW), dtype=x.dtype)
        slabs = []
        for gi in range(groups):
            out_data[:, gi * og:(gi + 1) * og], sl = _conv_forward(
                xp[:, gi * Cg:(gi + 1) * Cg], weight.data[gi * og:(gi + 1) * og],
                OH, OW, SH, SW, dilation, keep)
            slabs.append(sl)
    if bias is not None:
        bias = astensor(bias)
        out_data += bias.data[:, None, None]

    def _backward_group(gf4, gslabs, xpg, wg, xg_out):
        """Gradients for one group; returns gw, adds input grad into xg_out."""
        Og, Cgg = wg.shape[0], wg.shape[1]
        need_w = _needs_grad(weight)
        want_gx = xg_out is not None
        if KH == 1 and KW == 1:
            gf = gf4.reshape(B, Og, OH * OW)
            gw = None
            if need_w:
                if SH == 1 and SW == 1:
                    col = xpg.reshape(B, Cgg, OH * OW)
                else:
                    col = np.ascontiguousarray(xpg[:, :, ::SH, ::SW]).reshape(B, Cgg, OH * OW)
                gw = np.matmul(gf, col.transpose(0, 2, 1)).sum(axis=0).reshape(Og, Cgg, 1, 1)
            if want_gx:
                gcol = np.matmul(wg.reshape(Og, Cgg).T[None], gf).reshape(B, Cgg, OH, OW)
                xg_out[:, :, ::SH, ::SW] += gcol
            return gw
        if Cgg < Og:
            gf = np.ascontiguousarray(gf4).reshape(B, Og, OH * OW)
            gw = np.empty_like(wg) if need_w else None
            for ky in range(KH):
                if need_w:
                    colk = (gslabs[ky] if gslabs is not None
                            else _row_patches(xpg, ky, KW, OH, OW, SH, SW, dilation))
                    gwk = np.matmul(gf, colk.transpose(0, 2, 1)).sum(axis=0)
                    gw[:, :, ky] = gwk.reshape(Og, Cgg, KW)
                if want_gx:
                    gcolk = np.matmul(wg[:, :, ky].reshape(Og, Cgg * KW).T[None], gf)
                    gcolk = gcolk.reshape(B, Cgg, KW, OH, OW)
                    grows = xg_out[:, :, ky * dilation: ky * dilation + (OH - 1) * SH + 1: SH, :]
                    for kx in range(KW):
                        grows[:, :, :, kx * dilation: kx * dilation + (OW - 1) * SW + 1: SW] += gcolk[:, :, kx]
            return gw
        # Zero-embed the output grad at each column tap shift once; the same
        # wide buffer then serves every kernel row's two GEMMs.
        gwide = np.zeros((B, Og, KW, OH, Wp), dtype=gf4.dtype)
        for kx in range(KW):
            gwide[:, :, kx, :, kx * dilation: kx * dilation + (OW - 1) * SW + 1: SW] = gf4
        gwide = gwide.reshape(B, Og * KW, OH * Wp)
        gw = np.empty((Og, Cgg, KH, KW), dtype=wg.dtype) if need_w else None
        for ky in range(KH):
            if need_w:
                slab = gslabs[ky] if gslabs is not None else _row_slab(xpg, ky, OH, SH, dilation)
                s2 = slab.reshape(B, Cgg, OH * Wp)
                gwk = np.matmul(gwide, s2.transpose(0, 2, 1)).sum(axis=0)
                gw[:, :, ky, :] = gwk.reshape(Og, KW, Cgg).transpose(0, 2, 1)
            if want_gx:
                wrow = np.ascontiguousarray(wg[:, :, ky, :].transpose(0, 2, 1)).reshape(Og * KW, Cgg)
                gr = np.matmul(wrow.T[None], gwide)
                xg_out[:, :, ky * dilation: ky * dilation + (OH - 1) * SH + 1: SH, :] += \
                    gr.reshape(B, Cgg, OH, Wp)
        return gw

    def backward(g):
        if bias is not None and _needs_grad(bias):
            bias._accumulate_owned(g.sum(axis=(0, 2, 3)))
        need_w, need_x = _needs_grad(weight), _needs_grad(x)
        if not (need_w or need_x):
            return
        gxp = np.zeros(xp.shape, dtype=xp.dtype) if need_x else None
        if groups == 1:
            gw = _backward_group(g, slabs[0], xp, weight.data, gxp)
        else:
            gw = np.empty_like(weight.data) if need_w else None
            for gi in range(groups):
                sl_o = slice(gi * og, (gi + 1) * og)
                sl_c = slice(gi * Cg, (gi + 1) * Cg)
                gwg = _backward_group(
                    np.ascontiguousarray(g[:, sl_o]), slabs[gi], xp[:, sl_c],
                    weight.data[sl_o], gxp[:, sl_c] if need_x else None)
                if gw is not None:
                    gw[sl_o] = gwg
        if need_w:
            weight._accumulate_owned(gw)
        if need_x:
            if padding:
                gxp = np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W])
            x._accumulate_owned(gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out_data, parents, backward)


def conv2d_dynamic_depthwise(x, kernels, padding=1):
    """Depthwise conv whose 3x3 kernel differs per sample and channel.

    Args:
        x: Tensor (B, C, H, W).
        kernels: Tensor (B, C, KH, KW), one kernel per (sample, channel).
    Evaluated as a shift-and-accumulate sum, so no patch buffer is built.
    """
    x, kernels = astensor(x), astensor(kernels)
    B, C, H, W = x.shape
    Bk, Ck, KH, KW = kernels.shape
    if (Bk, Ck) != (B, C):
        raise ShapeError(f"kernel batch/channel axes {(Bk, Ck)} do not match input {(B, C)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    OH = H + 2 * padding - KH + 1
    OW = W + 2 * padding - KW + 1
    out_data = np.zeros((B, C, OH, OW), dtype=x.dtype)
    tmp = np.empty_like(out_data)
    for ky in range(KH):
        for kx in range(KW):
            np.multiply(kernels.data[:, :, ky, kx, None, None],
                        xp[:, :, ky:ky + OH, kx:kx + OW], out=tmp)
            out_data += tmp

    def backward(g):
        if _needs_grad(kernels):
            gk = np.empty_like(kernels.data)
            for ky in range(KH):
                for kx in range(KW):
                    # fused multiply-reduce, no feature-map temporary
                    gk[:, :, ky, kx] = np.einsum(
                        "bchw,bchw->bc", g, xp[:, :, ky:ky + OH, kx:kx + OW])
            kernels._accumulate_owned(gk)
        if _needs_grad(x):
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            t = np.empty_like(g)
            for ky in range(KH):
                for kx in range(KW):
                    np.multiply(kernels.data[:, :, ky, kx, None, None], g, out=t)
                    gxp[:, :, ky:ky + OH, kx:kx + OW] += t
            if padding:
                gxp = np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W])
            x._accumulate_owned(gxp)

    return _node(out_data, (x, kernels), backward)


# -- pooling -----------------------------------------------------------------

def max_pool2d(x, kernel, stride=None, padding=0):
    """Window-wise max; gradient routes to the first argmax in each window."""
    x = astensor(x)
    KH, KW = _pair(kernel)
    stride = kernel if stride is None else stride
    SH, SW = _pair(stride)
    B, C, H, W = x.shape
    if H + 2 * padding < KH or W + 2 * padding < KW:
        raise ShapeError(f"spatial axis: input {H}x{W} smaller than pool window {KH}x{KW}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    OH = (Hp - KH) // SH + 1
    OW = (Wp - KW) // SW + 1

    if (KH, KW, SH, SW) == (2, 2, 2, 2) and Hp % 2 == 0 and Wp % 2 == 0:
        # disjoint 2x2 windows: maximum chains beat an argmax gather, and the
        # winner mask can be recovered by equality in window order
        quads = (xp[:, :, ::2, ::2], xp[:, :, ::2, 1::2],
                 xp[:, :, 1::2, ::2], xp[:, :, 1::2, 1::2])
        out_data = np.maximum(np.maximum(quads[0], quads[1]),
                              np.maximum(quads[2], quads[3]))

        def backward_2x2(g):
            if not _needs_grad(x):
                return
            gxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
            views = (gxp[:, :, ::2, ::2], gxp[:, :, ::2, 1::2],
                     gxp[:, :, 1::2, ::2], gxp[:, :, 1::2, 1::2])
            taken = None
            routed = np.empty(out_data.shape, dtype=x.dtype)
            for q, v in zip(quads, views):
                sel = q == out_data
                if taken is None:
                    taken = sel
                else:
                    sel &= ~taken
                    taken |= sel
                np.multiply(g, sel, out=routed)
                v += routed
            if padding:
                gxp = np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W])
            x._accumulate_owned(gxp)

        return _node(out_data, (x,), backward_2x2)

    if (SH, SW) == (1, 1) and KH * KW <= 16:
        # stride-1 windows: separable maximum chains, then recover each
        # window's first winner by equality scans in window order
        rows = None
        for ky in range(KH):
            sl = xp[:, :, ky: ky + OH, :]
            rows = sl.copy() if rows is None else np.maximum(rows, sl, out=rows)
        out_data = None
        for kx in range(KW):
            sl = rows[:, :, :, kx: kx + OW]
            out_data = sl.copy() if out_data is None else np.maximum(out_data, sl, out=out_data)

        def backward_s1(g):
            if not _needs_grad(x):
                return
            gxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
            taken = np.zeros(out_data.shape, dtype=bool)
            sel = np.empty_like(taken)
            routed = np.empty(out_data.shape, dtype=x.dtype)
            left = KH * KW
            for ky in range(KH):
                for kx in range(KW):
                    src = xp[:, :, ky: ky + OH, kx: kx + OW]
                    np.equal(src, out_data, out=sel)
                    sel &= ~taken
                    np.multiply(g, sel, out=routed)
                    gxp[:, :, ky: ky + OH, kx: kx + OW] += routed
                    left -= 1
                    if left:
                        taken |= sel
            if padding:
                gxp = np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W])
            x._accumulate_owned(gxp)

        return _node(out_data, (x,), backward_s1)

    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (B, C, OH, OW, KH, KW), (s0, s1, s2 * SH, s3 * SW, s2, s3))
    win = win.reshape(B, C, OH, OW, KH * KW) if win.flags.c_contiguous else \
        np.ascontiguousarray(win).reshape(B, C, OH, OW, KH * KW)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if not _needs_grad(x):
            return
        ky, kx = idx // KW, idx % KW
        oh = np.arange(OH)[:, None]
        ow = np.arange(OW)[None, :]
        rows = oh * SH + ky          # (B, C, OH, OW)
        cols = ow * SW + kx
        flat = ((np.arange(B)[:, None, None, None] * C +
                 np.arange(C)[None, :, None, None]) * Hp + rows) * Wp + cols
        if SH >= KH and SW >= KW:
            # non-overlapping windows: each input cell wins at most once
            gxp = np.zeros(B * C * Hp * Wp, dtype=x.dtype)
            gxp[flat.ravel()] = g.ravel()
        else:
            gxp = np.bincount(flat.ravel(), weights=g.ravel(),
                              minlength=B * C * Hp * Wp).astype(x.dtype)
        gxp = gxp.reshape(B, C, Hp, Wp)
        if padding:
            gxp = np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W])
        x._accumulate_owned(gxp)

    return _node(out_data, (x,), backward)


def global_avg_pool(x):
    """Spatial mean per channel: (B, C, H, W) -> (B, C, 1, 1)."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be rank 4, got {x.ndim}")
    B, C, H, W = x.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        if _needs_grad(x):
            x._accumulate_owned(np.broadcast_to(g / (H * W), x.shape).copy())

    return _node(out_data, (x,), backward)


def adaptive_avg_pool2d(x, out_hw):
    """Average-pool to a fixed output grid (torch-style bin edges)."""
    x = astensor(x)
    OH, OW = _pair(out_hw)
    B, C, H, W = x.shape
    if H == OH and W == OW:
        return x
    if H % OH == 0 and W % OW == 0:
        fh, fw = H // OH, W // OW
        out_data = x.data.reshape(B, C, OH, fh, OW, fw).mean(axis=(3, 5))

        def backward(g):
            if _needs_grad(x):
                gx = np.broadcast_to(
                    g[:, :, :, None, :, None] / (fh * fw), (B, C, OH, fh, OW, fw)
                ).reshape(B, C, H, W)
                x._accumulate_owned(np.ascontiguousarray(gx))

        return _node(out_data, (x,), backward)

    h0 = (np.arange(OH) * H) // OH
    h1 = -((-(np.arange(OH) + 1) * H) // OH)    # ceil((i+1)H/OH)
    w0 = (np.arange(OW) * W) // OW
    w1 = -((-(np.arange(OW) + 1) * W) // OW)
    out_data = np.empty((B, C, OH, OW), dtype=x.dtype)
    for i in range(OH):
        for j in range(OW):
            out_data[:, :, i, j] = x.data[:, :, h0[i]:h1[i], w0[j]:w1[j]].mean(axis=(2, 3))

    def backward(g):
        if not _needs_grad(x):
            return
        gx = np.zeros_like(x.data)
        for i in range(OH):
            for j in range(OW):
                n = (h1[i] - h0[i]) * (w1[j] - w0[j])
                gx[:, :, h0[i]:h1[i], w0[j]:w1[j]] += g[:, :, i, j, None, None] / n
        x._accumulate_owned(gx)

    return _node(out_data, (x,), backward)


# -- bilinear upsampling ------------------------------------------------------

def _axis_phase_tables(n, f):
    """Half-pixel source offsets/weights for integer upscale factor ``f``.

    For output index o = f*i + p the source coordinate is i + (p+0.5)/f - 0.5,
    so every phase p uses a fixed (shift, weight) pair.
    """
    tables = []
    for p in range(f):
        c = (p + 0.5) / f - 0.5
        lo = int(np.floor(c))
        w1 = c - lo
        tables.append((lo, 1.0 - w1, w1))
    return tables


def _axis_slices(shape_len, axis, sl):
    idx = [slice(None)] * shape_len
    idx[axis] = sl
    return tuple(idx)


def _upsample_axis_int(data, f, axis):
    """Upsample one axis by an exact integer factor with half-pixel bilinear.

    Works in the array's native layout (no moveaxis) so every phase write is
    a plain strided slab store and the result stays contiguous.
    """
    n = data.shape[axis]
    nd = data.ndim
    first = data[_axis_slices(nd, axis, slice(0, 1))]
    last = data[_axis_slices(nd, axis, slice(n - 1, n))]
    padded = np.concatenate([first, data, last], axis=axis)
    out_shape = list(data.shape)
    out_shape[axis] = n * f
    out = np.empty(tuple(out_shape), dtype=data.dtype)
    tmp = None
    for p, (lo, w0, w1) in enumerate(_axis_phase_tables(n, f)):
        a = lo + 1  # into padded coords
        lhs = padded[_axis_slices(nd, axis, slice(a, a + n))]
        rhs = padded[_axis_slices(nd, axis, slice(a + 1, a + 1 + n))]
        dst = out[_axis_slices(nd, axis, slice(p, None, f))]
        np.multiply(lhs, data.dtype.type(w0), out=dst)
        tmp = np.multiply(rhs, data.dtype.type(w1), out=tmp)
        dst += tmp
    return out


def _upsample_axis_int_grad(g, f, axis, n):
    nd = g.ndim
    acc_shape = list(g.shape)
    acc_shape[axis] = n + 2
    acc = np.zeros(tuple(acc_shape), dtype=g.dtype)
    for p, (lo, w0, w1) in enumerate(_axis_phase_tables(n, f)):
        a = lo + 1
        gp = g[_axis_slices(nd, axis, slice(p, None, f))]
        acc[_axis_slices(nd, axis, slice(a, a + n))] += w0 * gp
        acc[_axis_slices(nd, axis, slice(a + 1, a + 1 + n))] += w1 * gp
    acc[_axis_slices(nd, axis, slice(1, 2))] += acc[_axis_slices(nd, axis, slice(0, 1))]
    acc[_axis_slices(nd, axis, slice(n, n + 1))] += acc[_axis_slices(nd, axis, slice(n + 1, n + 2))]
    return acc[_axis_slices(nd, axis, slice(1, n + 1))]


def upsample_bilinear(x, out_h, out_w):
    """Bilinear upsample with half-pixel (non-corner-aligned) sampling.

    Downscaling is rejected; the fusion path only ever enlarges. At 1x this
    is the identity.
    """
    x = astensor(x)
    B, C, H, W = x.shape
    if out_h < H or out_w < W:
        raise ShapeError(f"spatial axis: refusing to downscale {H}x{W} -> {out_h}x{out_w}")
    if out_h == H and out_w == W:
        return x

    if out_h % H == 0 and out_w % W == 0:
        fh, fw = out_h // H, out_w // W
        out_data = x.data
        if fh > 1:
            out_data = _upsample_axis_int(out_data, fh, 2)
        if fw > 1:
            out_data = _upsample_axis_int(out_data, fw, 3)

        def backward(g):
            if not _needs_grad(x):
                return
            if fw > 1:
                g = _upsample_axis_int_grad(g, fw, 3, W)
            if fh > 1:
                g = _upsample_axis_int_grad(g, fh, 2, H)
            x._accumulate_owned(np.ascontiguousarray(g))

        return _node(out_data, (x,), backward)

    # generic (non-integer ratio) path: separable gather
    def axis_index(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        lo = np.floor(c).astype(np.int64)
        w1 = c - lo
        i0 = np.clip(lo, 0, n_in - 1)
        i1 = np.clip(lo + 1, 0, n_in - 1)
        return i0, i1, w1

    h0, h1, wh = axis_index(H, out_h)
    w0, w1, ww = axis_index(W, out_w)
    rows = (1.0 - wh)[None, None, :, None] * x.data[:, :, h0, :] + wh[None, None, :, None] * x.data[:, :, h1, :]
    out_data = (1.0 - ww)[None, None, None, :] * rows[:, :, :, w0] + ww[None, None, None, :] * rows[:, :, :, w1]
    out_data = out_data.astype(x.dtype)

    def backward(g):
        if not _needs_grad(x):
            return
        grows = np.zeros((B, C, out_h, W), dtype=x.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), w0), (1.0 - ww)[None, None, None, :] * g)
        np.add.at(grows, (slice(None), slice(None), slice(None), w1), ww[None, None, None, :] * g)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), h0, slice(None)), (1.0 - wh)[None, None, :, None] * grows)
        np.add.at(gx, (slice(None), slice(None), h1, slice(None)), wh[None, None, :, None] * grows)
        x._accumulate_owned(gx)

    return _node(out_data, (x,), backward)


# -- signal descriptors --------------------------------------------------------

SOBEL_EPS = 1e-8

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def sobel_magnitude(x):
    """sqrt(Gx^2 + Gy^2 + eps) with replicate borders; single-channel input."""
    x = astensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"channel axis: sobel_magnitude wants (B,1,H,W), got {tuple(x.shape)}")
    k = Tensor(np.stack([_SOBEL_X[None], _SOBEL_Y[None]]).astype(x.dtype))
    g = conv2d(pad2d(x, 1, mode="replicate"), k)
    gx, gy = g[:, 0:1], g[:, 1:2]
    from .tensor import tsqrt
    return tsqrt(gx * gx + gy * gy + SOBEL_EPS)


def local_variance(x, window=3):
    """Sliding-window variance E[x^2]-(E[x])^2, replicate borders, clamped >= 0."""
    x = astensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"channel axis: local_variance wants (B,1,H,W), got {tuple(x.shape)}")
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    k = Tensor(np.full((1, 1, window, window), 1.0 / (window * window), dtype=x.dtype))
    p = window // 2
    m = conv2d(pad2d(x, p, mode="replicate"), k)
    m2 = conv2d(pad2d(x * x, p, mode="replicate"), k)
    return relu(m2 - m * m)


# -- normalization -------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5, fuse_relu=False):
    """Per-channel batch norm over (B, H, W); mutates the running stats in
    train mode. ``fuse_relu`` applies ReLU in the same node (saves two full
    passes over feature-map-sized arrays on the conv backbone)."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    B, C, H, W = x.shape
    n = B * H * W
    if training:
        # single-pass stats: E[x] and E[x^2]
        s1 = x.data.sum(axis=(0, 2, 3))
        s2 = np.einsum("bchw,bchw->c", x.data, x.data)
        mu = s1 / n
        var = np.maximum(s2 / n - mu * mu, 0.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = x.data - mu[:, None, None]
    xhat *= ivstd[:, None, None]
    out_data = xhat * gamma.data[:, None, None]
    out_data += beta.data[:, None, None]
    if fuse_relu:
        np.maximum(out_data, 0.0, out=out_data)

    def backward(g):
        if fuse_relu:
            g = g * (out_data > 0)
        if _needs_grad(gamma):
            gamma._accumulate_owned(np.einsum("bchw,bchw->c", g, xhat))
        if _needs_grad(beta):
            beta._accumulate_owned(g.sum(axis=(0, 2, 3)))
        if not _needs_grad(x):
            return
        gs = g * gamma.data[:, None, None]
        if training:
            sum_g = gs.sum(axis=(0, 2, 3), keepdims=True)
            sum_gx = np.einsum("bchw,bchw->c", gs, xhat)[:, None, None]
            gs -= sum_g / n
            gs -= xhat * (sum_gx / n)
        gs *= ivstd[:, None, None]
        x._accumulate_owned(gs.astype(x.dtype, copy=False))

    return _node(out_data, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * ivstd
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        if _needs_grad(gamma):
            gamma._accumulate_owned((g * xhat).sum(axis=axes))
        if _needs_grad(beta):
            beta._accumulate_owned(g.sum(axis=axes))
        if not _needs_grad(x):
            return
        n = x.shape[-1]
        gs = g * gamma.data
        gx = (gs - gs.mean(axis=-1, keepdims=True)
              - xhat * (gs * xhat).mean(axis=-1, keepdims=True)) * ivstd
        x._accumulate_owned(gx.astype(x.dtype, copy=False))

    return _node(out_data, (x, gamma, beta), backward)


# -- losses / lookups -----------------------------------------------------------

def cross_entropy_per_token(logits, targets, valid_mask=None):
    """Token-level cross entropy from raw logits.

    Args:
        logits: Tensor (N, V).
        targets: int array (N,), must be inside [0, V).
        valid_mask: optional float/bool array (N,); invalid rows contribute
            zero loss and zero gradient (padding positions).
    Returns:
        (loss, max_probs): loss Tensor (N,) and a detached (N,) array of the
        per-position max softmax probability (confidence readout).
    """
    logits = astensor(logits)
    targets = np.asarray(targets)
    N, V = logits.shape
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= V:
        raise ValueError(f"target ids outside vocabulary range [0, {V})")
    if valid_mask is None:
        valid = np.ones(N, dtype=logits.dtype)
    else:
        valid = np.asarray(valid_mask).astype(logits.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    probs = ez / sez
    rows = np.arange(N)
    logp_t = z[rows, targets] - np.log(sez[:, 0])
    out_data = -logp_t * valid
    max_probs = probs.max(axis=1)

    def backward(g):
        if not _needs_grad(logits):
            return
        gl = probs * (g * valid)[:, None]
        gl[rows, targets] -= g * valid
        logits._accumulate_owned(gl.astype(logits.dtype, copy=False))

    return _node(out_data, (logits,), backward), max_probs


def embedding_lookup(weight, ids):
    """Row gather from an embedding table; ids is an int array of any shape."""
    weight = astensor(weight)
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= weight.shape[0]:
        raise ValueError(f"token ids outside vocabulary range [0, {weight.shape[0]})")
    out_data = weight.data[ids]

    def backward(g):
        if _needs_grad(weight):
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
            weight._accumulate_owned(gw)

    return _node(out_data, (weight,), backward)


def dropout(x, p, rng, training):
    """Inverted dropout; identity when eval or p == 0."""
    x = astensor(x)
    if not training or p <= 0.0:
        return x
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep

    def backward(g):
        if _needs_grad(x):
            x._accumulate_owned(g * mask)

    return _node(x.data * mask, (x,), backward)
