"""Differentiable neural ops: 3D convolution, pooling, group norm, losses.

conv3d is the single workhorse: the 1x3x3 in-plane, 3x1x1 inter-slice,
1x1x1 pointwise/grouped, and full 3x3x3 cases are all instantiations of
it. Implementations loop over kernel offsets (at most 27) with a vectorized
einsum per offset, which keeps forward and backward symmetric and auditable.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _as_tensor, _result


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def conv3d(x, kernel, bias=None, stride=(1, 1, 1), pad=(0, 0, 0), groups=1):
    """Grouped 3D convolution with zero padding.

    x: [N, Cin, D, H, W]; kernel: [Cout, Cin/groups, kd, kh, kw];
    bias: optional [Cout]. Output extent per axis is
    floor((ext + 2*pad - k) / stride) + 1.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel, like=x)
    if bias is not None:
        bias = _as_tensor(bias, like=x)
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(pad)
    if x.data.ndim != 5:
        raise ValueError(f"conv3d: input must be 5D [N,Cin,D,H,W], got {x.shape}")
    if kernel.data.ndim != 5:
        raise ValueError(f"conv3d: kernel must be 5D [Cout,Cin/g,kd,kh,kw], got {kernel.shape}")
    N, Cin, D, H, W = x.shape
    Cout, Cin_g, kd, kh, kw = kernel.shape
    g = int(groups)
    if Cin % g != 0:
        raise ValueError(f"conv3d: input channels {Cin} not divisible by groups {g}")
    if Cout % g != 0:
        raise ValueError(f"conv3d: output channels {Cout} not divisible by groups {g}")
    if Cin_g != Cin // g:
        raise ValueError(f"conv3d: kernel expects {Cin_g} channels/group, input has {Cin // g}")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({Cout},)")
    Dp, Hp, Wp = D + 2 * pd, H + 2 * ph, W + 2 * pw
    for name, k, ext in (("depth", kd, Dp), ("height", kh, Hp), ("width", kw, Wp)):
        if k > ext:
            raise ValueError(f"conv3d: kernel {name} extent {k} exceeds padded input extent {ext}")
    Do = (Dp - kd) // sd + 1
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    xg = xp.reshape(N, g, Cin // g, Dp, Hp, Wp)
    kg = kernel.data.reshape(g, Cout // g, Cin_g, kd, kh, kw)

    def _window(arr, a, b, c):
        return arr[:, :, :,
                   a:a + (Do - 1) * sd + 1:sd,
                   b:b + (Ho - 1) * sh + 1:sh,
                   c:c + (Wo - 1) * sw + 1:sw]

    out = np.zeros((N, g, Cout // g, Do, Ho, Wo), dtype=x.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                out += np.einsum("ngidhw,goi->ngodhw", _window(xg, a, b, c),
                                 kg[:, :, :, a, b, c], optimize=True)
    out = out.reshape(N, Cout, Do, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(grad):
        gg = grad.reshape(N, g, Cout // g, Do, Ho, Wo)
        if kernel.requires_grad:
            gk = np.zeros_like(kg)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gk[:, :, :, a, b, c] = np.einsum(
                            "ngodhw,ngidhw->goi", gg, _window(xg, a, b, c), optimize=True)
            kernel._accumulate(gk.reshape(kernel.shape))
        if x.requires_grad:
            gxp = np.zeros((N, g, Cin // g, Dp, Hp, Wp), dtype=x.dtype)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        _window(gxp, a, b, c)[...] += np.einsum(
                            "ngodhw,goi->ngidhw", gg, kg[:, :, :, a, b, c], optimize=True)
            gx = gxp.reshape(N, Cin, Dp, Hp, Wp)[:, :, pd:pd + D, ph:ph + H, pw:pw + W]
            x._accumulate(gx)
        if bias is not None and bias.requires_grad:
            bias._accumulate(grad.sum(axis=(0, 2, 3, 4)))

    return _result(out, parents, bwd)


def pad3d(x, pad, fill=0.0):
    """Constant padding of the trailing three axes of [N, C, D, H, W]."""
    x = _as_tensor(x)
    pd, ph, pw = _triple(pad)
    N, C, D, H, W = x.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)),
                 constant_values=fill)

    def bwd(grad):
        if x.requires_grad:
            x._accumulate(grad[:, :, pd:pd + D, ph:ph + H, pw:pw + W])

    return _result(out, (x,), bwd)


def pool3d(x, mode, window, stride=None, pad=(0, 0, 0)):
    """Max or average pooling over [N, C, D, H, W].

    Max-pool gradient routes to the argmax (first index in row-major scan
    on ties); avg-pool gradient is spread uniformly over the window.
    Optional zero padding (-inf for max) for stride alignment in stems.
    """
    x = _as_tensor(x)
    if mode not in ("max", "avg"):
        raise ValueError(f"pool3d: mode must be 'max' or 'avg', got {mode!r}")
    wd, wh, ww = _triple(window)
    sd, sh, sw = _triple(stride if stride is not None else window)
    pd, ph, pw = _triple(pad)
    if (pd, ph, pw) != (0, 0, 0):
        fill = float(np.finfo(x.dtype).min) if mode == "max" else 0.0
        return pool3d(pad3d(x, (pd, ph, pw), fill=fill), mode,
                      (wd, wh, ww), (sd, sh, sw))
    N, C, D, H, W = x.shape
    for name, w, ext in (("depth", wd, D), ("height", wh, H), ("width", ww, W)):
        if w > ext:
            raise ValueError(f"pool3d: window {name} extent {w} exceeds input extent {ext}")
    Do = (D - wd) // sd + 1
    Ho = (H - wh) // sh + 1
    Wo = (W - ww) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (wd, wh, ww), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw][:, :, :Do, :Ho, :Wo]
    flat = win.reshape(N, C, Do, Ho, Wo, wd * wh * ww)
    K = wd * wh * ww

    if mode == "max":
        arg = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bwd(grad):
            if not x.requires_grad:
                return
            gx = np.zeros_like(x.data)
            od, oh, ow = np.unravel_index(arg, (wd, wh, ww))
            n_i, c_i, d_i, h_i, w_i = np.ogrid[:N, :C, :Do, :Ho, :Wo]
            np.add.at(gx, (n_i, c_i, d_i * sd + od, h_i * sh + oh, w_i * sw + ow), grad)
            x._accumulate(gx)
    else:
        out = flat.mean(axis=-1)

        def bwd(grad):
            if not x.requires_grad:
                return
            gx = np.zeros_like(x.data)
            gshare = grad / K
            for a in range(wd):
                for b in range(wh):
                    for c in range(ww):
                        gx[:, :,
                           a:a + (Do - 1) * sd + 1:sd,
                           b:b + (Ho - 1) * sh + 1:sh,
                           c:c + (Wo - 1) * sw + 1:sw] += gshare
            x._accumulate(gx)

    return _result(np.ascontiguousarray(out), (x,), bwd)


def group_norm(x, num_groups, gamma, beta, eps=1e-5):
    """Group normalization over [N, C, ...spatial] with affine gamma/beta [C]."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, like=x)
    beta = _as_tensor(beta, like=x)
    shape = x.shape
    N, C = shape[0], shape[1]
    G = int(num_groups)
    if C % G != 0:
        raise ValueError(f"group_norm: channels {C} not divisible by groups {G}")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"group_norm: gamma/beta must have shape ({C},)")
    grouped = x.data.reshape(N, G, -1)
    m = grouped.shape[2]
    mu = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv_std).reshape(shape)
    affine_shape = (1, C) + (1,) * (len(shape) - 2)
    out = gamma.data.reshape(affine_shape) * xhat + beta.data.reshape(affine_shape)

    def bwd(grad):
        reduce_axes = (0,) + tuple(range(2, len(shape)))
        if gamma.requires_grad:
            gamma._accumulate((grad * xhat).sum(axis=reduce_axes))
        if beta.requires_grad:
            beta._accumulate(grad.sum(axis=reduce_axes))
        if x.requires_grad:
            dxhat = (grad * gamma.data.reshape(affine_shape)).reshape(N, G, m)
            xh = xhat.reshape(N, G, m)
            mean_d = dxhat.mean(axis=2, keepdims=True)
            mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
            gx = inv_std * (dxhat - mean_d - xh * mean_dx)
            x._accumulate(gx.reshape(shape))

    return _result(out, (x, gamma, beta), bwd)


def upsample2x_nearest(x):
    """Nearest-neighbor 2x upsampling of [N, C, H, W]."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"upsample2x_nearest: input must be 4D, got {x.shape}")
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(grad):
        if x.requires_grad:
            x._accumulate(grad.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _result(out, (x,), bwd)


def bce_with_logits(pred, target, weights=None):
    """Weighted-mean binary cross entropy on logits (numerically stable).

    Returns sum(w * elt_loss) / sum(w); zero-weight total yields loss 0.
    """
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"bce_with_logits: shape mismatch {pred.shape} vs {target.shape}")
    if weights is None:
        w = np.ones_like(pred.data)
    else:
        w = np.asarray(weights, dtype=pred.dtype)
        if w.shape != pred.shape:
            raise ValueError(f"bce_with_logits: weights shape {w.shape} != {pred.shape}")
        if np.any(w < 0):
            raise ValueError("bce_with_logits: weights must be nonnegative")
    z = pred.data
    elt = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    total_w = w.sum()
    denom = total_w if total_w > 0 else 1.0
    loss = np.asarray((w * elt).sum() / denom, dtype=pred.dtype)

    def bwd(grad):
        if pred.requires_grad:
            # overflow-safe sigmoid
            e = np.exp(-np.abs(z))
            sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            pred._accumulate(grad * w * (sig - target) / denom)

    return _result(loss, (pred,), bwd)


def smooth_l1(pred, target, beta=1.0, weights=None):
    """Weighted-mean smooth-L1: 0.5*d^2/beta for |d| < beta, else |d| - 0.5*beta."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"smooth_l1: shape mismatch {pred.shape} vs {target.shape}")
    if weights is None:
        w = np.ones_like(pred.data)
    else:
        w = np.asarray(weights, dtype=pred.dtype)
        if w.shape != pred.shape:
            raise ValueError(f"smooth_l1: weights shape {w.shape} != {pred.shape}")
        if np.any(w < 0):
            raise ValueError("smooth_l1: weights must be nonnegative")
    beta = float(beta)
    d = pred.data - target
    ad = np.abs(d)
    inner = ad < beta
    elt = np.where(inner, 0.5 * d * d / beta, ad - 0.5 * beta)
    total_w = w.sum()
    denom = total_w if total_w > 0 else 1.0
    loss = np.asarray((w * elt).sum() / denom, dtype=pred.dtype)

    def bwd(grad):
        if pred.requires_grad:
            delt = np.where(inner, d / beta, np.sign(d))
            pred._accumulate(grad * w * delt / denom)

    return _result(loss, (pred,), bwd)
