"""Differentiable neural-network primitives built on :mod:`fcbfuse.tensor`."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, matmul, record, sigmoid  # noqa: F401


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


def _unpad(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    h, w = a.shape[-2:]
    return a[..., ph:h - ph, pw:w - pw]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``groups`` may be 1 or equal to the channel count (depthwise).
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N x C x H x W, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be Cout x Cin x kh x kw, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if sh < 1 or sw < 1:
        raise ValueError(f"stride must be >= 1, got {(sh, sw)}")
    if cg * groups != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin} channels, weight expects "
            f"{cg} per group x {groups} groups")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty ({ho}x{wo})")

    if groups == 1:
        return _conv_dense(x, weight, bias, sh, sw, ph, pw, ho, wo)
    if groups == cin and cg == 1 and cout == cin:
        return _conv_depthwise(x, weight, bias, sh, sw, ph, pw, ho, wo)
    raise ValueError("conv2d supports groups=1 or depthwise (groups == channels) only")


def _conv_shifted(xd: np.ndarray, wd: np.ndarray, ph: int, pw: int, ho: int, wo: int) -> np.ndarray:
    """Stride-1 correlation as one GEMM per kernel tap, without an im2col buffer.

    The zero-padded input is flattened per channel; the tap at (i, j) then reads
    a contiguous run of columns shifted by ``i * Wp + j``. Each output row is
    computed over the padded width and the extra columns are dropped.
    """
    n, cin, h, w = xd.shape
    cout, _, kh, kw = wd.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    flat = np.zeros((n, cin, hp * wp + kw - 1), dtype=xd.dtype)
    flat[:, :, :hp * wp].reshape(n, cin, hp, wp)[:, :, ph:ph + h, pw:pw + w] = xd
    taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
    m = ho * wp
    out = np.empty((n, cout, m), dtype=xd.dtype)
    tmp = np.empty((cout, m), dtype=xd.dtype)
    for b in range(n):
        acc = out[b]
        np.matmul(taps[0, 0], flat[b, :, :m], out=acc)
        for i in range(kh):
            for j in range(kw):
                if i or j:
                    off = i * wp + j
                    np.matmul(taps[i, j], flat[b, :, off:off + m], out=tmp)
                    acc += tmp
    return out.reshape(n, cout, ho, wp)[..., :wo]


def _conv_dense(x, weight, bias, sh, sw, ph, pw, ho, wo) -> Tensor:
    xd, wd = x.data, weight.data
    n, cin, h, w = xd.shape
    cout, _, kh, kw = wd.shape
    pointwise = kh == kw == sh == sw == 1 and ph == pw == 0
    padded_shape = (n, cin, h + 2 * ph, w + 2 * pw)
    w2 = wd.reshape(cout, -1)
    cols = None
    if pointwise:
        cols = xd.reshape(n, cin, h * w)
        out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    elif sh == sw == 1:
        out = np.ascontiguousarray(_conv_shifted(xd, wd, ph, pw, ho, wo))
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
        out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        nonlocal cols
        gm = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            if cols is None:
                xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
                cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
            gw = gm[0] @ cols[0].T
            for i in range(1, n):
                gw += gm[i] @ cols[i].T
            gw = gw.reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, gm)
            if pointwise:
                gx = gcols.reshape(xd.shape)
            else:
                gx = _unpad(_col2im(gcols, padded_shape, kh, kw, sh, sw, ho, wo), ph, pw)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, grad_fn)


def _conv_depthwise(x, weight, bias, sh, sw, ph, pw, ho, wo) -> Tensor:
    xd, wd = x.data, weight.data
    kh, kw = wd.shape[2:]
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    out = np.zeros((xd.shape[0], xd.shape[1], ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += wd[None, :, 0, i, j, None, None] * xp[:, :, i:i + sh * (ho - 1) + 1:sh,
                                                         j:j + sw * (wo - 1) + 1:sw]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
                gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[sl] += g * wd[None, :, 0, i, j, None, None]
        gx = _unpad(gxp, ph, pw) if gxp is not None else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d_depthwise", inputs, out, grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects last dim {weight.shape[0]}, got {x.shape}")
    y = matmul(x, weight)
    return y + bias if bias is not None else y


# --------------------------------------------------------------------------
# normalization


def _standardize(a: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """(a - mean) / sqrt(var + eps) over the last axis, and that reciprocal std."""
    k = a.shape[-1]
    centred = a - a.sum(axis=-1, keepdims=True) / k
    var = np.einsum("...k,...k->...", centred, centred)[..., None] / k
    rstd = 1.0 / np.sqrt(var + eps)
    centred *= rstd
    return centred, rstd


def _normalize_grad(g_hat: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    # g_hat, xhat: (..., M) normalized over the last axis
    m1 = g_hat.mean(axis=-1, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=-1, keepdims=True)
    return rstd * (g_hat - m1 - xhat * m2)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c, h, w = x.shape
    if num_groups < 1 or c % num_groups:
        raise ShapeError(f"{c} channels cannot be split into {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine params must have shape ({c},)")
    xhat_g, rstd = _standardize(x.data.reshape(n, num_groups, -1), eps)
    xhat = xhat_g.reshape(n, c, h, w)
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            g_hat = (g * gd).reshape(n, num_groups, -1)
            gx = _normalize_grad(g_hat, xhat_g, rstd).reshape(n, c, h, w)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("group_norm", (x, gamma, beta), out, grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last dimension."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data
    xhat, rstd = _standardize(xd, eps)
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def grad_fn(g):
        gx = _normalize_grad(g * gamma.data, xhat, rstd) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gamma, beta), out, grad_fn)


# --------------------------------------------------------------------------
# activations


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)
    return record("silu", (x,), xd * s, lambda g: (_silu_grad(g, xd, s),))


def _silu_grad(g: np.ndarray, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return g * s * (1 + x * (1 - s))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return record("relu", (x,), np.where(mask, xd, 0).astype(xd.dtype), lambda g: (g * mask,))


def attention_logits(q: Tensor, k: Tensor, scale: float) -> Tensor:
    """``scale * q @ k`` for q (..., L, d) and k (..., d, M).

    Computed as a broadcast product and reduction rather than a BLAS call so
    that identical key columns give bitwise identical logits; BLAS kernels
    round edge columns differently, which leaks key-dependent noise through
    an otherwise invariant softmax.
    """
    qd, kd = q.data, k.data
    if qd.shape[-1] != kd.shape[-2]:
        raise ShapeError(f"attention inner dimensions differ: {qd.shape} vs {kd.shape}")
    out = (qd[..., :, :, None] * kd[..., None, :, :]).sum(axis=-2) * scale

    def grad_fn(g):
        gs = g * scale
        gq = np.matmul(gs, np.swapaxes(kd, -1, -2)) if q.requires_grad else None
        gk = np.matmul(np.swapaxes(qd, -1, -2), gs) if k.requires_grad else None
        return gq, gk

    return record("attention_logits", (q, k), out, grad_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), out, grad_fn)


# --------------------------------------------------------------------------
# resampling


@lru_cache(maxsize=256)
def resample_matrix(n_in: int, n_out: int, mode: str, antialias: bool = False) -> np.ndarray:
    """(n_out, n_in) weights mapping a 1-D signal to ``n_out`` samples.

    Bilinear follows the half-pixel-centre convention. With ``antialias`` the
    triangle kernel is stretched by the downscale factor so every input
    sample contributes.
    """
    if mode == "nearest":
        if antialias:
            raise ValueError("antialias is only valid with bilinear mode")
        idx = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), idx] = 1.0
    elif mode == "bilinear":
        scale = n_in / n_out
        support = max(1.0, scale) if antialias else 1.0
        centers = (np.arange(n_out) + 0.5) * scale
        dist = (np.arange(n_in)[None, :] + 0.5 - centers[:, None]) / support
        m = np.clip(1.0 - np.abs(dist), 0.0, None)
        m /= m.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging weights for adaptive average pooling along one axis."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    m.setflags(write=False)
    return m


def resample2d(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str = "resample2d") -> Tensor:
    """Separable linear map over the last two axes: ``rows @ x @ cols.T``."""
    if x.shape[-2] != rows.shape[1] or x.shape[-1] != cols.shape[1]:
        raise ShapeError(f"resample matrices do not fit input spatial dims {x.shape[-2:]}")
    mr = rows.astype(x.dtype, copy=False)
    mc = cols.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(mr, x.data), mc.T)
    return record(op, (x,), out, lambda g: (np.matmul(np.matmul(mr.T, g), mc),))


def interpolate2d(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear",
                  antialias: bool = False) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {(out_h, out_w)}")
    if antialias and mode != "bilinear":
        raise ValueError("antialias is only valid with bilinear mode")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    return resample2d(x, resample_matrix(h, out_h, mode, antialias),
                      resample_matrix(w, out_w, mode, antialias), op=f"interpolate_{mode}")


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    return resample2d(x, adaptive_pool_matrix(h, out_h), adaptive_pool_matrix(w, out_w),
                      op="adaptive_avg_pool2d")


def resize_array(a: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear",
                 antialias: bool = False) -> np.ndarray:
    """Untracked :func:`interpolate2d` on a plain array (..., H, W)."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a.copy()
    mr = resample_matrix(h, out_h, mode, antialias).astype(a.dtype, copy=False)
    mc = resample_matrix(w, out_w, mode, antialias).astype(a.dtype, copy=False)
    return np.matmul(np.matmul(mr, a), mc.T)


# --------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy evaluated from logits in log-sum-exp form."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} differ in shape")
    z, t = logits.data, target.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.asarray(per.mean(), dtype=z.dtype)

    def grad_fn(g):
        return (g * (expit(z) - t) / n, None)

    return record("bce_with_logits", (logits, target), out, grad_fn)
