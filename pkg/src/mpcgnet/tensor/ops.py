"""Differentiable operations over :class:`Tensor`.

Every op computes its forward with numpy, accumulating reductions in
float64 and casting back to the input dtype, then registers a
vector-Jacobian closure on the active tape.  Shapes must match exactly;
the only broadcasting is against rank-0 tensors and the explicit
:func:`broadcast_mul`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, record

_F64 = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ValueError(f"{op}: expected a rank-{rank} tensor, got shape {x.shape}")


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad_hw(a: np.ndarray, pad: int, value=0.0) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _strided(a: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return a[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


# ---------------------------------------------------------------------------
# convolution family


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    _check_rank(x, 4, "conv2d")
    _check_rank(weight, 4, "conv2d weight")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ValueError(f"conv2d: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ValueError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(
            f"conv2d: weight input-channel dim is {cin_g}, expected {cin // groups} "
            f"(channels={cin}, groups={groups})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel height/width must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError(f"conv2d: need padding >= 0 and stride >= 1, got {padding}, {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match output channels {cout}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    dtype = x.dtype
    x64 = x.data.astype(_F64)
    w64 = weight.data.astype(_F64)
    parents = (x, weight) if bias is None else (x, weight, bias)

    if kh == kw == 1 and stride == 1 and padding == 0 and groups == 1:
        wm = w64.reshape(cout, cin)
        xm = x64.reshape(n, cin, h * w)
        out = np.matmul(wm, xm)
        if bias is not None:
            out += bias.data.astype(_F64)[None, :, None]

        def vjp(g):
            gm = g.astype(_F64).reshape(n, cout, h * w)
            dx = np.matmul(wm.T, gm).reshape(x.shape)
            g2 = gm.transpose(1, 0, 2).reshape(cout, -1)
            dw = (g2 @ xm.transpose(1, 0, 2).reshape(cin, -1).T).reshape(weight.shape)
            grads = [dx, dw]
            if bias is not None:
                grads.append(g2.sum(axis=1))
            return tuple(grads)

        return record("conv2d", out.reshape(n, cout, h, w).astype(dtype), parents, vjp)

    xp = _pad_hw(x64, padding)

    if groups == cin and cout == cin:
        # depthwise: one kernel per channel
        out = np.zeros((n, cout, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += _strided(xp, i, j, stride, ho, wo) * w64[None, :, 0, i, j, None, None]
        if bias is not None:
            out += bias.data.astype(_F64)[None, :, None, None]

        def vjp(g):
            g64 = g.astype(_F64)
            dxp = np.zeros_like(xp)
            dw = np.zeros_like(w64)
            for i in range(kh):
                for j in range(kw):
                    _strided(dxp, i, j, stride, ho, wo)[...] += g64 * w64[None, :, 0, i, j, None, None]
                    dw[:, 0, i, j] = (g64 * _strided(xp, i, j, stride, ho, wo)).sum(axis=(0, 2, 3))
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
            grads = [dx, dw]
            if bias is not None:
                grads.append(g64.sum(axis=(0, 2, 3)))
            return tuple(grads)

        return record("depthwise_conv2d", out.astype(dtype), parents, vjp)

    cout_g = cout // groups
    cols_per_group = []
    outs = []
    for gi in range(groups):
        xg = xp[:, gi * cin_g : (gi + 1) * cin_g]
        win = sliding_window_view(xg, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin_g * kh * kw)
        wm = w64[gi * cout_g : (gi + 1) * cout_g].reshape(cout_g, -1)
        outs.append((cols @ wm.T).reshape(n, ho, wo, cout_g))
        cols_per_group.append(cols)
    out = np.concatenate(outs, axis=3).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.astype(_F64)[None, :, None, None]

    def vjp(g):
        g64 = g.astype(_F64)
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w64)
        gm_all = g64.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        for gi in range(groups):
            gm = gm_all[:, gi * cout_g : (gi + 1) * cout_g]
            wm = w64[gi * cout_g : (gi + 1) * cout_g].reshape(cout_g, -1)
            dw[gi * cout_g : (gi + 1) * cout_g] = (gm.T @ cols_per_group[gi]).reshape(cout_g, cin_g, kh, kw)
            dcols = (gm @ wm).reshape(n, ho, wo, cin_g, kh, kw)
            dxg = dxp[:, gi * cin_g : (gi + 1) * cin_g]
            for i in range(kh):
                for j in range(kw):
                    _strided(dxg, i, j, stride, ho, wo)[...] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + w]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g64.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record("conv2d", out.astype(dtype), parents, vjp)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Per-channel convolution with same padding (``k // 2``)."""
    _check_rank(x, 4, "depthwise_conv2d")
    c = x.shape[1]
    if weight.ndim != 4 or weight.shape[:2] != (c, 1):
        raise ValueError(f"depthwise_conv2d: weight shape {weight.shape} must be ({c}, 1, k, k)")
    return conv2d(x, weight, bias, stride=stride, padding=weight.shape[2] // 2, groups=c)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel linear map over channels; ``weight`` is ``(Cout, Cin)``."""
    _check_rank(weight, 2, "pointwise_conv weight")
    return conv2d(x, reshape(weight, weight.shape + (1, 1)), bias)


def maxpool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max over k×k windows; ties route the gradient to the first element."""
    _check_rank(x, 4, "maxpool2d")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"maxpool2d: invalid k={k}, stride={stride}, padding={padding}")
    if padding >= k:
        raise ValueError("maxpool2d: padding must be smaller than the window")
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = _pad_hw(x.data, padding, value=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                _strided(dxp, i, j, stride, ho, wo)[...] += np.where(hit, g, 0)
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return record("maxpool2d", np.ascontiguousarray(out), (x,), vjp)


def _interp_matrix(n: int, factor: int) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) / factor - 0.5, clamped at 0
    m = np.zeros((n * factor, n))
    for d in range(n * factor):
        src = max((d + 0.5) / factor - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    return m


_UPSAMPLE_FACTORS = (1, 2, 4, 8, 16, 32)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer power-of-two factor (align_corners=False)."""
    _check_rank(x, 4, "bilinear_upsample")
    if factor not in _UPSAMPLE_FACTORS:
        raise ValueError(f"bilinear_upsample: factor must be one of {_UPSAMPLE_FACTORS}, got {factor}")
    if factor == 1:
        return x
    uh = _interp_matrix(x.shape[2], factor)
    uw = _interp_matrix(x.shape[3], factor)
    out = np.matmul(np.matmul(uh, x.data.astype(_F64)), uw.T)

    def vjp(g):
        return (np.matmul(uh.T, np.matmul(g.astype(_F64), uw)),)

    return record("bilinear_upsample", out.astype(x.dtype), (x,), vjp)


# ---------------------------------------------------------------------------
# layout


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels: empty list")
    for t in xs:
        _check_rank(t, 4, "concat_channels")
    ref = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: shape {t.shape} does not match {ref} outside the channel dim")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=1)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record("concat_channels", out, tuple(xs), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank(x, 4, "slice_channels")
    out = x.data[:, start:stop].copy()

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return record("slice_channels", out, (x,), vjp)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    _check_rank(x, 4, "split_channels")
    c = x.shape[1]
    if parts < 1 or c % parts:
        raise ValueError(f"split_channels: {c} channels not divisible into {parts} parts")
    step = c // parts
    return [slice_channels(x, i * step, (i + 1) * step) for i in range(parts)]


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return record("reshape", out, (x,), vjp)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return record("permute", out, (x,), vjp)


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the bottom and right edges of the spatial dims."""
    _check_rank(x, 4, "pad2d")
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right)))

    def vjp(g):
        return (g[:, :, :h, :w],)

    return record("pad2d", out, (x,), vjp)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h × w`` region."""
    _check_rank(x, 4, "crop2d")
    if (h, w) == x.shape[2:]:
        return x
    out = x.data[:, :, :h, :w].copy()

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :h, :w] = g
        return (full,)

    return record("crop2d", out, (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    return g.sum().reshape(shape) if shape == () and g.shape != () else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: denominator has zero entries")

    def vjp(g):
        q = g / b.data
        return _unbroadcast(q, a.shape), _unbroadcast(-q * a.data / b.data, b.shape)

    return record("div", a.data / b.data, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return record("scale", (x.data * c).astype(x.dtype), (x,), vjp)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (g,)

    return record("add_scalar", (x.data + float(c)).astype(x.dtype), (x,), vjp)


def broadcast_mul(x: Tensor, m: Tensor) -> Tensor:
    """``x * m`` where every dim of ``m`` is 1 or equal to ``x``'s.

    This is the one sanctioned broadcast (attention maps applied to
    features); anything else is rejected.
    """
    if m.ndim != x.ndim or any(md not in (1, xd) for md, xd in zip(m.shape, x.shape)):
        raise ValueError(f"broadcast_mul: map shape {m.shape} cannot scale {x.shape}")
    axes = tuple(i for i, (md, xd) in enumerate(zip(m.shape, x.shape)) if md == 1 and xd != 1)

    def vjp(g):
        gm = (g.astype(_F64) * x.data).sum(axis=axes, keepdims=True) if axes else g * x.data
        return g * m.data, gm

    return record("broadcast_mul", x.data * m.data, (x, m), vjp)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    z = z.astype(_F64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def vjp(g):
        return (g * (s * (1.0 - s)),)

    return record("sigmoid", s.astype(x.dtype), (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    z = x.data.astype(_F64)
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return (g * (cdf + z * pdf),)

    return record("gelu", (z * cdf).astype(x.dtype), (x,), vjp)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def vjp(g):
        return (np.where(pos, g, 0),)

    return record("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), vjp)


def power_select(x: Tensor, gate: int) -> Tensor:
    """``x ** gate`` for a binary gate, read as a selection.

    ``gate == 0`` yields all ones (whatever the sign of ``x``), ``gate == 1``
    yields ``x`` itself.
    """
    if gate not in (0, 1):
        raise ValueError(f"power_select: gate must be 0 or 1, got {gate}")
    if gate == 1:
        return x
    return record("power_select", np.ones_like(x.data), (x,), lambda g: (None,))


# ---------------------------------------------------------------------------
# attention primitives


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError(f"softmax_lastdim: empty last axis in shape {x.shape}")
    z = x.data.astype(_F64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        g64 = g.astype(_F64)
        return (s * (g64 - (g64 * s).sum(axis=-1, keepdims=True)),)

    return record("softmax_lastdim", s.astype(x.dtype), (x,), vjp)


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes must match."""
    if a.ndim < 3 or a.ndim != b.ndim:
        raise ValueError(f"matmul_batched: ranks {a.ndim} and {b.ndim} must be equal and >= 3")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul_batched: incompatible shapes {a.shape} @ {b.shape}")
    a64 = a.data.astype(_F64)
    b64 = b.data.astype(_F64)

    def vjp(g):
        g64 = g.astype(_F64)
        return np.matmul(g64, np.swapaxes(b64, -1, -2)), np.matmul(np.swapaxes(a64, -1, -2), g64)

    return record("matmul_batched", np.matmul(a64, b64).astype(a.dtype), (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions


def mean(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Mean over ``axes`` keeping them as size-1 dims."""
    axes = tuple(axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.astype(_F64).mean(axis=axes, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record("mean", out.astype(x.dtype), (x,), vjp)


def amax(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Max over ``axes`` (kept as size-1 dims); gradient goes to the first argmax."""
    axes = tuple(sorted(axes))
    keep = tuple(i for i in range(x.ndim) if i not in axes)
    moved = np.transpose(x.data, keep + axes)
    kept_shape = moved.shape[: len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = np.argmax(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if i in axes else x.shape[i] for i in range(x.ndim))
    inv = np.argsort(keep + axes)

    def vjp(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g.reshape(kept_shape)[..., None], axis=-1)
        return (gflat.reshape(moved.shape).transpose(inv),)

    return record("amax", vals.reshape(out_shape), (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank(x, 4, "global_avg_pool")
    return mean(x, (2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    _check_rank(x, 4, "global_max_pool")
    return amax(x, (2, 3))


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(x.shape, g, dtype=_F64),)

    return record("sum_all", np.asarray(x.data.astype(_F64).sum(), dtype=x.dtype), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def vjp(g):
        return (np.full(x.shape, g / n, dtype=_F64),)

    return record("mean_all", np.asarray(x.data.astype(_F64).mean(), dtype=x.dtype), (x,), vjp)


# ---------------------------------------------------------------------------
# normalization and losses


def group_norm(
    x: Tensor,
    groups: int,
    eps: float = 1e-5,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Per-sample normalization over channel groups, optional per-channel affine."""
    _check_rank(x, 4, "group_norm")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by groups={groups}")
    if (weight is None) != (bias is None):
        raise ValueError("group_norm: affine needs both weight and bias")
    if weight is not None and (weight.shape != (c,) or bias.shape != (c,)):
        raise ValueError(f"group_norm: affine params must have shape ({c},)")
    xg = x.data.astype(_F64).reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    if weight is not None:
        out = xhat * weight.data.astype(_F64)[None, :, None, None] + bias.data.astype(_F64)[None, :, None, None]
        parents = (x, weight, bias)
    else:
        out = xhat
        parents = (x,)

    def vjp(g):
        g64 = g.astype(_F64)
        gx = g64 * weight.data.astype(_F64)[None, :, None, None] if weight is not None else g64
        gg = gx.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (gg - gg.mean(axis=2, keepdims=True) - xh * (gg * xh).mean(axis=2, keepdims=True))
        grads = [dx.reshape(x.shape)]
        if weight is not None:
            grads.append((g64 * xhat).sum(axis=(0, 2, 3)))
            grads.append(g64.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record("group_norm", out.astype(x.dtype), parents, vjp)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (target carries no gradient)."""
    target = np.asarray(target, dtype=_F64)
    if target.shape != logits.shape:
        raise ValueError(f"bce_with_logits: target shape {target.shape} != logits shape {logits.shape}")
    z = logits.data.astype(_F64)
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def vjp(g):
        return ((_sigmoid_np(z) - target) * (g / n),)

    return record("bce_with_logits", np.asarray(loss.mean(), dtype=logits.dtype), (logits,), vjp)
