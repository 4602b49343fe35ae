"""Differentiable primitives.

Every function here takes and returns :class:`~ttt_recon.diffcore.tensor.Tensor`
values and registers an exact VJP on the tape. Complex inputs follow the
real/imaginary-decomposition convention: for a complex-linear map the VJP is
the conjugate-transpose applied to the cotangent.

l1/l2 reductions treat complex tensors as interleaved real pairs (the l1 of a
complex tensor is sum(|re| + |im|)), which makes the sign(.) subgradient rule
exact; sign(0) = 0 throughout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, ShapeError
from .tensor import COMPLEX, REAL, Tensor, record

# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _real_view(a: np.ndarray) -> np.ndarray:
    """View a complex array as interleaved float32 pairs (no copy)."""
    if np.iscomplexobj(a):
        return a.view(REAL)
    return a


def _check_same_kind(a: Tensor, b: Tensor, op: str) -> None:
    if a.is_complex != b.is_complex:
        raise ContractError(f"{op} requires both operands real or both complex")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_kind(a, b, "add")
    out = a.data + b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_kind(a, b, "sub")
    out = a.data - b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two real tensors."""
    if a.is_complex or b.is_complex:
        raise ContractError("mul is defined for real tensors; use mul_const for complex scaling")
    out = a.data * b.data
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    s = float(s)
    out = x.data * s
    return record(out, (x,), lambda g: (g * s,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (real or complex, broadcastable).

    For complex c this is the S_i / mask stage of the measurement model; the
    VJP is conj(c) * g, restricted to the real part when x is real.
    """
    c = np.asarray(c)
    out = x.data * c

    def vjp(g):
        gx = g * np.conj(c)
        if not x.is_complex and np.iscomplexobj(gx):
            gx = gx.real
        return (_unbroadcast(gx, x.shape),)

    return record(out, (x,), vjp)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if x.is_complex:
        raise ContractError("leaky_relu expects a real tensor")
    factor = np.where(x.data > 0, np.float32(1.0), np.float32(slope))
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def sqrt_elem(x: Tensor) -> Tensor:
    """Elementwise square root of a nonnegative real tensor; grad 0 at 0."""
    if x.is_complex:
        raise ContractError("sqrt_elem expects a real tensor")
    out = np.sqrt(x.data)

    def vjp(g):
        inv = np.where(out > 0, np.float32(0.5) / np.where(out > 0, out, 1), np.float32(0.0))
        return (g * inv,)

    return record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# complex structure


def to_complex(x: Tensor) -> Tensor:
    """Promote a real tensor to complex with zero imaginary part."""
    if x.is_complex:
        return x
    return record(x.data.astype(COMPLEX), (x,), lambda g: (g.real.astype(REAL),))


def cmagnitude(z: Tensor) -> Tensor:
    """Elementwise complex magnitude; subgradient 0 at z = 0."""
    mag = np.abs(z.data).astype(REAL)

    def vjp(g):
        safe = np.where(mag > 0, mag, 1).astype(REAL)
        unit = np.where(mag > 0, z.data / safe, 0).astype(COMPLEX)
        return (unit * g,)

    return record(mag, (z,), vjp)


def abs2(z: Tensor) -> Tensor:
    """Elementwise squared magnitude (real output)."""
    out = (z.data.real * z.data.real + z.data.imag * z.data.imag).astype(REAL)
    return record(out, (z,), lambda g: ((2.0 * g) * z.data,))


# ---------------------------------------------------------------------------
# Fourier transforms (centered, orthonormal)

_SPATIAL = (-2, -1)


def _fft2c_raw(a: np.ndarray) -> np.ndarray:
    shifted = np.fft.ifftshift(a, axes=_SPATIAL)
    spec = np.fft.fft2(shifted, axes=_SPATIAL, norm="ortho")
    return np.ascontiguousarray(np.fft.fftshift(spec, axes=_SPATIAL), dtype=COMPLEX)


def _ifft2c_raw(a: np.ndarray) -> np.ndarray:
    shifted = np.fft.ifftshift(a, axes=_SPATIAL)
    img = np.fft.ifft2(shifted, axes=_SPATIAL, norm="ortho")
    return np.ascontiguousarray(np.fft.fftshift(img, axes=_SPATIAL), dtype=COMPLEX)


def _check_fft_input(t: Tensor) -> None:
    if t.ndim < 2:
        raise ShapeError("fft2c/ifft2c require at least 2 dimensions (got %d)" % t.ndim)
    if not t.is_complex:
        raise ContractError("fft2c/ifft2c expect a complex tensor; promote with to_complex")


def fft2c(t: Tensor) -> Tensor:
    """Centered orthonormal 2D DFT over the trailing two axes.

    Zero frequency lands at (H//2, W//2); scaling is 1/sqrt(H*W), so ifft2c
    is both the exact inverse and the adjoint.
    """
    _check_fft_input(t)
    return record(_fft2c_raw(t.data), (t,), lambda g: (_ifft2c_raw(g),))


def ifft2c(t: Tensor) -> Tensor:
    """Inverse of :func:`fft2c` (also its adjoint)."""
    _check_fft_input(t)
    return record(_ifft2c_raw(t.data), (t,), lambda g: (_fft2c_raw(g),))


# ---------------------------------------------------------------------------
# convolution


def _conv2d_raw(x: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded stride-1 cross-correlation; returns (out, im2col matrix)."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C_in, H, W, kh, kw)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * w, c_in * kh * kw)
    out = kernel.reshape(c_out, -1) @ cols.T  # (C_out, H*W)
    return out.reshape(c_out, h, w), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 2D cross-correlation with bias.

    x: (C_in, H, W), kernel: (C_out, C_in, k, k) with k odd, bias: (C_out,).
    """
    if x.ndim != 3 or kernel.ndim != 4 or bias.ndim != 1:
        raise ShapeError(
            f"conv2d expects x (C_in,H,W), kernel (C_out,C_in,k,k), bias (C_out,); "
            f"got {x.shape}, {kernel.shape}, {bias.shape}"
        )
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ContractError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"conv2d bias has {bias.shape[0]} entries for {c_out} output channels")

    out, cols = _conv2d_raw(x.data, kernel.data)
    out = out + bias.data[:, None, None]
    h, w = x.shape[1:]

    def vjp(g):
        gm = g.reshape(c_out, h * w)
        db = gm.sum(axis=1)
        dk = (gm @ cols).reshape(kernel.shape)
        # dx = cross-correlation of g with the spatially flipped, channel-
        # transposed kernel (exact for stride 1 / same padding).
        kf = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = _conv2d_raw(np.ascontiguousarray(g), kf)
        return dx, dk, db

    return record(out, (x, kernel, bias), vjp)


# ---------------------------------------------------------------------------
# resampling


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over (C, H, W)."""
    if x.ndim != 3:
        raise ShapeError(f"avgpool2x expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def vjp(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        return (up * np.float32(0.25),)

    return record(out, (x,), vjp)


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over (C, H, W)."""
    if x.ndim != 3:
        raise ShapeError(f"nearest_upsample2x expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over spatial dims with per-call statistics."""
    if x.is_complex:
        raise ContractError("instance_norm expects a real tensor")
    if x.ndim != 3:
        raise ShapeError(f"instance_norm expects (C,H,W), got {x.shape}")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(1, 2), keepdims=True)
    inv = (1.0 / np.sqrt(var + np.float32(eps))).astype(REAL)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gym = (g * y).mean(axis=(1, 2), keepdims=True)
        return (inv * (g - gm - y * gym),)

    return record(y, (x,), vjp)


# ---------------------------------------------------------------------------
# structure / selection


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    kinds = {t.is_complex for t in tensors}
    if len(kinds) != 1:
        raise ContractError("concat requires tensors of the same real/complex kind")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(pieces)

    return record(out, tensors, vjp)


def mask_select(x: Tensor, mask: np.ndarray) -> Tensor:
    """Select entries where a boolean mask (broadcastable to x) is True; 1-D output."""
    mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = x.data[mask_b]

    def vjp(g):
        buf = np.zeros_like(x.data)
        buf[mask_b] = g
        return (buf,)

    return record(out, (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = x.data.sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions (double-precision accumulation, float64 scalar results)


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values over the interleaved real view."""
    v = _real_view(x.data)
    val = np.abs(v, dtype=np.float64).sum()

    def vjp(g):
        s = (np.sign(v) * float(g)).astype(REAL)
        return (s.view(COMPLEX) if x.is_complex else s,)

    return record(np.asarray(val), (x,), vjp)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the interleaved real view."""
    v = _real_view(x.data).astype(np.float64)
    val = np.sqrt((v * v).sum())

    def vjp(g):
        if val == 0:
            z = np.zeros_like(_real_view(x.data))
        else:
            z = (v * (float(g) / val)).astype(REAL)
        return (z.view(COMPLEX) if x.is_complex else z,)

    return record(np.asarray(val), (x,), vjp)


# ---------------------------------------------------------------------------
# registry

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "mul_const": mul_const,
    "leaky_relu": leaky_relu,
    "sqrt_elem": sqrt_elem,
    "to_complex": to_complex,
    "cmagnitude": cmagnitude,
    "abs2": abs2,
    "fft2c": fft2c,
    "ifft2c": ifft2c,
    "conv2d": conv2d,
    "avgpool2x": avgpool2x,
    "nearest_upsample2x": nearest_upsample2x,
    "instance_norm": instance_norm,
    "concat": concat,
    "mask_select": mask_select,
    "reshape": reshape,
    "sum_axis": sum_axis,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
}

# Linear primitives (for the adjoint identity property); each entry maps the
# registry name to the argument index that is linear when the rest are fixed.
LINEAR_PRIMITIVES = {
    "add": 0,
    "sub": 0,
    "neg": 0,
    "scale": 0,
    "mul_const": 0,
    "to_complex": 0,
    "fft2c": 0,
    "ifft2c": 0,
    "conv2d": 0,
    "avgpool2x": 0,
    "nearest_upsample2x": 0,
    "concat": 0,
    "mask_select": 0,
    "reshape": 0,
    "sum_axis": 0,
}
