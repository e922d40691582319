"""Differentiable operators over :class:`Tensor`.

Shapes must match exactly; the only broadcasting allowed is against a
single-element (scalar) operand.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return Tensor(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        op="add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return Tensor(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        op="sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return Tensor(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        op="mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data
    return Tensor(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        op="div",
    )


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, (a,), lambda g: (g * c,), op="scalar_mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), op="relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return Tensor(a.data * scale, (a,), lambda g: (g * scale,), op="leaky_relu")


def clamp01(a: Tensor) -> Tensor:
    inside = (a.data >= 0.0) & (a.data <= 1.0)
    return Tensor(np.clip(a.data, 0.0, 1.0), (a,), lambda g: (g * inside,), op="clamp01")


def square(a: Tensor) -> Tensor:
    return Tensor(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), op="square")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(a.data)
    return Tensor(np.abs(a.data), (a,), lambda g: (g * sign,), op="abs")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),), op="sigmoid")


def softplus(a: Tensor) -> Tensor:
    return Tensor(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),), op="softplus")


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,), op="log")


def floor_at(a: Tensor, minimum: float) -> Tensor:
    """max(a, minimum) with zero gradient on the floored entries."""
    keep = a.data >= minimum
    return Tensor(np.where(keep, a.data, minimum), (a,), lambda g: (g * keep,), op="floor_at")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False, op="detach")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def ste_round(a: Tensor) -> Tensor:
    """Round half away from zero forward, identity backward."""
    return Tensor(round_half_away(a.data), (a,), lambda g: (g,), op="ste_round")


def reduce_sum(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("reduce_sum of an empty tensor")
    return Tensor(
        np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), op="reduce_sum"
    )


def reduce_mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("reduce_mean of an empty tensor")
    n = a.size
    return Tensor(
        np.asarray(a.data.sum() / n),
        (a,),
        lambda g: (np.full(a.shape, float(g) / n),),
        op="reduce_mean",
    )


def concat_channels(tensors: list[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: shape mismatch {base} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return Tensor(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), vjp, op="concat")


def expand_channels(vec: Tensor, like_shape: tuple[int, ...]) -> Tensor:
    """Broadcast a per-channel vector [C] to an [N, C, H, W] map."""
    if vec.data.ndim != 1 or len(like_shape) != 4 or like_shape[1] != vec.shape[0]:
        raise ShapeError(f"expand_channels: vector {vec.shape} does not fit {like_shape}")
    out = np.broadcast_to(vec.data[None, :, None, None], like_shape).copy()
    return Tensor(out, (vec,), lambda g: (g.sum(axis=(0, 2, 3)),), op="expand_channels")


def upsample2x_nearest(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"upsample2x_nearest expects [N,C,H,W], got {a.shape}")
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor(out, (a,), vjp, op="upsample2x")


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    """Columns laid out [C*kh*kw, N*Ho*Wo]; this order copies fastest from NCHW."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, im2col + matmul."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,Cin,H,W], got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin,kh,kw], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: Cin mismatch, input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias must be [{cout}] (Cout), got {bias.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got kh={kh}, kw={kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: H={h}, W={w} too small for kernel {kh}x{kw} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # transposed convolution: dilate g by the stride, full-pad, correlate with the flipped kernel
            if stride > 1:
                gd = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            hf = gd.shape[2] - kh + 1
            wf = gd.shape[3] - kw + 1
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * kh * kw)
            dcols = _im2col(gd, kh, kw, 1, hf, wf)
            dxp = (wflip @ dcols).reshape(cin, n, hf, wf).transpose(1, 0, 2, 3)
            hp, wp = xp.shape[2], xp.shape[3]
            if hf < hp or wf < wp:
                dxp = np.pad(dxp, ((0, 0), (0, 0), (0, hp - hf), (0, wp - wf)))
            gx = dxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gw, gb

    return Tensor(np.ascontiguousarray(out), (x, weight, bias), vjp, op="conv2d")


def bilinear_warp(image: Tensor, flow: Tensor) -> Tensor:
    """Sample ``image`` at ``p + flow(p)`` with border-clamped bilinear interpolation.

    Flow channel 0 is the horizontal displacement, channel 1 the vertical one,
    both in pixels.
    """
    image, flow = as_tensor(image), as_tensor(flow)
    if image.data.ndim != 4 or flow.data.ndim != 4:
        raise ShapeError(f"bilinear_warp expects 4-D tensors, got {image.shape} and {flow.shape}")
    n, c, h, w = image.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"bilinear_warp: flow must be {(n, 2, h, w)}, got {flow.shape}")
    if h < 2 or w < 2:
        raise ShapeError(f"bilinear_warp: image must be at least 2x2, got {h}x{w}")

    if not np.all(np.isfinite(flow.data)):
        raise FloatingPointError("bilinear_warp: non-finite flow")

    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    px = gx[None] + flow.data[:, 0]
    py = gy[None] + flow.data[:, 1]
    in_x = (px > 0.0) & (px < w - 1)
    in_y = (py > 0.0) & (py < h - 1)
    sx = np.clip(px, 0.0, w - 1)
    sy = np.clip(py, 0.0, h - 1)
    # at the far border x0 = w - 1 with weight 0 on its (clamped) neighbour, so
    # integer sample positions reproduce pixels exactly
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0

    nidx = np.arange(n)[:, None, None]
    base = image.data  # [n, c, h, w]
    # corner samples, each [n, c, h, w]
    i00 = base[nidx, :, y0, x0].transpose(0, 3, 1, 2)
    i01 = base[nidx, :, y0, x1].transpose(0, 3, 1, 2)
    i10 = base[nidx, :, y1, x0].transpose(0, 3, 1, 2)
    i11 = base[nidx, :, y1, x1].transpose(0, 3, 1, 2)
    wx4 = wx[:, None]
    wy4 = wy[:, None]
    top = i00 + wx4 * (i01 - i00)
    bot = i10 + wx4 * (i11 - i10)
    out = top + wy4 * (bot - top)

    def vjp(g):
        gimg = None
        if image.requires_grad:
            plane = h * w
            offsets = (np.arange(n * c) * plane).reshape(n, c, 1, 1)
            flat = np.zeros(n * c * plane)
            for ys, xs, wgt in (
                (y0, x0, (1 - wy) * (1 - wx)),
                (y0, x1, (1 - wy) * wx),
                (y1, x0, wy * (1 - wx)),
                (y1, x1, wy * wx),
            ):
                idx = (ys * w + xs)[:, None] + offsets
                flat += np.bincount(idx.ravel(), weights=(g * wgt[:, None]).ravel(), minlength=flat.size)
            gimg = flat.reshape(n, c, h, w)
        gflow = None
        if flow.requires_grad:
            dsx = (1 - wy4) * (i01 - i00) + wy4 * (i11 - i10)
            dsy = bot - top
            gfx = (g * dsx).sum(axis=1) * in_x
            gfy = (g * dsy).sum(axis=1) * in_y
            gflow = np.stack([gfx, gfy], axis=1)
        return gimg, gflow

    return Tensor(out, (image, flow), vjp, op="bilinear_warp")
