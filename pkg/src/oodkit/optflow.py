"""Dense optical flow: Gaussian-weighted quadratic expansion of image
neighborhoods, coarse-to-fine displacement estimation, flow stacking for the
motion-based detector, and .flo serialization."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import LUMA_WEIGHTS, Image


class FloError(ValueError):
    pass


class FloMagicError(FloError):
    pass


class FloTruncatedError(FloError):
    pass


FLO_MAGIC = b"PIEH"


@dataclass(frozen=True)
class FarnebackParams:
    window_size: int = 15      # averaging neighborhood for the displacement solve
    iterations: int = 3
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    poly_n: int = 5            # odd window of the quadratic fit
    poly_sigma: float = 1.1

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must lie in (0, 1)")
        if self.poly_n < 3 or self.poly_n % 2 == 0:
            raise ValueError(f"poly_n must be odd and >= 3, got {self.poly_n}")
        if self.poly_sigma <= 0:
            raise ValueError("poly_sigma must be > 0")


class FlowField:
    """Per-pixel displacement (u right, v down), finite everywhere."""

    __slots__ = ("u", "v")

    def __init__(self, u: np.ndarray, v: np.ndarray):
        u = np.ascontiguousarray(u, dtype=np.float32)
        v = np.ascontiguousarray(v, dtype=np.float32)
        if u.shape != v.shape or u.ndim != 2:
            raise ValueError(f"u/v must be equal 2-d arrays, got {u.shape} vs {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow field contains non-finite values")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    def __setattr__(self, name, value):
        raise AttributeError("FlowField is immutable")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class PolyExpansion:
    """Per-pixel local model f(x) ~ x^T A x + b^T x + c over centered offsets."""

    a11: np.ndarray  # x^2 coefficient
    a12: np.ndarray
    a22: np.ndarray  # y^2 coefficient
    bx: np.ndarray
    by: np.ndarray
    c: np.ndarray


def _gray_f32(img: Image) -> np.ndarray:
    p = img.pixels.astype(np.float32)
    if img.channels == 1:
        return p[:, :, 0]
    return (LUMA_WEIGHTS[0] * p[:, :, 0] + LUMA_WEIGHTS[1] * p[:, :, 1]
            + LUMA_WEIGHTS[2] * p[:, :, 2]).astype(np.float32)


def _correlate_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    n = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (n, n)
    win = sliding_window_view(np.pad(arr, pad, mode="edge"), len(kernel), axis=axis)
    return win @ kernel


def _poly_channels(f: np.ndarray, poly_n: int, poly_sigma: float):
    """Quadratic-fit coefficient planes, channel order (by, bx, ayy, axx, axy2)."""
    n = poly_n // 2
    xs = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-(xs**2) / (2 * poly_sigma**2))
    g /= g.sum()
    xg = xs * g
    xxg = xs * xs * g

    # normal-equation matrix over the basis (1, x, y, x^2, y^2, xy)
    wx = g[None, :] * g[:, None]
    X, Y = np.meshgrid(xs, xs)
    basis = np.stack([np.ones_like(X), X, Y, X**2, Y**2, X * Y])
    G = np.einsum("iyx,jyx,yx->ij", basis, basis, wx)
    inv = np.linalg.inv(G)
    ig00, ig11, ig03, ig33, ig55 = inv[0, 0], inv[1, 1], inv[0, 3], inv[3, 3], inv[5, 5]

    f = f.astype(np.float64)
    v0 = _correlate_axis(f, g, axis=0)
    v1 = _correlate_axis(f, xg, axis=0)
    v2 = _correlate_axis(f, xxg, axis=0)

    m1 = _correlate_axis(v0, g, axis=1)
    mx = _correlate_axis(v0, xg, axis=1)
    mxx = _correlate_axis(v0, xxg, axis=1)
    my = _correlate_axis(v1, g, axis=1)
    mxy = _correlate_axis(v1, xg, axis=1)
    myy = _correlate_axis(v2, g, axis=1)

    r = np.empty(f.shape + (5,), dtype=np.float32)
    r[..., 0] = ig11 * my
    r[..., 1] = ig11 * mx
    r[..., 2] = ig33 * myy + ig03 * m1
    r[..., 3] = ig33 * mxx + ig03 * m1
    r[..., 4] = ig55 * mxy
    c = (ig00 * m1 + ig03 * (mxx + myy)).astype(np.float32)
    return r, c


def polynomial_expansion(img: np.ndarray, poly_n: int = 5, poly_sigma: float = 1.1) -> PolyExpansion:
    """Fit f(x) ~ x^T A x + b^T x + c at every pixel with separable Gaussian
    weights over an odd poly_n window; borders replicate."""
    f = np.asarray(img, dtype=np.float32)
    if f.ndim != 2:
        raise ValueError("expected a 2-d grayscale array")
    if poly_n % 2 == 0 or poly_n < 3:
        raise ValueError(f"poly_n must be odd and >= 3, got {poly_n}")
    if min(f.shape) < poly_n:
        raise ValueError(f"image dimensions {f.shape} smaller than poly_n {poly_n}")
    r, c = _poly_channels(f, poly_n, poly_sigma)
    return PolyExpansion(
        a11=r[..., 3].copy(), a12=(r[..., 4] / 2.0), a22=r[..., 2].copy(),
        bx=r[..., 1].copy(), by=r[..., 0].copy(), c=c,
    )


_BORDER_W = np.float32([0.14, 0.14, 0.4472, 0.4472, 0.4472])


def _border_scale(h: int, w: int) -> np.ndarray:
    sx = np.ones(w, dtype=np.float32)
    sy = np.ones(h, dtype=np.float32)
    k = len(_BORDER_W)
    for i in range(min(k, (w + 1) // 2)):
        sx[i] *= _BORDER_W[i]
        sx[w - 1 - i] *= _BORDER_W[i]
    for i in range(min(k, (h + 1) // 2)):
        sy[i] *= _BORDER_W[i]
        sy[h - 1 - i] *= _BORDER_W[i]
    return sy[:, None] * sx[None, :]


def _update_matrices(r0: np.ndarray, r1: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Per-pixel normal equations for the displacement increment, from the two
    coefficient fields and the current flow estimate (used to warp r1)."""
    h, w = flow.shape[:2]
    u = flow[..., 0]
    v = flow[..., 1]
    gy, gx = np.mgrid[0:h, 0:w]
    fx = gx + u
    fy = gy + v
    x1 = np.floor(fx).astype(np.int64)
    y1 = np.floor(fy).astype(np.int64)
    # clamp so positions on the far edge sample it exactly; only positions
    # outside the image rectangle fall back to the single-frame estimate
    valid = (fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)
    x1c = np.clip(x1, 0, w - 2)
    y1c = np.clip(y1, 0, h - 2)
    tx = (fx - x1c).astype(np.float32)
    ty = (fy - y1c).astype(np.float32)

    a00 = ((1 - tx) * (1 - ty))[..., None]
    a01 = (tx * (1 - ty))[..., None]
    a10 = ((1 - tx) * ty)[..., None]
    a11w = (tx * ty)[..., None]
    r1w = (a00 * r1[y1c, x1c] + a01 * r1[y1c, x1c + 1]
           + a10 * r1[y1c + 1, x1c] + a11w * r1[y1c + 1, x1c + 1])

    vm = valid[..., None]
    byw = np.where(valid, r1w[..., 0], 0.0)
    bxw = np.where(valid, r1w[..., 1], 0.0)
    r4 = np.where(valid, (r0[..., 2] + r1w[..., 2]) * 0.5, r0[..., 2])
    r5 = np.where(valid, (r0[..., 3] + r1w[..., 3]) * 0.5, r0[..., 3])
    r6 = np.where(valid, (r0[..., 4] + r1w[..., 4]) * 0.25, r0[..., 4] * 0.5)

    r2 = (r0[..., 0] - byw) * 0.5 + r4 * v + r6 * u
    r3 = (r0[..., 1] - bxw) * 0.5 + r6 * v + r5 * u

    scale = _border_scale(h, w)
    r2 = r2 * scale
    r3 = r3 * scale
    r4 = r4 * scale
    r5 = r5 * scale
    r6 = r6 * scale

    m = np.empty((h, w, 5), dtype=np.float32)
    m[..., 0] = r4 * r4 + r6 * r6
    m[..., 1] = (r4 + r5) * r6
    m[..., 2] = r5 * r5 + r6 * r6
    m[..., 3] = r4 * r2 + r6 * r3
    m[..., 4] = r6 * r2 + r5 * r3
    return m


def _box_filter(arr: np.ndarray, win: int) -> np.ndarray:
    k = np.full(win, 1.0 / win)
    out = _correlate_axis(arr, k, axis=0)
    return _correlate_axis(out, k, axis=1)


def _update_flow(m: np.ndarray, window_size: int) -> np.ndarray:
    mb = _box_filter(m, window_size)
    g11 = mb[..., 0].astype(np.float64)
    g12 = mb[..., 1].astype(np.float64)
    g22 = mb[..., 2].astype(np.float64)
    h1 = mb[..., 3].astype(np.float64)
    h2 = mb[..., 4].astype(np.float64)
    # +lambda*I keeps the solve finite on textureless regions
    lam = 1e-6 * (g11 + g22) + 1e-12
    g11 = g11 + lam
    g22 = g22 + lam
    det = g11 * g22 - g12 * g12
    flow = np.empty(m.shape[:2] + (2,), dtype=np.float32)
    flow[..., 0] = (g11 * h2 - g12 * h1) / det
    flow[..., 1] = (g22 * h1 - g12 * h2) / det
    return flow


def _resize_bilinear_f32(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)
    fx = (xs - x0).astype(np.float32)
    if arr.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
        top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
        bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    else:
        fy = fy[:, None]
        fx = fx[None, :]
        top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
        bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _gaussian_blur(arr: np.ndarray, sigma: float, ksize: int) -> np.ndarray:
    xs = np.arange(-(ksize // 2), ksize // 2 + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2 * sigma**2))
    k /= k.sum()
    return _correlate_axis(_correlate_axis(arr, k, axis=0), k, axis=1).astype(np.float32)


_MIN_PYR_SIZE = 16


def farneback_flow(prev: Image, next: Image, params: FarnebackParams = FarnebackParams()) -> FlowField:
    """Coarse-to-fine dense flow from prev to next."""
    if (prev.width, prev.height) != (next.width, next.height):
        raise ValueError(
            f"frame dimensions differ: {prev.width}x{prev.height} vs {next.width}x{next.height}")
    img0 = _gray_f32(prev)
    img1 = _gray_f32(next)
    h, w = img0.shape

    levels = 0
    scale = 1.0
    for _ in range(params.pyramid_levels - 1):
        scale *= params.pyramid_scale
        if min(w, h) * scale < _MIN_PYR_SIZE:
            break
        levels += 1

    flow = None
    for k in range(levels, -1, -1):
        s = params.pyramid_scale ** k
        lw = max(int(round(w * s)), 1)
        lh = max(int(round(h * s)), 1)
        if flow is None:
            flow = np.zeros((lh, lw, 2), dtype=np.float32)
        else:
            flow = _resize_bilinear_f32(flow, lh, lw) * (1.0 / params.pyramid_scale)
        if k > 0:
            sigma = (1.0 / s - 1.0) * 0.5
            ksize = max(int(round(sigma * 5)) | 1, 3)
            i0 = _resize_bilinear_f32(_gaussian_blur(img0, sigma, ksize), lh, lw)
            i1 = _resize_bilinear_f32(_gaussian_blur(img1, sigma, ksize), lh, lw)
        else:
            i0, i1 = img0, img1
        r0, _ = _poly_channels(i0, params.poly_n, params.poly_sigma)
        r1, _ = _poly_channels(i1, params.poly_n, params.poly_sigma)
        m = _update_matrices(r0, r1, flow)
        for it in range(params.iterations):
            flow = _update_flow(m, params.window_size)
            if it < params.iterations - 1:
                m = _update_matrices(r0, r1, flow)
    return FlowField(flow[..., 0], flow[..., 1])


def stack_flows(flows, depth: int):
    """Channel stacks of the most recent `depth` flows, oldest first.

    Returns (u_stack, v_stack), each (depth, H, W) f32, or None while the
    history is still warming up (fewer than `depth` flows seen).
    """
    flows = list(flows)
    if not 2 <= depth <= 6:
        raise ValueError(f"flow depth must lie in [2, 6], got {depth}")
    if len(flows) < depth:
        return None
    recent = flows[-depth:]
    hw = (recent[0].height, recent[0].width)
    for f in recent:
        if (f.height, f.width) != hw:
            raise ValueError("stacked flows must share dimensions")
    u = np.stack([f.u for f in recent]).astype(np.float32)
    v = np.stack([f.v for f in recent]).astype(np.float32)
    return u, v


def write_flo(flow: FlowField) -> bytes:
    header = FLO_MAGIC + struct.pack("<ii", flow.width, flow.height)
    inter = np.empty((flow.height, flow.width, 2), dtype="<f4")
    inter[..., 0] = flow.u
    inter[..., 1] = flow.v
    return header + inter.tobytes()


def read_flo(data: bytes) -> FlowField:
    if data[:4] != FLO_MAGIC:
        raise FloMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise FloTruncatedError("header truncated")
    w, h = struct.unpack("<ii", data[4:12])
    if w < 1 or h < 1:
        raise FloError(f"bad dimensions {w}x{h}")
    need = w * h * 2 * 4
    payload = data[12:12 + need]
    if len(payload) < need:
        raise FloTruncatedError(f"payload has {len(payload)} bytes, expected {need}")
    inter = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(inter[..., 0], inter[..., 1])
