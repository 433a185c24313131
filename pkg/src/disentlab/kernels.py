"""Hot inner loops: im2col/col2im for the convolution primitive and the
per-pixel rasterizers used by the procedural dataset.

Every kernel exists twice: a loop version compiled with numba and a
vectorized numpy version. The public names are bound to one of them at import
time (see ``_jit``). Both implementations stay importable under the
``*_jit`` / ``*_numpy`` names so tests and benchmarks can compare them.
"""

import math

import numpy as np

from ._jit import USE_JIT, njit

TWO_PI = 2.0 * math.pi


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# im2col / col2im, NHWC layout, column order (ki, kj, channel)


def _im2col_loops(x, kh, kw, stride, pad):
    b, h, w, c = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b * ho * wo, kh * kw * c))
    for n in range(b):
        for oi in range(ho):
            for oj in range(wo):
                row = (n * ho + oi) * wo + oj
                for ki in range(kh):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= h:
                        continue
                    for kj in range(kw):
                        jj = oj * stride + kj - pad
                        if jj < 0 or jj >= w:
                            continue
                        base = (ki * kw + kj) * c
                        for ch in range(c):
                            out[row, base + ch] = x[n, ii, jj, ch]
    return out


def _col2im_loops(cols, b, h, w, c, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, h, w, c))
    for n in range(b):
        for oi in range(ho):
            for oj in range(wo):
                row = (n * ho + oi) * wo + oj
                for ki in range(kh):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= h:
                        continue
                    for kj in range(kw):
                        jj = oj * stride + kj - pad
                        if jj < 0 or jj >= w:
                            continue
                        base = (ki * kw + kj) * c
                        for ch in range(c):
                            out[n, ii, jj, ch] += cols[row, base + ch]
    return out


def im2col_numpy(x, kh, kw, stride, pad):
    b, h, w, c = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty((b, ho, wo, kh, kw, c))
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, :, ki, kj, :] = xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :]
    return out.reshape(b * ho * wo, kh * kw * c)


def col2im_numpy(cols, b, h, w, c, kh, kw, stride, pad):
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    blocks = cols.reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += blocks[:, :, :, ki, kj, :]
    return out[:, pad:pad + h, pad:pad + w, :].copy()


# ---------------------------------------------------------------------------
# glyph stroke rasterizer


def _rasterize_loops(segments, radius, size):
    out = np.zeros((size, size))
    nseg = segments.shape[0]
    for y in range(size):
        py = y + 0.5
        for x in range(size):
            px = x + 0.5
            best = 1e30
            for s in range(nseg):
                ax = segments[s, 0]
                ay = segments[s, 1]
                dx = segments[s, 2] - ax
                dy = segments[s, 3] - ay
                den = dx * dx + dy * dy
                t = 0.0
                if den > 0.0:
                    t = ((px - ax) * dx + (py - ay) * dy) / den
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                ex = px - (ax + t * dx)
                ey = py - (ay + t * dy)
                d2 = ex * ex + ey * ey
                if d2 < best:
                    best = d2
            v = radius + 0.5 - math.sqrt(best)
            if v < 0.0:
                v = 0.0
            elif v > 1.0:
                v = 1.0
            out[y, x] = v
    return out


def rasterize_numpy(segments, radius, size):
    """Anti-aliased stroke mask: 1 inside ``radius`` of any segment, a one
    pixel linear ramp at the boundary, 0 beyond."""
    centers = np.arange(size) + 0.5
    px = centers[None, :, None]
    py = centers[:, None, None]
    ax, ay = segments[:, 0], segments[:, 1]
    dx = segments[:, 2] - ax
    dy = segments[:, 3] - ay
    den = dx * dx + dy * dy
    safe = np.where(den > 0.0, den, 1.0)
    t = np.where(den > 0.0, ((px - ax) * dx + (py - ay) * dy) / safe, 0.0)
    t = np.clip(t, 0.0, 1.0)
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    best = np.min(ex * ex + ey * ey, axis=2)
    return np.clip(radius + 0.5 - np.sqrt(best), 0.0, 1.0)


# ---------------------------------------------------------------------------
# two-wave texture field blended between two colours


def _texture_loops(size, freqs, angles, phases, weights, color_a, color_b):
    out = np.empty((size, size, 3))
    wsum = weights[0] + weights[1]
    c0 = math.cos(angles[0])
    s0 = math.sin(angles[0])
    c1 = math.cos(angles[1])
    s1 = math.sin(angles[1])
    for y in range(size):
        v = y / size
        for x in range(size):
            u = x / size
            w0 = math.sin(TWO_PI * freqs[0] * (u * c0 + v * s0) + phases[0])
            w1 = math.sin(TWO_PI * freqs[1] * (u * c1 + v * s1) + phases[1])
            t = 0.5 + 0.5 * (weights[0] * w0 + weights[1] * w1) / wsum
            for ch in range(3):
                out[y, x, ch] = color_a[ch] * (1.0 - t) + color_b[ch] * t
    return out


def texture_numpy(size, freqs, angles, phases, weights, color_a, color_b):
    u = (np.arange(size) / size)[None, :]
    v = (np.arange(size) / size)[:, None]
    w0 = np.sin(TWO_PI * freqs[0] * (u * math.cos(angles[0]) + v * math.sin(angles[0])) + phases[0])
    w1 = np.sin(TWO_PI * freqs[1] * (u * math.cos(angles[1]) + v * math.sin(angles[1])) + phases[1])
    t = 0.5 + 0.5 * (weights[0] * w0 + weights[1] * w1) / (weights[0] + weights[1])
    t = t[:, :, None]
    return color_a[None, None, :] * (1.0 - t) + color_b[None, None, :] * t


im2col_jit = njit(_im2col_loops)
col2im_jit = njit(_col2im_loops)
rasterize_jit = njit(_rasterize_loops)
texture_jit = njit(_texture_loops)

if USE_JIT:
    im2col = im2col_jit
    col2im = col2im_jit
    rasterize = rasterize_jit
    texture = texture_jit
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    rasterize = rasterize_numpy
    texture = texture_numpy
