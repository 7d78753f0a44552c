"""numba kernels for residual trilinear lookup (inference, and training forward/backward)."""

from __future__ import annotations

import numba


@numba.njit(parallel=True, cache=True, fastmath={"contract"})
def apply_hwc(img, res, dmin, dmax, out, bad):
    """img/out: (H, W, 3); res: (D, D, D, 3) residual against identity."""
    h, w = img.shape[0], img.shape[1]
    n = res.shape[0] - 1
    s0 = 1.0 / (dmax[0] - dmin[0])
    s1 = 1.0 / (dmax[1] - dmin[1])
    s2 = 1.0 / (dmax[2] - dmin[2])
    for y in numba.prange(h):
        for x in range(w):
            u0 = (img[y, x, 0] - dmin[0]) * s0
            u1 = (img[y, x, 1] - dmin[1]) * s1
            u2 = (img[y, x, 2] - dmin[2]) * s2
            if u0 != u0 or u1 != u1 or u2 != u2:
                bad[y] = 1
                continue
            u0 = min(max(u0, 0.0), 1.0)
            u1 = min(max(u1, 0.0), 1.0)
            u2 = min(max(u2, 0.0), 1.0)
            t0 = u0 * n
            t1 = u1 * n
            t2 = u2 * n
            i0 = min(int(t0), n - 1)
            i1 = min(int(t1), n - 1)
            i2 = min(int(t2), n - 1)
            f0 = t0 - i0
            f1 = t1 - i1
            f2 = t2 - i2
            g0 = 1.0 - f0
            g1 = 1.0 - f1
            g2 = 1.0 - f2
            # corner weights, shared by the three channels
            a = g1 * g2
            b = f1 * g2
            c_ = g1 * f2
            d = f1 * f2
            w000 = g0 * a
            w100 = f0 * a
            w010 = g0 * b
            w110 = f0 * b
            w001 = g0 * c_
            w101 = f0 * c_
            w011 = g0 * d
            w111 = f0 * d
            j0 = i0 + 1
            j1 = i1 + 1
            j2 = i2 + 1
            for c in range(3):
                v = (
                    res[i0, i1, i2, c] * w000
                    + res[j0, i1, i2, c] * w100
                    + res[i0, j1, i2, c] * w010
                    + res[j0, j1, i2, c] * w110
                    + res[i0, i1, j2, c] * w001
                    + res[j0, i1, j2, c] * w101
                    + res[i0, j1, j2, c] * w011
                    + res[j0, j1, j2, c] * w111
                )
                if c == 0:
                    o = u0 + v
                elif c == 1:
                    o = u1 + v
                else:
                    o = u2 + v
                out[y, x, c] = min(max(o, 0.0), 1.0)


@numba.njit(cache=True)
def _cell(u, n):
    t = min(max(u, 0.0), 1.0) * n
    i = min(int(t), n - 1)
    return i, t - i


@numba.njit(parallel=True, cache=True)
def apply_ncp_forward(img, res, out):
    """img/out: (N, 3, P) in [0, 1]; res: (N, D, D, D, 3)."""
    nb, npx = img.shape[0], img.shape[2]
    n = res.shape[1] - 1
    for b in numba.prange(nb):
        for p in range(npx):
            u0 = min(max(img[b, 0, p], 0.0), 1.0)
            u1 = min(max(img[b, 1, p], 0.0), 1.0)
            u2 = min(max(img[b, 2, p], 0.0), 1.0)
            i0, f0 = _cell(u0, n)
            i1, f1 = _cell(u1, n)
            i2, f2 = _cell(u2, n)
            g0 = 1.0 - f0
            g1 = 1.0 - f1
            g2 = 1.0 - f2
            for c in range(3):
                v = (
                    res[b, i0, i1, i2, c] * g0 * g1 * g2
                    + res[b, i0 + 1, i1, i2, c] * f0 * g1 * g2
                    + res[b, i0, i1 + 1, i2, c] * g0 * f1 * g2
                    + res[b, i0 + 1, i1 + 1, i2, c] * f0 * f1 * g2
                    + res[b, i0, i1, i2 + 1, c] * g0 * g1 * f2
                    + res[b, i0 + 1, i1, i2 + 1, c] * f0 * g1 * f2
                    + res[b, i0, i1 + 1, i2 + 1, c] * g0 * f1 * f2
                    + res[b, i0 + 1, i1 + 1, i2 + 1, c] * f0 * f1 * f2
                )
                u = u0 if c == 0 else (u1 if c == 1 else u2)
                out[b, c, p] = min(max(u + v, 0.0), 1.0)


@numba.njit(parallel=True, cache=True)
def apply_ncp_backward(img, res, grad_out, grad_img, grad_res):
    """Gradients of apply_ncp_forward. grad_res is accumulated per sample (one worker each)."""
    nb, npx = img.shape[0], img.shape[2]
    n = res.shape[1] - 1
    for b in numba.prange(nb):
        for p in range(npx):
            x0 = img[b, 0, p]
            x1 = img[b, 1, p]
            x2 = img[b, 2, p]
            u0 = min(max(x0, 0.0), 1.0)
            u1 = min(max(x1, 0.0), 1.0)
            u2 = min(max(x2, 0.0), 1.0)
            i0, f0 = _cell(u0, n)
            i1, f1 = _cell(u1, n)
            i2, f2 = _cell(u2, n)
            g0 = 1.0 - f0
            g1 = 1.0 - f1
            g2 = 1.0 - f2
            d0 = 0.0
            d1 = 0.0
            d2 = 0.0
            for c in range(3):
                r000 = res[b, i0, i1, i2, c]
                r100 = res[b, i0 + 1, i1, i2, c]
                r010 = res[b, i0, i1 + 1, i2, c]
                r110 = res[b, i0 + 1, i1 + 1, i2, c]
                r001 = res[b, i0, i1, i2 + 1, c]
                r101 = res[b, i0 + 1, i1, i2 + 1, c]
                r011 = res[b, i0, i1 + 1, i2 + 1, c]
                r111 = res[b, i0 + 1, i1 + 1, i2 + 1, c]
                v = (r000 * g0 * g1 * g2 + r100 * f0 * g1 * g2 + r010 * g0 * f1 * g2
                     + r110 * f0 * f1 * g2 + r001 * g0 * g1 * f2 + r101 * f0 * g1 * f2
                     + r011 * g0 * f1 * f2 + r111 * f0 * f1 * f2)
                u = u0 if c == 0 else (u1 if c == 1 else u2)
                o = u + v
                if o < 0.0 or o > 1.0:
                    continue
                go = grad_out[b, c, p]
                grad_res[b, i0, i1, i2, c] += go * g0 * g1 * g2
                grad_res[b, i0 + 1, i1, i2, c] += go * f0 * g1 * g2
                grad_res[b, i0, i1 + 1, i2, c] += go * g0 * f1 * g2
                grad_res[b, i0 + 1, i1 + 1, i2, c] += go * f0 * f1 * g2
                grad_res[b, i0, i1, i2 + 1, c] += go * g0 * g1 * f2
                grad_res[b, i0 + 1, i1, i2 + 1, c] += go * f0 * g1 * f2
                grad_res[b, i0, i1 + 1, i2 + 1, c] += go * g0 * f1 * f2
                grad_res[b, i0 + 1, i1 + 1, i2 + 1, c] += go * f0 * f1 * f2
                dv0 = ((r100 - r000) * g1 * g2 + (r110 - r010) * f1 * g2
                       + (r101 - r001) * g1 * f2 + (r111 - r011) * f1 * f2) * n
                dv1 = ((r010 - r000) * g0 * g2 + (r110 - r100) * f0 * g2
                       + (r011 - r001) * g0 * f2 + (r111 - r101) * f0 * f2) * n
                dv2 = ((r001 - r000) * g0 * g1 + (r101 - r100) * f0 * g1
                       + (r011 - r010) * g0 * f1 + (r111 - r110) * f0 * f1) * n
                d0 += go * dv0
                d1 += go * dv1
                d2 += go * dv2
                if c == 0:
                    d0 += go
                elif c == 1:
                    d1 += go
                else:
                    d2 += go
            grad_img[b, 0, p] = d0 if 0.0 <= x0 <= 1.0 else 0.0
            grad_img[b, 1, p] = d1 if 0.0 <= x1 <= 1.0 else 0.0
            grad_img[b, 2, p] = d2 if 0.0 <= x2 <= 1.0 else 0.0


@numba.njit(parallel=True, cache=True)
def bilinear_gather(img, y0, y1, fy, x0, x1, fx, out):
    """out[i, j] = bilinear mix of the 4 taps (y0|y1, x0|x1) of ``img``; float64 arithmetic."""
    for i in numba.prange(out.shape[0]):
        a, b, wy = y0[i], y1[i], fy[i]
        for j in range(out.shape[1]):
            c, d, wx = x0[j], x1[j], fx[j]
            for k in range(3):
                top = img[a, c, k] * (1.0 - wx) + img[a, d, k] * wx
                bot = img[b, c, k] * (1.0 - wx) + img[b, d, k] * wx
                out[i, j, k] = top * (1.0 - wy) + bot * wy
