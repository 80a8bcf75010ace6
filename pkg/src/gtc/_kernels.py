"""Compiled inner loops with a fixed accumulation order.

Both kernels sum over the inner index in ascending order, one rounding per
product and one per addition. The shift kernel produces exactly the products
an IEEE multiply would (whenever those are normal numbers), so the two agree
bit for bit on power-of-two weights.
"""
import numba
import numpy as np

SIGN_MASK = np.uint32(0x80000000)
EXP_MASK = np.uint32(0x7F800000)
MAX_FINITE = np.uint32(0x7F7FFFFF)


@numba.njit(cache=True)
def ordered_matmul(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        a0 = a[i, 0]
        for j in range(n):
            out[i, j] = a0 * b[0, j]
        for p in range(1, k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


@numba.njit(cache=True)
def shift_matmul(xbits, signs, shifts, out, counts):
    """``out[i, j] = sum_p shift(x[i, p], w[p, j])`` using exponent-field adds.

    ``counts`` is a length-5 int64 array: shift applications, additions,
    sign flips, overflows (saturated), underflows (flushed).
    """
    m, k = xbits.shape
    n = signs.shape[1]
    tmp = np.empty(n, dtype=np.uint32)
    ftmp = tmp.view(np.float32)
    for i in range(m):
        for p in range(k):
            xb = xbits[i, p]
            sbit = xb & SIGN_MASK
            e = np.int64((xb & EXP_MASK) >> np.uint32(23))
            for j in range(n):
                s = signs[p, j]
                if s == 0 or e == 0:
                    # zero weight, zero input or subnormal input
                    r = sbit
                else:
                    ne = e + shifts[p, j]
                    if ne >= 255:
                        r = sbit | MAX_FINITE
                        counts[3] += 1
                    elif ne <= 0:
                        r = sbit
                        counts[4] += 1
                    else:
                        r = (xb & ~EXP_MASK) | (np.uint32(ne) << np.uint32(23))
                if s < 0:
                    r = r ^ SIGN_MASK
                    counts[2] += 1
                tmp[j] = r
            if p == 0:
                for j in range(n):
                    out[i, j] = ftmp[j]
            else:
                for j in range(n):
                    out[i, j] += ftmp[j]
        counts[0] += k * n
        counts[1] += (k - 1) * n
    return out


@numba.njit(cache=True)
def im2col(xp, kh, kw, stride, ho, wo, cols):
    """Padded N x C x H x W -> (n, oh, ow) x (c, i, j) patch matrix."""
    n, c = xp.shape[0], xp.shape[1]
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                r = (b * ho + oi) * wo + oj
                q = 0
                for ch in range(c):
                    for i in range(kh):
                        row = oi * stride + i
                        for j in range(kw):
                            cols[r, q] = xp[b, ch, row, oj * stride + j]
                            q += 1
    return cols


@numba.njit(cache=True)
def col2im(dcols, kh, kw, stride, ho, wo, dxp):
    n, c = dxp.shape[0], dxp.shape[1]
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                r = (b * ho + oi) * wo + oj
                q = 0
                for ch in range(c):
                    for i in range(kh):
                        row = oi * stride + i
                        for j in range(kw):
                            dxp[b, ch, row, oj * stride + j] += dcols[r, q]
                            q += 1
    return dxp


@numba.njit(cache=True)
def maxpool(x, k, stride, ho, wo, out, arg):
    """Window maximum; ``arg`` keeps the flat input offset of the first maximum."""
    n, c, h, w = x.shape
    for b in range(n):
        for ch in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    r0, c0 = oi * stride, oj * stride
                    best = x[b, ch, r0, c0]
                    bi = r0 * w + c0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, r0 + i, c0 + j]
                            if v > best:
                                best = v
                                bi = (r0 + i) * w + c0 + j
                    out[b, ch, oi, oj] = best
                    arg[b, ch, oi, oj] = bi
    return out


@numba.njit(cache=True)
def maxpool_backward(g, arg, h, w, dx):
    n, c, ho, wo = g.shape
    for b in range(n):
        for ch in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    a = arg[b, ch, oi, oj]
                    dx[b, ch, a // w, a % w] += g[b, ch, oi, oj]
    return dx
