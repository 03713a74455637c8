"""Straight-line reference implementations.

Loop-based, float64, written independently of the vectorized code so they
can serve as oracles in tests and in the ``verify`` command.  They are slow;
keep inputs small.
"""

from __future__ import annotations

import math

import numpy as np


def matmul(a, b):
    """Triple-loop product of two 2-D arrays."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_rows(z):
    out = np.zeros_like(z, dtype=np.float64)
    for i in range(z.shape[0]):
        m = max(z[i])
        e = [math.exp(v - m) for v in z[i]]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def s2_fuse_single_head(ta, tb, tc, td):
    """One head of the spatial-spectral fusion, all inputs (HW, S')."""
    hw, sp = ta.shape
    cspa = softmax_rows(matmul(ta, tb.T) / math.sqrt(sp))
    cspe = softmax_rows(matmul(tc.T, td) * hw / sp ** 1.5)
    left = matmul(cspa, tc)
    right = matmul(tb, cspe)
    out = np.zeros((hw, sp))
    for i in range(hw):
        for j in range(sp):
            out[i, j] = left[i, j] * right[i, j]
    return out


def ssio_fuse(cspa, cspe, tb, tc):
    """Triple-loop (Cspa Tc) * (Tb Cspe) per head; layout (HW, S', N)."""
    hw, sp, n = tb.shape
    out = np.zeros((hw, sp, n))
    for h in range(n):
        for i in range(hw):
            for j in range(sp):
                left = 0.0
                for t in range(hw):
                    left += cspa[i, t, h] * tc[t, j, h]
                right = 0.0
                for t in range(sp):
                    right += tb[i, t, h] * cspe[t, j, h]
                out[i, j, h] = left * right
    return out


def conv2d_same(x, w, b=None):
    """Zero-padded stride-1 convolution of (H, W, Cin) with (kh, kw, Cin, Cout)."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, wd, cout))
    for y in range(h):
        for xx in range(wd):
            for o in range(cout):
                s = 0.0 if b is None else b[o]
                for i in range(kh):
                    for j in range(kw):
                        yy, xj = y + i - ph, xx + j - pw
                        if 0 <= yy < h and 0 <= xj < wd:
                            for c in range(cin):
                                s += x[yy, xj, c] * w[i, j, c, o]
                out[y, xx, o] = s
    return out


# -- metrics ------------------------------------------------------------------


def psnr(o, x, peak=1.0):
    total, n = 0.0, 0
    for v, r in zip(np.ravel(o), np.ravel(x)):
        total += (float(v) - float(r)) ** 2
        n += 1
    mse = total / n
    return math.inf if mse == 0 else 10 * math.log10(peak * peak / mse)


def sam(o, x):
    h, w, c = o.shape
    angles = []
    for i in range(h):
        for j in range(w):
            dot = sum(float(o[i, j, k]) * float(x[i, j, k]) for k in range(c))
            no = math.sqrt(sum(float(o[i, j, k]) ** 2 for k in range(c)))
            nx = math.sqrt(sum(float(x[i, j, k]) ** 2 for k in range(c)))
            if no < 1e-12 or nx < 1e-12:
                continue
            angles.append(math.acos(max(-1.0, min(1.0, dot / (no * nx)))))
    return math.degrees(sum(angles) / len(angles))


def ergas(o, x, ratio=4):
    h, w, c = o.shape
    acc = 0.0
    for k in range(c):
        se = sum((float(o[i, j, k]) - float(x[i, j, k])) ** 2 for i in range(h) for j in range(w))
        mu = sum(float(x[i, j, k]) for i in range(h) for j in range(w)) / (h * w)
        acc += (se / (h * w)) / mu ** 2
    return 100.0 / ratio * math.sqrt(acc / c)


def uqi(a, b):
    a, b = [float(v) for v in np.ravel(a)], [float(v) for v in np.ravel(b)]
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    va = sum((v - ma) ** 2 for v in a) / n
    vb = sum((v - mb) ** 2 for v in b) / n
    cab = sum((u - ma) * (v - mb) for u, v in zip(a, b)) / n
    den = (va + vb) * (ma * ma + mb * mb)
    return None if den == 0 else 4 * cab * ma * mb / den


def q_index(a, b, block=32):
    h, w = a.shape
    bs = min(block, h, w)
    vals = []
    for y in range(0, h - bs + 1, bs):
        for x in range(0, w - bs + 1, bs):
            q = uqi(a[y:y + bs, x:x + bs], b[y:y + bs, x:x + bs])
            if q is not None:
                vals.append(q)
    return sum(vals) / len(vals)


def hamilton(p, q):
    """Quaternion product, components ordered (1, i, j, k)."""
    a1, b1, c1, d1 = p
    a2, b2, c2, d2 = q
    return (a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2)


def _q_block(z, zp, mult, conj):
    n = len(z)
    dim = len(z[0])
    mu = [sum(v[k] for v in z) / n for k in range(dim)]
    mup = [sum(v[k] for v in zp) / n for k in range(dim)]
    var = sum(sum((v[k] - mu[k]) ** 2 for k in range(dim)) for v in z) / n
    varp = sum(sum((v[k] - mup[k]) ** 2 for k in range(dim)) for v in zp) / n
    m2 = sum(m * m for m in mu)
    m2p = sum(m * m for m in mup)
    if var + varp == 0 or m2 + m2p == 0:
        return None
    cov = [0.0] * dim
    for v, vp in zip(z, zp):
        d = [v[k] - mu[k] for k in range(dim)]
        dp = [vp[k] - mup[k] for k in range(dim)]
        prod = mult(d, conj(dp))
        cov = [cov[k] + prod[k] / n for k in range(dim)]
    cov_mod = math.sqrt(sum(c * c for c in cov))
    return 4 * cov_mod * math.sqrt(m2 * m2p) / ((var + varp) * (m2 + m2p))


def q2n(o, x, block=32, shift=32):
    """Hypercomplex Q for 1, 2, 3 or 4 bands (real, complex, quaternion)."""
    h, w, c = o.shape
    if c == 1:
        dim, mult, conj = 1, (lambda a, b: [a[0] * b[0]]), (lambda a: list(a))
    elif c == 2:
        dim = 2

        def mult(a, b):
            z = complex(a[0], a[1]) * complex(b[0], b[1])
            return [z.real, z.imag]

        def conj(a):
            return [a[0], -a[1]]
    elif c in (3, 4):
        dim = 4

        def mult(a, b):
            return list(hamilton(a, b))

        def conj(a):
            return [a[0], -a[1], -a[2], -a[3]]
    else:
        raise ValueError("reference q2n handles at most 4 bands")
    vals = []
    for y in range(0, h - block + 1, shift):
        for xx in range(0, w - block + 1, shift):
            z, zp = [], []
            for i in range(y, y + block):
                for j in range(xx, xx + block):
                    z.append([float(x[i, j, k]) if k < c else 0.0 for k in range(dim)])
                    zp.append([float(o[i, j, k]) if k < c else 0.0 for k in range(dim)])
            q = _q_block(z, zp, mult, conj)
            if q is not None:
                vals.append(q)
    return sum(vals) / len(vals)


def ssim(o, x, peak=1.0):
    h, w, c = o.shape
    r = np.arange(11) - 5.0
    g1 = np.exp(-0.5 * (r / 1.5) ** 2)
    win = np.outer(g1, g1)
    win = win / win.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    per_band = []
    for k in range(c):
        scores = []
        for y in range(h - 10):
            for xx in range(w - 10):
                a = o[y:y + 11, xx:xx + 11, k]
                b = x[y:y + 11, xx:xx + 11, k]
                ma, mb = float(np.sum(win * a)), float(np.sum(win * b))
                va = float(np.sum(win * (a - ma) ** 2))
                vb = float(np.sum(win * (b - mb) ** 2))
                cab = float(np.sum(win * (a - ma) * (b - mb)))
                scores.append((2 * ma * mb + c1) * (2 * cab + c2)
                              / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
        per_band.append(sum(scores) / len(scores))
    return sum(per_band) / c


def d_lambda(o, b, block=32):
    c = o.shape[2]
    diffs = []
    for i in range(c):
        for j in range(c):
            if i != j:
                diffs.append(abs(q_index(o[:, :, i], o[:, :, j], block)
                                 - q_index(b[:, :, i], b[:, :, j], block)))
    return sum(diffs) / len(diffs)


def d_s(o, pan, b, pan_low, block=32):
    c = o.shape[2]
    diffs = [abs(q_index(o[:, :, k], pan, block) - q_index(b[:, :, k], pan_low, block))
             for k in range(c)]
    return sum(diffs) / c
