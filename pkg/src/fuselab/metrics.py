"""Fusion quality indexes.

Reduced resolution (ground truth available): PSNR, SAM, ERGAS, Q2^n, SSIM.
Full resolution (no ground truth): D_lambda, D_s and QNR.
Absolute error maps (AEMs) for visual inspection.

All functions take ``(H, W, C)`` arrays or :class:`~fuselab.datagen.ImageCube`.

Conventions
-----------
* Q2^n follows the hypercomplex universal image quality index: every pixel's
  band vector is a Cayley-Dickson hypercomplex number (bands zero-padded to the
  next power of two) and the index is evaluated on ``block x block`` windows
  stepped by ``shift``; only windows that fit entirely are used.  Windows with
  zero total variance or zero mean modulus are skipped and counted.
* The scalar Q used by D_lambda and D_s is the same index with one band, on
  non-overlapping ``block x block`` windows; ``block`` is clamped to the image
  extents (the low-resolution cube is usually smaller than 32 pixels).
* D_lambda and D_s use unit exponents, so QNR = (1 - D_lambda) * (1 - D_s).
  For a 3-channel guide, D_s uses the channel mean as the intensity image.
* SSIM uses an 11-tap Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, valid
  windows only, averaged over bands.
* Aggregates report the mean and the population standard deviation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .datagen import RATIO, ImageCube, decimate, gaussian_blur
from .errors import DimensionError, MetricUndefinedError, ShapeError

log = logging.getLogger(__name__)

SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_TAPS = 0.01, 0.03, 1.5, 11
AEM_SCALE = 0.1
SAM_EPS = 1e-12
REDUCED_KEYS = ("psnr", "q2n", "sam", "ergas", "ssim")
FULL_KEYS = ("d_lambda", "d_s", "qnr")


def _arr(x):
    a = x.data if isinstance(x, ImageCube) else np.asarray(x)
    a = a.astype(np.float64, copy=False)
    return a[:, :, None] if a.ndim == 2 else a


def _pair(o, x, name):
    o, x = _arr(o), _arr(x)
    if o.shape != x.shape:
        raise DimensionError(f"{name}: shapes differ, {o.shape} vs {x.shape}")
    return o, x


# -- reduced-resolution indexes ----------------------------------------------


def psnr(O, X, peak=1.0):
    """Peak signal-to-noise ratio in dB over all pixels and bands; inf if equal."""
    o, x = _pair(O, X, "psnr")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((o - x) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak ** 2 / mse))


def sam(O, X, return_excluded=False):
    """Mean spectral angle in degrees; near-zero spectra are left out."""
    o, x = _pair(O, X, "sam")
    o2, x2 = o.reshape(-1, o.shape[-1]), x.reshape(-1, x.shape[-1])
    no, nx = np.linalg.norm(o2, axis=1), np.linalg.norm(x2, axis=1)
    ok = (no >= SAM_EPS) & (nx >= SAM_EPS)
    excluded = int(np.count_nonzero(~ok))
    if not ok.any():
        raise MetricUndefinedError("sam: every pixel has a zero spectral vector")
    if excluded:
        log.info("sam: excluded %d degenerate pixels", excluded)
    # half-angle form: exact zero for proportional spectra, no arccos loss near 1
    u = o2[ok] / no[ok, None]
    v = x2[ok] / nx[ok, None]
    theta = 2 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    angle = float(np.degrees(np.mean(theta)))
    return (angle, excluded) if return_excluded else angle


def ergas(O, X, ratio=RATIO):
    """(100 / ratio) * sqrt(mean_b (RMSE_b / mean(X_b))^2)."""
    o, x = _pair(O, X, "ergas")
    mu = x.mean(axis=(0, 1))
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise MetricUndefinedError(f"ergas: ground-truth band {int(zero[0])} has zero mean")
    rmse = np.sqrt(np.mean((o - x) ** 2, axis=(0, 1)))
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / mu) ** 2)))


def gaussian_window(taps=SSIM_TAPS, sigma=SSIM_SIGMA):
    r = np.arange(taps) - (taps - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    k = g.size
    h, w = img.shape[0] - k + 1, img.shape[1] - k + 1
    rows = sum(g[i] * img[i:i + h] for i in range(k))
    return sum(g[j] * rows[:, j:j + w] for j in range(k))


def ssim(O, X, peak=1.0):
    """Mean structural similarity over valid Gaussian windows and bands."""
    o, x = _pair(O, X, "ssim")
    if min(o.shape[:2]) < SSIM_TAPS:
        raise ShapeError(f"ssim needs extents >= {SSIM_TAPS}, got {o.shape[:2]}")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    scores = []
    for b in range(o.shape[2]):
        a, r = o[:, :, b], x[:, :, b]
        mu_a, mu_r = _filter_valid(a, g), _filter_valid(r, g)
        var_a = _filter_valid(a * a, g) - mu_a ** 2
        var_r = _filter_valid(r * r, g) - mu_r ** 2
        cov = _filter_valid(a * r, g) - mu_a * mu_r
        num = (2 * mu_a * mu_r + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_r ** 2 + c1) * (var_a + var_r + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# -- hypercomplex quality ----------------------------------------------------


def cd_conj(z):
    """Cayley-Dickson conjugate along the last axis."""
    out = -z
    out[..., 0] = z[..., 0]
    return out


def cd_mult(a, b):
    """Cayley-Dickson product along the last axis (length a power of two).

    (p, q)(r, s) = (p r - s* q, s p + q r*)
    """
    n = a.shape[-1]
    if n == 1:
        return a * b
    h = n // 2
    p, q, r, s = a[..., :h], a[..., h:], b[..., :h], b[..., h:]
    return np.concatenate([cd_mult(p, r) - cd_mult(cd_conj(s), q),
                           cd_mult(s, p) + cd_mult(q, cd_conj(r))], axis=-1)


def _pad_pow2(a):
    c = a.shape[-1]
    n = 1 << (c - 1).bit_length()
    if n == c:
        return a
    return np.concatenate([a, np.zeros(a.shape[:-1] + (n - c,))], axis=-1)


def hypercomplex_q(z, zp):
    """Q of two (P, n) blocks of hypercomplex pixels; None when degenerate."""
    mu, mup = z.mean(axis=0), zp.mean(axis=0)
    dz, dzp = z - mu, zp - mup
    var = np.mean(np.sum(dz ** 2, axis=1))
    varp = np.mean(np.sum(dzp ** 2, axis=1))
    m2, m2p = np.sum(mu ** 2), np.sum(mup ** 2)
    if var + varp == 0 or m2 + m2p == 0:
        return None
    cov = np.mean(cd_mult(dz, cd_conj(dzp)), axis=0)
    return float(4 * np.linalg.norm(cov) * math.sqrt(m2 * m2p) / ((var + varp) * (m2 + m2p)))


def _blocks(h, w, block, shift):
    for y in range(0, h - block + 1, shift):
        for x in range(0, w - block + 1, shift):
            yield y, x


def q2n(O, X, block=32, shift=32, return_skipped=False):
    """Hypercomplex quality index Q2^n averaged over windows (1 is ideal)."""
    o, x = _pair(O, X, "q2n")
    h, w, _ = o.shape
    if block > h or block > w or block < 2:
        raise ShapeError(f"q2n: block {block} does not fit extents {h}x{w}")
    o, x = _pad_pow2(o), _pad_pow2(x)
    vals, skipped = [], 0
    for y, xx in _blocks(h, w, block, shift):
        q = hypercomplex_q(x[y:y + block, xx:xx + block].reshape(-1, x.shape[2]),
                           o[y:y + block, xx:xx + block].reshape(-1, o.shape[2]))
        if q is None:
            skipped += 1
        else:
            vals.append(q)
    if skipped:
        log.info("q2n: skipped %d degenerate blocks", skipped)
    if not vals:
        raise MetricUndefinedError("q2n: every block is degenerate")
    value = float(np.mean(vals))
    return (value, skipped) if return_skipped else value


def uqi(x, y):
    """Universal image quality index of two equally sized 2-D blocks."""
    x, y = np.asarray(x, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()
    mx, my = x.mean(), y.mean()
    vx, vy = np.mean((x - mx) ** 2), np.mean((y - my) ** 2)
    cxy = np.mean((x - mx) * (y - my))
    den = (vx + vy) * (mx ** 2 + my ** 2)
    if den == 0:
        return None
    return float(4 * cxy * mx * my / den)


def q_index(x, y, block=32, return_skipped=False):
    """Blockwise UQI of two single-band images (non-overlapping windows)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise DimensionError(f"q_index needs equal 2-D images, got {x.shape} and {y.shape}")
    b = min(block, *x.shape)
    vals, skipped = [], 0
    for r, c in _blocks(*x.shape, b, b):
        q = uqi(x[r:r + b, c:c + b], y[r:r + b, c:c + b])
        if q is None:
            skipped += 1
        else:
            vals.append(q)
    if not vals:
        raise MetricUndefinedError("q_index: every block is degenerate (constant images)")
    value = float(np.mean(vals))
    return (value, skipped) if return_skipped else value


# -- full-resolution indexes -------------------------------------------------


def d_lambda(O, B, block=32):
    """Spectral distortion: mean |Q(O_i, O_j) - Q(B_i, B_j)| over band pairs."""
    o, b = _arr(O), _arr(B)
    c = o.shape[2]
    if b.shape[2] != c:
        raise DimensionError(f"d_lambda: O has {c} bands, B has {b.shape[2]}")
    if c < 2:
        raise MetricUndefinedError("d_lambda needs at least two bands")
    diffs = [abs(q_index(o[:, :, i], o[:, :, j], block) - q_index(b[:, :, i], b[:, :, j], block))
             for i in range(c) for j in range(i + 1, c)]
    return float(np.mean(diffs))


def intensity(A):
    a = _arr(A)
    return a.mean(axis=2)


def degrade_guide(P, ratio=RATIO, blur_sigma=1.7):
    """Guide intensity brought to the low-resolution grid (blur + decimate)."""
    if ratio != RATIO:
        raise ShapeError(f"only ratio {RATIO} is supported")
    return decimate(gaussian_blur(P[:, :, None], blur_sigma))[:, :, 0]


def d_s(O, A, B, ratio=RATIO, block=32, blur_sigma=1.7):
    """Spatial distortion: mean |Q(O_b, P) - Q(B_b, P_low)| over bands."""
    o, b = _arr(O), _arr(B)
    p = intensity(A)
    if o.shape[:2] != p.shape or b.shape[:2] != (p.shape[0] // ratio, p.shape[1] // ratio):
        raise DimensionError(f"d_s: O {o.shape}, A {np.shape(_arr(A))}, B {b.shape} violate ratio {ratio}")
    p_low = degrade_guide(p, ratio, blur_sigma)
    diffs = [abs(q_index(o[:, :, k], p, block) - q_index(b[:, :, k], p_low, block))
             for k in range(o.shape[2])]
    return float(np.mean(diffs))


def qnr_suite(O, A, B, ratio=RATIO, block=32, alpha=1.0, beta=1.0, sample_id=""):
    """D_lambda, D_s and QNR of one fused sample, as a one-row report."""
    dl = d_lambda(O, B, block)
    ds = d_s(O, A, B, ratio, block)
    report = FullResReport()
    report.add(sample_id, {"d_lambda": dl, "d_s": ds, "qnr": (1 - dl) ** alpha * (1 - ds) ** beta})
    return report


# -- error maps --------------------------------------------------------------


def aem(O, X):
    """Per-pixel mean absolute error over bands, as an H x W x 1 cube."""
    o, x = _pair(O, X, "aem")
    return ImageCube(np.clip(np.mean(np.abs(o - x), axis=2, keepdims=True), 0, 1))


def aem_levels(err, scale=AEM_SCALE):
    """Fixed display scale: 0 -> black, ``scale`` and above -> white."""
    e = err.data if isinstance(err, ImageCube) else np.asarray(err)
    return np.round(255 * np.clip(e / scale, 0, 1)).astype(np.uint8)


def write_aem_png(err, path, scale=AEM_SCALE):
    from PIL import Image

    levels = aem_levels(err, scale)
    Image.fromarray(levels[:, :, 0] if levels.ndim == 3 else levels).save(path)


# -- reports -----------------------------------------------------------------


def reduced_metrics(O, X, peak=1.0, ratio=RATIO, block=32):
    """Every reduced-resolution index for one sample."""
    o, x = _pair(O, X, "reduced_metrics")
    b = min(block, o.shape[0], o.shape[1])
    return {"psnr": psnr(o, x, peak), "q2n": q2n(o, x, b, b), "sam": sam(o, x),
            "ergas": ergas(o, x, ratio), "ssim": ssim(o, x, peak)}


def _fmt(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def _csv_num(v):
    v = _fmt(v)
    return repr(v) if isinstance(v, float) else v


def aggregate(rows, keys):
    """Mean and population std of each key over the rows; std is nan if a value is infinite."""
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        mean = float(np.mean(vals)) if vals.size else math.nan
        std = float(np.std(vals)) if vals.size and np.all(np.isfinite(vals)) else math.nan
        out[k] = (mean, std)
    return out


@dataclass
class MetricsReport:
    """Per-sample metric rows plus a mean/std aggregate."""

    kind: ClassVar[str] = ""
    keys: ClassVar[tuple] = ()
    rows: list = field(default_factory=list)

    def add(self, sample_id, values):
        self.rows.append({"id": sample_id, **{k: float(values[k]) for k in self.keys}})

    def aggregate(self):
        return aggregate(self.rows, self.keys)

    def mean(self, key):
        return self.aggregate()[key][0]

    def to_dict(self):
        agg = self.aggregate()
        return {"kind": self.kind,
                "samples": [{k: _fmt(v) for k, v in r.items()} for r in self.rows],
                "aggregate": {k: {"mean": _fmt(m), "std": _fmt(s)} for k, (m, s) in agg.items()},
                "std_convention": "population"}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self):
        """One row per sample, then a ``mean`` row whose ``*_std`` columns hold the spread."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", *self.keys, *[f"{k}_std" for k in self.keys]])
        for r in self.rows:
            w.writerow([r["id"], *[_csv_num(r[k]) for k in self.keys], *[""] * len(self.keys)])
        agg = self.aggregate()
        w.writerow(["mean", *[_csv_num(agg[k][0]) for k in self.keys],
                    *[_csv_num(agg[k][1]) for k in self.keys]])
        return buf.getvalue()


class ReducedResReport(MetricsReport):
    kind = "reduced"
    keys = REDUCED_KEYS


class FullResReport(MetricsReport):
    kind = "full"
    keys = FULL_KEYS

    @property
    def d_lambda(self):
        return self.mean("d_lambda")

    @property
    def d_s(self):
        return self.mean("d_s")

    @property
    def qnr(self):
        return self.mean("qnr")
