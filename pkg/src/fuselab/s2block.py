"""Spatial-spectral fusion block (S2Block) and its attention primitives.

Layouts
-------
The public correlation functions take per-head stacks in the layout
``(..., HW, S', N)``: positions, head width, head index.  Internally the
block works heads-first, ``(..., N, HW, S')``, so every head is a plain
batched matrix product.

Head ``i`` owns feature columns ``[i*S', (i+1)*S')`` of the ``HW x S``
position-by-feature matrix; positions are enumerated row by row.
"""

from __future__ import annotations

import math

from . import tensor as T
from .errors import ConfigError, DimensionError

VARIANT_MAPS = {
    "full": ("a", "b", "c", "d"),
    "v1": ("a", "b", "c", "d"),
    "v3": ("a", "b", "c"),
    "v4": ("b", "c", "d"),
}


def _to_heads_first(t):
    k = t.ndim - 3
    lead = tuple(range(k))
    return T.permute(t, lead + (k + 2, k, k + 1))


def _from_heads_first(t):
    k = t.ndim - 3
    lead = tuple(range(k))
    return T.permute(t, lead + (k + 1, k + 2, k))


def _check_pair(x, y, name):
    if x.shape != y.shape:
        raise DimensionError(f"{name}: operand shapes differ, {x.shape} vs {y.shape}")
    if x.ndim < 3:
        raise DimensionError(f"{name}: expected (..., HW, S', N), got {x.shape}")


def spatial_corr_heads(ta, tb):
    """Row-stochastic HW x HW similarity per head, heads-first layout."""
    s_prime = ta.shape[-1]
    # scaling the HW x S' factor is cheaper than scaling the HW x HW logits
    logits = T.matmul(T.scale(ta, 1.0 / math.sqrt(s_prime)), T.transpose(tb))
    return T.softmax_rows(logits)


def spectral_corr_heads(tc, td):
    """Row-stochastic S' x S' similarity per head, heads-first layout.

    The logit divisor is sqrt(S'^3) / HW, so its effect depends on the
    number of positions and therefore on the scale the block runs at.
    """
    hw, s_prime = tc.shape[-2], tc.shape[-1]
    logits = T.scale(T.matmul(T.transpose(tc), td), hw / math.sqrt(s_prime ** 3))
    return T.softmax_rows(logits)


def spatial_self_correlation(ta, tb):
    """(..., HW, S', N) pair -> (..., HW, HW, N)."""
    _check_pair(ta, tb, "spatial_self_correlation")
    c = spatial_corr_heads(_to_heads_first(ta), _to_heads_first(tb))
    return _from_heads_first(c)


def spectral_self_correlation(tc, td):
    """(..., HW, S', N) pair -> (..., S', S', N)."""
    _check_pair(tc, td, "spectral_self_correlation")
    c = spectral_corr_heads(_to_heads_first(tc), _to_heads_first(td))
    return _from_heads_first(c)


def ssio_fuse(cspa, cspe, tb, tc):
    """Per head: ``(Cspa @ Tc) * (Tb @ Cspe)`` elementwise, output (..., HW, S', N)."""
    _check_pair(tb, tc, "ssio_fuse")
    hw, sp, n = tb.shape[-3:]
    if cspa.shape[-3:] != (hw, hw, n) or cspe.shape[-3:] != (sp, sp, n):
        raise DimensionError(
            f"ssio_fuse: Cspa {cspa.shape} / Cspe {cspe.shape} incompatible with T {tb.shape}")
    fused = _ssio_heads(_to_heads_first(cspa), _to_heads_first(cspe),
                        _to_heads_first(tb), _to_heads_first(tc))
    return _from_heads_first(fused)


def _ssio_heads(cspa, cspe, tb, tc):
    return T.mul(T.matmul(cspa, tc), T.matmul(tb, cspe))


def check_head_width(width, head_width):
    if head_width < 1 or width % head_width:
        raise ConfigError(f"stage width {width} is not divisible by head width {head_width}")
    return width // head_width


def s2block_forward(f_spa, f_spe, p, head_width, variant="full"):
    """Fuse a spatial and a spectral feature map of shape (B, H, W, S_k).

    ``p`` maps ``"a" .. "d"`` and ``"out"`` (or ``"cat"`` for the
    concatenation ablation) to ``(weight, bias)`` pairs of per-position
    affine maps.
    """
    if f_spa.shape != f_spe.shape:
        raise DimensionError(f"s2block: feature shapes differ, {f_spa.shape} vs {f_spe.shape}")
    bsz, h, w, width = f_spe.shape
    if variant == "v2":
        w_cat, b_cat = p["cat"]
        return T.fully_connected(T.concat([f_spa, f_spe], axis=-1), w_cat, b_cat)

    n = check_head_width(width, head_width)
    hw = h * w
    m_spa = T.reshape(f_spa, (bsz, hw, width))
    m_spe = T.reshape(f_spe, (bsz, hw, width))

    def heads(m, key):
        t = T.fully_connected(m, *p[key])
        t = T.reshape(t, (bsz, hw, n, head_width))
        return T.permute(t, (0, 2, 1, 3))

    if variant in ("full", "v1"):
        ta, tb = heads(m_spa, "a"), heads(m_spa, "b")
        tc, td = heads(m_spe, "c"), heads(m_spe, "d")
        fused = _ssio_heads(spatial_corr_heads(ta, tb), spectral_corr_heads(tc, td), tb, tc)
    elif variant == "v3":
        ta, tb, tc = heads(m_spa, "a"), heads(m_spa, "b"), heads(m_spe, "c")
        fused = T.matmul(spatial_corr_heads(ta, tb), tc)
    elif variant == "v4":
        tb, tc, td = heads(m_spa, "b"), heads(m_spe, "c"), heads(m_spe, "d")
        fused = T.matmul(tb, spectral_corr_heads(tc, td))
    else:
        raise ConfigError(f"unknown variant {variant!r}")

    m_fus = T.reshape(T.permute(fused, (0, 2, 1, 3)), (bsz, hw, width))
    out = T.fully_connected(m_fus, *p["out"])
    return T.reshape(out, (bsz, h, w, width))
