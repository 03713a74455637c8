import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from fuselab import metrics as M
from fuselab import reference as ref
from fuselab.datagen import degrade_to_pair, synth_scene, upsample_array, upsample_lowres
from fuselab.errors import DimensionError, MetricUndefinedError, ShapeError


def cube(seed, shape=(16, 16, 4), low=0.05):
    return np.random.default_rng(seed).uniform(low, 1.0, shape)


def noisy(x, seed, amp=0.05):
    return np.clip(x + np.random.default_rng(seed).uniform(-amp, amp, x.shape), 0, 1)


# -- psnr -------------------------------------------------------------------


def test_psnr_examples():
    x = cube(0)
    assert M.psnr(x, x) == math.inf
    assert M.psnr(np.full((4, 4, 2), 0.6), np.full((4, 4, 2), 0.5)) == pytest.approx(20.0)
    o = noisy(x, 1)
    assert M.psnr(o, x) == M.psnr(x, o)


def test_psnr_decreases_with_noise():
    x = cube(0)
    noise = np.random.default_rng(2).uniform(-1, 1, x.shape)
    values = [M.psnr(x + a * noise, x) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(values, values[1:]))


# -- sam --------------------------------------------------------------------


def test_sam_examples():
    x = cube(3)
    assert M.sam(2 * x, x) == 0.0
    assert M.sam(np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]])) == pytest.approx(90.0)
    o = cube(4, (4, 4, 4))
    x = cube(5, (4, 4, 4))
    assert M.sam(o, x) == pytest.approx(ref.sam(o, x), abs=1e-9)


@given(st.integers(0, 10**6))
def test_sam_invariant_to_pixel_scaling(seed):
    rng = np.random.default_rng(seed)
    o, x = cube(seed, (4, 4, 3)), cube(seed + 1, (4, 4, 3))
    scale = rng.uniform(0.1, 10, (4, 4, 1))
    assert M.sam(o * scale, x) == pytest.approx(M.sam(o, x), abs=1e-9)


def test_sam_excludes_zero_spectra():
    o, x = cube(1, (2, 2, 3)), cube(2, (2, 2, 3))
    o[0, 0] = 0
    _, excluded = M.sam(o, x, return_excluded=True)
    assert excluded == 1
    with pytest.raises(MetricUndefinedError):
        M.sam(np.zeros((2, 2, 3)), x)


# -- ergas ------------------------------------------------------------------


def test_ergas_examples():
    x = cube(0)
    assert M.ergas(x, x) == 0.0
    xb = np.full((4, 4, 1), 0.5)
    ob = xb + np.where(np.indices((4, 4, 1)).sum(axis=0) % 2, 0.05, -0.05)
    assert M.ergas(ob, xb, ratio=4) == pytest.approx(2.5)
    o = noisy(x, 1)
    assert M.ergas(3 * o, 3 * x) == pytest.approx(M.ergas(o, x))


def test_ergas_zero_mean_band():
    x = cube(0, (4, 4, 3))
    x[:, :, 1] = 0
    with pytest.raises(MetricUndefinedError, match="band 1"):
        M.ergas(x + 0.1, x)


# -- q2n / uqi --------------------------------------------------------------


def test_q2n_perfect_match():
    x = cube(0, (32, 32, 8))
    assert M.q2n(x, x) == pytest.approx(1.0, abs=1e-12)


def test_uqi_two_pixel_closed_form():
    x = np.array([[0.2, 0.6]])
    c = 0.1
    m = x.mean()
    assert M.uqi(x + c, x) == pytest.approx(2 * m * (m + c) / (m * m + (m + c) ** 2))
    assert M.uqi(x + c, x) < 1
    img = np.array([[0.2, 0.6], [0.3, 0.9]])
    assert M.q2n((img + c)[:, :, None], img[:, :, None], block=2, shift=2) == \
        pytest.approx(M.q_index(img, img + c, block=2))


@given(st.integers(0, 10**6))
def test_q2n_band_permutation(seed):
    x = cube(seed, (16, 16, 4))
    o = noisy(x, seed + 1, 0.1)
    base = M.q2n(o, x, 16, 16)
    # cycling the imaginary units is an automorphism of the quaternions: exact
    cyc = [0, 2, 3, 1]
    assert abs(M.q2n(o[:, :, cyc], x[:, :, cyc], 16, 16) - base) < 1e-12
    # other orders change the product table, so invariance is only approximate
    perm = np.random.default_rng(seed).permutation(4)
    assert abs(M.q2n(o[:, :, perm], x[:, :, perm], 16, 16) - base) < 1e-3


def test_cayley_dickson_is_quaternion():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    prod = M.cd_mult(a, b)
    for i in range(5):
        np.testing.assert_allclose(prod[i], ref.hamilton(a[i], b[i]), atol=1e-12)


def test_q2n_block_errors_and_degenerate():
    with pytest.raises(ShapeError):
        M.q2n(cube(0, (8, 8, 2)), cube(1, (8, 8, 2)), block=16)
    x = cube(0, (8, 16, 2))
    x[:, :8] = 0.5
    _, skipped = M.q2n(x, x, block=8, shift=8, return_skipped=True)
    assert skipped == 1


# -- ssim -------------------------------------------------------------------


def test_ssim_examples():
    x = cube(0)
    assert M.ssim(x, x) == pytest.approx(1.0)
    o = noisy(x, 1)
    assert M.ssim(o, x) == M.ssim(x, o)
    pattern = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)[:, :, None]
    assert M.ssim(0.25 + 0.5 * pattern, 0.75 - 0.5 * pattern) < 0
    with pytest.raises(ShapeError):
        M.ssim(cube(0, (8, 16, 1)), cube(0, (8, 16, 1)))


# -- oracles ----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_metrics_match_references(seed):
    o, x = cube(seed), cube(seed + 100)
    o = 0.5 * o + 0.5 * x
    assert M.psnr(o, x) == pytest.approx(ref.psnr(o, x), abs=1e-6)
    assert M.sam(o, x) == pytest.approx(ref.sam(o, x), abs=1e-6)
    assert M.ergas(o, x) == pytest.approx(ref.ergas(o, x), abs=1e-6)
    assert M.ssim(o, x) == pytest.approx(ref.ssim(o, x), abs=1e-6)
    assert M.q2n(o, x, 8, 8) == pytest.approx(ref.q2n(o, x, 8, 8), abs=1e-6)
    assert M.q_index(o[:, :, 0], x[:, :, 0], 8) == pytest.approx(ref.q_index(o[:, :, 0], x[:, :, 0], 8), abs=1e-6)
    b = cube(seed + 200, (4, 4, 4))
    assert M.d_lambda(o, b, 8) == pytest.approx(ref.d_lambda(o, b, 8), abs=1e-6)
    pan = cube(seed + 300, (16, 16, 1))
    p = M.intensity(pan)
    p_low = M.degrade_guide(p)
    assert M.d_s(o, pan, b, block=8) == pytest.approx(ref.d_s(o, p, b, p_low, 8), abs=1e-6)


# -- full resolution ----------------------------------------------------------


def test_qnr_self_consistent_case():
    b = synth_scene(32, 32, 4, seed=0).data[::4, ::4]
    o = upsample_array(b, method="nearest")
    assert M.d_lambda(o, b) < 1e-3


def test_qnr_factorization_and_ranges():
    for seed in range(100):
        X = synth_scene(32, 32, 4, seed=seed)
        A, B = degrade_to_pair(X)
        O = noisy(upsample_lowres(B).data, seed, 0.05 * (seed % 5))
        rep = M.qnr_suite(O, A, B)
        r = rep.rows[0]
        assert r["qnr"] == (1 - r["d_lambda"]) * (1 - r["d_s"])
        assert all(0 <= r[k] <= 1 for k in M.FULL_KEYS)


def test_qnr_shape_errors():
    with pytest.raises(DimensionError):
        M.d_s(cube(0), cube(1, (16, 16, 1)), cube(2, (8, 8, 4)))


# -- aem --------------------------------------------------------------------


def test_aem_examples(tmp_path):
    x = cube(0)
    assert not np.any(M.aem(x, x).data)
    err = M.aem(np.full_like(x, 0.6), np.full_like(x, 0.5))
    np.testing.assert_allclose(err.data, 0.1)
    o = noisy(x, 3)
    assert M.aem(o, x).data.mean() == pytest.approx(np.abs(o - x).sum() / (16 * 16 * 4))
    M.write_aem_png(M.aem(o, x), tmp_path / "a.png")
    levels = np.asarray(Image.open(tmp_path / "a.png"))
    assert levels.shape == (16, 16)
    assert M.aem_levels(np.array([0.0, 0.05, 0.1, 0.5])).tolist() == [0, 128, 255, 255]


# -- reports ----------------------------------------------------------------


def test_report_aggregate_and_formats():
    rep = M.ReducedResReport()
    for seed in range(3):
        x = synth_scene(16, 16, 3, seed=seed).data
        rep.add(f"s{seed}", M.reduced_metrics(noisy(x, seed), x))
    rep.add("perfect", M.reduced_metrics(x, x))
    agg = rep.aggregate()
    for k in ("sam", "ergas", "ssim", "q2n"):
        assert agg[k][0] == pytest.approx(np.mean([r[k] for r in rep.rows]), abs=1e-9)
        assert agg[k][1] == pytest.approx(np.std([r[k] for r in rep.rows]), abs=1e-9)
    assert agg["psnr"][0] == math.inf and math.isnan(agg["psnr"][1])
    doc = json.loads(rep.to_json())
    assert doc["kind"] == "reduced" and doc["samples"][3]["psnr"] == "inf"
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("id,psnr,q2n,sam,ergas,ssim,psnr_std") and lines[-1].startswith("mean,")
    assert len(lines) == 6
