import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from fuselab.datagen import (DatasetManifest, ImageCube, SampleTriple, decode_cube, degrade_to_pair,
                             encode_cube, extract_patches, make_triple, read_cube, rgb_response,
                             split_assignments, synth_scene, upsample_array, upsample_lowres,
                             write_cube, write_png_preview)
from fuselab.errors import ConfigError, FormatError, ShapeError


def test_synth_deterministic_and_bounded():
    a, b = synth_scene(32, 32, 5, seed=7), synth_scene(32, 32, 5, seed=7)
    assert a == b
    assert not np.array_equal(a.data, synth_scene(32, 32, 5, seed=8).data)


def test_synth_bounds_many_seeds():
    for seed in range(1000):
        x = synth_scene(16, 16, 2, seed=seed).data
        assert x.min() >= 0 and x.max() <= 1


@given(st.integers(0, 10**6))
def test_synth_is_smooth(seed):
    x = synth_scene(32, 32, 4, seed=seed).data
    adjacent = np.abs(np.diff(x, axis=1)).mean()
    assert adjacent < x.std()


def test_degrade_constant_cube():
    A, B = degrade_to_pair(ImageCube(np.full((16, 16, 3), 0.4)))
    np.testing.assert_allclose(A.data, 0.4, atol=1e-12)
    np.testing.assert_allclose(B.data, 0.4, atol=1e-12)
    assert B.shape == (4, 4, 3)


def test_degrade_uniform_weights_average():
    X = np.broadcast_to(np.array([0.1, 0.2, 0.3, 0.4]), (16, 16, 4)).copy()
    A, _ = degrade_to_pair(ImageCube(X), np.full(4, 0.25))
    np.testing.assert_allclose(A.data, 0.25, atol=1e-12)


def test_rgb_guide_has_three_channels():
    A, B = degrade_to_pair(synth_scene(16, 16, 31, seed=0), rgb_response(31))
    assert A.shape == (16, 16, 3) and B.shape == (4, 4, 31)


def test_degrade_rejects_bad_weights():
    with pytest.raises(ConfigError):
        degrade_to_pair(synth_scene(16, 16, 4, seed=0), [0.5, 0.5, 0.5, 0.5])


@given(st.integers(0, 10**6))
def test_upsampled_band_means_preserved(seed):
    X = synth_scene(32, 32, 4, seed=seed)
    _, B = degrade_to_pair(X)
    BU = upsample_lowres(B).data
    np.testing.assert_allclose(BU.mean(axis=(0, 1)), X.data.mean(axis=(0, 1)), atol=1e-2)


def test_upsample_constant_and_extents():
    B = ImageCube(np.full((3, 5, 2), 0.7))
    BU = upsample_lowres(B)
    assert BU.shape == (12, 20, 2)
    np.testing.assert_allclose(BU.data, 0.7, atol=1e-12)


@pytest.mark.parametrize("method", ["bicubic", "bilinear"])
def test_upsample_reproduces_ramp(method):
    w = 8
    # sample k of the low-res grid sits at high-res coordinate 4k + 1.5
    b = np.broadcast_to((np.arange(w) * 4 + 1.5)[None, :, None] / 64, (4, w, 1)).copy()
    up = upsample_array(b, method=method)[:, :, 0]
    ramp = np.arange(4 * w) / 64
    np.testing.assert_allclose(up[:, 6:-6], np.broadcast_to(ramp[6:-6], (16, 4 * w - 12)), atol=1e-3)


def test_patch_grid_count():
    big = SampleTriple(ImageCube(np.zeros((512, 512, 1))), ImageCube(np.zeros((128, 128, 2))))
    patches = extract_patches(big, 64, 64)
    assert len(patches) == 64
    assert all(p.B.shape == (16, 16, 2) for p in patches)


def test_patches_partition_scene():
    t = make_triple(synth_scene(64, 64, 3, seed=1), id="s")
    out_x, out_b = np.zeros_like(t.X.data), np.zeros_like(t.B.data)
    for p in extract_patches(t, 16, 16, seed=3):
        y, x = p.origin
        out_x[y:y + 16, x:x + 16] = p.X.data
        out_b[y // 4:y // 4 + 4, x // 4:x // 4 + 4] = p.B.data
    assert np.array_equal(out_x, t.X.data) and np.array_equal(out_b, t.B.data)


def test_patch_validation():
    t = make_triple(synth_scene(16, 16, 2, seed=1))
    with pytest.raises(ConfigError):
        extract_patches(t, 6, 8)
    with pytest.raises(ConfigError):
        extract_patches(t, 32, 32)


def test_triple_shape_checks():
    with pytest.raises(ShapeError):
        SampleTriple(ImageCube(np.zeros((16, 16, 1))), ImageCube(np.zeros((8, 8, 2))))


def test_image_cube_bounds():
    with pytest.raises(ValueError):
        ImageCube(np.full((2, 2, 1), 1.5))
    raw = ImageCube.from_raw(np.full((2, 2, 1), 2047), bit_depth=11)
    assert raw.data.max() == 1.0 and raw.peak == 2047.0


def test_cube_round_trip(tmp_path):
    cube = ImageCube(synth_scene(16, 16, 3, seed=2).data.astype(np.float32), bit_depth_origin=11,
                     band_labels=("r", "g", "b"))
    write_cube(cube, tmp_path / "c.fcube")
    assert read_cube(tmp_path / "c.fcube") == cube


def test_truncated_cube_is_format_error():
    buf = encode_cube(ImageCube(np.full((4, 4, 2), 0.5)))
    for cut in (3, 20, len(buf) - 1):
        with pytest.raises(FormatError):
            decode_cube(buf[:cut])
    with pytest.raises(FormatError):
        decode_cube(buf + b"\0")


def test_png_preview_gamma(tmp_path):
    write_png_preview(ImageCube(np.full((4, 4, 1), 0.5)), tmp_path / "p.png")
    level = round(255 * 0.5 ** (1 / 2.2))
    assert level == 186
    assert np.all(np.asarray(Image.open(tmp_path / "p.png")) == level)


def test_split_assignments():
    tags = split_assignments(160, (0.9, 0.1), seed=0)
    assert tags.count("train") == 144 and tags.count("val") == 16
    assert tags == split_assignments(160, (0.9, 0.1), seed=0)
    with pytest.raises(ConfigError):
        split_assignments(10, (0.8, 0.1), seed=0)


def test_manifest_round_trip(tmp_path):
    t = make_triple(synth_scene(16, 16, 2, seed=0), id="a")
    entry = {"id": "a", "split": "train"}
    for key in "ABX":
        write_cube(getattr(t, key), tmp_path / f"a_{key}.fcube")
        entry[key] = f"a_{key}.fcube"
    DatasetManifest([entry], {"count": 1}, tmp_path).save(tmp_path / "m.json")
    m = DatasetManifest.read(tmp_path / "m.json")
    loaded = m.load_split("train")[0]
    assert loaded.X.shape == t.X.shape and m.split("val") == []
    bad = DatasetManifest([entry, dict(entry)], {}, tmp_path)
    with pytest.raises(ConfigError):
        bad.validate()
