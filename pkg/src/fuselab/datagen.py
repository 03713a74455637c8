"""Synthetic fusion samples, degradation, upsampling, patching and raster I/O.

The degradation is a documented stand-in for a reduced-resolution (Wald)
simulation: a Gaussian blur followed by 4x decimation of the ground truth
produces the low-resolution cube, and fixed spectral responses produce the
panchromatic (or RGB) image.  It is not a sensor MTF model.

FCUBE container (all integers little-endian)::

    offset  size  field
    0       8     magic  b"FCUBE\\0\\0\\0"
    8       2     u16 format version (1)
    10      4     u32 height
    14      4     u32 width
    18      4     u32 bands
    22      2     u16 bit_depth_origin (0 = unknown)
    24      1     u8  has_labels
    25      ...   if has_labels: per band, u16 byte length + UTF-8 label
    ...     4*H*W*bands  f32 grid, row-major (height, width, band)

A file must end exactly after the grid.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, ShapeError

RATIO = 4
FCUBE_MAGIC = b"FCUBE\0\0\0"
FCUBE_VERSION = 1
PREVIEW_GAMMA = 2.2
SPLITS = ("train", "val", "test")


@dataclass
class ImageCube:
    """An H x W x bands raster with values in [0, 1]."""

    data: np.ndarray
    bit_depth_origin: Optional[int] = None
    band_labels: Optional[tuple] = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"ImageCube needs H x W x bands extents >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise ValueError("ImageCube values must be finite and within [0, 1]")
        self.data = arr
        if self.band_labels is not None:
            self.band_labels = tuple(str(s) for s in self.band_labels)
            if len(self.band_labels) != arr.shape[2]:
                raise ShapeError(f"{len(self.band_labels)} band labels for {arr.shape[2]} bands")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def peak(self):
        """Peak value of the original sensor range (1.0 when unknown)."""
        return float(2 ** self.bit_depth_origin - 1) if self.bit_depth_origin else 1.0

    @classmethod
    def from_raw(cls, raw, bit_depth, band_labels=None):
        """Map raw integer counts (e.g. 11-bit 0..2047) linearly onto [0, 1]."""
        peak = 2 ** bit_depth - 1
        data = np.clip(np.asarray(raw, dtype=np.float64) / peak, 0.0, 1.0)
        return cls(data, bit_depth_origin=bit_depth, band_labels=band_labels)

    def __eq__(self, other):
        if not isinstance(other, ImageCube):
            return NotImplemented
        return (self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data)
                and self.bit_depth_origin == other.bit_depth_origin
                and self.band_labels == other.band_labels)


@dataclass
class SampleTriple:
    """One fusion example: guide image A, low-resolution cube B, ground truth X."""

    A: ImageCube
    B: ImageCube
    X: Optional[ImageCube] = None
    id: str = ""
    origin: Optional[tuple] = None

    def __post_init__(self):
        H, W = self.A.height, self.A.width
        if H % RATIO or W % RATIO:
            raise ShapeError(f"{self.id}: A extents {H}x{W} are not divisible by {RATIO}")
        if (self.B.height, self.B.width) != (H // RATIO, W // RATIO):
            raise ShapeError(f"{self.id}: B is {self.B.height}x{self.B.width}, "
                             f"expected {H // RATIO}x{W // RATIO} for A {H}x{W}")
        if self.X is not None and self.X.shape != (H, W, self.B.bands):
            raise ShapeError(f"{self.id}: X shape {self.X.shape} != {(H, W, self.B.bands)}")


# -- synthesis ---------------------------------------------------------------


def synth_scene(height, width, bands, seed, n_regions=6, n_modes=4):
    """Seeded smooth synthetic scene.

    Piecewise-constant spectral regions (a Voronoi partition) are modulated by
    a few low-frequency cosine fields mixed differently per band, then given a
    mild per-band gain and clipped to [0, 1].
    """
    if height < 16 or width < 16:
        raise ShapeError(f"synth_scene needs extents >= 16, got {height}x{width}")
    if bands < 1:
        raise ShapeError("synth_scene needs at least one band")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")

    def cosine_field():
        f = np.zeros((height, width))
        for _ in range(n_modes):
            u, v = rng.integers(0, 4, size=2)
            if u == 0 and v == 0:
                u = 1
            f += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (u * xx + v * yy) + rng.uniform(0, 2 * np.pi))
        return f / np.abs(f).max()

    f1, f2 = cosine_field(), cosine_field()

    centers = rng.uniform(0, 1, size=(n_regions, 2))
    d2 = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    labels = np.argmin(d2, axis=-1)
    # spectra vary smoothly across bands
    knots = rng.uniform(0.15, 0.65, size=(n_regions, 4))
    band_pos = np.linspace(0, 1, bands)
    spectra = np.stack([np.interp(band_pos, np.linspace(0, 1, 4), k) for k in knots])

    mix = 0.5 + 0.5 * np.cos(np.pi * band_pos + rng.uniform(0, np.pi))
    modulation = 1.0 + 0.3 * (mix * f1[..., None] + (1 - mix) * f2[..., None])
    gain = rng.uniform(0.85, 1.15, size=bands)
    cube = spectra[labels] * modulation * gain
    return ImageCube(np.clip(cube, 0.0, 1.0))


def rgb_response(bands):
    """Three Gaussian band responses (R, G, B), each column summing to one."""
    pos = np.linspace(0, 1, bands)
    cols = [np.exp(-0.5 * ((pos - c) / 0.15) ** 2) for c in (0.8, 0.5, 0.2)]
    resp = np.stack(cols, axis=1)
    return resp / resp.sum(axis=0, keepdims=True)


def _check_weights(weights, bands):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    if w.ndim != 2 or w.shape[0] != bands:
        raise ConfigError(f"pan weights {np.shape(weights)} do not match {bands} bands")
    if np.any(w < 0) or not np.allclose(w.sum(axis=0), 1.0, atol=1e-6):
        raise ConfigError("pan weights must be non-negative and sum to 1 per output channel")
    return w


def gaussian_blur(arr, sigma):
    """Per-band Gaussian blur of an (H, W, C) array with reflective borders."""
    return ndimage.gaussian_filter(arr, sigma=(sigma, sigma, 0), mode="reflect", truncate=4.0)


def decimate(arr, factor=RATIO):
    """Keep one value per factor x factor block: the mean of its central 2x2."""
    lo, hi = factor // 2 - 1, factor // 2
    return 0.25 * (arr[lo::factor, lo::factor] + arr[lo::factor, hi::factor]
                   + arr[hi::factor, lo::factor] + arr[hi::factor, hi::factor])


def degrade_to_pair(X, pan_weights=None, blur_sigma=1.7, seed=None, noise_std=0.0):
    """Simulate (A, B) from a ground-truth cube.

    ``pan_weights`` is either ``C`` scalars (single-band A) or a ``C x k``
    matrix whose columns each sum to one (e.g. :func:`rgb_response` for a
    3-channel A).  ``None`` means a uniform band average.
    """
    x = X.data if isinstance(X, ImageCube) else np.asarray(X)
    H, W, C = x.shape
    if H % RATIO or W % RATIO:
        raise ShapeError(f"ground truth extents {H}x{W} are not divisible by {RATIO}")
    w = _check_weights(np.full(C, 1.0 / C) if pan_weights is None else pan_weights, C)
    a = x @ w
    b = decimate(gaussian_blur(x, blur_sigma))
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        a = a + rng.normal(0, noise_std, a.shape)
        b = b + rng.normal(0, noise_std, b.shape)
    bits = X.bit_depth_origin if isinstance(X, ImageCube) else None
    labels = X.band_labels if isinstance(X, ImageCube) else None
    return (ImageCube(np.clip(a, 0, 1), bit_depth_origin=bits),
            ImageCube(np.clip(b, 0, 1), bit_depth_origin=bits, band_labels=labels))


def make_triple(X, pan_weights=None, blur_sigma=1.7, id="", seed=None, noise_std=0.0):
    A, B = degrade_to_pair(X, pan_weights, blur_sigma, seed=seed, noise_std=noise_std)
    return SampleTriple(A, B, X, id=id)


# -- upsampling --------------------------------------------------------------


def _keys(t, a=-0.5):
    t = np.abs(t)
    return np.where(t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
                    np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0))


def _reflect(idx, n):
    # half-sample symmetric: -1 -> 0, n -> n-1
    idx = np.mod(idx, 2 * n)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def interpolation_matrix(n_in, factor, method="bicubic"):
    """(n_in*factor x n_in) matrix mapping samples to the upsampled grid."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if method == "nearest":
        m[rows, np.arange(n_out) // factor] = 1.0
        return m
    if method == "bicubic":
        taps, kernel = range(-1, 3), _keys
    elif method == "bilinear":
        taps, kernel = range(0, 2), lambda t: np.maximum(0.0, 1.0 - np.abs(t))
    else:
        raise ConfigError(f"unknown upsampling method {method!r}")
    base = np.floor(src).astype(int)
    for k in taps:
        idx = base + k
        np.add.at(m, (rows, _reflect(idx, n_in)), kernel(src - idx))
    return m


def upsample_array(b, factor=RATIO, method="bicubic"):
    """Separable upsampling of an (..., h, w, C) array; clipped to [0, 1]."""
    b = np.asarray(b)
    h, w = b.shape[-3], b.shape[-2]
    mh = interpolation_matrix(h, factor, method).astype(b.dtype, copy=False)
    mw = interpolation_matrix(w, factor, method).astype(b.dtype, copy=False)
    out = np.einsum("Ih,...hwc->...Iwc", mh, b)
    out = np.einsum("Jw,...Iwc->...IJc", mw, out)
    return np.clip(out, 0, 1)


def upsample_lowres(B, factor=RATIO, method="bicubic"):
    """B^U: B brought onto the guide-image grid (Keys bicubic, a = -0.5)."""
    if factor != RATIO:
        raise ConfigError(f"only a scale ratio of {RATIO} is supported")
    if isinstance(B, ImageCube):
        return ImageCube(upsample_array(B.data, factor, method),
                         bit_depth_origin=B.bit_depth_origin, band_labels=B.band_labels)
    return upsample_array(B, factor, method)


# -- patching ----------------------------------------------------------------


def extract_patches(triple, patch, stride, seed=None):
    """Aligned patch grid; B windows sit at (y/4, x/4) with extent patch/4."""
    if patch % RATIO or stride % RATIO or patch <= 0 or stride <= 0:
        raise ConfigError(f"patch ({patch}) and stride ({stride}) must be positive multiples of {RATIO}")
    H, W = triple.A.height, triple.A.width
    if patch > H or patch > W:
        raise ConfigError(f"patch {patch} exceeds image extents {H}x{W}")
    q, lp = RATIO, patch // RATIO

    def cut(cube, y0, x0, n):
        return ImageCube(cube.data[y0:y0 + n, x0:x0 + n], cube.bit_depth_origin, cube.band_labels)

    out = []
    for y in range(0, H - patch + 1, stride):
        for x in range(0, W - patch + 1, stride):
            X = None if triple.X is None else cut(triple.X, y, x, patch)
            out.append(SampleTriple(cut(triple.A, y, x, patch), cut(triple.B, y // q, x // q, lp), X,
                                    id=f"{triple.id}_y{y:04d}_x{x:04d}", origin=(y, x)))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(out))
        out = [out[i] for i in order]
    return out


# -- FCUBE I/O ---------------------------------------------------------------


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_cube(cube: ImageCube) -> bytes:
    H, W, C = cube.shape
    parts = [FCUBE_MAGIC, struct.pack("<HIIIHB", FCUBE_VERSION, H, W, C,
                                      cube.bit_depth_origin or 0, cube.band_labels is not None)]
    for label in cube.band_labels or ():
        raw = label.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_cube(buf: bytes) -> ImageCube:
    def take(offset, n, what):
        if offset + n > len(buf):
            raise FormatError(f"truncated FCUBE while reading {what}", offset=len(buf))
        return buf[offset:offset + n]

    if take(0, 8, "magic") != FCUBE_MAGIC:
        raise FormatError("bad FCUBE magic", offset=0)
    version, H, W, C, bits, has_labels = struct.unpack("<HIIIHB", take(8, 17, "header"))
    if version != FCUBE_VERSION:
        raise FormatError(f"unsupported FCUBE version {version}", offset=8)
    if min(H, W, C) < 1:
        raise FormatError(f"invalid extents {H}x{W}x{C}", offset=10)
    off = 25
    labels = None
    if has_labels:
        labels = []
        for _ in range(C):
            (n,) = struct.unpack("<H", take(off, 2, "label length"))
            labels.append(take(off + 2, n, "label").decode("utf-8"))
            off += 2 + n
    nbytes = 4 * H * W * C
    grid = np.frombuffer(take(off, nbytes, "pixel grid"), dtype="<f4").reshape(H, W, C)
    if off + nbytes != len(buf):
        raise FormatError("trailing bytes after FCUBE grid", offset=off + nbytes)
    try:
        return ImageCube(grid.astype(np.float32), bit_depth_origin=bits or None, band_labels=labels)
    except ValueError as exc:
        raise FormatError(f"invalid FCUBE payload: {exc}", offset=off) from exc


def write_cube(cube: ImageCube, path):
    _atomic_write(path, encode_cube(cube))


def read_cube(path) -> ImageCube:
    with open(path, "rb") as fh:
        return decode_cube(fh.read())


def preview_levels(data, gamma=PREVIEW_GAMMA):
    """8-bit display levels: round(255 * v ** (1/gamma))."""
    return np.round(255.0 * np.clip(data, 0, 1) ** (1.0 / gamma)).astype(np.uint8)


def write_png_preview(cube: ImageCube, path, gamma=PREVIEW_GAMMA):
    """Gamma-encoded 8-bit preview of a 1- or 3-band cube (inspection only)."""
    from PIL import Image

    if cube.bands not in (1, 3):
        raise ShapeError(f"PNG preview needs 1 or 3 bands, got {cube.bands}")
    levels = preview_levels(cube.data, gamma)
    img = Image.fromarray(levels[:, :, 0] if cube.bands == 1 else levels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def natural_color(cube: ImageCube, bands=None):
    """Pick three bands (default: spread across the spectrum) for previews."""
    if cube.bands == 1 or cube.bands == 3:
        return cube
    idx = bands or [int(round(p * (cube.bands - 1))) for p in (0.75, 0.5, 0.25)]
    return ImageCube(cube.data[:, :, idx])


# -- manifests ---------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Sample file listing with split tags; paths are relative to ``root``."""

    samples: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    root: Path = Path(".")

    def validate(self):
        seen = set()
        for s in self.samples:
            if s["split"] not in SPLITS:
                raise ConfigError(f"sample {s['id']}: unknown split {s['split']!r}")
            for key in ("A", "B", "X"):
                p = s.get(key)
                if p is None:
                    continue
                if p in seen:
                    raise ConfigError(f"path {p} listed twice in manifest")
                seen.add(p)
        ids = [s["id"] for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate sample ids in manifest")
        return self

    def split(self, name):
        return [s for s in self.samples if s["split"] == name]

    def load(self, entry) -> SampleTriple:
        X = read_cube(self.root / entry["X"]) if entry.get("X") else None
        return SampleTriple(read_cube(self.root / entry["A"]), read_cube(self.root / entry["B"]),
                            X, id=entry["id"])

    def load_split(self, name) -> list:
        return [self.load(e) for e in self.split(name)]

    def to_json(self):
        doc = {"format": "fuselab-manifest", "version": 1,
               "samples": self.samples, "stats": self.stats}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path):
        self.validate()
        _atomic_write(path, self.to_json().encode("utf-8"))

    @classmethod
    def read(cls, path):
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != "fuselab-manifest":
            raise FormatError(f"{path} is not a fuselab manifest")
        return cls(samples=doc["samples"], stats=doc.get("stats", {}), root=path.parent).validate()


def split_assignments(n, fractions: Sequence[float], seed):
    """Seeded split tags for ``n`` samples; ``fractions`` are (train, val, test)."""
    fractions = list(fractions) + [0.0] * (3 - len(fractions))
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {fractions} must be non-negative and sum to 1")
    counts = [int(round(f * n)) for f in fractions[:2]]
    counts.append(n - sum(counts))
    if counts[2] < 0:
        counts[1] += counts[2]
        counts[2] = 0
    tags = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    order = np.random.default_rng(seed).permutation(n)
    out = [None] * n
    for tag, i in zip(tags, order):
        out[i] = tag
    return out
