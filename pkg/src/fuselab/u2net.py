"""Double U-Net fusion model: a spatial branch, a spectral branch, S2Blocks.

Both branches process features at three scales (H x W x S, H/2 x W/2 x 2S,
H/4 x W/4 x 4S) over five stages.  Between stages, encoder steps use a 2x2
stride-2 convolution followed by a depthwise convolution that doubles the
width; decoder steps use a 2x2 stride-2 transposed convolution that halves
it.  Stage outputs 1 and 2 are added to the inputs of stages 5 and 4.

The spatial branch runs a ResBlock in stages 1-4 and nothing in stage 5.
Each spectral stage fuses the spatial feature of the same stage with the
spectral feature through an S2Block and then applies a residual MLP.  A
3x3 head maps the final spectral feature to C bands and adds B^U.

Parameters are a flat ordered ``dict`` of name -> :class:`Tensor`; names
encode the structure (``spe.stage3.s2.a.w``, ``spa.down1.dw.b`` ...).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .datagen import RATIO, upsample_array
from .errors import ConfigError, DimensionError, ShapeError
from .s2block import VARIANT_MAPS, check_head_width, s2block_forward

VARIANTS = ("full", "v1", "v2", "v3", "v4")
N_STAGES = 5
STAGE_SCALE = (1, 2, 4, 2, 1)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``pan_channels`` is c (1 for pansharpening, 3 for RGB guides), ``bands``
    is C, ``width`` is the base feature width S and ``head_width`` is S'.
    """

    pan_channels: int = 1
    bands: int = 8
    width: int = 32
    head_width: int = 16
    variant: str = "full"
    lrelu_slope: float = 0.2
    resblocks_per_stage: int = 1
    depthwise_kernel: int = 3
    seed: int = 0
    precision: str = "f32"
    zero_head: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if min(self.pan_channels, self.bands, self.width, self.head_width) < 1:
            raise ConfigError("channel counts and widths must be positive")
        if self.variant != "v2":
            check_head_width(self.width, self.head_width)
        if not 0 < self.lrelu_slope < 1:
            raise ConfigError(f"lrelu_slope must lie in (0, 1), got {self.lrelu_slope}")
        if self.resblocks_per_stage < 1:
            raise ConfigError("resblocks_per_stage must be >= 1")
        if self.depthwise_kernel < 1 or self.depthwise_kernel % 2 == 0:
            raise ConfigError("depthwise_kernel must be a positive odd integer")
        if self.precision not in T.DTYPES:
            raise ConfigError(f"precision must be one of {tuple(T.DTYPES)}")

    @property
    def dtype(self):
        return T.resolve_dtype(self.precision)

    def heads(self, stage):
        """Head count N_k at a (1-based) stage."""
        return self.width * STAGE_SCALE[stage - 1] // self.head_width

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_(self, **changes):
        return replace(self, **changes)


# -- parameter layout --------------------------------------------------------


def _conv_spec(kh, kw, cin, cout):
    return (kh, kw, cin, cout), kh * kw * cin


def parameter_shapes(config: ModelConfig):
    """Ordered (name, weight shape, fan-in) for every weight; biases follow each."""
    S, k_dw = config.width, config.depthwise_kernel
    specs = []

    def conv(name, kh, cin, cout):
        specs.append((name, *_conv_spec(kh, kh, cin, cout)))

    def fc(name, din, dout):
        specs.append((name, (din, dout), din))

    def sampling(prefix):
        for i, w in ((1, S), (2, 2 * S)):
            conv(f"{prefix}.down{i}.conv", 2, w, w)
            specs.append((f"{prefix}.down{i}.dw", (k_dw, k_dw, w, 2), k_dw * k_dw))
        for i, w in ((1, 2 * S), (2, S)):
            specs.append((f"{prefix}.up{i}", (2, 2, 2 * w, w), 2 * w))

    def fusion_stages(prefix):
        for k in range(1, N_STAGES + 1):
            w = S * STAGE_SCALE[k - 1]
            if config.variant == "v2":
                fc(f"{prefix}.stage{k}.s2.cat", 2 * w, w)
            else:
                for key in VARIANT_MAPS[config.variant]:
                    fc(f"{prefix}.stage{k}.s2.{key}", w, w)
                fc(f"{prefix}.stage{k}.s2.out", w, w)
            for r in range(config.resblocks_per_stage):
                fc(f"{prefix}.stage{k}.mlp{r}.fc1", w, w)
                fc(f"{prefix}.stage{k}.mlp{r}.fc2", w, w)

    if config.variant == "v1":
        conv("uni.lift", 3, config.pan_channels + config.bands, S)
        fusion_stages("uni")
        sampling("uni")
    else:
        conv("spa.lift", 3, config.pan_channels, S)
        for k in range(1, N_STAGES):
            w = S * STAGE_SCALE[k - 1]
            for r in range(config.resblocks_per_stage):
                conv(f"spa.stage{k}.res{r}.conv1", 3, w, w)
                conv(f"spa.stage{k}.res{r}.conv2", 3, w, w)
        sampling("spa")
        conv("spe.lift", 3, config.bands, S)
        fusion_stages("spe")
        sampling("spe")
    conv("head", 3, S, config.bands)
    return specs


def param_count(config: ModelConfig) -> int:
    """Exact number of scalar parameters (weights plus biases)."""
    return sum(math.prod(shape) + _bias_len(name, shape)
               for name, shape, _ in parameter_shapes(config))


def init_params(config: ModelConfig):
    """Seeded fan-in uniform weights, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases.

    This is Kaiming-uniform with negative slope sqrt(5).  Larger gains make
    the multiplicative S2Block compound its growth across the five stages.
    """
    rng = np.random.default_rng(config.seed)
    dtype = config.dtype
    params = {}
    for name, shape, fan_in in parameter_shapes(config):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        if name == "head" and config.zero_head:
            w = np.zeros(shape)
        params[f"{name}.w"] = T.Tensor(w.astype(dtype), requires_grad=True)
        params[f"{name}.b"] = T.Tensor(np.zeros(_bias_len(name, shape), dtype=dtype), requires_grad=True)
    return params


def _bias_len(name, shape):
    if name.endswith(".dw"):
        return shape[2] * shape[3]
    return shape[-1]


def count_tensors(params) -> int:
    return sum(p.size for p in params.values())


# -- building blocks ---------------------------------------------------------


def _wb(params, name):
    return params[f"{name}.w"], params[f"{name}.b"]


def resblock_forward(x, params, name, slope=0.2):
    """x + conv3x3(lrelu(conv3x3(x)))."""
    h = T.conv2d(x, *_wb(params, f"{name}.conv1"))
    h = T.conv2d(T.lrelu(h, slope), *_wb(params, f"{name}.conv2"))
    return T.add(x, h)


def mlp_forward(x, params, name, slope=0.2):
    """x + FC2(lrelu(FC1(x))) at every spatial position."""
    h = T.fully_connected(x, *_wb(params, f"{name}.fc1"))
    h = T.fully_connected(T.lrelu(h, slope), *_wb(params, f"{name}.fc2"))
    return T.add(x, h)


def encode_step(x, params, name):
    """Halve H and W with a 2x2 stride-2 conv, then double the width depthwise."""
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"encode_step needs even extents, got {x.shape[1]}x{x.shape[2]}")
    h = T.conv2d(x, *_wb(params, f"{name}.conv"), stride=2)
    return T.conv2d(h, *_wb(params, f"{name}.dw"), mode="depthwise")


def decode_step(x, params, name):
    """Double H and W and halve the width with a 2x2 stride-2 transposed conv."""
    return T.conv2d(x, *_wb(params, name), mode="transposed", stride=2)


def _s2_params(params, prefix, variant):
    keys = ("cat",) if variant == "v2" else VARIANT_MAPS[variant] + ("out",)
    return {k: _wb(params, f"{prefix}.s2.{k}") for k in keys}


# -- forward -----------------------------------------------------------------


def spatial_branch(a, params, config):
    """Spatial feature for each of the five stages."""
    slope, reps = config.lrelu_slope, config.resblocks_per_stage

    def stage(x, k):
        for r in range(reps):
            x = resblock_forward(x, params, f"spa.stage{k}.res{r}", slope)
        return x

    s1 = stage(T.conv2d(a, *_wb(params, "spa.lift")), 1)
    s2 = stage(encode_step(s1, params, "spa.down1"), 2)
    s3 = stage(encode_step(s2, params, "spa.down2"), 3)
    s4 = stage(T.add(decode_step(s3, params, "spa.up1"), s2), 4)
    s5 = T.add(decode_step(s4, params, "spa.up2"), s1)
    return [s1, s2, s3, s4, s5]


def fusion_branch(f, guides, params, config, prefix="spe"):
    """The spectral U-Net; ``guides[k]`` is the spatial feature for stage k+1.

    ``guides`` of ``None`` makes every S2Block fuse the branch feature with
    itself (single-branch ablation).
    """
    slope, reps = config.lrelu_slope, config.resblocks_per_stage

    def stage(x, k):
        g = x if guides is None else guides[k - 1]
        x = s2block_forward(g, x, _s2_params(params, f"{prefix}.stage{k}", config.variant),
                            config.head_width, config.variant)
        for r in range(reps):
            x = mlp_forward(x, params, f"{prefix}.stage{k}.mlp{r}", slope)
        return x

    t1 = stage(f, 1)
    t2 = stage(encode_step(t1, params, f"{prefix}.down1"), 2)
    t3 = stage(encode_step(t2, params, f"{prefix}.down2"), 3)
    t4 = stage(T.add(decode_step(t3, params, f"{prefix}.up1"), t2), 4)
    return stage(T.add(decode_step(t4, params, f"{prefix}.up2"), t1), 5)


def check_inputs(A, B, config):
    if A.ndim != 4 or B.ndim != 4:
        raise ShapeError(f"expected batched NHWC inputs, got A {A.shape} and B {B.shape}")
    n, H, W, c = A.shape
    if H % RATIO or W % RATIO:
        raise ConfigError(f"A extents {H}x{W} must be divisible by {RATIO}")
    if c != config.pan_channels:
        raise DimensionError(f"A has {c} channels, model expects {config.pan_channels}")
    if B.shape[0] != n:
        raise ShapeError(f"A holds {n} samples but B holds {B.shape[0]}")
    if B.shape[1:3] != (H // RATIO, W // RATIO):
        raise ShapeError(f"B is {B.shape[1]}x{B.shape[2]} but A is {H}x{W}; B must be "
                         f"{H // RATIO}x{W // RATIO} at ratio {RATIO}")
    if B.shape[3] != config.bands:
        raise DimensionError(f"B has {B.shape[3]} bands, model expects {config.bands}")


def u2net_forward(A, B, params, config: ModelConfig, BU=None):
    """Fuse batched A (N,H,W,c) and B (N,H/4,W/4,C) into O (N,H,W,C).

    ``BU`` may carry a precomputed B^U to skip the bicubic upsampling.
    """
    A = np.asarray(A.data if isinstance(A, T.Tensor) else A)
    B = np.asarray(B.data if isinstance(B, T.Tensor) else B)
    if A.ndim == 3:
        A, B = A[None], B[None]
        BU = None if BU is None else np.asarray(BU)[None]
    check_inputs(A, B, config)
    dtype = config.dtype
    if BU is None:
        BU = upsample_array(B.astype(np.float64))
    a = T.Tensor(A.astype(dtype, copy=False))
    bu = T.Tensor(np.asarray(BU).astype(dtype, copy=False))

    if config.variant == "v1":
        f = T.conv2d(T.concat([a, bu], axis=-1), *_wb(params, "uni.lift"))
        f = fusion_branch(f, None, params, config, prefix="uni")
    else:
        guides = spatial_branch(a, params, config)
        f = T.conv2d(bu, *_wb(params, "spe.lift"))
        f = fusion_branch(f, guides, params, config)
    return T.add(T.conv2d(f, *_wb(params, "head")), bu)


def zero_head(params):
    """Zero the reconstruction head in place so that O == B^U."""
    for key in ("head.w", "head.b"):
        params[key].data[...] = 0
