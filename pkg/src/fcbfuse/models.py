"""FCBFormer assembly (TB + FCB + PH), the SSFormer-I baseline and ablations.

Parameter names are rooted at ``tb.encoder``, ``tb.pld``, ``fcb``, ``ph`` and
(for SSFormer-I) ``head``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import functional as F
from .blocks import (
    PLD_WIDTH,
    AttentionConfig,
    encoder_block,
    init_encoder_block,
    init_local_emphasis,
    init_patch_embed,
    init_plain_local_emphasis,
    init_plain_stepwise_aggregate,
    init_residual_block,
    init_stepwise_aggregate,
    local_emphasis,
    overlap_patch_embed,
    plain_local_emphasis,
    plain_stepwise_aggregate,
    residual_block,
    stepwise_aggregate,
)
from .params import ParamBuilder, ParamStore, param_count
from .tensor import ShapeError, Tensor, concat

ARCHS = ("fcbformer", "ssformer-i", "ssformer-i+fcb")


@dataclass(frozen=True)
class EncoderConfig:
    stage_dims: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    stage_heads: tuple[int, ...] = (1, 2, 4, 8)
    mlp_expansions: tuple[int, ...] = (4, 4, 4, 4)
    patch_sizes: tuple[int, ...] = (7, 3, 3, 3)
    patch_strides: tuple[int, ...] = (4, 2, 2, 2)
    sr_pool: int = 7
    sr_mode: str = "linear"
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    in_channels: int = 3

    def __post_init__(self):
        fields = (self.stage_dims, self.stage_depths, self.stage_heads, self.mlp_expansions,
                  self.patch_sizes, self.patch_strides, self.sr_ratios)
        if any(len(f) != 4 for f in fields):
            raise ValueError("encoder needs exactly 4 stages")
        for d, h in zip(self.stage_dims, self.stage_heads):
            if d % h:
                raise ValueError(f"stage dim {d} is not divisible by {h} heads")
        if int(np.prod(self.patch_strides)) != 32:
            raise ValueError(f"patch strides {self.patch_strides} must multiply to 32")
        if self.patch_strides[0] != 4:
            raise ValueError("first stage must have stride 4")

    def attention(self, stage: int) -> AttentionConfig:
        return AttentionConfig(self.stage_heads[stage], self.sr_pool, self.sr_mode, self.sr_ratios[stage])


@dataclass(frozen=True)
class FCBConfig:
    base_width: int = 32
    n_down: int = 4
    n_up: int = 4
    rb_per_stage: int = 1
    in_channels: int = 3

    def __post_init__(self):
        if self.n_down != self.n_up:
            raise ValueError("FCB needs as many upsampling as downsampling stages")
        if self.n_down < 1 or self.rb_per_stage < 1:
            raise ValueError(f"invalid FCB config {self}")

    def encoder_widths(self) -> list[int]:
        """Width at full resolution followed by the width after each downsample.

        Width doubles after every second downsampling layer.
        """
        widths = [self.base_width]
        for k in range(1, self.n_down + 1):
            widths.append(widths[-1] * 2 if k % 2 == 0 else widths[-1])
        return widths

    def decoder_widths(self) -> list[int]:
        """Width after each upsample; halves after every second one."""
        w = self.encoder_widths()[-1]
        widths = []
        for k in range(1, self.n_up + 1):
            if k % 2 == 0:
                w //= 2
            widths.append(w)
        return widths


@dataclass(frozen=True)
class ModelConfig:
    input_hw: tuple[int, int] = (64, 64)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fcb: FCBConfig = field(default_factory=FCBConfig)
    pld_width: int = PLD_WIDTH
    ph_width: int = PLD_WIDTH
    arch: str = "fcbformer"

    def __post_init__(self):
        h, w = self.input_hw
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ValueError(f"input size {self.input_hw} must be a positive multiple of 32")
        if self.pld_width != PLD_WIDTH or self.ph_width != PLD_WIDTH:
            raise ValueError("PLD+ and PH width are fixed at 64 channels")
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")

    @property
    def has_fcb(self) -> bool:
        return self.arch != "ssformer-i"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("encoder", {}).items()}
        return cls(
            input_hw=tuple(d.get("input_hw", (64, 64))),
            encoder=EncoderConfig(**enc),
            fcb=FCBConfig(**d.get("fcb", {})),
            pld_width=d.get("pld_width", PLD_WIDTH),
            ph_width=d.get("ph_width", PLD_WIDTH),
            arch=d.get("arch", "fcbformer"),
        )


B3_ENCODER = EncoderConfig(
    stage_dims=(64, 128, 320, 512),
    stage_depths=(3, 4, 18, 3),
    stage_heads=(1, 2, 5, 8),
    mlp_expansions=(8, 8, 4, 4),
)

PRESETS: dict[str, ModelConfig] = {
    "toy-64": ModelConfig(input_hw=(64, 64), encoder=EncoderConfig(), fcb=FCBConfig(rb_per_stage=1)),
    "full-352": ModelConfig(input_hw=(352, 352), encoder=B3_ENCODER, fcb=FCBConfig(rb_per_stage=2)),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# --------------------------------------------------------------------------
# parameters


def _declare(cfg: ModelConfig, b: ParamBuilder) -> None:
    enc = cfg.encoder
    eb = b.scope("tb.encoder")
    cin = enc.in_channels
    for s in range(4):
        sb = eb.scope(f"stage{s}")
        dim = enc.stage_dims[s]
        init_patch_embed(sb.scope("patch"), cin, dim, enc.patch_sizes[s])
        for j in range(enc.stage_depths[s]):
            init_encoder_block(sb.scope(f"block{j}"), dim, enc.attention(s), enc.mlp_expansions[s])
        sb.norm("norm", dim)
        cin = dim

    pb = b.scope("tb.pld")
    improved = cfg.arch == "fcbformer"
    for s in range(4):
        init_le = init_local_emphasis if improved else init_plain_local_emphasis
        init_le(pb.scope(f"le.{s}"), enc.stage_dims[s], cfg.pld_width)
    (init_stepwise_aggregate if improved else init_plain_stepwise_aggregate)(pb.scope("sfa"), cfg.pld_width)

    if not cfg.has_fcb:
        b.conv("head", 1, cfg.pld_width, 1)
        return

    fc = cfg.fcb
    fb = b.scope("fcb")
    widths = fc.encoder_widths()
    fb.conv("stem", widths[0], fc.in_channels, 3)
    prev = widths[0]
    for level, width in enumerate(widths):
        if level > 0:
            fb.conv(f"enc.{level}.down", prev, prev, 3)
        for j in range(fc.rb_per_stage):
            init_residual_block(fb.scope(f"enc.{level}.rb.{j}"), prev, width)
            prev = width
    for step, width in enumerate(fc.decoder_widths()):
        skip = widths[fc.n_down - 1 - step]
        cin = prev + skip
        for j in range(fc.rb_per_stage):
            init_residual_block(fb.scope(f"dec.{step}.rb.{j}"), cin, width)
            cin = width
        prev = width

    hb = b.scope("ph")
    init_residual_block(hb.scope("rb.0"), cfg.pld_width + widths[0], cfg.ph_width)
    init_residual_block(hb.scope("rb.1"), cfg.ph_width, cfg.ph_width)
    hb.conv("out", 1, cfg.ph_width, 1)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Seeded random initialization; identical seeds give identical stores."""
    b = ParamBuilder(np.random.default_rng(seed), dtype)
    _declare(cfg, b)
    return b.build()


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter shapes of ``cfg`` without allocating them."""
    b = ParamBuilder(None)
    _declare(cfg, b)
    return b.shapes()


def subtree_count(params, prefix: str) -> int:
    return param_count({k: v for k, v in params.items() if k == prefix or k.startswith(prefix + ".")})


# --------------------------------------------------------------------------
# forward passes


def _check_input(x: Tensor, multiple: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"expected an N x C x H x W input, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % multiple or w % multiple:
        raise ShapeError(f"input spatial dims {h}x{w} must be multiples of {multiple}")
    return h, w


def encoder_stage(x: Tensor, stage: int, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """One pyramid stage: patch embedding, transformer blocks, norm, back to a grid."""
    enc = cfg.encoder
    sp = params.scope(f"tb.encoder.stage{stage}")
    tokens, h, w = overlap_patch_embed(x, sp.scope("patch"), enc.patch_sizes[stage],
                                       enc.patch_strides[stage])
    attn = enc.attention(stage)
    for j in range(enc.stage_depths[stage]):
        tokens = encoder_block(tokens, h, w, attn, sp.scope(f"block{j}"))
    tokens = F.layer_norm(tokens, sp["norm.weight"], sp["norm.bias"])
    n, _, d = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(n, d, h, w)


def encoder_forward(x: Tensor, cfg: ModelConfig, params: ParamStore) -> list[Tensor]:
    """Four-level feature pyramid at strides 4, 8, 16 and 32."""
    _check_input(x, 32)
    levels = []
    for s in range(4):
        x = encoder_stage(x, s, cfg, params)
        levels.append(x)
    return levels


def tb_forward(x: Tensor, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """Transformer branch: encoder then (improved or plain) PLD, at h/4 x w/4."""
    pyramid = encoder_forward(x, cfg, params)
    target = pyramid[0].shape[2:]
    p = params.scope("tb.pld")
    if cfg.arch == "fcbformer":
        les = [local_emphasis(lvl, target, p.scope(f"le.{i}")) for i, lvl in enumerate(pyramid)]
        return stepwise_aggregate(les, p.scope("sfa"))
    les = [plain_local_emphasis(lvl, target, p.scope(f"le.{i}")) for i, lvl in enumerate(pyramid)]
    return plain_stepwise_aggregate(les, p.scope("sfa"))


def fcb_encoder_level(h: Tensor, level: int, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """Stem (level 0) or strided downsample, then the level's residual blocks."""
    p = params.scope("fcb")
    if level == 0:
        h = F.conv2d(h, p["stem.weight"], p["stem.bias"], 1, 1)
    else:
        h = F.conv2d(h, p[f"enc.{level}.down.weight"], p[f"enc.{level}.down.bias"], 2, 1)
    for j in range(cfg.fcb.rb_per_stage):
        h = residual_block(h, p.scope(f"enc.{level}.rb.{j}"))
    return h


def fcb_decoder_step(h: Tensor, skip: Tensor, step: int, cfg: ModelConfig,
                     params: ParamStore) -> Tensor:
    """Nearest 2x upsample, concat the same-resolution encoder feature, residual blocks."""
    p = params.scope("fcb")
    h = F.interpolate2d(h, skip.shape[2], skip.shape[3], "nearest")
    h = concat([h, skip], axis=1)
    for j in range(cfg.fcb.rb_per_stage):
        h = residual_block(h, p.scope(f"dec.{step}.rb.{j}"))
    return h


def fcb_forward(x: Tensor, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """Fully convolutional branch returning full-resolution features."""
    fc = cfg.fcb
    _check_input(x, 2 ** fc.n_down)
    levels = []
    h = x
    for level in range(fc.n_down + 1):
        h = fcb_encoder_level(h, level, cfg, params)
        levels.append(h)
    for step in range(fc.n_up):
        h = fcb_decoder_step(h, levels[fc.n_down - 1 - step], step, cfg, params)
    return h


def ph_forward(tb_out: Tensor, fcb_out: Tensor, params: ParamStore) -> Tensor:
    """Prediction head: upsample TB output, concat with FCB output, two RBs, 1x1 conv."""
    th, tw = tb_out.shape[2:]
    fh, fw = fcb_out.shape[2:]
    if (fh, fw) != (4 * th, 4 * tw) or tb_out.shape[0] != fcb_out.shape[0]:
        raise ShapeError(f"FCB output {fcb_out.shape} must be 4x the TB output {tb_out.shape}")
    p = params.scope("ph")
    x = concat([F.interpolate2d(tb_out, fh, fw, "bilinear"), fcb_out], axis=1)
    x = residual_block(x, p.scope("rb.0"))
    x = residual_block(x, p.scope("rb.1"))
    return F.conv2d(x, p["out.weight"], p["out.bias"])


def fcbformer_forward(x: Tensor, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """Full-size logits (N, 1, h, w); both branches see the same input."""
    if not cfg.has_fcb:
        raise ValueError(f"architecture {cfg.arch!r} has no FCB/PH")
    return ph_forward(tb_forward(x, cfg, params), fcb_forward(x, cfg, params), params)


def fcbformer_forward_without_fcb(x: Tensor, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """As :func:`fcbformer_forward` with the FCB output replaced by zeros."""
    if not cfg.has_fcb:
        raise ValueError(f"architecture {cfg.arch!r} has no FCB/PH")
    h, w = _check_input(x, 2 ** cfg.fcb.n_down)
    zeros = Tensor(np.zeros((x.shape[0], cfg.fcb.base_width, h, w), dtype=x.dtype))
    return ph_forward(tb_forward(x, cfg, params), zeros, params)


def ssformer_i_forward(x: Tensor, cfg: ModelConfig, params: ParamStore) -> Tensor:
    """Quarter-scale logits (N, 1, h/4, w/4) of the SSFormer-I baseline."""
    if cfg.arch != "ssformer-i":
        raise ValueError(f"architecture {cfg.arch!r} is not ssformer-i")
    return F.conv2d(tb_forward(x, cfg, params), params["head.weight"], params["head.bias"])


class Model:
    """A config bound to its parameters, with train- and eval-time entry points."""

    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "Model":
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def logits(self, x: Tensor, ablate_fcb: bool = False) -> Tensor:
        """Training-scale logits: full size, or h/4 x w/4 for SSFormer-I."""
        if self.cfg.arch == "ssformer-i":
            if ablate_fcb:
                raise ValueError("ssformer-i has no FCB to ablate")
            return ssformer_i_forward(x, self.cfg, self.params)
        if ablate_fcb:
            return fcbformer_forward_without_fcb(x, self.cfg, self.params)
        return fcbformer_forward(x, self.cfg, self.params)

    def train_target(self, masks: np.ndarray) -> np.ndarray:
        """Resample (N, 1, h, w) masks to the logit resolution."""
        if self.cfg.arch != "ssformer-i":
            return masks
        h, w = masks.shape[2:]
        return F.resize_array(masks, h // 4, w // 4, "bilinear", antialias=True)

    def predict_proba(self, images: np.ndarray, ablate_fcb: bool = False,
                      batch_size: int = 8) -> np.ndarray:
        """Full-size foreground probabilities for normalized images (N, 3, h, w).

        SSFormer-I probabilities are bilinearly upsampled from quarter scale.
        """
        out = []
        for i in range(0, len(images), batch_size):
            x = Tensor(np.ascontiguousarray(images[i:i + batch_size], dtype=self.dtype))
            prob = F.sigmoid(self.logits(x, ablate_fcb)).data
            h, w = x.shape[2:]
            if prob.shape[2:] != (h, w):
                prob = F.resize_array(prob, h, w, "bilinear")
            out.append(prob)
        return np.concatenate(out, axis=0)
