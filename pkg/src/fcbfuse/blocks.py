"""Reusable network blocks: residual block, PVTv2-style encoder parts, LE and SFA.

Every block comes as a pair: ``init_<block>(builder, ...)`` declares the
parameters and ``<block>(x, params, ...)`` evaluates it against a
:class:`~fcbfuse.params.ParamScope`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from . import functional as F
from .params import ParamBuilder, ParamScope
from .tensor import ShapeError, Tensor, concat

PLD_WIDTH = 64


def gn_groups(channels: int, max_groups: int = 32) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    raise ValueError(f"invalid channel count {channels}")


# --------------------------------------------------------------------------
# residual block


def init_residual_block(b: ParamBuilder, cin: int, cout: int) -> None:
    b.norm("gn1", cin)
    # conv1 feeds a group norm, which would cancel a bias
    b.conv("conv1", cout, cin, 3, bias=False)
    b.norm("gn2", cout)
    b.conv("conv2", cout, cout, 3)
    if cin != cout:
        b.conv("skip", cout, cin, 1)


def residual_block(x: Tensor, p: ParamScope, groups: int | None = None) -> Tensor:
    """Pre-activation residual block: (GN, SiLU, 3x3 conv) twice plus a skip path.

    The skip is the identity when channel counts match, otherwise a 1x1 conv.
    ``groups`` overrides the per-norm group rule of :func:`gn_groups`.
    """
    cin = x.shape[1]
    w1 = p["conv1.weight"]
    cout = w1.shape[0]
    if w1.shape[1] != cin:
        raise ShapeError(f"residual block {p.prefix!r} expects {w1.shape[1]} channels, got {cin}")
    g1 = gn_groups(cin) if groups is None else groups
    g2 = gn_groups(cout) if groups is None else groups
    for c, g in ((cin, g1), (cout, g2)):
        if c % g:
            raise ShapeError(f"group count {g} does not divide {c} channels")
    has_skip = "skip.weight" in p
    if has_skip == (cin == cout):
        raise ShapeError(f"residual block {p.prefix!r}: skip conv must exist iff Cin != Cout")

    h = F.silu(F.group_norm(x, g1, p["gn1.weight"], p["gn1.bias"]))
    h = F.conv2d(h, w1, None, 1, 1)
    h = F.silu(F.group_norm(h, g2, p["gn2.weight"], p["gn2.bias"]))
    h = F.conv2d(h, p["conv2.weight"], p["conv2.bias"], 1, 1)
    skip = F.conv2d(x, p["skip.weight"], p["skip.bias"]) if has_skip else x
    return h + skip


# --------------------------------------------------------------------------
# transformer encoder parts


@dataclass(frozen=True)
class AttentionConfig:
    """Spatial-reduction attention settings.

    ``sr_mode="linear"`` pools keys/values to ``pool_size`` squared tokens;
    ``"conv"`` reduces with a strided ``sr_ratio`` convolution instead.
    """

    heads: int
    pool_size: int = 7
    sr_mode: str = "linear"
    sr_ratio: int = 1

    def __post_init__(self):
        if self.heads < 1 or self.pool_size < 1 or self.sr_ratio < 1:
            raise ValueError(f"invalid attention config {self}")
        if self.sr_mode not in ("linear", "conv"):
            raise ValueError(f"unknown sr_mode {self.sr_mode!r}")


def init_patch_embed(b: ParamBuilder, cin: int, dim: int, k: int) -> None:
    b.conv("proj", dim, cin, k)
    b.norm("norm", dim)


def overlap_patch_embed(x: Tensor, p: ParamScope, k: int, stride: int) -> tuple[Tensor, int, int]:
    """Strided conv with overlapping windows, flattened to layer-normed tokens."""
    if k <= stride:
        raise ValueError(f"patch size {k} must exceed stride {stride} for overlapping patches")
    y = F.conv2d(x, p["proj.weight"], p["proj.bias"], stride, k // 2)
    n, d, h, w = y.shape
    tokens = y.reshape(n, d, h * w).transpose(0, 2, 1)
    return F.layer_norm(tokens, p["norm.weight"], p["norm.bias"]), h, w


def init_linear_sra(b: ParamBuilder, dim: int, cfg: AttentionConfig) -> None:
    if dim % cfg.heads:
        raise ValueError(f"embed dim {dim} is not divisible by {cfg.heads} heads")
    b.linear("q", dim, dim)
    # softmax is invariant to a key bias
    b.linear("k", dim, dim, bias=False)
    b.linear("v", dim, dim)
    b.linear("proj", dim, dim)
    if cfg.sr_mode == "linear":
        b.conv("sr", dim, dim, 1)
        b.norm("sr_norm", dim)
    elif cfg.sr_ratio > 1:
        b.conv("sr", dim, dim, cfg.sr_ratio)
        b.norm("sr_norm", dim)


def _reduced_tokens(tokens: Tensor, h: int, w: int, cfg: AttentionConfig, p: ParamScope) -> Tensor:
    n, _, d = tokens.shape
    if cfg.sr_mode == "conv" and cfg.sr_ratio == 1:
        return tokens
    grid = tokens.transpose(0, 2, 1).reshape(n, d, h, w)
    if cfg.sr_mode == "linear":
        # a 1x1 conv commutes with average pooling; convolving first keeps
        # duplicated pool cells bitwise identical when the map is upsampled
        grid = F.conv2d(grid, p["sr.weight"], p["sr.bias"])
        grid = F.adaptive_avg_pool2d(grid, cfg.pool_size, cfg.pool_size)
    else:
        grid = F.conv2d(grid, p["sr.weight"], p["sr.bias"], cfg.sr_ratio)
    m = grid.shape[2] * grid.shape[3]
    red = F.layer_norm(grid.reshape(n, d, m).transpose(0, 2, 1), p["sr_norm.weight"], p["sr_norm.bias"])
    return F.silu(red) if cfg.sr_mode == "linear" else red


def linear_sra_attention(tokens: Tensor, h: int, w: int, cfg: AttentionConfig, p: ParamScope,
                         return_weights: bool = False):
    """Multi-head attention with queries from every token and keys/values
    from a spatially reduced copy of the token grid."""
    n, length, d = tokens.shape
    if length != h * w:
        raise ShapeError(f"{length} tokens do not form a {h}x{w} grid")
    heads = cfg.heads
    hd = d // heads
    q = F.linear(tokens, p["q.weight"], p["q.bias"]).reshape(n, length, heads, hd).transpose(0, 2, 1, 3)
    red = _reduced_tokens(tokens, h, w, cfg, p)
    m = red.shape[1]
    k = F.linear(red, p["k.weight"]).reshape(n, m, heads, hd).transpose(0, 2, 3, 1)
    v = F.linear(red, p["v.weight"], p["v.bias"]).reshape(n, m, heads, hd).transpose(0, 2, 1, 3)
    attn = F.softmax_lastdim(F.attention_logits(q, k, 1.0 / math.sqrt(hd)))
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(n, length, d)
    out = F.linear(out, p["proj.weight"], p["proj.bias"])
    return (out, attn) if return_weights else out


def init_mix_ffn(b: ParamBuilder, dim: int, expansion: int) -> None:
    hidden = dim * expansion
    b.linear("fc1", dim, hidden)
    b.conv("dwconv", hidden, hidden, 3, groups=hidden)
    b.linear("fc2", hidden, dim)


def mix_ffn_hidden(tokens: Tensor, h: int, w: int, p: ParamScope) -> Tensor:
    """Activated spatial features of a Mix-FFN, shape (N, hidden, H, W)."""
    n, length, _ = tokens.shape
    if length != h * w:
        raise ShapeError(f"{length} tokens do not form a {h}x{w} grid")
    x = F.linear(tokens, p["fc1.weight"], p["fc1.bias"])
    hidden = x.shape[-1]
    x = x.transpose(0, 2, 1).reshape(n, hidden, h, w)
    # zero padding here is what injects position information
    x = F.conv2d(x, p["dwconv.weight"], p["dwconv.bias"], 1, 1, groups=hidden)
    return F.silu(x)


def mix_ffn(tokens: Tensor, h: int, w: int, p: ParamScope) -> Tensor:
    x = mix_ffn_hidden(tokens, h, w, p)
    n, hidden = x.shape[:2]
    x = x.reshape(n, hidden, h * w).transpose(0, 2, 1)
    return F.linear(x, p["fc2.weight"], p["fc2.bias"])


def init_encoder_block(b: ParamBuilder, dim: int, attn: AttentionConfig, expansion: int) -> None:
    b.norm("norm1", dim)
    init_linear_sra(b.scope("attn"), dim, attn)
    b.norm("norm2", dim)
    init_mix_ffn(b.scope("ffn"), dim, expansion)


def encoder_block(x: Tensor, h: int, w: int, attn: AttentionConfig, p: ParamScope) -> Tensor:
    x = x + linear_sra_attention(F.layer_norm(x, p["norm1.weight"], p["norm1.bias"]), h, w, attn,
                                 p.scope("attn"))
    return x + mix_ffn(F.layer_norm(x, p["norm2.weight"], p["norm2.bias"]), h, w, p.scope("ffn"))


# --------------------------------------------------------------------------
# decoder parts


def init_local_emphasis(b: ParamBuilder, cin: int, width: int = PLD_WIDTH) -> None:
    b.conv("proj", width, cin, 1)
    init_residual_block(b.scope("rb"), width, width)


def local_emphasis(level: Tensor, target_hw: tuple[int, int], p: ParamScope) -> Tensor:
    """1x1 projection to 64 channels, a residual block, then bilinear upsampling."""
    x = F.conv2d(level, p["proj.weight"], p["proj.bias"])
    x = residual_block(x, p.scope("rb"))
    return F.interpolate2d(x, target_hw[0], target_hw[1], "bilinear")


def init_stepwise_aggregate(b: ParamBuilder, width: int = PLD_WIDTH, levels: int = 4) -> None:
    for step in range(levels - 1):
        init_residual_block(b.scope(f"fuse.{step}"), 2 * width, width)


def stepwise_aggregate(les: Sequence[Tensor], p: ParamScope) -> Tensor:
    """Fuse emphasised levels deepest first: f = RB([f, le_i]) for i = 2, 1, 0."""
    shape = les[0].shape
    if any(t.shape != shape for t in les):
        raise ShapeError(f"LE outputs differ in shape: {[t.shape for t in les]}")
    f = les[-1]
    for step, i in enumerate(range(len(les) - 2, -1, -1)):
        f = residual_block(concat([f, les[i]], axis=1), p.scope(f"fuse.{step}"))
    return f


def init_plain_local_emphasis(b: ParamBuilder, cin: int, width: int = PLD_WIDTH) -> None:
    b.conv("proj", width, cin, 1)
    b.conv("fuse", width, width, 3)


def plain_local_emphasis(level: Tensor, target_hw: tuple[int, int], p: ParamScope) -> Tensor:
    """Original single-conv LE used by the SSFormer baseline."""
    x = F.conv2d(level, p["proj.weight"], p["proj.bias"])
    x = F.relu(F.conv2d(x, p["fuse.weight"], p["fuse.bias"], 1, 1))
    return F.interpolate2d(x, target_hw[0], target_hw[1], "bilinear")


def init_plain_stepwise_aggregate(b: ParamBuilder, width: int = PLD_WIDTH, levels: int = 4) -> None:
    for step in range(levels - 1):
        b.conv(f"fuse.{step}", width, 2 * width, 3)


def plain_stepwise_aggregate(les: Sequence[Tensor], p: ParamScope) -> Tensor:
    shape = les[0].shape
    if any(t.shape != shape for t in les):
        raise ShapeError(f"LE outputs differ in shape: {[t.shape for t in les]}")
    f = les[-1]
    for step, i in enumerate(range(len(les) - 2, -1, -1)):
        x = concat([f, les[i]], axis=1)
        f = F.relu(F.conv2d(x, p[f"fuse.{step}.weight"], p[f"fuse.{step}.bias"], 1, 1))
    return f
