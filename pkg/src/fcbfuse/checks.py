"""The float64 gradient-check suite: primitive ops, every block, whole models."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import functional as F
from .blocks import (
    AttentionConfig,
    encoder_block,
    init_encoder_block,
    init_linear_sra,
    init_local_emphasis,
    init_mix_ffn,
    init_patch_embed,
    init_residual_block,
    init_stepwise_aggregate,
    linear_sra_attention,
    local_emphasis,
    mix_ffn,
    overlap_patch_embed,
    plain_local_emphasis,
    plain_stepwise_aggregate,
    residual_block,
    stepwise_aggregate,
)
from .gradcheck import Stage, StagedFunction, gradcheck_detailed
from .models import (
    ModelConfig,
    encoder_stage,
    fcb_decoder_step,
    fcb_encoder_level,
    fcb_forward,
    fcbformer_forward,
    init_params,
    ph_forward,
    preset,
    ssformer_i_forward,
    tb_forward,
)
from .params import ParamBuilder, ParamStore
from .tensor import Tensor, concat
from .train import bce_dice_loss

BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3
BLOCK_EPS = 1e-6
# the whole-model loss sums many rounded terms; a wider step keeps roundoff
# below truncation error for the small gradients deep in the encoder
MODEL_EPS = 5e-6
# coordinates probed per tensor; every model coordinate re-runs the full-size head,
# so the model check samples fewer per tensor to fit the suite in ten minutes
BLOCK_SAMPLES = 100
MODEL_SAMPLES = 48
MODEL_INPUT_HW = (32, 32)


@dataclass
class CheckRow:
    name: str
    kind: str
    max_rel_error: float
    tolerance: float
    worst_param: str | None
    checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


@dataclass
class CheckSpec:
    name: str
    kind: str  # "op", "block" or "model"
    build: Callable[[int], tuple]  # seed -> (f, params, probe or None)

    @property
    def tolerance(self) -> float:
        return MODEL_TOL if self.kind == "model" else BLOCK_TOL

    @property
    def eps(self) -> float:
        return MODEL_EPS if self.kind == "model" else BLOCK_EPS

    @property
    def samples(self) -> int:
        return MODEL_SAMPLES if self.kind == "model" else BLOCK_SAMPLES


def _projection(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _jitter_affine(params: ParamStore, rng: np.random.Generator, scale: float = 0.1) -> ParamStore:
    """Move biases and norm parameters off their init values so every path is exercised."""
    for name, t in params.items():
        if t.ndim == 1:
            t.data += scale * rng.standard_normal(t.shape)
    return params


def _block_params(init: Callable[[ParamBuilder], None], rng: np.random.Generator) -> ParamStore:
    b = ParamBuilder(rng, np.float64)
    init(b)
    return _jitter_affine(b.build(), rng)


def _scope(params: ParamStore):
    return params.scope("")


# --------------------------------------------------------------------------
# primitive ops: the input itself is the checked parameter


def _op_check(make_inputs: Callable[[np.random.Generator], dict],
              fn: Callable[[ParamStore], Tensor]):
    def build(seed: int):
        rng = np.random.default_rng(seed)
        params = ParamStore(make_inputs(rng))
        out = fn(params)
        proj = _projection(rng, out.shape)
        return (lambda: (fn(params) * proj).sum()), params, None
    return build


def _op_specs() -> list[CheckSpec]:
    n = lambda rng, *s: rng.standard_normal(s)
    specs = [
        ("conv2d", lambda r: {"x": n(r, 2, 3, 6, 5), "w": n(r, 4, 3, 3, 3), "b": n(r, 4)},
         lambda p: F.conv2d(p["x"], p["w"], p["b"], (2, 1), 1)),
        ("conv2d_depthwise", lambda r: {"x": n(r, 2, 4, 5, 5), "w": n(r, 4, 1, 3, 3), "b": n(r, 4)},
         lambda p: F.conv2d(p["x"], p["w"], p["b"], 1, 1, groups=4)),
        ("group_norm", lambda r: {"x": n(r, 2, 4, 3, 3), "g": n(r, 4), "b": n(r, 4)},
         lambda p: F.group_norm(p["x"], 2, p["g"], p["b"])),
        ("layer_norm", lambda r: {"x": n(r, 2, 5, 6), "g": n(r, 6), "b": n(r, 6)},
         lambda p: F.layer_norm(p["x"], p["g"], p["b"])),
        ("silu", lambda r: {"x": 3 * n(r, 2, 3, 4)}, lambda p: F.silu(p["x"])),
        ("relu", lambda r: {"x": n(r, 2, 3, 4)}, lambda p: F.relu(p["x"])),
        ("sigmoid", lambda r: {"x": 3 * n(r, 2, 3, 4)}, lambda p: F.sigmoid(p["x"])),
        ("attention_logits", lambda r: {"q": n(r, 1, 2, 5, 4), "k": n(r, 1, 2, 4, 3)},
         lambda p: F.attention_logits(p["q"], p["k"], 0.5)),
        ("softmax", lambda r: {"x": 2 * n(r, 2, 3, 5)}, lambda p: F.softmax_lastdim(p["x"])),
        ("matmul", lambda r: {"a": n(r, 2, 3, 4), "b": n(r, 4, 5)}, lambda p: p["a"] @ p["b"]),
        ("interpolate_bilinear", lambda r: {"x": n(r, 1, 2, 3, 4)},
         lambda p: F.interpolate2d(p["x"], 7, 5, "bilinear")),
        ("interpolate_nearest", lambda r: {"x": n(r, 1, 2, 3, 4)},
         lambda p: F.interpolate2d(p["x"], 6, 8, "nearest")),
        ("adaptive_avg_pool2d", lambda r: {"x": n(r, 1, 2, 8, 5)},
         lambda p: F.adaptive_avg_pool2d(p["x"], 3, 3)),
        ("concat", lambda r: {"a": n(r, 1, 2, 3), "b": n(r, 1, 4, 3)},
         lambda p: concat([p["a"], p["b"]], axis=1) * concat([p["b"], p["a"]], axis=1)),
        ("elementwise", lambda r: {"a": n(r, 3, 4), "b": np.abs(n(r, 4)) + 0.5},
         lambda p: (p["a"] - p["b"]) * p["a"] / p["b"] + (-p["a"]).mean(axis=0, keepdims=True)),
        ("bce_dice_loss", lambda r: {"z": 2 * n(r, 1, 1, 4, 4)},
         lambda p: bce_dice_loss(p["z"], Tensor(np.linspace(0, 1, 16).reshape(1, 1, 4, 4)))),
    ]
    return [CheckSpec(f"op:{name}", "op", _op_check(mk, fn)) for name, mk, fn in specs]


# --------------------------------------------------------------------------
# blocks


def _block_check(init: Callable[[ParamBuilder], None], make_x: Callable[[np.random.Generator], list],
                 fn: Callable[..., Tensor]):
    def build(seed: int):
        rng = np.random.default_rng(seed)
        params = _block_params(init, rng)
        xs = make_x(rng)
        p = _scope(params)
        out = fn(p, *xs)
        proj = _projection(rng, out.shape)
        return (lambda: (fn(p, *xs) * proj).sum()), params, None
    return build


def _block_specs() -> list[CheckSpec]:
    n = lambda rng, *s: Tensor(rng.standard_normal(s))
    attn = AttentionConfig(heads=2, pool_size=7)
    attn_conv = AttentionConfig(heads=2, sr_mode="conv", sr_ratio=2)
    specs = [
        ("residual_block", lambda b: init_residual_block(b, 8, 16),
         lambda r: [n(r, 2, 8, 5, 5)], lambda p, x: residual_block(x, p)),
        ("residual_block_identity_skip", lambda b: init_residual_block(b, 8, 8),
         lambda r: [n(r, 2, 8, 5, 5)], lambda p, x: residual_block(x, p)),
        ("overlap_patch_embed", lambda b: init_patch_embed(b, 3, 8, 3),
         lambda r: [n(r, 2, 3, 8, 8)], lambda p, x: overlap_patch_embed(x, p, 3, 2)[0]),
        ("linear_sra_attention", lambda b: init_linear_sra(b, 8, attn),
         lambda r: [n(r, 1, 64, 8)], lambda p, t: linear_sra_attention(t, 8, 8, attn, p)),
        ("strided_sra_attention", lambda b: init_linear_sra(b, 8, attn_conv),
         lambda r: [n(r, 1, 16, 8)], lambda p, t: linear_sra_attention(t, 4, 4, attn_conv, p)),
        ("mix_ffn", lambda b: init_mix_ffn(b, 8, 4),
         lambda r: [n(r, 2, 16, 8)], lambda p, t: mix_ffn(t, 4, 4, p)),
        ("encoder_block", lambda b: init_encoder_block(b, 8, attn, 4),
         lambda r: [n(r, 1, 16, 8)], lambda p, t: encoder_block(t, 4, 4, attn, p)),
        ("local_emphasis", lambda b: init_local_emphasis(b, 16),
         lambda r: [n(r, 1, 16, 2, 2)], lambda p, x: local_emphasis(x, (4, 4), p)),
        ("stepwise_aggregate", init_stepwise_aggregate,
         lambda r: [[n(r, 1, 64, 3, 3) for _ in range(4)]], lambda p, les: stepwise_aggregate(les, p)),
        ("prediction_head", lambda b: _init_ph(b, 64 + 8),
         lambda r: [n(r, 1, 64, 2, 2), n(r, 1, 8, 8, 8)],
         lambda p, t, c: ph_forward(t, c, p.store)),
    ]
    return [CheckSpec(name, "block", _block_check(init, mk, fn)) for name, init, mk, fn in specs]


def _init_ph(b: ParamBuilder, cin: int) -> None:
    init_residual_block(b.scope("ph.rb.0"), cin, 64)
    init_residual_block(b.scope("ph.rb.1"), 64, 64)
    b.conv("ph.out", 1, 64, 1)


# --------------------------------------------------------------------------
# whole models, probed stage by stage


def tb_stages(x: Tensor, cfg: ModelConfig, params: ParamStore) -> list[Stage]:
    target = (x.shape[2] // 4, x.shape[3] // 4)
    pld = params.scope("tb.pld")
    stages = []
    for s in range(4):
        stages.append(Stage(f"enc{s}", (lambda s: lambda prev=x: encoder_stage(prev, s, cfg, params))(s),
                            () if s == 0 else (f"enc{s - 1}",), (f"tb.encoder.stage{s}",)))
    le_fn = local_emphasis if cfg.arch == "fcbformer" else plain_local_emphasis
    sfa_fn = stepwise_aggregate if cfg.arch == "fcbformer" else plain_stepwise_aggregate
    for i in range(4):
        stages.append(Stage(f"le{i}", (lambda i: lambda lvl: le_fn(lvl, target, pld.scope(f"le.{i}")))(i),
                            (f"enc{i}",), (f"tb.pld.le.{i}",)))
    stages.append(Stage("tb", lambda *les: sfa_fn(les, pld.scope("sfa")),
                        tuple(f"le{i}" for i in range(4)), ("tb.pld.sfa",)))
    return stages


def fcb_stages(x: Tensor, cfg: ModelConfig, params: ParamStore) -> list[Stage]:
    nd = cfg.fcb.n_down
    stages = [Stage("fcb.enc0", lambda: fcb_encoder_level(x, 0, cfg, params), (),
                    ("fcb.stem", "fcb.enc.0"))]
    for level in range(1, nd + 1):
        stages.append(Stage(f"fcb.enc{level}",
                            (lambda lv: lambda h: fcb_encoder_level(h, lv, cfg, params))(level),
                            (f"fcb.enc{level - 1}",), (f"fcb.enc.{level}",)))
    prev = f"fcb.enc{nd}"
    for step in range(cfg.fcb.n_up):
        stages.append(Stage(f"fcb.dec{step}",
                            (lambda st: lambda h, skip: fcb_decoder_step(h, skip, st, cfg, params))(step),
                            (prev, f"fcb.enc{nd - 1 - step}"), (f"fcb.dec.{step}",)))
        prev = f"fcb.dec{step}"
    stages.append(Stage("fcb", lambda h: h, (prev,)))
    return stages


def _model_check(arch: str, part: str):
    def build(seed: int):
        cfg = preset("toy-64", arch=arch, input_hw=MODEL_INPUT_HW)
        params = _jitter_affine(init_params(cfg, seed, np.float64), np.random.default_rng(seed + 1))
        rng = np.random.default_rng(seed + 2)
        x = Tensor(rng.uniform(-1, 1, (1, 3) + MODEL_INPUT_HW))
        if part == "tb":
            forward, stages = (lambda: tb_forward(x, cfg, params)), tb_stages(x, cfg, params)
            out_stage = "tb"
        elif part == "fcb":
            forward, stages = (lambda: fcb_forward(x, cfg, params)), fcb_stages(x, cfg, params)
            out_stage = "fcb"
        elif part == "ssformer-i":
            forward = lambda: ssformer_i_forward(x, cfg, params)
            stages = tb_stages(x, cfg, params) + [Stage(
                "head", lambda t: F.conv2d(t, params["head.weight"], params["head.bias"]),
                ("tb",), ("head",))]
            out_stage = "head"
        else:
            forward = lambda: fcbformer_forward(x, cfg, params)
            stages = tb_stages(x, cfg, params) + fcb_stages(x, cfg, params) + [Stage(
                "ph", lambda t, c: ph_forward(t, c, params), ("tb", "fcb"), ("ph",))]
            out_stage = "ph"
        probe_out = forward()
        if part == "end_to_end":
            target = Tensor((rng.random(probe_out.shape) < 0.3).astype(np.float64))
            loss = lambda y: bce_dice_loss(y, target)
        else:
            proj = _projection(rng, probe_out.shape) / np.sqrt(probe_out.size)
            loss = lambda y: (y * proj).sum()
        owned = [p for p in params if p.split(".")[0] in _roots(part)]
        sub = ParamStore({k: params[k] for k in owned})
        stages.append(Stage("loss", loss, (out_stage,), per_sample=True))
        return (lambda: loss(forward())), sub, StagedFunction(stages)
    return build


def _roots(part: str) -> tuple[str, ...]:
    return {"tb": ("tb",), "fcb": ("fcb",), "ssformer-i": ("tb", "head"),
            "end_to_end": ("tb", "fcb", "ph")}[part]


def _model_specs() -> list[CheckSpec]:
    return [CheckSpec("model:end_to_end", "model", _model_check("fcbformer", "end_to_end"))]


def _optional_specs() -> list[CheckSpec]:
    """Per-branch and baseline model checks, run only when named with ``only``."""
    return [
        CheckSpec("model:tb", "model", _model_check("fcbformer", "tb")),
        CheckSpec("model:fcb", "model", _model_check("fcbformer", "fcb")),
        CheckSpec("model:ssformer-i", "model", _model_check("ssformer-i", "ssformer-i")),
    ]


def suite() -> list[CheckSpec]:
    """The default suite: every op and block plus the end-to-end toy model loss."""
    return _op_specs() + _block_specs() + _model_specs()


def select(only: Iterable[str] | None) -> list[CheckSpec]:
    specs = suite()
    if not only:
        return specs
    wanted = list(only)
    chosen = [s for s in specs if any(s.name == w or s.name.startswith(w) or s.kind == w
                                      for w in wanted)]
    chosen += [s for s in _optional_specs() if s.name in wanted]
    if not chosen:
        raise KeyError(f"no gradient check matches {wanted}; known: {[s.name for s in specs]}")
    return chosen


def run_check(spec: CheckSpec, seed: int = 0, samples: int | None = None) -> CheckRow:
    """Run one check; ``samples`` overrides the per-kind coordinate count."""
    t0 = time.perf_counter()
    f, params, probe = spec.build(seed)
    n = spec.samples if samples is None else samples
    res = gradcheck_detailed(f, params, eps=spec.eps, samples=n, seed=seed, probe=probe)
    return CheckRow(spec.name, spec.kind, res.max_rel_error, spec.tolerance, res.worst_param,
                    res.checked, time.perf_counter() - t0)


def run_suite(seed: int = 0, only: Iterable[str] | None = None, samples: int | None = None,
              on_row: Callable[[CheckRow], None] | None = None) -> list[CheckRow]:
    rows = []
    for spec in select(only):
        row = run_check(spec, seed, samples)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def format_row(row: CheckRow) -> str:
    status = "ok  " if row.passed else "FAIL"
    worst = f"  worst={row.worst_param}" if not row.passed and row.worst_param else ""
    return (f"{status} {row.name:<32} max_rel_err={row.max_rel_error:.3e} "
            f"tol={row.tolerance:.0e} coords={row.checked:<6d} {row.seconds:7.2f}s{worst}")
