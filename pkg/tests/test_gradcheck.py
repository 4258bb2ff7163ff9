import itertools

import numpy as np
import pytest

from fcbfuse import functional as F
from fcbfuse.checks import BLOCK_SAMPLES, BLOCK_TOL, MODEL_SAMPLES, MODEL_TOL, select, suite
from fcbfuse.cli import main
from fcbfuse.gradcheck import NondeterminismError, Stage, StagedFunction, gradcheck_detailed
from fcbfuse.params import ParamStore


def test_nondeterministic_function_rejected():
    params = ParamStore({"w": np.array([1.0])})
    counter = itertools.count()
    with pytest.raises(NondeterminismError):
        gradcheck_detailed(lambda: params["w"].sum() * float(next(counter) % 2 + 1), params)


def test_float32_parameters_rejected():
    params = ParamStore({"w": np.array([1.0], np.float32)})
    with pytest.raises(TypeError):
        gradcheck_detailed(lambda: params["w"].sum(), params)


def test_wrong_gradient_is_detected(monkeypatch):
    params = ParamStore({"x": np.linspace(-2, 2, 7)})
    f = lambda: F.silu(params["x"]).sum()
    assert gradcheck_detailed(f, params).max_rel_error < 1e-6
    monkeypatch.setattr(F, "_silu_grad", lambda g, x, s: g * s)
    res = gradcheck_detailed(f, params)
    assert res.max_rel_error > 1e-2 and res.worst_param == "x"


def test_staged_probe_matches_direct_evaluation():
    # stages carry a leading batch axis; the scalar head runs per row
    params = ParamStore({"a": np.array([[0.5, -1.0]]), "b": np.array([2.0])})
    a_stage = Stage("a", lambda: params["a"] * params["a"], owns=("a",))
    out = Stage("out", lambda y: (y * params["b"]).sum(), deps=("a",), owns=("b",), per_sample=True)
    probe = StagedFunction([a_stage, out])
    f = lambda: ((params["a"] * params["a"]) * params["b"]).sum()
    assert probe().item() == f().item()
    flat = params["a"].data.reshape(-1)
    values = probe.evaluate_perturbations("a", flat, [(0, 0.75), (1, 3.0)])
    np.testing.assert_array_equal(values.reshape(-1), [(0.75 ** 2 + 1.0) * 2, (0.25 + 9.0) * 2])
    # parameters are restored after probing
    np.testing.assert_array_equal(params["a"].data, [[0.5, -1.0]])
    res = gradcheck_detailed(f, params, probe=probe)
    assert res.max_rel_error < 1e-8 and res.checked == 3


def test_stage_order_validated():
    with pytest.raises(ValueError):
        StagedFunction([Stage("b", lambda y: y, deps=("a",)), Stage("a", lambda: None)])


def test_model_probe_agrees_with_full_reevaluation():
    (spec,) = select(["model:end_to_end"])
    f, params, probe = spec.build(0)
    assert probe().item() == f().item()
    rng = np.random.default_rng(0)
    for name in ("fcb.stem.weight", "tb.encoder.stage2.block0.attn.q.weight", "ph.out.bias"):
        flat = params[name].data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        staged = probe.evaluate_perturbations(name, flat, [(i, orig + 1e-3)]).item()
        flat[i] = orig + 1e-3
        direct = f().item()
        flat[i] = orig
        assert staged == direct, name


def test_suite_coverage_and_tolerances():
    specs = suite()
    names = [s.name for s in specs]
    assert len(specs) >= 10
    for block in ("residual_block", "overlap_patch_embed", "linear_sra_attention", "mix_ffn",
                  "local_emphasis", "stepwise_aggregate", "prediction_head", "model:end_to_end"):
        assert block in names
    assert {s.tolerance for s in specs if s.kind != "model"} == {BLOCK_TOL}
    assert [s.tolerance for s in specs if s.kind == "model"] == [MODEL_TOL]
    assert {s.samples for s in specs if s.kind != "model"} == {BLOCK_SAMPLES}
    assert [s.samples for s in specs if s.kind == "model"] == [MODEL_SAMPLES]


def test_cli_reports_every_selected_row(capsys):
    assert main(["gradcheck", "--only", "op", "residual_block"]) == 0
    out = capsys.readouterr().out
    rows = [line for line in out.splitlines() if line.startswith(("ok", "FAIL"))]
    assert len(rows) >= 10
    assert "checks passed" in out


def test_cli_negative_control_names_op(monkeypatch, capsys):
    monkeypatch.setattr(F, "_silu_grad", lambda g, x, s: g * s)
    assert main(["gradcheck", "--only", "op:silu", "op:relu"]) == 1
    out = capsys.readouterr().out
    assert "FAIL op:silu" in out
    assert "failed: op:silu" in out
    assert "FAIL op:relu" not in out


def test_cli_unknown_check_is_config_error(capsys):
    assert main(["gradcheck", "--only", "no-such-check"]) == 2
    assert main(["gradcheck", "--preset", "full-352"]) == 2
