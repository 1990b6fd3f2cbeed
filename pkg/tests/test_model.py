import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from moegrpo.errors import ConfigError, CorruptionError, ShapeError, VersionError
from moegrpo.model import MoeModel, MoeModelConfig, init, load, param_shapes, save

from conftest import TINY, model_gradient_errors


@pytest.fixture
def tiny():
    return MoeModel(MoeModelConfig(seed=3, **TINY))


def test_init_is_deterministic():
    a, b = init(MoeModelConfig(seed=5)), init(MoeModelConfig(seed=5))
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_init_rules():
    m = init(MoeModelConfig(seed=1))
    assert np.all(m.params["expert0.ln1.gain"].data == 1.0)
    assert np.all(m.params["head.b"].data == 0.0)
    assert np.all(m.params["embed.shift"].data == 0.0)
    w = m.params["expert0.ff.w1"].data
    assert np.abs(w).max() <= np.sqrt(6 / (32 + 64))


def test_indivisible_heads_rejected():
    with pytest.raises(ConfigError):
        MoeModelConfig(d_model=32, n_heads=5)
    with pytest.raises(ConfigError):
        MoeModelConfig(n_experts=0)
    with pytest.raises(ConfigError):
        MoeModelConfig(n_classes=3)


def test_parameter_count_depends_only_on_config():
    cfg = MoeModelConfig(**TINY)
    n = sum(int(np.prod(s)) for s in param_shapes(cfg).values())
    assert MoeModel(MoeModelConfig(seed=0, **TINY)).n_parameters() == n
    assert MoeModel(MoeModelConfig(seed=9, **TINY)).n_parameters() == n


def test_single_expert_gate_is_one(rng):
    m = MoeModel(MoeModelConfig(n_experts=1, seed=2, **{k: v for k, v in TINY.items() if k != "n_experts"}))
    _, gates = m.forward(rng.normal(size=(7, 6)), return_gates=True)
    assert np.all(gates.data == 1.0)


def test_single_expert_gating_matches_no_gating(rng):
    kw = {k: v for k, v in TINY.items() if k != "n_experts"}
    gated = MoeModel(MoeModelConfig(n_experts=1, use_gating=True, seed=4, **kw))
    plain = MoeModel(MoeModelConfig(n_experts=1, use_gating=False, seed=4, **kw),
                     {k: v for k, v in gated.snapshot().items() if not k.startswith("gate.")})
    X = rng.normal(size=(9, 6))
    np.testing.assert_array_equal(gated.forward(X).data, plain.forward(X).data)


def test_batch_rows_are_independent(tiny, rng):
    x = rng.normal(size=(1, 6))
    out = tiny.forward(np.vstack([x, x])).data
    assert out[0].tobytes() == out[1].tobytes()
    single = tiny.forward(x).data
    np.testing.assert_allclose(out[0], single[0], rtol=0, atol=1e-14)


def test_no_gating_uses_uniform_weights(rng):
    m = MoeModel(MoeModelConfig(use_gating=False, seed=1, **TINY))
    _, gates = m.forward(rng.normal(size=(3, 6)), return_gates=True)
    assert np.all(gates.data == 0.5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-6, 6)))
def test_gates_on_simplex(X):
    m = MoeModel(MoeModelConfig(seed=0, n_experts=3, d_model=8, n_heads=2, ff_dim=8))
    _, gates = m.forward(X, return_gates=True)
    assert np.all(gates.data >= 0)
    np.testing.assert_allclose(gates.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_forward_deterministic(tiny, rng):
    X = rng.normal(size=(6, 6))
    assert tiny.forward(X).data.tobytes() == tiny.forward(X).data.tobytes()


def test_wrong_feature_count(tiny):
    with pytest.raises(ShapeError):
        tiny.forward(np.zeros((2, 5)))


def test_predict_proba_properties(tiny, rng):
    X = rng.normal(size=(20, 6))
    p = tiny.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(np.argmax(p, axis=1), np.argmax(tiny.forward(X).data, axis=1))


def test_zero_head_gives_uniform_probabilities(tiny, rng):
    tiny.params["head.w"].data[...] = 0.0
    tiny.params["head.b"].data[...] = 0.0
    np.testing.assert_array_equal(tiny.predict_proba(rng.normal(size=(4, 6))), 0.5)


def test_expert_permutation_symmetry(rng):
    cfg = MoeModelConfig(seed=6, n_experts=3, d_model=8, n_heads=2, ff_dim=8)
    m = MoeModel(cfg)
    perm = [2, 0, 1]
    state = m.snapshot()
    permuted = dict(state)
    for new, old in enumerate(perm):
        for k, v in state.items():
            if k.startswith(f"expert{old}."):
                permuted[f"expert{new}." + k.split(".", 1)[1]] = v
    permuted["gate.w"] = state["gate.w"][:, perm]
    permuted["gate.b"] = state["gate.b"][perm]
    X = rng.normal(size=(5, 6))
    np.testing.assert_allclose(MoeModel(cfg, permuted).forward(X).data, m.forward(X).data,
                               rtol=0, atol=1e-13)


def test_gradients_match_finite_differences(tiny, rng):
    errors = model_gradient_errors(tiny, rng.normal(size=(4, 6)), np.array([0, 1, 1, 0]))
    assert max(errors.values()) < 1e-4, errors


# -- checkpoints -------------------------------------------------------------


def test_save_load_roundtrip(tiny, tmp_path, rng):
    save(tiny, tmp_path / "ck", metadata={"note": "x"})
    back = load(tmp_path / "ck")
    assert back.cfg == tiny.cfg
    for k in tiny.params:
        assert back.params[k].data.tobytes() == tiny.params[k].data.tobytes()
    X = rng.normal(size=(5, 6))
    assert back.forward(X).data.tobytes() == tiny.forward(X).data.tobytes()
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    assert [e["name"] for e in manifest["params"]] == list(tiny.params)
    assert manifest["metadata"] == {"note": "x"}


def test_truncated_weights(tiny, tmp_path):
    save(tiny, tmp_path)
    blob = (tmp_path / "weights.bin").read_bytes()
    (tmp_path / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(CorruptionError):
        load(tmp_path)


def test_flipped_byte_fails_checksum(tiny, tmp_path):
    save(tiny, tmp_path)
    blob = bytearray((tmp_path / "weights.bin").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(CorruptionError):
        load(tmp_path)


def test_manifest_expert_count_mismatch(tiny, tmp_path):
    save(tiny, tmp_path)
    path = tmp_path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["config"]["n_experts"] = 3
    path.write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError):
        load(tmp_path)


def test_unknown_version(tiny, tmp_path):
    save(tiny, tmp_path)
    path = tmp_path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["format_version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(VersionError):
        load(tmp_path)
