import math

import numpy as np
import pytest

from moegrpo import autodiff as ad
from moegrpo.autodiff import Tensor
from moegrpo.data import Split
from moegrpo.errors import ConfigError, TrainingError
from moegrpo.model import MoeModel, MoeModelConfig
from moegrpo.trainers import (
    AdamWState,
    GrpoConfig,
    adamw_update,
    batch_advantages,
    ce_step,
    cross_entropy,
    group_advantages,
    grpo_step,
    policy_objective,
    ppo_step,
    sample_actions,
    train,
)

from conftest import TINY, max_rel_error, numerical_grad


def tiny_model(seed=0):
    return MoeModel(MoeModelConfig(seed=seed, **TINY))


def toy_split(n, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 6))
    y = (X[:, 1] + 0.5 * X[:, 3] > 0).astype(np.int64)
    return Split(X, y, np.arange(n))


# -- AdamW -------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_identity():
    theta = {"w": np.array([1.0, -2.0, 3.0])}
    before = theta["w"].copy()
    adamw_update(theta, {"w": np.zeros(3)}, AdamWState(), lr=1e-3, weight_decay=0.0)
    np.testing.assert_array_equal(theta["w"], before)


def test_adamw_decoupled_decay_shrinks_geometrically():
    theta = {"w": np.array([1.0, -2.0])}
    state = AdamWState()
    for _ in range(3):
        adamw_update(theta, {}, state, lr=1e-3, weight_decay=0.01)
    np.testing.assert_allclose(theta["w"], np.array([1.0, -2.0]) * (1 - 1e-5) ** 3, rtol=1e-15)


def test_adamw_first_step_matches_hand_computation():
    # m1 = 0.1, v1 = 0.001; bias-corrected m = 1, v = 1 -> step = lr / (1 + eps)
    theta = {"w": np.array([0.5])}
    adamw_update(theta, {"w": np.array([1.0])}, AdamWState(), lr=1e-3, weight_decay=0.0)
    assert theta["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-16)


def test_adamw_shape_mismatch():
    with pytest.raises(RuntimeError):
        adamw_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamWState(), 1e-3, 0.0)


# -- advantages --------------------------------------------------------------


def test_group_advantages_example():
    adv = group_advantages(np.array([[1.0, 0.0, 1.0, 0.0]]), 1e-8)
    # population std is 0.5, so each entry is +-0.5 / (0.5 + 1e-8)
    np.testing.assert_allclose(adv, [[1, -1, 1, -1]], rtol=0, atol=1e-7)


def test_zero_variance_group_is_exactly_zero():
    adv = group_advantages(np.array([[1.0] * 8, [0.0] * 8]), 1e-8)
    assert np.all(adv == 0.0)


def test_batch_advantages():
    np.testing.assert_allclose(batch_advantages(np.array([[1.0], [0.0], [1.0], [0.0]]), 1e-8).ravel(),
                               [1, -1, 1, -1], atol=1e-7)
    assert np.all(batch_advantages(np.ones((5, 1)), 1e-8) == 0.0)


def test_sample_actions_frequencies():
    probs = np.array([[0.2, 0.8], [0.9, 0.1]])
    a = sample_actions(np.repeat(probs, 5000, axis=0), 4, np.random.default_rng(0))
    assert a.shape == (10000, 4)
    assert abs(a[:5000].mean() - 0.8) < 0.02
    assert abs(a[5000:].mean() - 0.1) < 0.02


# -- objective ---------------------------------------------------------------


def test_policy_objective_grad_matches_finite_differences(rng):
    cfg = GrpoConfig(group_size=6, kl_coeff=0.3)
    old = rng.normal(size=(5, 2))
    cur = old + rng.normal(scale=0.05, size=(5, 2))  # ratios stay well inside the clip range
    y = rng.integers(0, 2, size=5)

    def value(logits):
        loss, _ = policy_objective(logits, old, y, cfg, np.random.default_rng(7), 6)
        return loss

    leaf = Tensor(cur.copy(), requires_grad=True)
    value(leaf).backward()
    num = numerical_grad(lambda: value(Tensor(leaf.data)).item(), leaf.data)
    assert max_rel_error(leaf.grad, num) < 1e-4


def test_objective_at_snapshot(rng):
    cfg = GrpoConfig()
    logits = rng.normal(size=(16, 2))
    loss, d = policy_objective(Tensor(logits), logits, rng.integers(0, 2, 16), cfg, rng, 8)
    assert d["kl"] == 0.0
    assert d["clip_fraction"] == 0.0
    p_old = np.take_along_axis(ad.softmax(Tensor(logits)).data, d["actions"], axis=1)
    np.testing.assert_allclose(d["ratio"], 1.0, rtol=0, atol=np.max(cfg.delta / p_old))
    np.testing.assert_allclose(d["advantages"].mean(axis=1), 0.0, atol=1e-9)


def test_zero_variance_rows_get_zero_gradient():
    cfg = GrpoConfig(group_size=4)
    logits = np.array([[8.0, -8.0], [0.1, -0.1], [-9.0, 9.0]])
    y = np.array([0, 1, 1])
    leaf = Tensor(logits.copy(), requires_grad=True)
    loss, d = policy_objective(leaf, logits, y, cfg, np.random.default_rng(3), 4)
    loss.backward()
    flat = d["rewards"].std(axis=1) == 0
    assert flat.any()
    assert np.all(leaf.grad[flat] == 0.0)


def test_cross_entropy_uniform_is_ln2():
    assert cross_entropy(Tensor(np.zeros((4, 2))), np.array([0, 1, 1, 0])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_confident_is_near_zero():
    assert cross_entropy(Tensor([[50.0, -50.0], [-50.0, 50.0]]), np.array([0, 1])).item() < 1e-40


def test_cross_entropy_grad(rng):
    y = rng.integers(0, 2, 6)
    leaf = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
    cross_entropy(leaf, y).backward()
    num = numerical_grad(lambda: cross_entropy(Tensor(leaf.data), y).item(), leaf.data)
    assert max_rel_error(leaf.grad, num) < 1e-4


# -- steps -------------------------------------------------------------------


def test_grpo_step_trace_at_snapshot(rng):
    m = tiny_model()
    cfg = GrpoConfig(group_size=4)
    trace = grpo_step(m, rng.normal(size=(8, 6)), rng.integers(0, 2, 8), cfg)
    assert trace.kl_value == 0.0
    assert trace.clip_fraction == 0.0
    assert abs(trace.mean_ratio - 1.0) < 1e-6
    assert trace.total_loss == trace.policy_loss + cfg.kl_coeff * trace.kl_value


def test_grpo_requires_group_of_two(rng):
    with pytest.raises(ConfigError):
        grpo_step(tiny_model(), rng.normal(size=(4, 6)), np.zeros(4, int), GrpoConfig(group_size=1))


def test_ppo_step_uses_one_action(rng):
    m = tiny_model()
    trace = ppo_step(m, rng.normal(size=(10, 6)), rng.integers(0, 2, 10), GrpoConfig(group_size=1))
    assert trace.kl_value == 0.0 and trace.clip_fraction == 0.0


def test_ppo_all_equal_rewards_leave_policy_term_flat(rng):
    m = tiny_model()
    m.params["head.b"].data[...] = [40.0, -40.0]  # always samples class 0
    before = m.snapshot()
    cfg = GrpoConfig(weight_decay=0.0)
    ppo_step(m, rng.normal(size=(6, 6)), np.zeros(6, int), cfg)
    # zero advantage and zero KL gradient: Adam sees g = 0 everywhere
    for k, v in before.items():
        np.testing.assert_array_equal(m.params[k].data, v)


def test_ce_step_uniform_loss(rng):
    m = tiny_model()
    m.params["head.w"].data[...] = 0.0
    trace = ce_step(m, rng.normal(size=(6, 6)), rng.integers(0, 2, 6), GrpoConfig())
    assert trace.policy_loss == pytest.approx(math.log(2), abs=1e-15)
    assert trace.kl_value == 0.0 and trace.total_loss == trace.policy_loss


def test_non_finite_is_training_error(rng):
    m = tiny_model()
    m.params["head.w"].data[0, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        grpo_step(m, rng.normal(size=(4, 6)), np.zeros(4, int), GrpoConfig(), step=17)
    assert info.value.step == 17


def test_config_validation():
    for bad in (dict(clip_eps=0.0), dict(clip_eps=1.0), dict(kl_coeff=-1), dict(delta=0.0), dict(group_size=0)):
        with pytest.raises(ConfigError):
            GrpoConfig(**bad)


# -- train loop --------------------------------------------------------------


def test_train_zero_epochs_returns_initial_model():
    m = tiny_model()
    before = m.snapshot()
    res = train(m, toy_split(40, 0), toy_split(20, 1), "grpo", GrpoConfig(epochs=0))
    assert res.epochs == [] and res.best_epoch is None
    for k, v in before.items():
        assert m.params[k].data.tobytes() == v.tobytes()


@pytest.mark.parametrize("algo", ["grpo", "ppo", "ce"])
def test_train_is_deterministic(algo):
    cfg = GrpoConfig(epochs=2, batch_size=16, seed=3)
    a = train(tiny_model(1), toy_split(64, 0), toy_split(32, 1), algo, cfg)
    b = train(tiny_model(1), toy_split(64, 0), toy_split(32, 1), algo, cfg)
    assert a.epochs == b.epochs
    assert [e.epoch for e in a.epochs] == [1, 2]
    if algo == "ce":
        assert all(e.kl == 0.0 for e in a.epochs)


def test_best_state_matches_best_epoch():
    cfg = GrpoConfig(epochs=4, batch_size=16, seed=0)
    res = train(tiny_model(2), toy_split(96, 0), toy_split(48, 1), "ce", cfg)
    accs = [e.test_accuracy for e in res.epochs]
    assert res.best_epoch == 1 + accs.index(max(accs))
    best = MoeModel(res.model.cfg, res.best_state)
    split = toy_split(48, 1)
    assert np.mean(best.predict(split.X) == split.y) == res.best.test_accuracy


def test_train_rejects_empty_data():
    empty = Split(np.zeros((0, 6)), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(ConfigError):
        train(tiny_model(), empty, toy_split(5, 0), "ce", GrpoConfig(epochs=1))
