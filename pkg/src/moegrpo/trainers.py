"""GRPO, PPO and cross-entropy training for the MoE classifier.

The policy view of classification: the model's softmax over the two classes is
a policy, an action is a predicted class, and the reward is 1 when the action
matches the label. Each optimizer step freezes a snapshot of the parameters,
samples actions from the snapshot policy, and maximises a clipped ratio
surrogate with a KL(old || new) penalty.

GRPO samples ``group_size`` actions per instance and normalises rewards within
each instance's group. The PPO baseline samples one action per instance and
normalises across the batch instead; nothing else differs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, TrainingError
from .metrics import evaluate
from .model import MoeModel

logger = logging.getLogger(__name__)

ALGOS = ("grpo", "ppo", "ce")


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coeff: float = 0.01
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    delta: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.kl_coeff < 0:
            raise ConfigError(f"kl_coeff must be >= 0, got {self.kl_coeff}")
        if self.delta <= 0:
            raise ConfigError(f"delta must be > 0, got {self.delta}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def check_algo(self, algo: str):
        if algo not in ALGOS:
            raise ConfigError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")
        if algo == "grpo" and self.group_size < 2:
            raise ConfigError("GRPO requires group_size >= 2")


@dataclass
class StepTrace:
    policy_loss: float
    kl_value: float
    total_loss: float
    mean_reward: float
    mean_ratio: float
    clip_fraction: float


@dataclass
class EpochMetrics:
    epoch: int
    train_accuracy: float
    policy_loss: float
    kl: float
    test_accuracy: float
    f1: float
    roc_auc: Optional[float]


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamWState,
                 lr: float, weight_decay: float):
    """In-place AdamW step with decoupled weight decay and bias-corrected moments."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise RuntimeError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            theta -= lr * weight_decay * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, model: MoeModel, lr: float, weight_decay: float):
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def step(self):
        params = {k: p.data for k, p in self.model.params.items()}
        grads = {k: p.grad for k, p in self.model.params.items() if p.grad is not None}
        adamw_update(params, grads, self.state, self.lr, self.weight_decay)


# -- advantages and sampling -------------------------------------------------


def group_advantages(rewards: np.ndarray, delta: float) -> np.ndarray:
    """Normalise each row (one instance's group) by its own mean and population std."""
    mu = rewards.mean(axis=1, keepdims=True)
    sd = rewards.std(axis=1, keepdims=True)
    return (rewards - mu) / (sd + delta)


def batch_advantages(rewards: np.ndarray, delta: float) -> np.ndarray:
    return (rewards - rewards.mean()) / (rewards.std() + delta)


def sample_actions(probs: np.ndarray, group_size: int, rng: np.random.Generator) -> np.ndarray:
    """``group_size`` categorical draws per row, rows consumed in batch order."""
    u = rng.random((probs.shape[0], group_size))
    cdf = np.cumsum(probs, axis=1)
    actions = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    return np.minimum(actions, probs.shape[1] - 1)


# -- objectives --------------------------------------------------------------


def policy_objective(logits: Tensor, old_logits: np.ndarray, y: np.ndarray, cfg: GrpoConfig,
                     rng: np.random.Generator, group_size: int, normalize: str = "group"):
    """Clipped surrogate plus KL penalty. Returns ``(total_loss, details)``.

    ``old_logits`` are plain values; only ``logits`` carries gradient.
    """
    eps, delta = cfg.clip_eps, cfg.delta
    old_logp = ad.log_softmax(old_logits, axis=-1).data
    # same arithmetic as the log-softmax backward, so P == P_old bit-for-bit at the snapshot
    p_old_all = np.exp(old_logp)

    actions = sample_actions(p_old_all, group_size, rng)
    rewards = (actions == np.asarray(y)[:, None]).astype(np.float64)
    if normalize == "group":
        adv = group_advantages(rewards, delta)
    elif normalize == "batch":
        adv = batch_advantages(rewards, delta)
    else:
        raise ValueError(f"unknown advantage normalisation {normalize!r}")

    logp = ad.log_softmax(logits, axis=-1)
    p = ad.exp(ad.gather(logp, actions))
    p_old = np.take_along_axis(p_old_all, actions, axis=1)
    ratio = p / Tensor(p_old + delta)
    adv_t = Tensor(adv)
    surrogate = ad.minimum(ratio * adv_t, ad.clip(ratio, 1.0 - eps, 1.0 + eps) * adv_t)
    policy_loss = -ad.mean(surrogate)

    kl = ad.mean(ad.sum(Tensor(p_old_all) * (Tensor(old_logp) - logp), axis=1))
    total = policy_loss + cfg.kl_coeff * kl

    r = ratio.data
    details = {
        "actions": actions,
        "rewards": rewards,
        "advantages": adv,
        "ratio": r,
        "surrogate": surrogate.data,
        "policy_loss": policy_loss.item(),
        "kl": kl.item(),
        "total": total.item(),
        "clip_fraction": float(np.mean((r < 1.0 - eps) | (r > 1.0 + eps))),
    }
    return total, details


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    return -ad.mean(ad.gather(ad.log_softmax(logits, axis=-1), np.asarray(y)))


# -- steps -------------------------------------------------------------------


def _finish(model: MoeModel, optimizer: AdamW, loss: Tensor, trace: StepTrace, step: Optional[int]):
    if not all(math.isfinite(v) for v in asdict(trace).values()):
        raise TrainingError(f"non-finite loss at step {step}: {trace}", step=step, trace=trace)
    model.zero_grad()
    loss.backward()
    optimizer.step()
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            raise TrainingError(f"non-finite parameter {name} after step {step}", step=step, trace=trace)
    return trace


def _rl_step(model, X, Y, cfg, optimizer, rng, step, group_size, normalize):
    optimizer = optimizer or AdamW(model, cfg.learning_rate, cfg.weight_decay)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    snapshot = model.snapshot()
    try:
        logits = model.forward(X)
        old_logits = model.forward(X, params=snapshot).data
        loss, d = policy_objective(logits, old_logits, Y, cfg, rng, group_size, normalize)
    except NumericError as exc:
        raise TrainingError(f"non-finite values at step {step}: {exc}", step=step) from exc

    bound = (1.0 + cfg.clip_eps) * np.abs(d["advantages"])
    if np.any(d["surrogate"] > bound + 1e-12):
        raise TrainingError(f"surrogate exceeded the trust-region bound at step {step}", step=step)

    trace = StepTrace(
        policy_loss=d["policy_loss"],
        kl_value=d["kl"],
        total_loss=d["total"],
        mean_reward=float(d["rewards"].mean()),
        mean_ratio=float(d["ratio"].mean()),
        clip_fraction=d["clip_fraction"],
    )
    return _finish(model, optimizer, loss, trace, step)


def grpo_step(model: MoeModel, X, Y, cfg: GrpoConfig, optimizer: Optional[AdamW] = None,
              rng: Optional[np.random.Generator] = None, step: Optional[int] = None) -> StepTrace:
    cfg.check_algo("grpo")
    return _rl_step(model, X, Y, cfg, optimizer, rng, step, cfg.group_size, "group")


def ppo_step(model: MoeModel, X, Y, cfg: GrpoConfig, optimizer: Optional[AdamW] = None,
             rng: Optional[np.random.Generator] = None, step: Optional[int] = None) -> StepTrace:
    return _rl_step(model, X, Y, cfg, optimizer, rng, step, 1, "batch")


def ce_step(model: MoeModel, X, Y, cfg: GrpoConfig, optimizer: Optional[AdamW] = None,
            rng: Optional[np.random.Generator] = None, step: Optional[int] = None) -> StepTrace:
    del rng
    optimizer = optimizer or AdamW(model, cfg.learning_rate, cfg.weight_decay)
    try:
        logits = model.forward(X)
        loss = cross_entropy(logits, Y)
    except NumericError as exc:
        raise TrainingError(f"non-finite values at step {step}: {exc}", step=step) from exc
    hits = np.argmax(logits.data, axis=1) == np.asarray(Y)
    value = loss.item()
    trace = StepTrace(value, 0.0, value, float(hits.mean()), 1.0, 0.0)
    return _finish(model, optimizer, loss, trace, step)


STEPS: Dict[str, Callable] = {"grpo": grpo_step, "ppo": ppo_step, "ce": ce_step}


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    model: MoeModel
    epochs: List[EpochMetrics]
    best_epoch: Optional[int]
    best_state: Dict[str, np.ndarray]

    @property
    def best(self) -> Optional[EpochMetrics]:
        if self.best_epoch is None:
            return None
        return self.epochs[self.best_epoch - 1]


def train(model: MoeModel, train_data, test_data, algo: str, cfg: GrpoConfig,
          on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of ``algo`` and keep the best-test-accuracy state.

    ``train_data`` / ``test_data`` are standardized splits with ``X`` and ``y``.
    Shuffling uses ``seed``, action sampling ``seed + 2`` (``seed + 1`` is left
    for model initialisation by the caller).
    """
    cfg.check_algo(algo)
    if len(train_data.y) == 0 or len(test_data.y) == 0:
        raise ConfigError("train and test data must be non-empty")
    step_fn = STEPS[algo]
    optimizer = AdamW(model, cfg.learning_rate, cfg.weight_decay)
    shuffle_rng = np.random.default_rng(cfg.seed)
    sample_rng = np.random.default_rng(cfg.seed + 2)

    X, y = np.asarray(train_data.X), np.asarray(train_data.y)
    history: List[EpochMetrics] = []
    best_epoch, best_acc = None, -1.0
    best_state = model.snapshot()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(y))
        policy_losses, kls = [], []
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            step += 1
            trace = step_fn(model, X[idx], y[idx], cfg, optimizer=optimizer, rng=sample_rng, step=step)
            policy_losses.append(trace.policy_loss)
            kls.append(trace.kl_value)

        train_acc = float(np.mean(model.predict(X) == y))
        res = evaluate(model, test_data.X, test_data.y)
        metrics = EpochMetrics(
            epoch=epoch,
            train_accuracy=train_acc,
            policy_loss=float(np.mean(policy_losses)),
            kl=float(np.mean(kls)),
            test_accuracy=res.accuracy,
            f1=res.f1,
            roc_auc=res.roc_auc,
        )
        history.append(metrics)
        logger.info("%s epoch %d: train_acc=%.4f test_acc=%.4f f1=%.4f auc=%s", algo, epoch,
                    train_acc, res.accuracy, res.f1, res.roc_auc)
        if on_epoch is not None:
            on_epoch(metrics)
        if res.accuracy > best_acc:
            best_acc, best_epoch = res.accuracy, epoch
            best_state = model.snapshot()
    return TrainResult(model, history, best_epoch, best_state)
