"""Mixture-of-experts transformer classifier for tabular voice features.

Each scalar feature becomes one token (learned per-feature scale, shift and
position vector). Every expert is a single pre-norm encoder layer followed by
mean pooling over tokens. A softmax gate computed from the mean embedded token
mixes the expert outputs densely, and a linear head produces two logits.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, CorruptionError, ShapeError, VersionError

FORMAT_VERSION = 1
LN_EPS = 1e-5


@dataclass
class MoeModelConfig:
    n_features: int = 6
    d_model: int = 32
    n_experts: int = 4
    n_heads: int = 4
    ff_dim: int = 64
    n_classes: int = 2
    use_gating: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_features < 1 or self.d_model < 1 or self.ff_dim < 1:
            raise ConfigError("n_features, d_model and ff_dim must be positive")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if self.n_classes != 2:
            raise ConfigError(f"only binary classification is supported, got n_classes={self.n_classes}")


def param_shapes(cfg: MoeModelConfig) -> Dict[str, tuple]:
    """Ordered parameter names and shapes; also the on-disk order."""
    d, f = cfg.d_model, cfg.ff_dim
    shapes = {
        "embed.scale": (cfg.n_features, d),
        "embed.shift": (cfg.n_features, d),
        "embed.pos": (cfg.n_features, d),
    }
    for e in range(cfg.n_experts):
        p = f"expert{e}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ff.w1": (d, f), p + "ff.b1": (f,),
            p + "ff.w2": (f, d), p + "ff.b2": (d,),
        })
    if cfg.use_gating:
        shapes["gate.w"] = (d, cfg.n_experts)
        shapes["gate.b"] = (cfg.n_experts,)
    shapes["head.w"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def _init_value(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[1]
    if leaf == "gain":
        return np.ones(shape)
    if leaf in ("bias", "shift") or leaf.startswith("b"):
        return np.zeros(shape)
    # scale/pos rows are independent 1 -> d maps
    fan_in, fan_out = (1, shape[1]) if leaf in ("scale", "pos") else shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class MoeModel:
    def __init__(self, cfg: MoeModelConfig, params: Optional[Dict[str, np.ndarray]] = None):
        self.cfg = cfg
        shapes = param_shapes(cfg)
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = {n: _init_value(n, s, rng) for n, s in shapes.items()}
        self.params: Dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    # -- parameter helpers --------------------------------------------------

    def n_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        for k, v in state.items():
            self.params[k].data[...] = v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "MoeModel":
        return MoeModel(self.cfg, self.snapshot())

    # -- forward ------------------------------------------------------------

    def forward(self, X, params=None, return_gates: bool = False):
        """Logits ``[batch, 2]`` for standardized features ``X[batch, n_features]``.

        ``params`` overrides the live parameters (arrays are treated as constants,
        which is how the frozen snapshot policy is evaluated).
        """
        cfg = self.cfg
        if params is None:
            P = self.params
        else:
            P = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        X = ad.as_tensor(X)
        if X.ndim != 2 or X.shape[1] != cfg.n_features or X.shape[0] < 1:
            raise ShapeError(f"expected input [batch>=1, {cfg.n_features}], got {X.shape}")
        n = X.shape[0]

        tok = ad.feature_embed(X, P["embed.scale"])
        tok = ad.add_bias(ad.add_bias(tok, P["embed.shift"]), P["embed.pos"])

        outs = [self._expert(tok, P, f"expert{e}.") for e in range(cfg.n_experts)]
        stacked = ad.stack(outs, axis=1)  # [n, E, d]

        if cfg.use_gating:
            gate_in = ad.mean(tok, axis=1)
            gates = ad.softmax(ad.add_bias(gate_in @ P["gate.w"], P["gate.b"]), axis=-1)
        else:
            gates = Tensor(np.full((n, cfg.n_experts), 1.0 / cfg.n_experts))
        fused = ad.reshape(ad.reshape(gates, (n, 1, cfg.n_experts)) @ stacked, (n, cfg.d_model))
        logits = ad.add_bias(fused @ P["head.w"], P["head.b"])
        if return_gates:
            return logits, gates
        return logits

    __call__ = forward

    def _expert(self, tok: Tensor, P, prefix: str) -> Tensor:
        cfg = self.cfg
        n, t, d = tok.shape
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

        def heads(z):
            return ad.swapaxes(ad.reshape(z, (n, t, h, dh)), 1, 2)  # [n, h, t, dh]

        x = ad.layer_norm(tok, P[prefix + "ln1.gain"], P[prefix + "ln1.bias"], LN_EPS)
        q = heads(x @ P[prefix + "attn.wq"])
        k = heads(x @ P[prefix + "attn.wk"])
        v = heads(x @ P[prefix + "attn.wv"])
        scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        ctx = ad.softmax(scores, axis=-1) @ v
        ctx = ad.reshape(ad.swapaxes(ctx, 1, 2), (n, t, d))
        res = tok + ctx @ P[prefix + "attn.wo"]

        x = ad.layer_norm(res, P[prefix + "ln2.gain"], P[prefix + "ln2.bias"], LN_EPS)
        ff = ad.relu(ad.add_bias(x @ P[prefix + "ff.w1"], P[prefix + "ff.b1"]))
        res = res + ad.add_bias(ff @ P[prefix + "ff.w2"], P[prefix + "ff.b2"])
        return ad.mean(res, axis=1)

    def predict_proba(self, X, params=None) -> np.ndarray:
        return ad.softmax(self.forward(X, params=params), axis=-1).data

    def predict(self, X) -> np.ndarray:
        # np.argmax picks the first maximum, so exact ties resolve to class 0
        return np.argmax(self.forward(X).data, axis=1)


def init(cfg: MoeModelConfig) -> MoeModel:
    return MoeModel(cfg)


# -- checkpoints -------------------------------------------------------------


def save(model: MoeModel, directory, metadata: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.cfg),
        "params": entries,
        "total_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "metadata": metadata or {},
    }
    (directory / "weights.bin").write_bytes(payload)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint format_version {version!r}")
    return manifest


def load(directory) -> MoeModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    payload = (directory / "weights.bin").read_bytes()
    if len(payload) != manifest["total_bytes"]:
        raise CorruptionError(
            f"weights.bin holds {len(payload)} bytes, manifest expects {manifest['total_bytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CorruptionError("weights.bin checksum mismatch")
    try:
        cfg = MoeModelConfig(**manifest["config"])
    except (TypeError, ConfigError) as exc:
        raise CorruptionError(f"manifest config invalid: {exc}") from None

    expected = param_shapes(cfg)
    listed = {e["name"]: e for e in manifest["params"]}
    if list(listed) != list(expected):
        raise CorruptionError("manifest parameter list does not match its config")
    params, offset = {}, 0
    for name, shape in expected.items():
        entry = listed[name]
        nbytes = 8 * int(np.prod(shape))
        if tuple(entry["shape"]) != shape or entry["nbytes"] != nbytes or entry["offset"] != offset:
            raise CorruptionError(f"{name}: manifest entry inconsistent with config shape {shape}")
        params[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise CorruptionError(f"config accounts for {offset} bytes, weights.bin holds {len(payload)}")
    return MoeModel(cfg, params)
