"""Synthetic voice-pathology data: generation, threshold labels, CSV I/O, split.

All randomness comes from ``numpy.random.Generator`` seeded with the config seed
(PCG64 bit generator). Output is deterministic for a fixed seed and numpy
version; it is not meant to match any other generator bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

FEATURES = ("pitch_hz", "jitter", "shimmer", "hnr_db", "age_years", "severity")
HEADER = FEATURES + ("label",)

RANGES = {
    "pitch_hz": (60.0, 400.0),
    "jitter": (0.0, 0.15),
    "shimmer": (0.0, 0.2),
    "hnr_db": (5.0, 35.0),
    "age_years": (18.0, 90.0),
    "severity": (0.0, 1.0),
}

JITTER_MAX = 0.05
SHIMMER_MAX = 0.08
HNR_MIN = 15.0
AGE_MAX = 70.0
SEVERITY_MAX = 0.7


@dataclass(frozen=True)
class VoiceSample:
    pitch_hz: float
    jitter: float
    shimmer: float
    hnr_db: float
    age_years: float
    severity: float
    label: int

    def features(self) -> Tuple[float, ...]:
        return astuple(self)[:6]


@dataclass
class GenConfig:
    n_samples: int = 5000
    seed: int = 42
    label_noise: float = 0.02

    def __post_init__(self):
        if not isinstance(self.n_samples, (int, np.integer)) or self.n_samples < 1:
            raise ConfigError(f"n_samples must be a positive integer, got {self.n_samples!r}")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")


@dataclass
class StandardizationParams:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationParams":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Split:
    """A standardized slice of the dataset; ``indices`` point into the source rows."""

    X: np.ndarray
    y: np.ndarray
    indices: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.y)


def threshold_label(
    pitch_hz: float, jitter: float, shimmer: float, hnr_db: float, age_years: float, severity: float
) -> int:
    """1 if any single marker crosses its pathology threshold (strict inequalities)."""
    del pitch_hz  # carries no threshold
    return int(
        jitter > JITTER_MAX
        or shimmer > SHIMMER_MAX
        or hnr_db < HNR_MIN
        or age_years > AGE_MAX
        or severity > SEVERITY_MAX
    )


def _threshold_labels(F: np.ndarray) -> np.ndarray:
    hit = (
        (F[:, 1] > JITTER_MAX)
        | (F[:, 2] > SHIMMER_MAX)
        | (F[:, 3] < HNR_MIN)
        | (F[:, 4] > AGE_MAX)
        | (F[:, 5] > SEVERITY_MAX)
    )
    return hit.astype(np.int64)


def generate(cfg: GenConfig) -> List[VoiceSample]:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples
    cols = [
        np.clip(rng.normal(165.0, 45.0, n), *RANGES["pitch_hz"]),
        np.clip(np.abs(rng.normal(0.02, 0.02, n)), *RANGES["jitter"]),
        np.clip(np.abs(rng.normal(0.035, 0.03, n)), *RANGES["shimmer"]),
        np.clip(rng.normal(20.0, 4.0, n), *RANGES["hnr_db"]),
        rng.uniform(18.0, 90.0, n),
        rng.beta(2.0, 5.0, n),
    ]
    F = np.column_stack(cols)
    labels = _threshold_labels(F)
    flips = rng.random(n) < cfg.label_noise
    labels = np.where(flips, 1 - labels, labels)
    return [VoiceSample(*map(float, row), int(lab)) for row, lab in zip(F, labels)]


def to_arrays(samples: Sequence[VoiceSample]) -> Tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, 6)), np.zeros(0, dtype=np.int64)
    X = np.array([s.features() for s in samples], dtype=np.float64)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def validate(sample: VoiceSample):
    for name in FEATURES:
        lo, hi = RANGES[name]
        v = getattr(sample, name)
        if not (lo <= v <= hi):
            raise ValidationError(f"{name}={v!r} outside [{lo}, {hi}]")
    if sample.label not in (0, 1):
        raise ValidationError(f"label={sample.label!r} not in {{0, 1}}")


# -- CSV ---------------------------------------------------------------------


def write_csv(samples: Sequence[VoiceSample], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for s in samples:
            w.writerow([format(v, ".17g") for v in s.features()] + [str(int(s.label))])


def read_csv(path) -> List[VoiceSample]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: line 1: missing header")
        if tuple(header) != HEADER:
            bad = [h for h in header if h not in HEADER] or list(set(HEADER) - set(header))
            raise ParseError(
                f"{path}: line 1: header mismatch at column(s) {', '.join(map(repr, bad)) or '?'}; "
                f"expected {','.join(HEADER)}"
            )
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(HEADER):
                raise ParseError(f"{path}: line {lineno}: expected {len(HEADER)} fields, got {len(row)}")
            try:
                feats = [float(v) for v in row[:6]]
                label = int(row[6])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError(f"{path}: line {lineno}: non-finite value")
            sample = VoiceSample(*feats, label)
            try:
                validate(sample)
            except ValidationError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from None
            out.append(sample)
    return out


# -- split / standardize -----------------------------------------------------


def split_indices(n: int, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(round(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ConfigError(f"split of {n} samples at {train_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:n_train], perm[n_train:]


def fit_standardization(X: np.ndarray) -> StandardizationParams:
    return StandardizationParams(X.mean(axis=0), np.maximum(X.std(axis=0), 1e-8))


def split_standardize(
    data: Sequence[VoiceSample], train_fraction: float = 0.8, seed: int = 0
) -> Tuple[Split, Split, StandardizationParams]:
    X, y = to_arrays(data)
    tr, te = split_indices(len(y), train_fraction, seed)
    params = fit_standardization(X[tr])
    return (
        Split(params.apply(X[tr]), y[tr], tr),
        Split(params.apply(X[te]), y[te], te),
        params,
    )


def split_hash(train: Split, test: Split) -> str:
    h = hashlib.sha256()
    for part in (train.indices, test.indices):
        h.update(np.asarray(part, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()


def gen_config_dict(cfg: GenConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
