"""Synthetic irregular time-series generator.

Each sample starts from three baseline ARMA processes; seven more
variables are deterministic combinations of those bases, with the
combination weights differing between the two classes so that the classes
are separable but correlated.  The dense series are then thinned to an
irregular time grid and cells are masked completely at random with a
per-variable rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .records import LongitudinalRecord

BURN_IN = 200


class LengthMismatch(ValueError):
    pass


class ConfigInvalid(ValueError):
    pass


class FractionSumInvalid(ValueError):
    pass


@dataclass(frozen=True)
class ArmaSpec:
    """ARMA(p, q) coefficients: p autoregressive then q moving-average."""

    ar_order: int
    ma_order: int
    coefficients: tuple
    noise_std: float = 1.0

    def __post_init__(self):
        if len(self.coefficients) != self.ar_order + self.ma_order:
            raise ConfigInvalid("coefficient count must equal p + q")
        if self.ar_order < 0 or self.ma_order < 0 or self.noise_std <= 0:
            raise ConfigInvalid("invalid ARMA specification")

    @property
    def ar(self) -> np.ndarray:
        return np.asarray(self.coefficients[:self.ar_order])

    @property
    def ma(self) -> np.ndarray:
        return np.asarray(self.coefficients[self.ar_order:])

    def is_stationary(self) -> bool:
        """AR polynomial roots strictly outside the unit circle."""
        if self.ar_order == 0:
            return True
        poly = np.concatenate([[1.0], -self.ar])
        roots = np.roots(poly[::-1])
        return bool(np.all(np.abs(roots) > 1.0))


# The three baseline processes the remaining variables are derived from.
BASELINE_SPECS = (
    ArmaSpec(2, 2, (-0.75, 0.25, 0.65, 0.35)),
    ArmaSpec(1, 1, (-0.8, 0.5)),
    ArmaSpec(3, 3, (-0.65, 0.45, -0.2, 0.70, 0.45, 0.25)),
)


def simulate_arma(spec: ArmaSpec, length: int, seed: int) -> np.ndarray:
    """Simulate v_t = sum phi_i v_{t-i} + sum psi_j e_{t-j} + e_t.

    Lags before the start are zero; a burn-in prefix is discarded so the
    returned window is past the initialization transient.
    """
    if length < 1:
        raise ConfigInvalid("length must be >= 1")
    rng = np.random.default_rng(seed)
    total = length + BURN_IN
    noise = rng.normal(0.0, spec.noise_std, total)
    values = np.zeros(total)
    ar, ma = spec.ar, spec.ma
    for t in range(total):
        acc = noise[t]
        for i in range(spec.ar_order):
            if t - 1 - i >= 0:
                acc += ar[i] * values[t - 1 - i]
        for j in range(spec.ma_order):
            if t - 1 - j >= 0:
                acc += ma[j] * noise[t - 1 - j]
        values[t] = acc
    return values[BURN_IN:]


def _negative_formulas() -> list[Callable]:
    return [
        lambda b1, b2, b3: b1,
        lambda b1, b2, b3: b2,
        lambda b1, b2, b3: b3,
        lambda b1, b2, b3: 0.8 * b1,
        lambda b1, b2, b3: b1 + b2,
        lambda b1, b2, b3: b3 + 0.8 * b1,
        lambda b1, b2, b3: b1 + b2 + b3,
        lambda b1, b2, b3: b1 * b2 + b3 * (0.8 * b1),
        lambda b1, b2, b3: b3 + 0.8 * b1 + b1 * b2,
        lambda b1, b2, b3: -(b1 + b2) + (b3 + 0.8 * b1 + b1 * b2),
    ]


def _positive_formulas() -> list[Callable]:
    return [
        lambda b1, b2, b3: b1,
        lambda b1, b2, b3: b2,
        lambda b1, b2, b3: b3,
        lambda b1, b2, b3: 1.1 * b1,
        lambda b1, b2, b3: b1 + b2,
        lambda b1, b2, b3: b3 + 1.1 * b1,
        lambda b1, b2, b3: b1 + b2 + b3,
        lambda b1, b2, b3: b1 * b2 + b3 * (1.1 * b1),
        lambda b1, b2, b3: 1.1 * b3 + 1.1 * (1.1 * b1) + b1 * b2,
        lambda b1, b2, b3: -(b1 + b2) + (1.1 * b3 + 1.1 * (1.1 * b1) + b1 * b2),
    ]


def engineer_features(base1, base2, base3, positive_class: bool) -> list[np.ndarray]:
    """Derive the ten per-variable series from the three baselines.

    Variables 1-3 are the baselines themselves; 4-10 are fixed linear and
    product combinations, with the positive class using 1.1 scalings where
    the negative class uses 0.8 / 1.0.
    """
    base1 = np.asarray(base1, dtype=float)
    base2 = np.asarray(base2, dtype=float)
    base3 = np.asarray(base3, dtype=float)
    if not (base1.shape == base2.shape == base3.shape):
        raise LengthMismatch("baseline series must share a length")
    formulas = _positive_formulas() if positive_class else _negative_formulas()
    return [f(base1, base2, base3) for f in formulas]


@dataclass(frozen=True)
class DatasetConfig:
    n_obs: int = 200
    sub_time: int = 50
    n_variables: int = 10
    n_samples: int = 5000
    percent_negative: float = 0.90
    missing_rate_range: tuple = (0.30, 0.60)
    seed: int = 0

    def validate(self):
        if self.sub_time > self.n_obs:
            raise ConfigInvalid("sub_time must not exceed n_obs")
        if not 0.0 < self.percent_negative <= 1.0:
            raise ConfigInvalid("percent_negative must lie in (0, 1]")
        if self.n_samples < 0 or self.n_variables < 1 or self.n_obs < 1:
            raise ConfigInvalid("sizes must be positive")
        lo, hi = self.missing_rate_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ConfigInvalid("missing rate range must satisfy 0 <= lo <= hi < 1")

    def to_json_dict(self) -> dict:
        return {"n_obs": self.n_obs, "sub_time": self.sub_time,
                "n_variables": self.n_variables, "n_samples": self.n_samples,
                "percent_negative": self.percent_negative,
                "missing_rate_range": list(self.missing_rate_range),
                "seed": self.seed}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DatasetConfig":
        doc = dict(doc)
        if "missing_rate_range" in doc:
            doc["missing_rate_range"] = tuple(doc["missing_rate_range"])
        return cls(**doc)


@dataclass
class SyntheticDataset:
    records: list[LongitudinalRecord]
    config: DatasetConfig
    seed: int
    nonstationary_flags: list[str] = field(default_factory=list)


def _labels_for(config: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    n_negative = int(round(config.n_samples * config.percent_negative))
    labels = np.zeros(config.n_samples, dtype=int)
    labels[n_negative:] = 1
    rng.shuffle(labels)
    return labels


def generate_record(index: int, label: int, config: DatasetConfig,
                    seed_seq: np.random.SeedSequence) -> LongitudinalRecord:
    child = np.random.SeedSequence(entropy=seed_seq.entropy,
                                   spawn_key=(index,))
    base_seeds = child.generate_state(3)
    bases = [simulate_arma(spec, config.n_obs, int(s))
             for spec, s in zip(BASELINE_SPECS, base_seeds)]
    series = engineer_features(*bases, positive_class=bool(label))
    full = np.column_stack(series[:config.n_variables])

    rng = np.random.default_rng(child.generate_state(4)[3])
    keep = np.sort(rng.choice(config.n_obs, size=config.sub_time, replace=False))
    times = keep.astype(float) + 1.0        # grid stamps are 1..n_obs
    values = full[keep, :]

    lo, hi = config.missing_rate_range
    observed = np.ones((config.sub_time, config.n_variables), dtype=bool)
    for m in range(config.n_variables):
        rate = rng.uniform(lo, hi)
        n_missing = int(round(rate * config.sub_time))
        hide = rng.choice(config.sub_time, size=n_missing, replace=False)
        observed[hide, m] = False
    masked_values = np.where(observed, values, np.nan)
    return LongitudinalRecord(patient_id=f"s{index:05d}", times=times,
                              values=masked_values, label=int(label),
                              observed=observed)


def generate_dataset(config: DatasetConfig) -> SyntheticDataset:
    """Generate the full record set; deterministic per config seed."""
    config.validate()
    seed_seq = np.random.SeedSequence(config.seed)
    label_rng = np.random.default_rng(seed_seq.generate_state(1)[0])
    labels = _labels_for(config, label_rng)
    records = [generate_record(i, labels[i], config, seed_seq)
               for i in range(config.n_samples)]
    flags = [f"baseline {i + 1} non-stationary"
             for i, spec in enumerate(BASELINE_SPECS) if not spec.is_stationary()]
    return SyntheticDataset(records=records, config=config, seed=config.seed,
                            nonstationary_flags=flags)


def split_dataset(records, fractions, seed: int):
    """Label-stratified disjoint split, deterministic per seed."""
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise FractionSumInvalid(f"fractions sum to {sum(fractions)}, not 1")
    records = list(records)
    rng = np.random.default_rng(seed)
    parts: list[list] = [[] for _ in fractions]
    for cls in (0, 1):
        members = [r for r in records if r.label == cls]
        order = rng.permutation(len(members))
        bounds = np.floor(np.cumsum(fractions) * len(members)).astype(int)
        start = 0
        for part, stop in zip(parts, bounds):
            part.extend(members[i] for i in order[start:stop])
            start = stop
        # Rounding leftovers go to the last nonzero fraction.
        if start < len(members):
            last = max(i for i, f in enumerate(fractions) if f > 0)
            parts[last].extend(members[i] for i in order[start:])
    return tuple(parts)
