"""Linear SVM on activation features and the unseparability scores built on it.

The solver is a deterministic mini-batch subgradient descent on the primal
L2-regularized hinge objective (Pegasos-style 1/(lambda*t) step sizes with
seeded epoch shuffling). Scores are evaluated on the fit set: U-IDS measures
how unseparable real and fake features are, P-IDS how often a fake outscores
its paired real image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ValidationError
from .stats import FeatureMatrix

# Rows per subgradient step; one epoch visits every row once in shuffled order.
MINI_BATCH = 256


@dataclass(frozen=True)
class SvmConfig:
    """Training knobs, echoed into every report that used them."""

    c: float = 1.0
    max_epochs: int = 200
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not self.c > 0:
            raise ValidationError(f"c must be positive, got {self.c}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.tol > 0:
            raise ValidationError(f"tol must be positive, got {self.tol}")

    def to_json_dict(self) -> dict:
        return {"c": self.c, "max_epochs": self.max_epochs, "tol": self.tol, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class LinearDecisionFunction:
    """Trained decision function in original (unstandardized) coordinates.

    ``decision_values`` is positive where the model considers a sample real.
    The standardizer used at training time is kept alongside the folded
    weights so the training-time geometry stays reconstructable.
    """

    weights: np.ndarray
    bias: float
    standardizer_mean: np.ndarray
    standardizer_scale: np.ndarray

    def __post_init__(self):
        for name in ("weights", "standardizer_mean", "standardizer_scale"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "bias", float(self.bias))
        if not np.isfinite(self.weights).all() or not np.isfinite(self.bias):
            raise ValidationError("decision function has non-finite parameters")
        if not (self.standardizer_scale > 0).all():
            raise ValidationError("standardizer scales must be positive")

    def decision_values(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=np.float64) @ self.weights + self.bias


def _check_training_inputs(real: FeatureMatrix, fake: FeatureMatrix) -> None:
    if real.dim != fake.dim:
        raise ValidationError(f"dimension mismatch: real {real.dim} vs fake {fake.dim}")
    if real.n < 2 or fake.n < 2:
        raise ValidationError(
            f"both sets need at least 2 rows, got real={real.n} fake={fake.n}"
        )


def train_linear_svm(
    real: FeatureMatrix, fake: FeatureMatrix, cfg: SvmConfig
) -> LinearDecisionFunction:
    """Fit a linear SVM labeling real rows +1 and fake rows -1.

    Features are standardized per dimension over the union (zero-variance
    dimensions get scale 1); the returned function is folded back into
    original coordinates. Fixed inputs and seed give bitwise-identical
    weights.
    """
    _check_training_inputs(real, fake)
    x = np.vstack([real.data, fake.data])
    y = np.concatenate([np.ones(real.n), -np.ones(fake.n)])
    n, dim = x.shape

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    z = (x - mean) / scale

    lam = 1.0 / (cfg.c * n)
    radius = 1.0 / np.sqrt(lam)
    # Seeds are 64-bit and may be negative; fold into the unsigned range.
    rng = np.random.default_rng(cfg.seed & 0xFFFFFFFFFFFFFFFF)
    w = np.zeros(dim)
    b = 0.0
    t = 0
    prev_obj = np.inf
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, MINI_BATCH):
            idx = order[start : start + MINI_BATCH]
            t += 1
            eta = 1.0 / (lam * t)
            zb = z[idx]
            yb = y[idx]
            violating = yb * (zb @ w + b) < 1.0
            w *= 1.0 - eta * lam
            if violating.any():
                coeff = eta / idx.shape[0]
                w += coeff * (yb[violating, None] * zb[violating]).sum(axis=0)
                b += coeff * yb[violating].sum()
            norm = float(np.linalg.norm(w))
            if norm > radius:
                w *= radius / norm
        margins = y * (z @ w + b)
        obj = lam / 2.0 * float(w @ w) + float(np.maximum(0.0, 1.0 - margins).mean())
        if abs(prev_obj - obj) <= cfg.tol * max(1.0, abs(prev_obj)):
            break
        prev_obj = obj

    # Fold the standardizer: f(x) = w . (x - mean)/scale + b
    w_orig = w / scale
    b_orig = b - float(w_orig @ mean)
    return LinearDecisionFunction(
        weights=w_orig, bias=b_orig, standardizer_mean=mean, standardizer_scale=scale
    )


def u_ids(real: FeatureMatrix, fake: FeatureMatrix, cfg: SvmConfig) -> float:
    """Unseparability score in [0, 1]; higher means better fake quality.

    Trains on the two sets and evaluates on the same rows (fit-set
    convention): half the fraction of real rows scored negative plus half
    the fraction of fake rows scored positive. Exact zeros count as
    neither, per the strict inequalities.
    """
    f = train_linear_svm(real, fake, cfg)
    real_values = f.decision_values(real.data)
    fake_values = f.decision_values(fake.data)
    return 0.5 * float((real_values < 0).mean()) + 0.5 * float((fake_values > 0).mean())


def p_ids(
    real: FeatureMatrix,
    fake: FeatureMatrix,
    pairing: Mapping[str, str],
    cfg: SvmConfig,
) -> float:
    """Paired score in [0, 1]: fraction of pairs where the fake outscores
    its paired real image under the trained decision function (strict).

    ``pairing`` maps fake ids to real ids and must be a bijection.
    """
    fake_ids = set(fake.ids)
    real_ids = set(real.ids)
    for fake_id in fake.ids:
        if fake_id not in pairing:
            raise ValidationError(f"fake id {fake_id!r} has no pair")
    extra_keys = set(pairing) - fake_ids
    if extra_keys:
        raise ValidationError(f"pairing names unknown fake id {sorted(extra_keys)[0]!r}")
    mapped = list(pairing.values())
    if len(set(mapped)) != len(mapped):
        dup = next(r for r in mapped if mapped.count(r) > 1)
        raise ValidationError(f"pairing maps two fakes onto real id {dup!r}")
    unmatched_real = real_ids - set(mapped)
    missing_real = set(mapped) - real_ids
    if missing_real:
        raise ValidationError(f"pairing names unknown real id {sorted(missing_real)[0]!r}")
    if unmatched_real:
        raise ValidationError(f"real id {sorted(unmatched_real)[0]!r} has no pair")

    f = train_linear_svm(real, fake, cfg)
    real_values = f.decision_values(real.data)
    fake_values = f.decision_values(fake.data)
    real_index = real.row_index()
    fake_index = fake.row_index()
    wins = 0
    for fake_id, real_id in pairing.items():
        if fake_values[fake_index[fake_id]] > real_values[real_index[real_id]]:
            wins += 1
    return wins / len(pairing)
