"""Hard-region-gated cross-entropy / dice loss kernels with analytic gradients.

All kernels take ``pred`` and one-hot ``target`` arrays shaped [C, ...],
flatten trailing axes to [C, N], and return value, dL/dpred (same shape as
``pred``) and the fraction of voxel-class terms passing the hardness gate.

The gate is I(y, p) = 1 iff |y - p| >= T: a term participates when its
prediction error is at least the threshold, so T = 0 recovers the plain
ungated loss. The gate is treated as a stop-gradient constant.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

PRED_CLAMP = 1e-7


class StageCombo(str, enum.Enum):
    COARSE_I = "coarse_i"    # gated CE + plain soft dice
    COARSE_II = "coarse_ii"  # gated CE + gated dice


@dataclass(frozen=True)
class LossConfig:
    threshold: float = 0.1
    epsilon: float = 1e-5
    stage_combo: StageCombo = StageCombo.COARSE_I
    combo_weights: tuple[float, float] = (1.0, 1.0)
    dice_as_one_minus: bool = False  # report gated dice as 1 - similarity instead of -similarity

    def __post_init__(self):
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError(f"threshold must lie in [0, 1), got {self.threshold}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class LossResult:
    value: float
    gradient: np.ndarray
    hard_fraction: float

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite loss value {self.value}")


def _check_inputs(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.ndim < 2:
        raise ValueError("expected [C, ...] arrays with a leading class axis")
    flat_t = target.reshape(target.shape[0], -1)
    if not np.isin(flat_t, (0.0, 1.0)).all():
        raise ValueError("target must be one-hot (values 0/1)")
    if not np.allclose(flat_t.sum(axis=0), 1.0):
        raise ValueError("target must be one-hot (one class per voxel)")
    return pred, target


def _gate(pred: np.ndarray, target: np.ndarray, threshold: float) -> np.ndarray:
    return (np.abs(target - pred) >= threshold).astype(np.float64)


def hra_ce(pred: np.ndarray, target: np.ndarray, config: LossConfig) -> LossResult:
    """Cross-entropy restricted to hard voxel-class terms.

    value = -(1/N) * sum_c sum_n I(y, p) * y * log(p).
    """
    pred, target = _check_inputs(pred, target)
    shape = pred.shape
    n = pred[0].size
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    gate = _gate(p, target, config.threshold)
    terms = gate * target * np.log(p)
    value = -float(terms.sum()) / n
    grad = -(gate * target / p) / n
    return LossResult(value=value, gradient=grad.reshape(shape),
                      hard_fraction=float(gate.mean()))


def soft_dice(pred: np.ndarray, target: np.ndarray, epsilon: float = 1e-5) -> LossResult:
    """Plain soft dice loss, 1 - mean_c (2*sum(y*p)+eps)/(sum(y^2)+sum(p^2)+eps)."""
    pred, target = _check_inputs(pred, target)
    shape = pred.shape
    c = shape[0]
    p = pred.reshape(c, -1)
    y = target.reshape(c, -1)
    inter = 2.0 * (y * p).sum(axis=1) + epsilon
    denom = (y * y).sum(axis=1) + (p * p).sum(axis=1) + epsilon
    value = 1.0 - float((inter / denom).mean())
    grad = -(2.0 * y * denom[:, None] - inter[:, None] * 2.0 * p) / (denom ** 2)[:, None] / c
    return LossResult(value=value, gradient=grad.reshape(shape), hard_fraction=1.0)


def hra_dice(pred: np.ndarray, target: np.ndarray, config: LossConfig) -> LossResult:
    """Per-term dice affinity restricted to hard voxel-class terms.

    value = -(1/N) * sum_c sum_n I(y, p) * 2*y*p / (y^2 + p^2 + eps),
    or 1 minus the gated mean affinity when ``dice_as_one_minus`` is set
    (same gradient either way).
    """
    pred, target = _check_inputs(pred, target)
    shape = pred.shape
    n = pred[0].size
    eps = config.epsilon
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = target
    gate = _gate(p, y, config.threshold)
    denom = y * y + p * p + eps
    affinity = (gate * 2.0 * y * p / denom).sum() / n
    value = 1.0 - affinity if config.dice_as_one_minus else -affinity
    grad = -(gate * 2.0 * y * (y * y + eps - p * p) / denom ** 2) / n
    return LossResult(value=float(value), gradient=grad.reshape(shape),
                      hard_fraction=float(gate.mean()))


def combined_loss(pred: np.ndarray, target: np.ndarray, config: LossConfig) -> LossResult:
    """Per-stage weighted combination of the gated CE with a dice partner."""
    w1, w2 = config.combo_weights
    ce = hra_ce(pred, target, config)
    if config.stage_combo is StageCombo.COARSE_I:
        partner = soft_dice(pred, target, epsilon=config.epsilon)
    else:
        partner = hra_dice(pred, target, config)
    return LossResult(value=w1 * ce.value + w2 * partner.value,
                      gradient=w1 * ce.gradient + w2 * partner.gradient,
                      hard_fraction=ce.hard_fraction)


def plain_cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    """Ungated reference CE used by the T=0 equivalence checks."""
    pred, target = _check_inputs(pred, target)
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    return -float((target * np.log(p)).sum()) / pred[0].size


def stable_gate_mask(pred: np.ndarray, target: np.ndarray, threshold: float,
                     h: float) -> np.ndarray:
    """Entries whose gate cannot flip under a +-h perturbation of pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return np.abs(np.abs(target - pred) - threshold) > h


def finite_difference_max_rel_error(loss_fn, pred: np.ndarray, target: np.ndarray,
                                    *, h: float = 1e-4, max_entries: int = 64,
                                    rng: np.random.Generator | None = None,
                                    stable: np.ndarray | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to ``max_entries`` positions (gate-stable ones when a ``stable``
    mask is given); returns 0.0 when both gradients vanish everywhere sampled.
    """
    rng = rng or np.random.default_rng(0)
    pred = np.asarray(pred, dtype=np.float64)
    analytic = loss_fn(pred).gradient
    candidates = np.flatnonzero(stable) if stable is not None else np.arange(pred.size)
    if candidates.size == 0:
        return 0.0
    if candidates.size > max_entries:
        candidates = rng.choice(candidates, size=max_entries, replace=False)
    worst = 0.0
    flat = pred.reshape(-1)
    for pos in candidates:
        bumped = flat.copy()
        bumped[pos] += h
        up = loss_fn(bumped.reshape(pred.shape)).value
        bumped[pos] -= 2 * h
        down = loss_fn(bumped.reshape(pred.shape)).value
        fd = (up - down) / (2 * h)
        ana = analytic.reshape(-1)[pos]
        scale = max(abs(fd), abs(ana))
        if scale < 1e-12:
            continue
        worst = max(worst, abs(fd - ana) / scale)
    return worst
