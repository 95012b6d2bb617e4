"""
Softmax, the weighted generalized Dice loss with its analytic gradient, and
the gated three-stage cascade objective.

The array-level functions take channel-first arrays (K, ...) so the network
can call them on batch slices; the volume-level functions wrap them for
ProbVolume inputs.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import special

from utils.errors import GeometryMismatch, NotProbabilities, SchemaMismatch
from utils.hierarchy import collapse_to_stage, contains_mvo, num_labels
from utils.volume import LabelVolume, ProbKind, ProbVolume, one_hot, same_geometry

logger = logging.getLogger(__name__)

WEIGHTINGS = ("volume", "inverse-square")


@dataclass(frozen=True)
class LabelWeights:
    w: np.ndarray


@dataclass(frozen=True)
class CascadeLossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    epsilon: float = 1e-7
    weighting: str = "volume"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("Stage weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")

    @property
    def lambdas(self) -> Tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)


@dataclass
class CascadeLossResult:
    total: float
    per_stage: Tuple[float, float, float]
    delta_mvo: int
    # dL/dy_hat per stage, already scaled by lambda (and delta for stage 3);
    # None when the stage does not contribute
    grads: Tuple[Optional[np.ndarray], Optional[np.ndarray], Optional[np.ndarray]]


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------

def softmax_array(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Numerically stable softmax along the channel axis."""
    return special.softmax(logits, axis=axis)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, axis: int = 0) -> np.ndarray:
    """Vector-Jacobian product of softmax: q * (g - sum_k g_k q_k)."""
    inner = np.sum(grad_probs * probs, axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def softmax_channels(p: ProbVolume) -> ProbVolume:
    """
    Convert a logits volume into per-voxel probabilities.

    Args:
        p (ProbVolume): LOGITS volume

    Returns:
        ProbVolume: PROBS volume on the same grid
    """
    if p.kind != ProbKind.LOGITS:
        raise ValueError("softmax_channels expects a LOGITS volume")
    return ProbVolume(softmax_array(p.data, axis=0), p.spacing, ProbKind.PROBS, p.schema)


# ---------------------------------------------------------------------------
# Generalized Dice
# ---------------------------------------------------------------------------

def label_weights_array(y: np.ndarray, weighting: str = "volume", epsilon: float = 1e-7) -> np.ndarray:
    """Per-label weights from a one-hot array (K, ...)."""
    counts = y.reshape(y.shape[0], -1).sum(axis=1)
    if weighting == "volume":
        total = counts.sum()
        return counts / total if total > 0 else np.zeros_like(counts)
    if weighting == "inverse-square":
        return 1.0 / (counts ** 2 + epsilon)
    raise ValueError(f"Unknown weighting '{weighting}'")


def label_weights(y_onehot: ProbVolume) -> LabelWeights:
    """
    Label weights w_k = M_k / M of a one-hot ground truth.

    Args:
        y_onehot (ProbVolume): One-hot ground truth

    Returns:
        LabelWeights: K weights summing to 1
    """
    return LabelWeights(label_weights_array(y_onehot.data, "volume"))


def generalized_dice_array(
    y: np.ndarray,
    yhat: np.ndarray,
    epsilon: float = 1e-7,
    weighting: str = "volume",
) -> Tuple[float, np.ndarray]:
    """
    Weighted generalized Dice loss and its gradient w.r.t. yhat.

    loss = 1 - 2 * sum_k w_k sum_m yhat*y / (sum_k w_k sum_m (yhat^2 + y) + eps)

    Args:
        y (np.ndarray): One-hot ground truth (K, ...)
        yhat (np.ndarray): Probabilities (K, ...)
        epsilon (float): Denominator guard
        weighting (str): 'volume' (M_k/M) or 'inverse-square' (1/(M_k^2+eps))

    Returns:
        tuple: (loss, dloss/dyhat shaped like yhat)
    """
    if y.shape != yhat.shape:
        raise GeometryMismatch(f"Ground truth {y.shape} and prediction {yhat.shape} differ")
    k = y.shape[0]
    w = label_weights_array(y, weighting, epsilon)
    flat_y = y.reshape(k, -1)
    flat_p = yhat.reshape(k, -1)

    intersect = np.einsum('km,km->k', flat_p, flat_y)
    sums = np.einsum('km,km->k', flat_p, flat_p) + flat_y.sum(axis=1)
    num = float(np.dot(w, intersect))
    den = float(np.dot(w, sums)) + epsilon
    loss = 1.0 - 2.0 * num / den

    wb = w.reshape((k,) + (1,) * (y.ndim - 1))
    # quotient rule on num/den
    grad = -2.0 * (wb * y * den - num * wb * 2.0 * yhat) / (den * den)
    return loss, grad


def generalized_dice(y: ProbVolume, yhat: ProbVolume, eps: float = 1e-7, weighting: str = "volume") -> Tuple[float, ProbVolume]:
    """
    Generalized Dice loss between one-hot ground truth and predicted probabilities.

    Args:
        y (ProbVolume): One-hot ground truth
        yhat (ProbVolume): PROBS prediction
        eps (float): Denominator guard

    Returns:
        tuple: (loss, gradient volume over yhat)
    """
    if yhat.kind != ProbKind.PROBS:
        raise NotProbabilities("generalized_dice needs a PROBS prediction")
    if not same_geometry(y, yhat) or y.channels != yhat.channels:
        raise GeometryMismatch(
            f"Ground truth {y.channels}x{y.dims} and prediction {yhat.channels}x{yhat.dims} differ"
        )
    loss, grad = generalized_dice_array(y.data, yhat.data, eps, weighting)
    return loss, ProbVolume(grad, yhat.spacing, ProbKind.LOGITS, yhat.schema)


# ---------------------------------------------------------------------------
# Cascade objective
# ---------------------------------------------------------------------------

def stage_targets(y: LabelVolume) -> List[np.ndarray]:
    """One-hot targets of the three stages for stage-3 labels y."""
    return [
        one_hot(collapse_to_stage(y, stage), num_labels(stage)).data
        for stage in (1, 2, 3)
    ]


def cascade_loss_arrays(
    targets: List[np.ndarray],
    yhats: List[Optional[np.ndarray]],
    delta_mvo: int,
    cfg: CascadeLossConfig,
) -> CascadeLossResult:
    """
    Gated cascade objective on arrays.

    Args:
        targets (list): One-hot targets per stage, (K_s, ...) each
        yhats (list): Stage probabilities; the stage-3 entry may be None when gated off
        delta_mvo (int): 1 if the ground truth contains MVO
        cfg (CascadeLossConfig): Stage weights and Dice settings

    Returns:
        CascadeLossResult: total, per-stage losses, gate and scaled gradients
    """
    for stage, (target, yhat) in enumerate(zip(targets, yhats), start=1):
        if yhat is not None and yhat.shape[0] != num_labels(stage):
            raise SchemaMismatch(
                f"Stage {stage} prediction has {yhat.shape[0]} channels, expected {num_labels(stage)}"
            )

    per_stage = [0.0, 0.0, 0.0]
    grads: List[Optional[np.ndarray]] = [None, None, None]
    total = 0.0
    for index, lam in enumerate(cfg.lambdas):
        yhat = yhats[index]
        if yhat is None:
            if index == 2 and delta_mvo:
                raise SchemaMismatch("Stage-3 prediction is required for MVO cases")
            continue
        loss, grad = generalized_dice_array(targets[index], yhat, cfg.epsilon, cfg.weighting)
        per_stage[index] = loss
        gate = delta_mvo if index == 2 else 1
        if gate:
            total += lam * loss
            grads[index] = lam * grad

    return CascadeLossResult(total, tuple(per_stage), int(delta_mvo), tuple(grads))


def cascade_loss(
    y: LabelVolume,
    yhat1: ProbVolume,
    yhat2: ProbVolume,
    yhat3: Optional[ProbVolume],
    cfg: CascadeLossConfig = CascadeLossConfig(),
) -> CascadeLossResult:
    """
    Three-stage objective with the stage-3 term gated by MVO presence.

    total = l1*L(y1, yhat1) + l2*L(y2, yhat2) + delta_mvo*l3*L(y3, yhat3).
    Batch reduction (mean over samples) is left to the caller.

    Args:
        y (LabelVolume): Stage-3 ground truth
        yhat1, yhat2, yhat3 (ProbVolume): Stage probabilities (K = 3, 4, 5)
        cfg (CascadeLossConfig): Stage weights and Dice settings

    Returns:
        CascadeLossResult: total, per-stage losses and delta_mvo
    """
    predictions = [yhat1, yhat2, yhat3]
    for stage, yhat in enumerate(predictions, start=1):
        if yhat is None:
            continue
        if yhat.kind != ProbKind.PROBS:
            raise NotProbabilities(f"Stage {stage} prediction must be PROBS")
        if yhat.channels != num_labels(stage):
            raise SchemaMismatch(
                f"Stage {stage} prediction has {yhat.channels} channels, expected {num_labels(stage)}"
            )
        if not same_geometry(y, yhat):
            raise GeometryMismatch(f"Stage {stage} prediction does not match ground truth geometry")

    delta = int(contains_mvo(y))
    arrays = [p.data if p is not None else None for p in predictions]
    return cascade_loss_arrays(stage_targets(y), arrays, delta, cfg)
