"""Training objectives: homoscedastic pose loss, semantic CE, spectral angle.

The pose loss balances translation and rotation errors with two learned
log-variance scalars:

    L = L_x * exp(-s_x) + s_x + L_q * exp(-s_q) + s_q

where L_x is the Euclidean translation error and L_q the L2 distance between
the ground-truth unit quaternion and the normalised prediction.  For fixed
L_x > 0 the stationary point in s_x is ln L_x, which the tests verify by
running the optimiser on s_x alone.

Semantic supervision combines per-pixel cross-entropy with a spectral-angle
term computed between softmax probabilities and one-hot targets; both operate
on a (C, H, W) logit map against an (H, W) integer label map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .geometry import Pose, normalize_quaternion_tensor
from .poseformer import PoseEstimate


@dataclass
class PoseLossState:
    """Learned log-variance weights; rotation starts heavily weighted because
    quaternion distances are numerically much smaller than metre errors."""

    s_x: Tensor = field(default_factory=lambda: ad.param(np.asarray(0.0), name="loss.s_x"))
    s_q: Tensor = field(default_factory=lambda: ad.param(np.asarray(-3.0), name="loss.s_q"))

    def parameters(self) -> dict[str, Tensor]:
        return {"loss.s_x": self.s_x, "loss.s_q": self.s_q}


@dataclass
class SemanticLossWeights:
    w_ce: float = 0.7
    w_sam: float = 0.3

    def __post_init__(self):
        if self.w_ce < 0 or self.w_sam < 0:
            raise ConfigError(f"semantic loss weights must be nonnegative, got ({self.w_ce}, {self.w_sam})")


def pose_loss(pred: PoseEstimate, gt: Pose, state: PoseLossState) -> Tensor:
    l_x = ad.norm_l2(pred.x - ad.constant(gt.x))
    q_unit = normalize_quaternion_tensor(pred.q_raw)
    l_q = ad.norm_l2(ad.constant(gt.q) - q_unit)
    return l_x * ad.exp(-state.s_x) + state.s_x + l_q * ad.exp(-state.s_q) + state.s_q


def _validate_labels(labels: np.ndarray, n_classes: int) -> None:
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        v, u = np.argwhere(bad)[0]
        raise DataError(f"label {labels[v, u]} at pixel (u={u}, v={v}) outside [0, {n_classes})")


def _logit_rows(pred_logits: Tensor, gt_labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    if pred_logits.ndim != 3:
        raise ConfigError(f"expected (C, H, W) logits, got shape {pred_logits.shape}")
    c, h, w = pred_logits.shape
    gt_labels = np.asarray(gt_labels)
    if gt_labels.shape != (h, w):
        raise ConfigError(f"label map shape {gt_labels.shape} does not match logits {(h, w)}")
    _validate_labels(gt_labels, c)
    rows = pred_logits.reshape((c, h * w)).transpose()
    return rows, gt_labels.reshape(-1).astype(np.int64)


def _validate_flat_labels(labels: np.ndarray, n_classes: int) -> None:
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"label {labels[i]} at ray {i} outside [0, {n_classes})")


def semantic_ce(pred_logits: Tensor, gt_labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of the true class."""
    rows, flat = _logit_rows(pred_logits, gt_labels)
    return ad.cross_entropy_rows(rows, flat)


def semantic_ce_rows(rows: Tensor, flat_labels: np.ndarray) -> Tensor:
    """Cross-entropy over an (R, C) batch of per-ray logits."""
    _validate_flat_labels(flat_labels, rows.shape[1])
    return ad.cross_entropy_rows(rows, flat_labels.astype(np.int64))


def sam_loss_rows(rows: Tensor, flat_labels: np.ndarray) -> Tensor:
    _validate_flat_labels(flat_labels, rows.shape[1])
    return spectral_angles(ad.softmax_rows(rows), flat_labels.astype(np.int64)).mean()


def semantic_loss_rows(rows: Tensor, flat_labels: np.ndarray, weights: SemanticLossWeights) -> Tensor:
    return weights.w_ce * semantic_ce_rows(rows, flat_labels) + weights.w_sam * sam_loss_rows(rows, flat_labels)


def spectral_angles(probs: Tensor, flat_labels: np.ndarray) -> Tensor:
    """Angle per row between a probability vector and the target one-hot."""
    n, c = probs.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), flat_labels] = 1.0
    dot = (probs * ad.constant(onehot)).sum(axis=1)
    norm = ad.sqrt((probs * probs).sum(axis=1))
    # |one-hot| is exactly 1, so the cosine is dot / |p|.
    return ad.arccos_clamped(dot / norm)


def sam_loss(pred_logits: Tensor, gt_labels: np.ndarray) -> Tensor:
    """Mean spectral angle between softmax probabilities and one-hot targets."""
    rows, flat = _logit_rows(pred_logits, gt_labels)
    return spectral_angles(ad.softmax_rows(rows), flat).mean()


def semantic_loss(pred_logits: Tensor, gt_labels: np.ndarray, weights: SemanticLossWeights) -> Tensor:
    return weights.w_ce * semantic_ce(pred_logits, gt_labels) + weights.w_sam * sam_loss(pred_logits, gt_labels)


def total_loss(pose_term: Tensor | None, semantic_term: Tensor | None, lambda_pose: float, lambda_sem: float) -> Tensor:
    if lambda_pose < 0 or lambda_sem < 0:
        raise ConfigError(f"loss mixture weights must be nonnegative, got ({lambda_pose}, {lambda_sem})")
    terms = []
    if pose_term is not None and lambda_pose != 0:
        terms.append(lambda_pose * pose_term)
    if semantic_term is not None and lambda_sem != 0:
        terms.append(lambda_sem * semantic_term)
    if not terms:
        raise ConfigError("total_loss needs at least one active term")
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
