"""Training objectives: penalty-reduced focal loss on heatmaps, masked L1 on
regression maps, weighted cross-entropy on occupancy voxels, and the joint
combination."""

from dataclasses import dataclass

import numpy as np

from . import ops
from .palette import NUM_CLASSES
from .tensor import ConfigurationError, DataError, DenseTensor, check_finite

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
_SIGMOID_EPS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    detection: float = 1.0
    occupancy: float = 5.0

    def __post_init__(self):
        if self.detection < 0 or self.occupancy < 0:
            raise ConfigurationError("loss weights must be >= 0")


def gaussian_focal_loss(logits, target):
    """Penalty-reduced focal loss (alpha=2, beta=4) on sigmoid heatmaps,
    normalized by the positive count (>= 1)."""
    logits = ops._t(logits)
    target = np.asarray(target, dtype=logits.data.dtype)
    if target.shape != logits.data.shape:
        raise ConfigurationError(
            f"focal loss target shape {target.shape} != logits {logits.data.shape}")
    dtype = logits.data.dtype
    p = 1.0 / (1.0 + np.exp(-logits.data))
    p = np.clip(p, _SIGMOID_EPS, 1.0 - _SIGMOID_EPS)
    pos = target == 1.0
    n_pos = max(1, int(pos.sum()))

    neg_w = (1.0 - target) ** FOCAL_BETA
    pos_term = ((1.0 - p) ** FOCAL_ALPHA) * np.log(p) * pos
    neg_term = neg_w * (p ** FOCAL_ALPHA) * np.log(1.0 - p) * (~pos)
    loss = -(pos_term.sum(dtype=np.float64) + neg_term.sum(dtype=np.float64)) / n_pos
    out = np.asarray(loss, dtype=dtype)
    check_finite(out, "gaussian_focal_loss")

    def backward(g):
        # d/dp of each term, then chain through sigmoid: dp/dx = p(1-p)
        dpos = (-FOCAL_ALPHA * (1.0 - p) ** (FOCAL_ALPHA - 1.0) * np.log(p)
                + ((1.0 - p) ** FOCAL_ALPHA) / p) * pos
        dneg = neg_w * (FOCAL_ALPHA * p ** (FOCAL_ALPHA - 1.0) * np.log(1.0 - p)
                        - (p ** FOCAL_ALPHA) / (1.0 - p)) * (~pos)
        dp = -(dpos + dneg) / n_pos
        return (g * dp * p * (1.0 - p),)

    return DenseTensor(out, requires_grad=logits.requires_grad or bool(logits._parents),
                       parents=(logits,), backward_fn=backward)


def masked_l1_loss(pred, target, valid):
    """Mean absolute error over regression channels at valid cells only."""
    pred = ops._t(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ConfigurationError(
            f"l1 target shape {target.shape} != pred {pred.data.shape}")
    mask = np.asarray(valid, dtype=bool)
    if mask.shape != (pred.data.shape[0],) + pred.data.shape[2:]:
        raise ConfigurationError("valid mask must be (B, S, S)")
    m = mask[:, None].astype(pred.data.dtype)
    count = max(1, int(mask.sum()) * pred.data.shape[1])
    diff = (pred.data - target) * m
    out = np.asarray(np.abs(diff).sum(dtype=np.float64) / count, dtype=pred.data.dtype)

    def backward(g):
        return (g * np.sign(diff) * m / pred.data.dtype.type(count),)

    return DenseTensor(out, requires_grad=pred.requires_grad or bool(pred._parents),
                       parents=(pred,), backward_fn=backward)


def detection_loss(raw, targets):
    """Focal heatmap loss plus masked L1 on the stacked regression maps.
    `targets` is the dict from targets.stack_targets."""
    heat = gaussian_focal_loss(raw.heatmap, targets["heatmap"])
    reg_pred = ops.concat_channels(list(raw.regression_maps()))
    reg = masked_l1_loss(reg_pred, targets["regression"], targets["valid"])
    return ops.add(heat, reg), {"det_heatmap": heat.item(), "det_reg": reg.item()}


def occupancy_loss(logits, gt_grid, weights: LossWeights, visibility_mask=None):
    """Weighted softmax cross-entropy over all voxels.

    `logits` is (B, classes, Z, Y, X); `gt_grid` is (B, X, Y, Z) class ids in
    the dataset's voxel layout. No visibility mask is applied by default; one
    can be passed with the gt layout to restrict the loss support.
    """
    logits = ops._t(logits)
    gt = np.asarray(gt_grid)
    if gt.ndim != 4:
        raise ConfigurationError("occupancy gt must be (B, X, Y, Z)")
    if gt.min() < 0 or gt.max() >= NUM_CLASSES:
        raise DataError(f"occupancy gt class ids outside [0, {NUM_CLASSES})")
    # dataset layout (B, X, Y, Z) -> logits layout (B, Z, Y, X)
    targets = np.ascontiguousarray(gt.transpose(0, 3, 2, 1)).astype(np.int64)
    expect = (logits.data.shape[0],) + logits.data.shape[2:]
    if targets.shape != expect:
        raise ConfigurationError(
            f"occupancy gt shape {gt.shape} does not match logits {logits.data.shape}")
    if weights.occupancy == 0.0:
        zero = np.zeros((), dtype=logits.data.dtype)

        def backward(g):
            return (np.zeros_like(logits.data),)

        return DenseTensor(zero, requires_grad=logits.requires_grad or bool(logits._parents),
                           parents=(logits,), backward_fn=backward)
    if visibility_mask is not None:
        vis = np.asarray(visibility_mask, dtype=bool).transpose(0, 3, 2, 1)
        ignore = NUM_CLASSES  # sentinel outside the class range
        targets = np.where(vis, targets, ignore)
        return ops.softmax_cross_entropy(logits, targets, ignore_id=ignore,
                                         weight=weights.occupancy)
    return ops.softmax_cross_entropy(logits, targets, weight=weights.occupancy)


def joint_loss(det_pair, occ_term, weights: LossWeights):
    """Total = det_weight * detection + occupancy term (already weighted).

    The reported total is combined in double precision so it is exactly
    linear in the occupancy weight; the graph tensor stays in model dtype.
    """
    parts = {}
    total = None
    reported = 0.0
    if det_pair is not None:
        det_tensor, det_parts = det_pair
        parts.update(det_parts)
        parts["det_total"] = det_tensor.item()
        reported += weights.detection * det_tensor.item()
        total = ops.scale(det_tensor, weights.detection)
    if occ_term is not None:
        parts["occ_total"] = occ_term.item()
        reported += occ_term.item()
        total = occ_term if total is None else ops.add(total, occ_term)
    if total is None:
        raise ConfigurationError("joint_loss needs at least one enabled head")
    parts["total"] = reported
    return total, parts
