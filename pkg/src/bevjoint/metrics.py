"""Evaluation: per-class voxel IoU (free space excluded) and detection quality
via center-distance matched AP plus translation/scale/orientation/velocity
errors folded into an NDS-proxy composite.

The composite deliberately excludes the attribute-error term (synthetic data
has no attributes) and is labeled "NDS-proxy" everywhere it is reported.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .palette import FREE_ID, NUM_CLASSES, OCC_CLASS_NAMES

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
# normalizers applied before the (1 - min(1, err)) fold; config-overridable
TP_NORMALIZERS = {"mATE": 2.0, "mASE": 1.0, "mAOE": math.pi, "mAVE": 2.0}
RECALL_SAMPLES = 101


def confusion_matrix(pred, gt, mask=None, num_classes=NUM_CLASSES):
    """Integer counts, rows = GT class, cols = predicted class."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("pred/gt shapes differ")
    if mask is not None:
        keep = np.asarray(mask).reshape(-1).astype(bool)
        pred, gt = pred[keep], gt[keep]
    return np.bincount(gt * num_classes + pred,
                       minlength=num_classes * num_classes).reshape(num_classes,
                                                                    num_classes)


def miou(pred, gt, mask=None):
    """Per-class IoU over the 17 semantic classes (free excluded) and their
    mean; classes absent from both GT and prediction are excluded."""
    cm = confusion_matrix(pred, gt, mask)
    per_class = {}
    vals = []
    for c in range(NUM_CLASSES):
        if c == FREE_ID:
            continue
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        present = (cm[c, :].sum() + cm[:, c].sum()) > 0
        if not present:
            per_class[OCC_CLASS_NAMES[c]] = None
            continue
        iou = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else 0.0
        per_class[OCC_CLASS_NAMES[c]] = float(iou)
        vals.append(float(iou))
    mean = float(np.mean(vals)) if vals else 0.0
    return per_class, mean


@dataclass
class DetectionEvalResult:
    ap_per_class: dict = field(default_factory=dict)  # name -> {thr: ap}
    mean_ap: float = 0.0
    mATE: float = 1.0
    mASE: float = 1.0
    mAOE: float = 1.0
    mAVE: float = 1.0
    composite: float = 0.0

    def tp_errors(self):
        return {"mATE": self.mATE, "mASE": self.mASE,
                "mAOE": self.mAOE, "mAVE": self.mAVE}


def _center_distance(a, b):
    return math.hypot(a.x - b.x, a.y - b.y)


def _yaw_error(a, b):
    d = abs(a.yaw - b.yaw) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def _scale_error(a, b):
    """1 - IoU of the two boxes after aligning center and yaw."""
    inter = (min(a.w, b.w) * min(a.l, b.l) * min(a.h, b.h))
    union = a.w * a.l * a.h + b.w * b.l * b.h - inter
    return 1.0 - inter / union if union > 0 else 1.0


def _ap_from_matches(tp_flags, num_gt):
    """101-point recall-interpolated average precision."""
    if num_gt == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    out = 0.0
    for r in np.linspace(0.0, 1.0, RECALL_SAMPLES):
        mask = recall >= r
        out += precision[mask].max() if mask.any() else 0.0
    return float(out / RECALL_SAMPLES)


def eval_detections(pred_lists, gt_lists, normalizers=None):
    """Evaluate per-sample prediction/GT Box3D lists.

    Greedy matching by descending score against the nearest unmatched
    same-class GT within each center-distance threshold; AP averaged over the
    thresholds and classes; TP errors taken from matches at the 2 m threshold.
    """
    if len(pred_lists) != len(gt_lists):
        raise ValueError("need one prediction list per GT list")
    normalizers = dict(TP_NORMALIZERS, **(normalizers or {}))
    classes = sorted({b.cls for gts in gt_lists for b in gts})
    result = DetectionEvalResult()
    ap_means = []
    err_sums = {k: [] for k in ("mATE", "mASE", "mAOE", "mAVE")}

    for cls in classes:
        preds = [(si, b) for si, plist in enumerate(pred_lists)
                 for b in plist if b.cls == cls]
        preds.sort(key=lambda e: -e[1].score)
        num_gt = sum(1 for gts in gt_lists for b in gts if b.cls == cls)
        name = OCC_CLASS_NAMES[cls] if 0 <= cls < NUM_CLASSES else str(cls)
        result.ap_per_class[name] = {}
        cls_errs = {k: [] for k in err_sums}
        for thr in DIST_THRESHOLDS:
            matched = set()
            tp_flags = []
            for si, p in preds:
                best, best_d = None, float("inf")
                for gi, g in enumerate(gt_lists[si]):
                    if g.cls != cls or (si, gi) in matched:
                        continue
                    d = _center_distance(p, g)
                    if d < best_d:
                        best, best_d = gi, d
                if best is not None and best_d <= thr:
                    matched.add((si, best))
                    tp_flags.append(True)
                    if thr == TP_THRESHOLD:
                        g = gt_lists[si][best]
                        cls_errs["mATE"].append(best_d)
                        cls_errs["mASE"].append(_scale_error(p, g))
                        cls_errs["mAOE"].append(_yaw_error(p, g))
                        cls_errs["mAVE"].append(math.hypot(p.vx - g.vx, p.vy - g.vy))
                else:
                    tp_flags.append(False)
            result.ap_per_class[name][thr] = _ap_from_matches(tp_flags, num_gt)
        ap_means.append(float(np.mean([result.ap_per_class[name][t]
                                       for t in DIST_THRESHOLDS])))
        for k in err_sums:
            # classes with no matches at the TP threshold contribute the
            # worst normalized error
            err_sums[k].append(float(np.mean(cls_errs[k])) if cls_errs[k]
                               else normalizers[k])

    result.mean_ap = float(np.mean(ap_means)) if ap_means else 0.0
    if err_sums["mATE"]:
        result.mATE = float(np.mean(err_sums["mATE"]))
        result.mASE = float(np.mean(err_sums["mASE"]))
        result.mAOE = float(np.mean(err_sums["mAOE"]))
        result.mAVE = float(np.mean(err_sums["mAVE"]))
    folded = sum(1.0 - min(1.0, result.tp_errors()[k] / normalizers[k])
                 for k in normalizers)
    result.composite = float((5.0 * result.mean_ap + folded) / 9.0)
    return result


def render_miou_table(per_class, mean, masked=False):
    """Key=value block plus the 17-class row in the standard table order."""
    lines = [f"mIoU = {mean:.4f}", f"visibility_mask = {'on' if masked else 'off'}"]
    names = [n for n in OCC_CLASS_NAMES if n != "free"]
    header = " | ".join(f"{n[:12]:>12}" for n in names)
    row = " | ".join(
        f"{per_class.get(n):>12.4f}" if per_class.get(n) is not None else f"{'-':>12}"
        for n in names
    )
    lines.append(header)
    lines.append(row)
    return "\n".join(lines)


def render_detection_report(res: DetectionEvalResult):
    lines = [
        f"mAP = {res.mean_ap:.4f}",
        f"NDS-proxy = {res.composite:.4f}",
        f"mATE = {res.mATE:.4f}",
        f"mASE = {res.mASE:.4f}",
        f"mAOE = {res.mAOE:.4f}",
        f"mAVE = {res.mAVE:.4f}",
    ]
    for name, aps in sorted(res.ap_per_class.items()):
        ap_str = " ".join(f"ap@{t:g}={aps[t]:.4f}" for t in DIST_THRESHOLDS)
        lines.append(f"class {name}: {ap_str}")
    return "\n".join(lines)
