"""Inference over datasets and metric computation for the eval/ablate verbs."""

import numpy as np

from .boxes import decode_detections
from .metrics import eval_detections, miou
from .train import make_batch


def predict(model, samples, mode="joint", batch_size=2, workers=1):
    """Run eval-mode inference; returns (box_lists, occ_grids) where either
    may be None depending on the mode. Occupancy predictions come back in the
    dataset (X, Y, Z) layout."""
    cfg = model.cfg
    box_lists = [] if mode in ("joint", "detOnly") else None
    occ_grids = [] if mode in ("joint", "occOnly") else None
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        batch = make_batch(chunk, cfg)
        out = model.forward(batch["images"], batch["plans"], mode=mode,
                            train=False, workers=workers)
        if box_lists is not None:
            box_lists.extend(decode_detections(
                out["det"], cfg.bev_grid, score_thresh=cfg.score_thresh,
                max_dets=cfg.max_dets, nms_iou=cfg.nms_iou,
                class_ids=cfg.det_class_ids))
        if occ_grids is not None:
            pred = np.argmax(out["occ"].data, axis=1)  # (B, Z, Y, X)
            occ_grids.extend(np.ascontiguousarray(
                pred.transpose(0, 3, 2, 1)).astype(np.uint8))
    return box_lists, occ_grids


def evaluate_model(model, samples, mode="joint", batch_size=2, workers=1):
    """Inference plus metrics; returns a dict with whatever the mode covers."""
    box_lists, occ_grids = predict(model, samples, mode=mode,
                                   batch_size=batch_size, workers=workers)
    out = {"mode": mode, "samples": len(samples)}
    if occ_grids is not None:
        pred = np.stack(occ_grids) if occ_grids else np.zeros((0,), dtype=np.uint8)
        gt = np.stack([s.occupancy for s in samples]) if samples else pred
        per_class, mean = miou(pred, gt)
        out["miou"] = mean
        out["miou_per_class"] = per_class
    if box_lists is not None:
        gt_lists = [s.boxes for s in samples]
        det = eval_detections(box_lists, gt_lists)
        out["detection"] = det
        out["map"] = det.mean_ap
        out["composite"] = det.composite
    return out
