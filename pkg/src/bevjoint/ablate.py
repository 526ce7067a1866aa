"""Ablation harness: sweep graft location x occupancy loss weight x BEV
augmentation with a shared seed, one table row per cell."""

import logging
from dataclasses import dataclass, field

from .bench import bench_model
from .config import EngineConfig
from .evaluate import evaluate_model
from .network import PerceptionModel
from .tensor import ConfigurationError
from .train import Trainer

log = logging.getLogger(__name__)


@dataclass
class AblationRow:
    graft: str
    occ_weight: float
    augment: str
    miou: float = float("nan")
    mean_ap: float = float("nan")
    composite: float = float("nan")
    total_ms: float = float("nan")
    occ_head_ms: float = float("nan")
    error: str = ""


def run_ablation(cfg: EngineConfig, train_samples, eval_samples, bench_reps=3):
    """Train/evaluate every sweep cell; failures are recorded in the row and
    the sweep continues."""
    ab = cfg.ablate
    grafts = ab.grafts or (cfg.model.graft_location,)
    weights = ab.occ_weights or (cfg.train.occ_weight,)
    augments = ab.augments or (cfg.train.bev_augment,)
    if not grafts or not weights or not augments:
        raise ConfigurationError("ablate: no cells (empty sweep list)")
    rows = []
    for graft in grafts:
        for w in weights:
            for aug in augments:
                row = AblationRow(graft=graft, occ_weight=w, augment=aug)
                try:
                    cell = cfg.with_model(graft_location=graft)
                    cell = cell.with_train(occ_weight=w, bev_augment=aug,
                                           mode="joint", steps=ab.steps,
                                           epochs=10 ** 6)
                    trainer = Trainer(cell)
                    trainer.fit(train_samples)
                    metrics = evaluate_model(trainer.model, eval_samples,
                                             mode="joint")
                    row.miou = metrics["miou"]
                    row.mean_ap = metrics["map"]
                    row.composite = metrics["composite"]
                    timing = bench_model(trainer.model, "joint", bench_reps,
                                         warmup=2,
                                         n_cams=len(eval_samples[0].rig))
                    row.total_ms = timing.total_median_ms
                    row.occ_head_ms = timing.stage_ms("occupancyHead")
                except Exception as e:  # cell failures must not kill the sweep
                    log.exception("ablation cell failed: graft=%s w=%s aug=%s",
                                  graft, w, aug)
                    row.error = f"{type(e).__name__}: {e}"
                rows.append(row)
    return rows


def render_ablation_table(rows):
    lines = [f"{'graft':>6} | {'occ_w':>6} | {'augment':>13} | {'mIoU':>7} | "
             f"{'mAP':>7} | {'NDS-proxy':>9} | {'total_ms':>9} | {'occ_ms':>8}"]
    for r in rows:
        if r.error:
            lines.append(f"{r.graft:>6} | {r.occ_weight:>6.2f} | {r.augment:>13} "
                         f"| FAILED: {r.error}")
        else:
            lines.append(
                f"{r.graft:>6} | {r.occ_weight:>6.2f} | {r.augment:>13} | "
                f"{r.miou:>7.4f} | {r.mean_ap:>7.4f} | {r.composite:>9.4f} | "
                f"{r.total_ms:>9.3f} | {r.occ_head_ms:>8.3f}"
            )
    return "\n".join(lines)
