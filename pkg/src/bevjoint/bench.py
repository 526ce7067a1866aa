"""Per-stage latency benchmark: monotonic wall clock, median-of-R after
warmups, per graft-location variants plus the det-only baseline.

Absolute milliseconds are engine- and host-specific; reports are meant for
orderings and ratios only, and every table says which scope it timed.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import decode_detections
from .config import EngineConfig
from .network import PerceptionModel
from .synth import default_rig
from .view_transform import plan_for_rig

STAGES = ("imageEncode", "viewTransform", "bevEncode", "detectionHead",
          "occupancyHead", "decode")


@dataclass
class StageTiming:
    stage: str
    median_ms: float
    p95_ms: float


@dataclass
class BenchResult:
    label: str
    mode: str
    graft: str
    reps: int
    stages: list = field(default_factory=list)
    total_median_ms: float = 0.0
    total_p95_ms: float = 0.0

    def stage_ms(self, name):
        for s in self.stages:
            if s.stage == name:
                return s.median_ms
        return 0.0

    def stage_sum_ms(self):
        return sum(s.median_ms for s in self.stages)


def _median(xs):
    return float(np.median(xs))


def _p95(xs):
    xs = sorted(xs)
    idx = max(0, int(np.ceil(0.95 * len(xs))) - 1)
    return float(xs[idx])


def bench_model(model, mode, reps, warmup=5, seed=0, batch=1, n_cams=6,
                workers=1, label=""):
    """Time one model variant: per-stage segments are recorded inside each
    timed pipeline run so stage medians add up to the whole-pipeline median
    up to glue."""
    cfg = model.cfg
    rng = np.random.default_rng([seed, 0xBE9C])
    rig = default_rig(num_cameras=n_cams, image_size=cfg.image_size,
                      stride=cfg.feature_stride)
    plan = plan_for_rig(rig, cfg.depth_bins, cfg.bev_grid)
    images = rng.normal(0.0, 1.0, size=(batch, n_cams, cfg.image_channels,
                                        cfg.image_size[0], cfg.image_size[1])
                        ).astype(cfg.np_dtype)
    plans = [plan] * batch

    stage_samples = {s: [] for s in STAGES}
    totals = []
    for rep in range(warmup + reps):
        timings = {}
        t0 = time.perf_counter()
        out = model.forward(images, plans, mode=mode, train=False,
                            timings=timings, workers=workers)
        t_dec0 = time.perf_counter()
        if "det" in out:
            decode_detections(out["det"], cfg.bev_grid,
                              score_thresh=cfg.score_thresh,
                              max_dets=cfg.max_dets, nms_iou=cfg.nms_iou,
                              class_ids=cfg.det_class_ids)
        t1 = time.perf_counter()
        if rep < warmup:
            continue
        totals.append((t1 - t0) * 1e3)
        for s in STAGES:
            if s == "decode":
                stage_samples[s].append((t1 - t_dec0) * 1e3)
            else:
                stage_samples[s].append(timings.get(s, [0.0])[0] * 1e3)

    result = BenchResult(label=label or f"graft={model.cfg.graft_location}",
                         mode=mode, graft=model.cfg.graft_location, reps=reps)
    for s in STAGES:
        result.stages.append(StageTiming(s, _median(stage_samples[s]),
                                         _p95(stage_samples[s])))
    result.total_median_ms = _median(totals)
    result.total_p95_ms = _p95(totals)
    return result


def run_graft_bench(cfg: EngineConfig, reps=10, warmup=5, seed=0, workers=1):
    """The grafting-location comparison: joint pipeline at grafts a/b/c plus
    the det-only baseline (shared config, same seed)."""
    results = []
    n_cams = cfg.data.cameras
    for graft in ("a", "b", "c"):
        variant = cfg.with_model(graft_location=graft)
        model = PerceptionModel(variant.model, seed=seed)
        results.append(bench_model(model, "joint", reps, warmup=warmup,
                                   seed=seed, n_cams=n_cams, workers=workers,
                                   label=f"joint graft={graft}"))
    det_cfg = cfg.with_model(graft_location="c")
    det_model = PerceptionModel(det_cfg.model, seed=seed)
    results.append(bench_model(det_model, "detOnly", reps, warmup=warmup,
                               seed=seed, n_cams=n_cams, workers=workers,
                               label="detOnly"))
    return results


def render_bench_table(results):
    lines = ["scope: single-process engine wall time; orderings/ratios only"]
    header = f"{'variant':>18} | {'mode':>8} | " + " | ".join(
        f"{s:>13}" for s in STAGES) + f" | {'total_ms':>9} | {'p95_ms':>9}"
    lines.append(header)
    for r in results:
        row = f"{r.label:>18} | {r.mode:>8} | " + " | ".join(
            f"{r.stage_ms(s):>13.3f}" for s in STAGES)
        row += f" | {r.total_median_ms:>9.3f} | {r.total_p95_ms:>9.3f}"
        lines.append(row)
    joint_c = next((r for r in results if r.graft == "c" and r.mode == "joint"), None)
    det_only = next((r for r in results if r.mode == "detOnly"), None)
    if joint_c and det_only and det_only.total_median_ms > 0:
        inc = joint_c.total_median_ms - det_only.total_median_ms
        lines.append(
            f"occupancy increment at graft=c: {inc:.3f} ms "
            f"({100.0 * inc / det_only.total_median_ms:.1f}% of det-only total)"
        )
    return "\n".join(lines)
