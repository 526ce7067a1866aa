"""Training: batch assembly with BEV augmentation, the joint optimizer step
(forward both heads as enabled, clip, AdamW update), step reports and the
non-finite-loss recovery policy."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import augment_sample
from .config import EngineConfig
from .losses import LossWeights, detection_loss, joint_loss, occupancy_loss
from .network import PerceptionModel
from .optim import AdamW, clip_global_norm
from .targets import encode_detection_targets, stack_targets
from .tensor import ConfigurationError
from .view_transform import plan_for_rig

log = logging.getLogger(__name__)


@dataclass
class StepReport:
    step: int
    mode: str
    losses: dict
    grad_norm: float
    lr: float
    duration_s: float
    aborted: bool = False

    def line(self):
        parts = [f"step={self.step}", f"mode={self.mode}"]
        for k in sorted(self.losses):
            parts.append(f"{k}={self.losses[k]:.6f}")
        parts.append(f"grad_norm={self.grad_norm:.4f}")
        parts.append(f"lr={self.lr:.6g}")
        parts.append(f"time_ms={self.duration_s * 1e3:.1f}")
        if self.aborted:
            parts.append("aborted=1")
        return " ".join(parts)


def make_batch(samples, model_cfg, augment_policy="none", rng=None):
    """Stack samples into network inputs plus encoded targets."""
    if augment_policy != "none":
        if rng is None:
            raise ConfigurationError("augmentation requires an rng")
        samples = [augment_sample(s, augment_policy, rng) for s in samples]
    grid = model_cfg.bev_grid
    bins = model_cfg.depth_bins
    images = np.stack([s.images for s in samples]).astype(model_cfg.np_dtype)
    plans = [plan_for_rig(s.rig, bins, grid) for s in samples]
    targets = stack_targets([
        encode_detection_targets(s.boxes, grid, model_cfg.det_class_ids,
                                 z_min=model_cfg.det_z_min,
                                 z_max=model_cfg.det_z_max)
        for s in samples
    ])
    occ = np.stack([s.occupancy for s in samples])
    return {"images": images, "plans": plans, "det_targets": targets, "occ": occ}


class Trainer:
    """Owns the model, optimizer and the step loop. One trainer per process;
    parameter updates are never concurrent."""

    def __init__(self, cfg: EngineConfig, model: PerceptionModel = None):
        self.cfg = cfg
        tc = cfg.train
        self.model = model if model is not None else PerceptionModel(cfg.model,
                                                                     seed=tc.seed)
        self.weights = LossWeights(detection=tc.det_weight, occupancy=tc.occ_weight)
        self.optimizer = AdamW(self.model.trainable_parameters(),
                               lr=tc.learning_rate, betas=(tc.beta1, tc.beta2),
                               weight_decay=tc.weight_decay)
        self.mode = tc.mode
        self.step_count = 0
        self._lr_halved = False
        self.rng = np.random.default_rng([tc.seed, 0x57E9])

    def joint_step(self, batch):
        """One optimizer step; in single-task modes the other head is neither
        run nor updated, so its parameters stay bit-frozen."""
        t0 = time.perf_counter()
        tc = self.cfg.train
        out = self.model.forward(batch["images"], batch["plans"], mode=self.mode,
                                 train=True)
        det_pair = None
        occ_term = None
        if "det" in out:
            det_pair = detection_loss(out["det"], batch["det_targets"])
        if "occ" in out:
            occ_term = occupancy_loss(out["occ"], batch["occ"], self.weights)
        total, parts = joint_loss(det_pair, occ_term, self.weights)

        if not np.isfinite(parts["total"]):
            self.model.zero_grads()
            if not self._lr_halved:
                self.optimizer.lr *= 0.5
                self._lr_halved = True
                log.warning("non-finite loss at step %d; halving lr to %g",
                            self.step_count, self.optimizer.lr)
            return StepReport(step=self.step_count, mode=self.mode, losses=parts,
                              grad_norm=float("nan"), lr=self.optimizer.lr,
                              duration_s=time.perf_counter() - t0, aborted=True)

        total.backward()
        norm = clip_global_norm(self.optimizer.params, tc.grad_clip)
        self.optimizer.step()
        self.optimizer.zero_grad()
        self.model.zero_grads()
        self.step_count += 1
        return StepReport(step=self.step_count, mode=self.mode, losses=parts,
                          grad_norm=norm, lr=self.optimizer.lr,
                          duration_s=time.perf_counter() - t0)

    def fit(self, samples, on_report=None):
        """Run the configured epoch/step budget over `samples`; yields nothing,
        reports go to `on_report` (and the epoch hook returns checkpoints to
        the caller via the returned report list)."""
        tc = self.cfg.train
        reports = []
        bs = tc.batch_size
        max_steps = tc.steps if tc.steps > 0 else None
        done = False
        for _ in range(tc.epochs if max_steps is None else 10 ** 9):
            order = self.rng.permutation(len(samples))
            for i in range(0, len(samples) - bs + 1, bs):
                batch_samples = [samples[j] for j in order[i : i + bs]]
                batch = make_batch(batch_samples, self.cfg.model,
                                   augment_policy=tc.bev_augment, rng=self.rng)
                report = self.joint_step(batch)
                reports.append(report)
                if on_report:
                    on_report(report)
                if max_steps is not None and self.step_count >= max_steps:
                    done = True
                    break
            if done:
                break
        return reports
