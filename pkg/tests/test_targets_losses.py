"""Target encoding against the closed-form Gaussian, loss behavior at optima,
lambda-linearity, and decode/encode inversion."""

import math

import numpy as np
import pytest

from bevjoint.boxes import Box3D, decode_detections
from bevjoint.losses import (LossWeights, detection_loss, gaussian_focal_loss,
                             joint_loss, masked_l1_loss, occupancy_loss)
from bevjoint.network import DetectionRaw
from bevjoint.palette import class_id
from bevjoint.targets import encode_detection_targets, stack_targets
from bevjoint.tensor import DataError, DenseTensor
from bevjoint.view_transform import BevGridSpec

GRID = BevGridSpec(cells=128)
CLASS_IDS = (class_id("car"), class_id("pedestrian"), class_id("barrier"))


def box_at(x, y, cls="car", yaw=0.3, z=0.8, vx=1.0, vy=-0.5):
    return Box3D(x=x, y=y, z=z, w=1.9, l=4.5, h=1.6, yaw=yaw, vx=vx, vy=vy,
                 cls=class_id(cls))


class TestEncodeTargets:
    def test_origin_box_peak_is_one(self):
        t = encode_detection_targets([box_at(0.0, 0.0)], GRID, CLASS_IDS)
        # origin falls in cell (64, 64)
        assert t.heatmap[0, 64, 64] == 1.0
        assert t.heatmap.max() == 1.0
        assert t.valid[64, 64]
        assert t.dropped == 0

    def test_empty_list(self):
        t = encode_detection_targets([], GRID, CLASS_IDS)
        assert t.heatmap.sum() == 0.0
        assert not t.valid.any()

    def test_out_of_extent_dropped_with_count(self):
        boxes = [box_at(100.0, 0.0), box_at(0.0, 0.0, z=5.0), box_at(3.0, 3.0)]
        t = encode_detection_targets(boxes, GRID, CLASS_IDS)
        assert t.dropped == 2
        assert t.valid.sum() == 1

    @pytest.mark.parametrize("seed", range(3))
    def test_gaussian_matches_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        boxes = [box_at(float(rng.uniform(-40, 40)), float(rng.uniform(-40, 40)))
                 for _ in range(3)]
        t = encode_detection_targets(boxes, GRID, CLASS_IDS)
        from bevjoint.targets import MIN_GAUSSIAN_RADIUS, gaussian_radius

        cs = GRID.cell_size
        heat = np.zeros_like(t.heatmap[0])
        for b in boxes:
            col = int((b.x - GRID.x_min) / cs)
            row = int((b.y - GRID.y_min) / cs)
            radius = max(MIN_GAUSSIAN_RADIUS,
                         int(gaussian_radius(b.l / cs, b.w / cs)))
            sigma = (2 * radius + 1) / 6.0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    r, c = row + dy, col + dx
                    if 0 <= r < 128 and 0 <= c < 128:
                        val = math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
                        heat[r, c] = max(heat[r, c], val)
            heat[row, col] = 1.0
        np.testing.assert_allclose(t.heatmap[0], heat, atol=1e-6)

    def test_same_cell_overwrite_documented(self):
        a = box_at(0.05, 0.05, vx=1.0)
        b = box_at(0.3, 0.3, vx=9.0)  # same cell (64, 64)
        t = encode_detection_targets([a, b], GRID, CLASS_IDS)
        assert t.velocity[0, 64, 64] == np.float32(9.0)  # later box wins
        assert t.heatmap[0, 64, 64] == 1.0

    def test_min_radius_two(self):
        cone = Box3D(x=0, y=0, z=0.4, w=0.4, l=0.4, h=0.8, yaw=0.0,
                     cls=class_id("barrier"))
        t = encode_detection_targets([cone], GRID, (class_id("barrier"),))
        # a radius-2 gaussian reaches two cells away
        assert t.heatmap[0, 64, 66] > 0.05


class TestDecodeEncodeInverse:
    @pytest.mark.parametrize("seed", range(5))
    def test_recovered_within_half_cell(self, seed):
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(4):
            boxes.append(Box3D(
                x=float(rng.uniform(-45, 45)), y=float(rng.uniform(-45, 45)),
                z=float(rng.uniform(-1, 2)), w=float(rng.uniform(0.5, 3)),
                l=float(rng.uniform(0.5, 8)), h=float(rng.uniform(0.5, 3)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
                vx=float(rng.uniform(-3, 3)), vy=float(rng.uniform(-3, 3)),
                cls=class_id("car")))
        # keep only boxes in distinct cells for exact recovery
        cs = GRID.cell_size
        cells = {}
        for b in boxes:
            cells[(int((b.x - GRID.x_min) / cs), int((b.y - GRID.y_min) / cs))] = b
        boxes = list(cells.values())
        t = encode_detection_targets(boxes, GRID, (class_id("car"),))
        batch = stack_targets([t])
        raw = DetectionRaw(
            heatmap=DenseTensor(np.where(batch["heatmap"] == 1.0, 30.0, -30.0)
                                .astype(np.float32)),
            center_offset=DenseTensor(batch["regression"][:, 0:2]),
            z_center=DenseTensor(batch["regression"][:, 2:3]),
            log_size=DenseTensor(batch["regression"][:, 3:6]),
            yaw_sincos=DenseTensor(batch["regression"][:, 6:8]),
            velocity=DenseTensor(batch["regression"][:, 8:10]),
        )
        decoded = decode_detections(raw, GRID, score_thresh=0.5, max_dets=50,
                                    nms_iou=0.5, class_ids=[class_id("car")])[0]
        assert len(decoded) == len(boxes)
        decoded_by_cell = {(int((b.x - GRID.x_min) / cs),
                            int((b.y - GRID.y_min) / cs)): b for b in decoded}
        for cell, orig in cells.items():
            d = decoded_by_cell[cell]
            assert math.hypot(d.x - orig.x, d.y - orig.y) < 0.4
            diff = abs(d.yaw - orig.yaw) % (2 * math.pi)
            assert min(diff, 2 * math.pi - diff) < 1e-5
            assert abs(d.z - orig.z) < 1e-5
            np.testing.assert_allclose([d.w, d.l, d.h],
                                       [orig.w, orig.l, orig.h], rtol=1e-4)


class TestDetectionLoss:
    def _perfect_raw(self, batch):
        eps = 1e-4
        p = np.where(batch["heatmap"] >= 1.0, 1.0 - eps, eps)
        logits = np.log(p / (1.0 - p)).astype(np.float32)
        return DetectionRaw(
            heatmap=DenseTensor(logits, requires_grad=True),
            center_offset=DenseTensor(batch["regression"][:, 0:2]),
            z_center=DenseTensor(batch["regression"][:, 2:3]),
            log_size=DenseTensor(batch["regression"][:, 3:6]),
            yaw_sincos=DenseTensor(batch["regression"][:, 6:8]),
            velocity=DenseTensor(batch["regression"][:, 8:10]),
        )

    def test_near_optimum_small_loss(self):
        t = encode_detection_targets([box_at(5.0, -3.0), box_at(-20.0, 10.0)],
                                     GRID, CLASS_IDS)
        batch = stack_targets([t])
        raw = self._perfect_raw(batch)
        loss, parts = detection_loss(raw, batch)
        assert loss.item() < 1e-3

    def test_exact_regression_l1_zero(self):
        t = encode_detection_targets([box_at(5.0, -3.0)], GRID, CLASS_IDS)
        batch = stack_targets([t])
        raw = self._perfect_raw(batch)
        _, parts = detection_loss(raw, batch)
        assert parts["det_reg"] == 0.0


class TestOccupancyLoss:
    def test_weight_zero_switches_off(self):
        logits = DenseTensor(np.random.default_rng(0)
                             .normal(size=(1, 18, 16, 8, 8)).astype(np.float32),
                             requires_grad=True)
        gt = np.zeros((1, 8, 8, 16), dtype=np.uint8)
        loss = occupancy_loss(logits, gt, LossWeights(occupancy=0.0))
        assert loss.item() == 0.0
        loss.backward()
        np.testing.assert_array_equal(logits.grad, 0.0)

    def test_uniform_logits_ln18_weighted(self):
        logits = DenseTensor(np.zeros((1, 18, 16, 8, 8), dtype=np.float32))
        gt = np.zeros((1, 8, 8, 16), dtype=np.uint8)
        for lam in (1.0, 5.0, 8.0):
            loss = occupancy_loss(logits, gt, LossWeights(occupancy=lam))
            assert abs(loss.item() - lam * math.log(18.0)) < 1e-5 * lam

    def test_bad_class_id_is_data_error(self):
        logits = DenseTensor(np.zeros((1, 18, 16, 8, 8), dtype=np.float32))
        gt = np.full((1, 8, 8, 16), 18, dtype=np.uint8)
        with pytest.raises(DataError):
            occupancy_loss(logits, gt, LossWeights())

    def test_visibility_mask_restricts_support(self):
        rng = np.random.default_rng(1)
        logits = DenseTensor(rng.normal(size=(1, 18, 16, 8, 8)).astype(np.float32))
        gt = rng.integers(0, 18, size=(1, 8, 8, 16)).astype(np.uint8)
        full = occupancy_loss(logits, gt, LossWeights(occupancy=1.0))
        mask = np.zeros((1, 8, 8, 16), dtype=bool)
        mask[0, :4] = True
        masked = occupancy_loss(logits, gt, LossWeights(occupancy=1.0),
                                visibility_mask=mask)
        assert masked.item() != full.item()


class TestLambdaLinearity:
    def test_loss_linear_in_lambda(self):
        rng = np.random.default_rng(2)
        logits = DenseTensor(rng.normal(size=(1, 18, 16, 10, 10))
                             .astype(np.float32))
        gt = rng.integers(0, 18, size=(1, 10, 10, 16)).astype(np.uint8)
        t = encode_detection_targets([box_at(5.0, -3.0)], GRID, CLASS_IDS)
        batch = stack_targets([t])
        heat = rng.normal(size=(1, 3, 128, 128)).astype(np.float32)
        raw = DetectionRaw(
            heatmap=DenseTensor(heat),
            center_offset=DenseTensor(rng.normal(size=(1, 2, 128, 128)).astype(np.float32)),
            z_center=DenseTensor(rng.normal(size=(1, 1, 128, 128)).astype(np.float32)),
            log_size=DenseTensor(rng.normal(size=(1, 3, 128, 128)).astype(np.float32)),
            yaw_sincos=DenseTensor(rng.normal(size=(1, 2, 128, 128)).astype(np.float32)),
            velocity=DenseTensor(rng.normal(size=(1, 2, 128, 128)).astype(np.float32)),
        )

        def total(lam):
            det = detection_loss(raw, batch)
            occ = occupancy_loss(logits, gt, LossWeights(occupancy=lam))
            t, _ = joint_loss(det, occ, LossWeights(occupancy=lam))
            return t.item()

        a = 0.7
        d1 = total(2 * a) - total(a)
        d2 = total(a) - total(0.0)
        assert abs(d1 - d2) < 1e-6 * max(1.0, abs(total(a)))
