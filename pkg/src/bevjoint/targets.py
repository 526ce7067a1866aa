"""Center-heatmap target encoding: per-class Gaussian peaks plus dense
regression targets written at each box's center cell."""

import math
from dataclasses import dataclass

import numpy as np

from .boxes import Box3D
from .view_transform import BevGridSpec

MIN_GAUSSIAN_RADIUS = 2
GAUSSIAN_OVERLAP = 0.1


def gaussian_radius(height, width, min_overlap=GAUSSIAN_OVERLAP):
    """Largest radius keeping IoU >= min_overlap for a shifted box of the
    given footprint (the CornerNet construction, three quadratic cases)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    sq1 = math.sqrt(max(b1 ** 2 - 4 * a1 * c1, 0.0))
    r1 = (b1 - sq1) / (2 * a1)

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    sq2 = math.sqrt(max(b2 ** 2 - 4 * a2 * c2, 0.0))
    r2 = (b2 - sq2) / (2 * a2)

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    sq3 = math.sqrt(max(b3 ** 2 - 4 * a3 * c3, 0.0))
    r3 = (b3 + sq3) / (2 * a3)
    return min(r1, r2, r3)


def draw_gaussian(heatmap, row, col, radius):
    """Max-compose an isotropic Gaussian of the given integer radius onto a
    (S, S) map at (row, col); sigma follows the (2r+1)/6 convention."""
    s = heatmap.shape[0]
    sigma = (2 * radius + 1) / 6.0
    r0, r1 = max(0, row - radius), min(s, row + radius + 1)
    c0, c1 = max(0, col - radius), min(s, col + radius + 1)
    ys = np.arange(r0, r1) - row
    xs = np.arange(c0, c1) - col
    g = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma ** 2))
    np.maximum(heatmap[r0:r1, c0:c1], g, out=heatmap[r0:r1, c0:c1])


@dataclass
class DetectionTargets:
    heatmap: np.ndarray        # (K, S, S) in [0, 1]
    center_offset: np.ndarray  # (2, S, S)
    z_center: np.ndarray       # (1, S, S)
    log_size: np.ndarray       # (3, S, S)
    yaw_sincos: np.ndarray     # (2, S, S)
    velocity: np.ndarray       # (2, S, S)
    valid: np.ndarray          # (S, S) bool, true at box center cells
    dropped: int = 0           # boxes outside the detection extent

    def regression_stack(self):
        return np.concatenate([self.center_offset, self.z_center, self.log_size,
                               self.yaw_sincos, self.velocity], axis=0)


def encode_detection_targets(boxes, grid: BevGridSpec, class_ids,
                             z_min=-5.0, z_max=3.0):
    """Encode one sample's boxes. Boxes outside the detection extent are
    dropped and counted. When two boxes share a center cell the later one
    overwrites the regression targets; heatmaps keep the elementwise max."""
    s = grid.cells
    k = len(class_ids)
    id_to_head = {cid: i for i, cid in enumerate(class_ids)}
    t = DetectionTargets(
        heatmap=np.zeros((k, s, s), dtype=np.float32),
        center_offset=np.zeros((2, s, s), dtype=np.float32),
        z_center=np.zeros((1, s, s), dtype=np.float32),
        log_size=np.zeros((3, s, s), dtype=np.float32),
        yaw_sincos=np.zeros((2, s, s), dtype=np.float32),
        velocity=np.zeros((2, s, s), dtype=np.float32),
        valid=np.zeros((s, s), dtype=bool),
    )
    cs = grid.cell_size
    for box in boxes:
        if box.cls not in id_to_head:
            t.dropped += 1
            continue
        inside = (grid.x_min <= box.x < grid.x_max
                  and grid.y_min <= box.y < grid.y_max
                  and z_min <= box.z <= z_max)
        if not inside:
            t.dropped += 1
            continue
        col_f = (box.x - grid.x_min) / cs
        row_f = (box.y - grid.y_min) / cs
        col, row = int(col_f), int(row_f)
        radius = max(MIN_GAUSSIAN_RADIUS,
                     int(gaussian_radius(box.l / cs, box.w / cs)))
        draw_gaussian(t.heatmap[id_to_head[box.cls]], row, col, radius)
        t.heatmap[id_to_head[box.cls], row, col] = 1.0
        t.center_offset[0, row, col] = col_f - (col + 0.5)
        t.center_offset[1, row, col] = row_f - (row + 0.5)
        t.z_center[0, row, col] = box.z
        t.log_size[:, row, col] = np.log([box.w, box.l, box.h])
        t.yaw_sincos[0, row, col] = math.sin(box.yaw)
        t.yaw_sincos[1, row, col] = math.cos(box.yaw)
        t.velocity[0, row, col] = box.vx
        t.velocity[1, row, col] = box.vy
        t.valid[row, col] = True
    return t


def stack_targets(per_sample):
    """Batch a list of DetectionTargets into arrays keyed like DetectionRaw."""
    return {
        "heatmap": np.stack([t.heatmap for t in per_sample]),
        "regression": np.stack([t.regression_stack() for t in per_sample]),
        "valid": np.stack([t.valid for t in per_sample]),
    }
