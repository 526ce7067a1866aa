"""3-D boxes, rotated-rectangle IoU via polygon clipping, greedy BEV NMS and
the center-heatmap decode."""

import math
from dataclasses import dataclass

import numpy as np

from .view_transform import BevGridSpec


@dataclass
class Box3D:
    """Detection box: center in meters, size (w lateral, l along heading, h),
    yaw about +z, planar velocity, palette class id and score."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0
    cls: int = 0
    score: float = 1.0

    def corners_bev(self):
        """Footprint corners (4, 2), counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def to_array(self):
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h,
                         self.yaw, self.vx, self.vy, float(self.cls),
                         self.score, 0.0], dtype=np.float32)

    @staticmethod
    def from_array(a):
        return Box3D(x=float(a[0]), y=float(a[1]), z=float(a[2]), w=float(a[3]),
                     l=float(a[4]), h=float(a[5]), yaw=float(a[6]), vx=float(a[7]),
                     vy=float(a[8]), cls=int(round(float(a[9]))), score=float(a[10]))


def polygon_area(poly):
    """Shoelace area of an (N, 2) polygon."""
    if len(poly) < 3:
        return 0.0
    x = np.asarray(poly)[:, 0]
    y = np.asarray(poly)[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clip of `subject` by convex `clipper` (both (N, 2),
    counter-clockwise). Returns the intersection polygon vertex list."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            return []
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []
        prev = input_pts[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= 0
        for cur in input_pts:
            cur_in = ex * (cur[1] - ay) - ey * (cur[0] - ax) >= 0
            if cur_in != prev_in:
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0:
                    t = (ey * (prev[0] - ax) - ex * (prev[1] - ay)) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return output


def rotated_iou(box_a: Box3D, box_b: Box3D):
    """BEV IoU of two yaw-rotated rectangles."""
    ca = box_a.corners_bev()
    cb = box_b.corners_bev()
    inter = polygon_area(clip_polygon(ca, cb))
    if inter <= 0.0:
        return 0.0
    area_a = box_a.w * box_a.l
    area_b = box_b.w * box_b.l
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def bev_nms(boxes, iou_thresh):
    """Greedy descending-score suppression by rotated BEV IoU. Ties in score
    keep the earlier-index box first, which makes results deterministic."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    keep = []
    for i in order:
        if all(rotated_iou(boxes[i], boxes[j]) <= iou_thresh for j in keep):
            keep.append(i)
    return [boxes[i] for i in keep]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _local_maxima(heat):
    """3x3 local-maximum mask per class map (K, S, S)."""
    pad = np.pad(heat, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    windows = [pad[:, 1 + dy : 1 + dy + heat.shape[1], 1 + dx : 1 + dx + heat.shape[2]]
               for dy in (-1, 0, 1) for dx in (-1, 0, 1) if not (dy == 0 and dx == 0)]
    return np.all([heat >= w for w in windows], axis=0)


def decode_detections(raw, grid: BevGridSpec, score_thresh=0.1, max_dets=100,
                      nms_iou=0.2, class_ids=None):
    """Decode DetectionRaw maps into per-sample Box3D lists.

    Peaks are 3x3 local maxima of the sigmoid heatmap above `score_thresh`,
    capped at `max_dets` by score, then greedy BEV NMS. Centers use cell-center
    addressing: x = x_min + (col + 0.5 + offset_x) * cell_size.
    """
    heat = _sigmoid(np.asarray(raw.heatmap.data, dtype=np.float64))
    offset = np.asarray(raw.center_offset.data, dtype=np.float64)
    z_center = np.asarray(raw.z_center.data, dtype=np.float64)
    log_size = np.asarray(raw.log_size.data, dtype=np.float64)
    yaw_sc = np.asarray(raw.yaw_sincos.data, dtype=np.float64)
    vel = np.asarray(raw.velocity.data, dtype=np.float64)
    B, K = heat.shape[:2]
    cs = grid.cell_size
    results = []
    for b in range(B):
        peaks = _local_maxima(heat[b]) & (heat[b] > score_thresh)
        ks, rows, cols = np.nonzero(peaks)
        scores = heat[b, ks, rows, cols]
        if len(scores) > max_dets:
            top = np.argsort(-scores, kind="stable")[:max_dets]
            ks, rows, cols, scores = ks[top], rows[top], cols[top], scores[top]
        boxes = []
        for k, r, c, sc in zip(ks, rows, cols, scores):
            ox, oy = offset[b, 0, r, c], offset[b, 1, r, c]
            x = grid.x_min + (c + 0.5 + ox) * cs
            y = grid.y_min + (r + 0.5 + oy) * cs
            w, l, h = np.exp(log_size[b, :, r, c])
            yaw = math.atan2(yaw_sc[b, 0, r, c], yaw_sc[b, 1, r, c])
            cls = class_ids[k] if class_ids is not None else int(k)
            boxes.append(Box3D(x=float(x), y=float(y), z=float(z_center[b, 0, r, c]),
                               w=float(w), l=float(l), h=float(h), yaw=float(yaw),
                               vx=float(vel[b, 0, r, c]), vy=float(vel[b, 1, r, c]),
                               cls=cls, score=float(sc)))
        results.append(bev_nms(boxes, nms_iou) if boxes else [])
    return results
