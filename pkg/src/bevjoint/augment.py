"""BEV augmentation: per-axis scene mirroring (the default policy) and
optional scene-level yaw rotation for the augmentation ablation.

Mirrors act on everything jointly so the sample stays self-consistent:
boxes/velocities are reflected, the occupancy grid indices are reversed, and
camera extrinsics pick up the reflection so the unchanged rendered images
stay geometrically consistent with the flipped world.
"""

import math
from dataclasses import replace

import numpy as np

from .boxes import Box3D
from .synth import SceneSample
from .view_transform import CameraParams


def _reflect_cam(cam: CameraParams, mirror):
    m = np.diag(mirror).astype(np.float64)
    return CameraParams(
        intrinsics=cam.intrinsics,
        rotation=m @ cam.rotation,
        translation=m @ cam.translation,
        image_size=cam.image_size,
        feature_stride=cam.feature_stride,
    )


def _wrap_pi(a):
    if a > math.pi:
        return a - 2.0 * math.pi
    if a <= -math.pi:
        return a + 2.0 * math.pi
    return a


def flip_sample(sample: SceneSample, flip_x=False, flip_y=False):
    """Mirror the scene about the requested ego axes.

    flip_y mirrors across the x-z plane (y coordinates negate): box y and vy
    negate, yaw negates, occupancy axis 1 reverses. flip_x negates x: yaw maps
    to pi - yaw, occupancy axis 0 reverses. Double application about the same
    axis restores the sample (yaw under flip_x within float rounding of pi).
    """
    if not flip_x and not flip_y:
        return sample
    sx = -1.0 if flip_x else 1.0
    sy = -1.0 if flip_y else 1.0
    boxes = []
    for b in sample.boxes:
        yaw = b.yaw
        if flip_y:
            yaw = -yaw
        if flip_x:
            yaw = _wrap_pi(math.pi - yaw)
        boxes.append(Box3D(x=sx * b.x, y=sy * b.y, z=b.z, w=b.w, l=b.l, h=b.h,
                           yaw=yaw, vx=sx * b.vx, vy=sy * b.vy, cls=b.cls,
                           score=b.score))
    occ = sample.occupancy
    if flip_x:
        occ = occ[::-1, :, :]
    if flip_y:
        occ = occ[:, ::-1, :]
    mirror = np.array([sx, sy, 1.0])
    rig = [_reflect_cam(c, mirror) for c in sample.rig]
    return SceneSample(images=sample.images, boxes=boxes,
                       occupancy=np.ascontiguousarray(occ), rig=rig,
                       depths=sample.depths)


def rotate_sample(sample: SceneSample, angle):
    """Rotate the scene about +z by `angle` (radians): boxes and extrinsics
    rotate exactly; the occupancy grid is nearest-voxel resampled (cells whose
    source falls outside the extent become free)."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    boxes = []
    for b in sample.boxes:
        x, y = c * b.x - s * b.y, s * b.x + c * b.y
        vx, vy = c * b.vx - s * b.vy, s * b.vx + c * b.vy
        boxes.append(Box3D(x=x, y=y, z=b.z, w=b.w, l=b.l, h=b.h,
                           yaw=_wrap_pi(b.yaw + angle), vx=vx, vy=vy,
                           cls=b.cls, score=b.score))
    occ = _rotate_occupancy(sample.occupancy, angle)
    rig = [CameraParams(intrinsics=cam.intrinsics, rotation=rot @ cam.rotation,
                        translation=rot @ cam.translation,
                        image_size=cam.image_size,
                        feature_stride=cam.feature_stride)
           for cam in sample.rig]
    return SceneSample(images=sample.images, boxes=boxes, occupancy=occ,
                       rig=rig, depths=sample.depths)


def _rotate_occupancy(grid, angle):
    nx, ny = grid.shape[0], grid.shape[1]
    # voxel centers in normalized index space, rotate backwards, nearest lookup
    ix = np.arange(nx) + 0.5 - nx / 2.0
    iy = np.arange(ny) + 0.5 - ny / 2.0
    gx, gy = np.meshgrid(ix, iy, indexing="ij")
    c, s = math.cos(-angle), math.sin(-angle)
    src_x = np.rint(c * gx - s * gy - 0.5 + nx / 2.0).astype(np.int64)
    src_y = np.rint(s * gx + c * gy - 0.5 + ny / 2.0).astype(np.int64)
    valid = (src_x >= 0) & (src_x < nx) & (src_y >= 0) & (src_y < ny)
    out = np.zeros_like(grid)
    out[valid] = grid[src_x[valid], src_y[valid], :][...]
    return out


def augment_sample(sample: SceneSample, policy, rng):
    """Apply the configured BEV augmentation policy using `rng` draws.

    policy: none | flip | flip_rotation. Flip tosses one coin per axis;
    rotation draws a uniform angle in +-22.5 degrees.
    """
    if policy == "none":
        return sample
    if policy not in ("flip", "flip_rotation"):
        raise ValueError(f"unknown augmentation policy {policy!r}")
    fx = bool(rng.random() < 0.5)
    fy = bool(rng.random() < 0.5)
    out = flip_sample(sample, flip_x=fx, flip_y=fy)
    if policy == "flip_rotation":
        angle = float(rng.uniform(-math.pi / 8.0, math.pi / 8.0))
        out = rotate_sample(out, angle)
    return out
