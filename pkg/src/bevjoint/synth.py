"""Deterministic synthetic multi-camera scenes: oriented-box worlds with
ground/sidewalk/manmade stuff, thing objects with exact ground truth,
analytic ray-cast semantic rendering, and voxelization to occupancy labels.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D, clip_polygon, polygon_area
from .config import DataConfig, OccGridSpec
from .palette import FREE_ID, class_id
from .view_transform import CameraParams

log = logging.getLogger(__name__)

MAX_PLACEMENT_RETRIES = 40
FOOTPRINT_OVERLAP_LIMIT = 0.10

# nominal (w, l, h) per thing class; jittered +-10% at generation time
OBJECT_SIZES = {
    "car": (1.9, 4.5, 1.6),
    "pedestrian": (0.65, 0.65, 1.75),
    "barrier": (0.5, 2.4, 1.1),
    "bus": (2.9, 11.0, 3.4),
    "truck": (2.5, 7.0, 2.8),
    "bicycle": (0.6, 1.7, 1.3),
    "motorcycle": (0.75, 2.1, 1.45),
    "trailer": (2.8, 10.0, 3.9),
    "construction_vehicle": (2.7, 6.5, 3.2),
    "traffic_cone": (0.4, 0.4, 0.8),
}

OBJECT_SPEEDS = {"car": 3.0, "truck": 2.5, "bus": 2.0, "motorcycle": 3.0,
                 "bicycle": 1.5, "pedestrian": 1.0}


@dataclass(frozen=True)
class SceneVolume:
    """Oriented box occupied by one semantic class; `thing` volumes outrank
    stuff volumes when voxelizing."""

    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float
    cls: int
    thing: bool


@dataclass
class Scene:
    seed: int
    volumes: list           # priority order: things first, then stuff
    boxes: list             # Box3D ground truth for the thing volumes
    rig: list                # CameraParams


@dataclass
class SceneSample:
    images: np.ndarray       # (N, C, H, W) float32 semantic one-hot + noise
    boxes: list              # Box3D ground truth
    occupancy: np.ndarray    # (X, Y, Z) uint8 class ids
    rig: list                # CameraParams
    depths: np.ndarray = None  # (N, H, W) render depths, consistency tests only


def _f32(x):
    """Snap to float32 so samples survive the f32 dataset format bit-exactly."""
    return float(np.float32(x))


def _f32_arr(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def default_rig(num_cameras=6, image_size=(48, 128), fov_deg=75.0, stride=16,
                radius=1.0, height=1.6):
    """Surround rig: cameras on a ring looking outward at evenly spaced yaws.

    Camera axes are x right, y down, z forward; ego axes are x forward,
    y left, z up. Values are float32-snapped to round-trip the dataset format.
    """
    h, w = image_size
    fx = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    K = np.array([[fx, 0.0, w / 2.0], [0.0, fx, h / 2.0], [0.0, 0.0, 1.0]])
    r_base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    rig = []
    for i in range(num_cameras):
        yaw = 2.0 * math.pi * i / num_cameras
        c, s = math.cos(yaw), math.sin(yaw)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        rig.append(CameraParams(
            intrinsics=_f32_arr(K),
            rotation=_f32_arr(rz @ r_base),
            translation=_f32_arr([radius * c, radius * s, height]),
            image_size=(h, w),
            feature_stride=stride,
        ))
    return rig


def _footprint_overlap(a: Box3D, b: Box3D):
    inter = polygon_area(clip_polygon(a.corners_bev(), b.corners_bev()))
    smaller = min(a.w * a.l, b.w * b.l)
    return inter / smaller if smaller > 0 else 0.0


def _stuff_volumes(rng):
    """Ground plane plus jittered sidewalk strips and peripheral blocks."""
    vols = []
    side_y = float(rng.uniform(26.0, 32.0))
    side_w = float(rng.uniform(5.0, 8.0))
    for sign in (1.0, -1.0):
        vols.append(SceneVolume(0.0, sign * (side_y + side_w / 2), 0.05,
                                side_w, 104.0, 0.5, 0.0,
                                class_id("sidewalk"), False))
    n_blocks = int(rng.integers(2, 5))
    for _ in range(n_blocks):
        ang = float(rng.uniform(0.0, 2.0 * math.pi))
        r = float(rng.uniform(28.0, 44.0))
        bw = float(rng.uniform(6.0, 14.0))
        bl = float(rng.uniform(6.0, 14.0))
        bh = float(rng.uniform(3.0, 6.0))
        vols.append(SceneVolume(r * math.cos(ang), r * math.sin(ang), bh / 2,
                                bw, bl, bh, float(rng.uniform(-0.4, 0.4)),
                                class_id("manmade"), False))
    # driveable ground last: lowest stuff priority, covers the whole scene
    vols.append(SceneVolume(0.0, 0.0, -0.15, 104.0, 104.0, 0.4, 0.0,
                            class_id("driveable_surface"), False))
    return vols


def generate_scene(seed, cfg: DataConfig, image_size=(48, 128), stride=16):
    """Deterministic scene: rejection-sampled thing placements (footprint
    overlap <= 10%), stuff volumes, and the camera rig."""
    rng = np.random.default_rng([int(seed), 0x5CE4E])
    boxes = []
    target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed = 0
    for _ in range(target):
        ok = False
        for _ in range(MAX_PLACEMENT_RETRIES):
            name = cfg.object_classes[int(rng.integers(0, len(cfg.object_classes)))]
            w0, l0, h0 = OBJECT_SIZES[name]
            jitter = rng.uniform(0.9, 1.1, size=3)
            w, l, h = w0 * jitter[0], l0 * jitter[1], h0 * jitter[2]
            r = float(rng.uniform(6.0, 38.0))
            ang = float(rng.uniform(0.0, 2.0 * math.pi))
            yaw = float(rng.uniform(-math.pi, math.pi))
            speed = OBJECT_SPEEDS.get(name, 0.0)
            vel = rng.uniform(-speed, speed, size=2) if speed else np.zeros(2)
            cand = Box3D(x=_f32(r * math.cos(ang)), y=_f32(r * math.sin(ang)),
                         z=_f32(h / 2), w=_f32(w), l=_f32(l), h=_f32(h),
                         yaw=_f32(yaw), vx=_f32(vel[0]), vy=_f32(vel[1]),
                         cls=class_id(name))
            if all(_footprint_overlap(cand, b) <= FOOTPRINT_OVERLAP_LIMIT
                   for b in boxes):
                boxes.append(cand)
                ok = True
                break
        if ok:
            placed += 1
    if placed < target:
        log.info("scene %d: placed %d/%d objects after retries", seed, placed, target)

    volumes = [SceneVolume(b.x, b.y, b.z, b.w, b.l, b.h, b.yaw, b.cls, True)
               for b in boxes]
    volumes += _stuff_volumes(rng)
    rig = default_rig(num_cameras=cfg.cameras, image_size=image_size, stride=stride)
    return Scene(seed=int(seed), volumes=volumes, boxes=boxes, rig=rig)


def voxelize_scene(scene: Scene, occ: OccGridSpec):
    """Class id per voxel center; highest-priority containing volume wins
    (things over stuff, earlier-listed first). Returns (X, Y, Z) uint8."""
    xs, ys, zs = occ.voxel_centers_1d()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.zeros((occ.nx, occ.ny, occ.nz), dtype=np.uint8)
    order = sorted(range(len(scene.volumes)),
                   key=lambda i: (0 if scene.volumes[i].thing else 1, i))
    for i in order:
        v = scene.volumes[i]
        c, s = math.cos(v.yaw), math.sin(v.yaw)
        dx, dy = gx - v.cx, gy - v.cy
        lx = c * dx + s * dy       # along heading
        ly = -s * dx + c * dy      # lateral
        in_xy = (np.abs(lx) <= v.l / 2) & (np.abs(ly) <= v.w / 2)
        in_z = np.abs(zs - v.cz) <= v.h / 2
        mask = in_xy[:, :, None] & in_z[None, None, :]
        grid[mask & (grid == FREE_ID)] = v.cls
    return grid


def render_cameras(scene: Scene, noise_sigma=0.05, seed=None, image_channels=18):
    """Analytic ray-cast against the scene volumes.

    Emits per camera a semantic one-hot-plus-noise image (channel = class id,
    0 is background) and a depth map. Depths are camera-frame z so that a ray
    marched to its depth reproduces the hit point; they are for consistency
    tests only and are never fed to the network.
    """
    rng_seed = scene.seed if seed is None else seed
    n = len(scene.rig)
    h, w = scene.rig[0].image_size
    images = np.zeros((n, image_channels, h, w), dtype=np.float32)
    depths = np.zeros((n, h, w), dtype=np.float64)
    for ci, cam in enumerate(scene.rig):
        cls_map, depth = _render_one(scene, cam)
        depths[ci] = depth
        onehot = np.zeros((image_channels, h, w), dtype=np.float32)
        for cid in np.unique(cls_map):
            onehot[cid][cls_map == cid] = 1.0
        rng = np.random.default_rng([int(rng_seed), 0xCA3, ci])
        noise = rng.normal(0.0, noise_sigma, size=onehot.shape).astype(np.float32)
        images[ci] = onehot + noise
    return images, depths


def _render_one(scene: Scene, cam: CameraParams):
    h, w = cam.image_size
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([us, vs, np.ones_like(us)], axis=-1).reshape(-1, 3)
    k_inv = np.linalg.inv(cam.intrinsics)
    dirs = (pix @ k_inv.T) @ cam.rotation.T  # ray param t equals camera-z depth
    origin = cam.translation
    best_t = np.full(pix.shape[0], np.inf)
    best_cls = np.zeros(pix.shape[0], dtype=np.uint8)
    for v in scene.volumes:
        t = _ray_box_entry(origin, dirs, v)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_cls[closer] = v.cls
    return best_cls.reshape(h, w), best_t.reshape(h, w)


def _ray_box_entry(origin, dirs, v: SceneVolume):
    """Entry distance (ray parameter) for each ray into an oriented box;
    inf where the ray misses or the box is behind the origin."""
    c, s = math.cos(v.yaw), math.sin(v.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # ego -> box
    o = rot @ (origin - np.array([v.cx, v.cy, v.cz]))
    d = dirs @ rot.T
    half = np.array([v.l / 2, v.w / 2, v.h / 2])
    t_near = np.full(dirs.shape[0], -np.inf)
    t_far = np.full(dirs.shape[0], np.inf)
    for ax in range(3):
        da = d[:, ax]
        oa = o[ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[ax] - oa) / da
            t2 = (half[ax] - oa) / da
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        parallel = da == 0.0
        inside = np.abs(oa) <= half[ax]
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    hit = (t_near <= t_far) & (t_far > 0)
    entry = np.where(t_near > 0, t_near, np.inf)  # origin inside a box: skip
    return np.where(hit, entry, np.inf)


def build_sample(seed, cfg: DataConfig, occ: OccGridSpec = None,
                 image_size=(48, 128), stride=16, image_channels=18):
    """Scene -> SceneSample with images, GT boxes and GT occupancy."""
    occ = occ if occ is not None else OccGridSpec()
    scene = generate_scene(seed, cfg, image_size=image_size, stride=stride)
    images, depths = render_cameras(scene, noise_sigma=cfg.noise_sigma,
                                    image_channels=image_channels)
    grid = voxelize_scene(scene, occ)
    return SceneSample(images=images, boxes=scene.boxes, occupancy=grid,
                       rig=scene.rig, depths=depths)


def build_dataset_samples(cfg: DataConfig, occ: OccGridSpec = None,
                          image_size=(48, 128), stride=16, image_channels=18,
                          start=0):
    """Samples i = start..start+samples-1, each fully determined by
    (cfg.seed, i)."""
    out = []
    for i in range(cfg.samples):
        sample_seed = (int(cfg.seed) << 20) + start + i
        out.append(build_sample(sample_seed, cfg, occ=occ, image_size=image_size,
                                stride=stride, image_channels=image_channels))
    return out
