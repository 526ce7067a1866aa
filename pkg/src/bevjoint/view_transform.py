"""Lift-splat view transformation: frustum generation, a precomputed
pixel/depth-bin to BEV-cell plan, and the differentiable scatter-add pooling.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigurationError, DenseTensor, check_finite
from .ops import _t


@dataclass(frozen=True)
class CameraParams:
    """Pinhole camera with camera-to-ego extrinsics.

    `rotation` maps camera coordinates (x right, y down, z forward) into the
    ego frame; reflections (det = -1) are allowed so BEV flips can be folded
    into the rig.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple  # (height, width) pixels
    feature_stride: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if abs(np.linalg.det(K)) < 1e-12:
            raise ConfigurationError("camera intrinsics are not invertible")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ConfigurationError("camera rotation is not orthonormal within 1e-6")
        s = self.feature_stride
        if s < 1 or (s & (s - 1)) != 0:
            raise ConfigurationError(f"feature_stride must be a positive power of two, got {s}")

    def feature_grid(self):
        h, w = self.image_size
        return h // self.feature_stride, w // self.feature_stride

    def digest_bytes(self):
        parts = [
            self.intrinsics.tobytes(),
            self.rotation.tobytes(),
            self.translation.tobytes(),
            np.asarray(self.image_size, dtype=np.int64).tobytes(),
            np.asarray([self.feature_stride], dtype=np.int64).tobytes(),
        ]
        return b"".join(parts)


@dataclass(frozen=True)
class DepthBinSpec:
    near: float
    far: float
    step: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError("depth bin count must be >= 1")
        if abs(self.near + self.count * self.step - self.far) > 1e-9:
            raise ConfigurationError(
                f"depth bins inconsistent: near {self.near} + {self.count} * {self.step} != far {self.far}"
            )

    def centers(self):
        return self.near + (np.arange(self.count, dtype=np.float64) + 0.5) * self.step


@dataclass(frozen=True)
class BevGridSpec:
    """Square metric BEV grid; side length in cells is the S_BEV of the model."""

    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = -51.2
    y_max: float = 51.2
    z_min: float = -5.0
    z_max: float = 5.4
    cells: int = 128

    def __post_init__(self):
        cs_x = (self.x_max - self.x_min) / self.cells
        cs_y = (self.y_max - self.y_min) / self.cells
        if cs_x != cs_y:
            raise ConfigurationError("BEV grid must be square: x/y cell sizes differ")
        if cs_x <= 0:
            raise ConfigurationError("BEV grid extent must be positive")

    @property
    def cell_size(self):
        return (self.x_max - self.x_min) / self.cells

    def cell_center(self, row, col):
        cs = self.cell_size
        return (self.x_min + (col + 0.5) * cs, self.y_min + (row + 0.5) * cs)


@dataclass
class LiftSplatPlan:
    """Flat mapping from kept (camera, depth-bin, pixel) entries to BEV cells.

    Entries are stored in (camera, bin, v, u) enumeration order; SKIP points
    are filtered at build time so the splat loop is branch-free. The plan is a
    pure function of rig geometry and grid spec.
    """

    n_cams: int
    n_bins: int
    feat_h: int
    feat_w: int
    cells: int
    cam: np.ndarray = field(repr=False)  # (E,) camera index
    bin: np.ndarray = field(repr=False)  # (E,) depth-bin index
    pix: np.ndarray = field(repr=False)  # (E,) flat v*feat_w + u
    cell: np.ndarray = field(repr=False)  # (E,) flat row*cells + col

    @property
    def n_entries(self):
        return int(self.cam.shape[0])

    @property
    def campix(self):
        return self.cam * (self.feat_h * self.feat_w) + self.pix

    @property
    def entry(self):
        p = self.feat_h * self.feat_w
        return (self.cam * self.n_bins + self.bin) * p + self.pix


def build_frustum(cam: CameraParams, bins: DepthBinSpec):
    """3-D ego-frame points for every (depth bin, feature pixel), indexed
    (bin, v, u, xyz). Pixels sit at feature-cell centers of the image grid."""
    fh, fw = cam.feature_grid()
    s = cam.feature_stride
    us = (np.arange(fw, dtype=np.float64) + 0.5) * s
    vs = (np.arange(fh, dtype=np.float64) + 0.5) * s
    ds = bins.centers()
    d, v, u = np.meshgrid(ds, vs, us, indexing="ij")
    pix = np.stack([u * d, v * d, d], axis=-1)  # (D, fh, fw, 3)
    k_inv = np.linalg.inv(cam.intrinsics)
    cam_pts = pix @ k_inv.T
    ego = cam_pts @ cam.rotation.T + cam.translation
    return ego


def build_plan(frustums, grid: BevGridSpec):
    """Map frustum points to BEV cells; out-of-extent points become SKIP and
    are dropped. `frustums` is the per-camera list from build_frustum."""
    cams, bins_, pixs, cells_ = [], [], [], []
    n_bins = frustums[0].shape[0]
    fh, fw = frustums[0].shape[1], frustums[0].shape[2]
    cs = grid.cell_size
    for ci, fr in enumerate(frustums):
        if fr.shape != (n_bins, fh, fw, 3):
            raise ConfigurationError("all cameras must share one frustum shape")
        pts = fr.reshape(-1, 3)
        col = np.floor((pts[:, 0] - grid.x_min) / cs).astype(np.int64)
        row = np.floor((pts[:, 1] - grid.y_min) / cs).astype(np.int64)
        keep = (
            (col >= 0)
            & (col < grid.cells)
            & (row >= 0)
            & (row < grid.cells)
            & (pts[:, 2] >= grid.z_min)
            & (pts[:, 2] < grid.z_max)
        )
        idx = np.nonzero(keep)[0]
        b, p = np.divmod(idx, fh * fw)
        cams.append(np.full(idx.shape, ci, dtype=np.int64))
        bins_.append(b)
        pixs.append(p)
        cells_.append(row[idx] * grid.cells + col[idx])
    return LiftSplatPlan(
        n_cams=len(frustums),
        n_bins=int(n_bins),
        feat_h=int(fh),
        feat_w=int(fw),
        cells=grid.cells,
        cam=np.concatenate(cams),
        bin=np.concatenate(bins_),
        pix=np.concatenate(pixs),
        cell=np.concatenate(cells_),
    )


_PLAN_CACHE = {}


def plan_for_rig(rig, bins: DepthBinSpec, grid: BevGridSpec):
    """Cached plan build keyed on rig geometry; flips/rotations of the same
    rig hit distinct cache slots."""
    h = hashlib.sha256()
    for cam in rig:
        h.update(cam.digest_bytes())
    h.update(np.asarray([bins.near, bins.far, bins.step], dtype=np.float64).tobytes())
    h.update(np.asarray([bins.count], dtype=np.int64).tobytes())
    h.update(
        np.asarray(
            [grid.x_min, grid.x_max, grid.y_min, grid.y_max, grid.z_min, grid.z_max],
            dtype=np.float64,
        ).tobytes()
    )
    h.update(np.asarray([grid.cells], dtype=np.int64).tobytes())
    key = h.hexdigest()
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        plan = build_plan([build_frustum(c, bins) for c in rig], grid)
        _PLAN_CACHE[key] = plan
    return plan


def _softmax(x, axis):
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _splat_one(out_cells, cell_idx, prod):
    np.add.at(out_cells, cell_idx, prod)


def _splat_parallel(out_cells, cell_idx, prod, workers, cells):
    # partition by BEV row so each output cell is written by exactly one worker
    rows = cell_idx // cells
    bounds = np.linspace(0, cells, workers + 1).astype(np.int64)
    order = np.argsort(rows, kind="stable")  # per-cell entry order is preserved
    sorted_cells = cell_idx[order]
    sorted_prod = prod[order]
    sorted_rows = rows[order]
    splits = np.searchsorted(sorted_rows, bounds)

    def work(i):
        lo, hi = splits[i], splits[i + 1]
        if lo < hi:
            np.add.at(out_cells, sorted_cells[lo:hi], sorted_prod[lo:hi])

    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(work, range(workers)))


def lift_splat(features, depth_logits, plans, workers=1):
    """Pool per-camera image features into the BEV grid.

    features: (B, N, C, fh, fw); depth_logits: (B, N, D, fh, fw);
    plans: one LiftSplatPlan per batch sample (rigs may differ under
    augmentation). Depth logits are softmaxed over bins per pixel; each BEV
    cell accumulates feature * depth_prob over its plan entries, in plan
    order, so results are bit-reproducible.
    """
    ft, dt = _t(features), _t(depth_logits)
    if ft.data.ndim != 5 or dt.data.ndim != 5:
        raise ConfigurationError("lift_splat expects 5-D (B, N, C|D, fh, fw) tensors")
    B, N, C, fh, fw = ft.data.shape
    Bd, Nd, D, fhd, fwd = dt.data.shape
    if isinstance(plans, LiftSplatPlan):
        plans = [plans] * B
    if len(plans) != B:
        raise ConfigurationError(f"need one plan per sample: {len(plans)} plans for B={B}")
    p0 = plans[0]
    if (Bd, Nd, fhd, fwd) != (B, N, fh, fw):
        raise ConfigurationError("features and depth logits disagree on (B, N, fh, fw)")
    for pl in plans:
        if (pl.n_cams, pl.n_bins, pl.feat_h, pl.feat_w) != (N, D, fh, fw):
            raise ConfigurationError(
                f"plan built for ({pl.n_cams} cams, {pl.n_bins} bins, "
                f"{pl.feat_h}x{pl.feat_w}) does not match features "
                f"({N} cams, {D} bins, {fh}x{fw})"
            )
    S = p0.cells
    P = fh * fw
    probs = _softmax(dt.data, axis=2)
    feats_flat = ft.data.reshape(B, N, C, P)
    probs_flat = probs.reshape(B, N, D, P)

    out = np.zeros((B, S * S, C), dtype=ft.data.dtype)
    prods = []
    for b, pl in enumerate(plans):
        fv = feats_flat[b, pl.cam, :, pl.pix]  # (E, C)
        w = probs_flat[b, pl.cam, pl.bin, pl.pix]  # (E,)
        prod = fv * w[:, None]
        prods.append((fv, w))
        if workers > 1:
            _splat_parallel(out[b], pl.cell, prod, workers, S)
        else:
            _splat_one(out[b], pl.cell, prod)
    out_data = np.ascontiguousarray(out.transpose(0, 2, 1).reshape(B, C, S, S))
    check_finite(out_data, "lift_splat")

    def backward(g):
        g_cells = g.reshape(B, C, S * S).transpose(0, 2, 1)  # (B, S*S, C)
        dfeat = np.zeros((B, N * P, C), dtype=ft.data.dtype)
        dw_full = np.zeros((B, N, D, P), dtype=ft.data.dtype)
        for b, pl in enumerate(plans):
            fv, w = prods[b]
            dprod = g_cells[b][pl.cell]  # (E, C)
            np.add.at(dfeat[b], pl.campix, dprod * w[:, None])
            dw = (dprod * fv).sum(axis=1)  # (E,)
            dwf = dw_full[b].reshape(-1)
            dwf[pl.entry] = dw  # entries are unique, direct assign
        dprobs = dw_full.reshape(B, N, D, fh, fw)
        # softmax backward over the bin axis
        dot = (dprobs * probs).sum(axis=2, keepdims=True)
        dlogits = probs * (dprobs - dot)
        dfeats = dfeat.reshape(B, N, P, C).transpose(0, 1, 3, 2).reshape(B, N, C, fh, fw)
        return np.ascontiguousarray(dfeats), np.ascontiguousarray(dlogits)

    req = any(p.requires_grad or p._parents for p in (ft, dt))
    return DenseTensor(out_data, requires_grad=req, parents=(ft, dt), backward_fn=backward)
