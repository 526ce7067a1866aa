"""The perception network: image encoder + neck, depth net, lift-splat pool,
BEV encoder (backbone + FPN-style neck), selectable occupancy grafting
(a: raw BEV feature, b: fused backbone scales, c: shared neck), the
crop/upsample/channel-to-height occupancy head and the center-heatmap
detection head.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .config import ModelConfig
from .tensor import ConfigurationError, DenseTensor, Parameter
from .view_transform import lift_splat

HEATMAP_PRIOR_BIAS = -4.6  # sigmoid ~ 0.01 foreground prior at init


class Module:
    """Minimal parameter container; submodules are discovered by attribute
    walk in insertion order, which keeps parameter ordering deterministic."""

    def parameters(self):
        out = []
        for v in vars(self).values():
            if isinstance(v, Parameter):
                out.append(v)
            elif isinstance(v, Module):
                out.extend(v.parameters())
            elif isinstance(v, (list, tuple)):
                for item in v:
                    if isinstance(item, Parameter):
                        out.append(item)
                    elif isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def num_parameters(self, trainable_only=False):
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return sum(p.data.size for p in params)


class Conv2d(Module):
    def __init__(self, name, in_c, out_c, k, rng, dtype, stride=1, padding=None,
                 bias=True, bias_init=0.0):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        std = np.sqrt(2.0 / (in_c * k * k))
        w = rng.normal(0.0, std, size=(out_c, in_c, k, k))
        self.weight = Parameter(f"{name}.weight", w.astype(dtype))
        self.bias = None
        if bias:
            b = np.full(out_c, bias_init, dtype=dtype)
            self.bias = Parameter(f"{name}.bias", b)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, name, channels, dtype, momentum=0.1, eps=1e-5):
        self.scale = Parameter(f"{name}.scale", np.ones(channels, dtype=dtype))
        self.shift = Parameter(f"{name}.shift", np.zeros(channels, dtype=dtype))
        self.running_mean = Parameter(f"{name}.running_mean",
                                      np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Parameter(f"{name}.running_var",
                                     np.ones(channels, dtype=dtype), trainable=False)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, mode):
        return ops.batchnorm2d(x, self.scale, self.shift, _ParamStats(self), mode)


class _ParamStats:
    """Adapter exposing BN running stats as plain attrs for ops.batchnorm2d."""

    def __init__(self, bn):
        self._bn = bn
        self.momentum = bn.momentum
        self.eps = bn.eps

    @property
    def mean(self):
        return self._bn.running_mean.data

    @mean.setter
    def mean(self, v):
        self._bn.running_mean.tensor.data = np.ascontiguousarray(v)

    @property
    def var(self):
        return self._bn.running_var.data

    @var.setter
    def var(self, v):
        self._bn.running_var.tensor.data = np.ascontiguousarray(v)


class ConvBNReLU(Module):
    def __init__(self, name, in_c, out_c, k, rng, dtype, stride=1, act=True):
        self.conv = Conv2d(name + ".conv", in_c, out_c, k, rng, dtype,
                           stride=stride, bias=False)
        self.bn = BatchNorm2d(name + ".bn", out_c, dtype)
        self.act = act

    def forward(self, x, mode):
        x = self.bn.forward(self.conv.forward(x), mode)
        return ops.relu(x) if self.act else x


class BasicBlock(Module):
    """Two 3x3 convs with a (projected) skip connection."""

    def __init__(self, name, in_c, out_c, rng, dtype, stride=1):
        self.conv1 = ConvBNReLU(name + ".conv1", in_c, out_c, 3, rng, dtype, stride=stride)
        self.conv2 = ConvBNReLU(name + ".conv2", out_c, out_c, 3, rng, dtype, act=False)
        self.proj = None
        if stride != 1 or in_c != out_c:
            self.proj = ConvBNReLU(name + ".proj", in_c, out_c, 1, rng, dtype,
                                   stride=stride, act=False)

    def forward(self, x, mode):
        y = self.conv2.forward(self.conv1.forward(x, mode), mode)
        skip = self.proj.forward(x, mode) if self.proj is not None else x
        return ops.relu(ops.add(y, skip))


class ImageEncoder(Module):
    """Desk-scale stand-in for a pretrained 2D backbone: stem + 4 residual
    stages at overall stride 16. Two normalized pixel-coordinate channels are
    appended to the input so per-pixel geometry is learnable from semantic
    renderings."""

    def __init__(self, name, in_channels, widths, rng, dtype):
        if len(widths) != 4:
            raise ConfigurationError("image encoder needs 4 stage widths")
        self.stem = ConvBNReLU(name + ".stem", in_channels + 2, widths[0], 3, rng,
                               dtype, stride=2)
        self.stage1 = BasicBlock(name + ".stage1", widths[0], widths[0], rng, dtype, stride=2)
        self.stage2 = BasicBlock(name + ".stage2", widths[0], widths[1], rng, dtype, stride=2)
        self.stage3 = BasicBlock(name + ".stage3", widths[1], widths[2], rng, dtype, stride=2)
        self.stage4 = BasicBlock(name + ".stage4", widths[2], widths[3], rng, dtype, stride=1)
        self.out_channels = widths[3]
        self._dtype = dtype
        self._coord_cache = {}

    def _coords(self, b, h, w):
        key = (b, h, w)
        arr = self._coord_cache.get(key)
        if arr is None:
            v = np.linspace(-1.0, 1.0, h, dtype=self._dtype)
            u = np.linspace(-1.0, 1.0, w, dtype=self._dtype)
            vv, uu = np.meshgrid(v, u, indexing="ij")
            arr = np.broadcast_to(np.stack([vv, uu])[None], (b, 2, h, w)).copy()
            self._coord_cache[key] = arr
        return DenseTensor(arr)

    def forward(self, x, mode):
        b, _, h, w = x.data.shape
        x = ops.concat_channels([x, self._coords(b, h, w)])
        x = self.stem.forward(x, mode)
        x = self.stage1.forward(x, mode)
        x = self.stage2.forward(x, mode)
        x = self.stage3.forward(x, mode)
        return self.stage4.forward(x, mode)


class FpnLssNeck(Module):
    """Fuse the deepest stage (upsampled) with the shallowest at full
    resolution; the 'FL-<channels>' module of the config format."""

    def __init__(self, name, shallow_c, deep_c, out_c, factor, rng, dtype):
        self.factor = factor
        self.conv1 = ConvBNReLU(name + ".conv1", shallow_c + deep_c, out_c, 3, rng, dtype)
        self.conv2 = ConvBNReLU(name + ".conv2", out_c, out_c, 3, rng, dtype)

    def forward(self, shallow, deep, mode):
        up = ops.bilinear_upsample(deep, self.factor)
        x = ops.concat_channels([shallow, up])
        return self.conv2.forward(self.conv1.forward(x, mode), mode)


class BevBackbone(Module):
    """Three residual stages over the BEV map; stage spatial sizes are
    S, S/2, S/4 (the '3b-<c1>-<c2>-<c3>' module)."""

    def __init__(self, name, in_c, channels, rng, dtype):
        if len(channels) != 3:
            raise ConfigurationError("bev backbone needs exactly 3 stage widths")
        c1, c2, c3 = channels
        self.stage1 = BasicBlock(name + ".stage1", in_c, c1, rng, dtype, stride=1)
        self.stage2 = BasicBlock(name + ".stage2", c1, c2, rng, dtype, stride=2)
        self.stage3 = BasicBlock(name + ".stage3", c2, c3, rng, dtype, stride=2)
        self.channels = tuple(channels)

    def forward(self, x, mode):
        f1 = self.stage1.forward(x, mode)
        f2 = self.stage2.forward(f1, mode)
        f3 = self.stage3.forward(f2, mode)
        return [f1, f2, f3]


class BevEncoder(Module):
    def __init__(self, name, in_c, backbone_channels, neck_c, rng, dtype):
        self.backbone = BevBackbone(name + ".backbone", in_c, backbone_channels, rng, dtype)
        self.neck = FpnLssNeck(name + ".neck", backbone_channels[0],
                               backbone_channels[2], neck_c, 4, rng, dtype)

    def forward(self, x, mode):
        feats = self.backbone.forward(x, mode)
        neck = self.neck.forward(feats[0], feats[2], mode)
        return feats, neck


class GraftFusion(Module):
    """Occupancy-branch fusion for grafting on the BEV backbone: upsample the
    deeper stages to full BEV resolution, concatenate all three, reduce 1x1
    to the neck width."""

    def __init__(self, name, backbone_channels, out_c, rng, dtype):
        c1, c2, c3 = backbone_channels
        self.reduce = ConvBNReLU(name + ".reduce", c1 + c2 + c3, out_c, 1, rng, dtype)

    def forward(self, feats, mode):
        f1, f2, f3 = feats
        up2 = ops.bilinear_upsample(f2, 2)
        up3 = ops.bilinear_upsample(f3, 4)
        return self.reduce.forward(ops.concat_channels([f1, up2, up3]), mode)


class OccupancyHead(Module):
    """Center-crop to the occupancy x/y extent, multi-conv stack ending at
    z_bins*classes channels, bilinear upsample to the voxel grid resolution,
    then channel-to-height. Crop-before-convs is the default so the branch
    cost is paid on the cropped map; the order is configurable for ablations."""

    def __init__(self, name, in_c, channels, s_bev, occ_xy_cells, occ_z_bins,
                 occ_classes, crop_order, rng, dtype):
        crop = s_bev * 100
        if crop % 128 != 0:
            raise ConfigurationError(
                f"occupancy crop 100/128 * S_BEV is not an integer for S_BEV={s_bev}"
            )
        self.crop_size = crop // 128
        if (s_bev - self.crop_size) % 2 != 0:
            raise ConfigurationError(f"occupancy crop of {self.crop_size} cannot be centered")
        self.crop_offset = (s_bev - self.crop_size) // 2
        if occ_xy_cells % self.crop_size != 0:
            raise ConfigurationError(
                f"occupancy grid of {occ_xy_cells} cells is not an integer upsample "
                f"of the {self.crop_size}-cell crop"
            )
        self.upsample_factor = occ_xy_cells // self.crop_size
        self.z_bins = occ_z_bins
        self.classes = occ_classes
        self.crop_order = crop_order
        convs = []
        prev = in_c
        for i, c in enumerate(channels[:-1]):
            convs.append(ConvBNReLU(f"{name}.conv{i + 1}", prev, c, 3, rng, dtype))
            prev = c
        self.convs = convs
        self.final = Conv2d(f"{name}.logits", prev, channels[-1], 1, rng, dtype, bias=True)

    def _crop(self, x):
        o, c = self.crop_offset, self.crop_size
        return ops.crop2d(x, o, o, c, c)

    def forward(self, tap, mode):
        x = self._crop(tap) if self.crop_order == "crop_first" else tap
        for conv in self.convs:
            x = conv.forward(x, mode)
        x = self.final.forward(x)
        if self.crop_order != "crop_first":
            x = self._crop(x)
        x = ops.bilinear_upsample(x, self.upsample_factor)
        return ops.channel_to_height(x, self.z_bins, self.classes)


@dataclass
class DetectionRaw:
    """Dense center-heatmap head outputs, all at BEV resolution."""

    heatmap: DenseTensor      # (B, K, S, S) logits
    center_offset: DenseTensor  # (B, 2, S, S)
    z_center: DenseTensor     # (B, 1, S, S)
    log_size: DenseTensor     # (B, 3, S, S)
    yaw_sincos: DenseTensor   # (B, 2, S, S)
    velocity: DenseTensor     # (B, 2, S, S)

    def regression_maps(self):
        return (self.center_offset, self.z_center, self.log_size,
                self.yaw_sincos, self.velocity)


REGRESSION_LAYOUT = (("center_offset", 2), ("z_center", 1), ("log_size", 3),
                     ("yaw_sincos", 2), ("velocity", 2))


class DetectionHead(Module):
    """CenterPoint-style head: shared 3x3 trunk, then parallel 1x1 branches
    for the class heatmap and each regression group."""

    def __init__(self, name, in_c, head_c, num_classes, rng, dtype):
        self.trunk = ConvBNReLU(name + ".trunk", in_c, head_c, 3, rng, dtype)
        self.heatmap = Conv2d(name + ".heatmap", head_c, num_classes, 1, rng, dtype,
                              bias=True, bias_init=HEATMAP_PRIOR_BIAS)
        self.branches = []
        for bname, width in REGRESSION_LAYOUT:
            self.branches.append(Conv2d(f"{name}.{bname}", head_c, width, 1, rng,
                                        dtype, bias=True))

    def forward(self, x, mode):
        t = self.trunk.forward(x, mode)
        maps = [branch.forward(t) for branch in self.branches]
        return DetectionRaw(self.heatmap.forward(t), *maps)


class PerceptionModel(Module):
    """The full camera-to-BEV multi-task network."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(seed)
        bins = cfg.depth_bins
        self.image_encoder = ImageEncoder("image_encoder", cfg.image_channels,
                                          cfg.image_widths, rng, dtype)
        self.image_neck = ConvBNReLU("image_neck", cfg.image_widths[3],
                                     cfg.image_neck_channels, 1, rng, dtype)
        self.depth_net = Conv2d("depth_net", cfg.image_neck_channels,
                                bins.count + cfg.lss_channels, 1, rng, dtype, bias=True)
        self.bev_encoder = BevEncoder("bev_encoder", cfg.lss_channels,
                                      cfg.bev_backbone_channels,
                                      cfg.bev_neck_channels, rng, dtype)
        occ_in = {"a": cfg.lss_channels, "b": cfg.bev_neck_channels,
                  "c": cfg.bev_neck_channels}[cfg.graft_location]
        self.occ_adapter = None
        if cfg.graft_location == "a":
            # private replica of the BEV encoder: nothing downstream of the
            # raw BEV feature is shared with the detection task
            self.occ_adapter = BevEncoder("occ_branch.encoder", cfg.lss_channels,
                                          cfg.bev_backbone_channels,
                                          cfg.bev_neck_channels, rng, dtype)
            occ_in = cfg.bev_neck_channels
        elif cfg.graft_location == "b":
            self.occ_fusion = GraftFusion("occ_branch.fusion",
                                          cfg.bev_backbone_channels,
                                          cfg.bev_neck_channels, rng, dtype)
        self.occ_head = OccupancyHead("occ_head", occ_in, cfg.occ_head_channels,
                                      cfg.bev_cells, cfg.occ_grid.nx, cfg.occ_z_bins,
                                      cfg.occ_classes, cfg.occ_crop_order, rng, dtype)
        self.det_head = DetectionHead("det_head", cfg.bev_neck_channels,
                                      cfg.det_head_channels, len(cfg.det_classes),
                                      rng, dtype)
        ids = [p.id for p in self.parameters()]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("duplicate parameter ids in model")

    # -- stages -----------------------------------------------------------

    def encode_images(self, images, mode):
        """images: (B, N, C, H, W) -> per-camera feature maps (B*N, C', fh, fw)."""
        x = images if isinstance(images, DenseTensor) else DenseTensor(
            np.asarray(images, dtype=self.cfg.np_dtype))
        b, n, c, h, w = x.data.shape
        if (h, w) != tuple(self.cfg.image_size):
            raise ConfigurationError(
                f"images are {h}x{w}, model expects {self.cfg.image_size}")
        if c != self.cfg.image_channels:
            raise ConfigurationError(
                f"images have {c} channels, model expects {self.cfg.image_channels}")
        x = ops.reshape(x, (b * n, c, h, w))
        feats = self.image_encoder.forward(x, mode)
        return self.image_neck.forward(feats, mode)

    def view_transform(self, cam_feats, plans, batch, n_cams, workers=1):
        d = self.cfg.depth_bins.count
        out = self.depth_net.forward(cam_feats)
        depth_logits = ops.slice_channels(out, 0, d)
        context = ops.slice_channels(out, d, d + self.cfg.lss_channels)
        fh, fw = cam_feats.data.shape[2:]
        context = ops.reshape(context, (batch, n_cams, self.cfg.lss_channels, fh, fw))
        depth_logits = ops.reshape(depth_logits, (batch, n_cams, d, fh, fw))
        return lift_splat(context, depth_logits, plans, workers=workers)

    def graft_tap(self, bev_feature, backbone_feats, neck_feature, mode="eval"):
        """The tensor feeding the occupancy branch at the configured location."""
        loc = self.cfg.graft_location
        if loc == "a":
            return bev_feature
        if loc == "b":
            return self.occ_fusion.forward(backbone_feats, mode)
        return neck_feature

    def occupancy_branch(self, tap, mode):
        x = tap
        if self.occ_adapter is not None:
            _, x = self.occ_adapter.forward(x, mode)
        return self.occ_head.forward(x, mode)

    # -- full forward -------------------------------------------------------

    def forward(self, images, plans, mode="joint", train=False, timings=None,
                workers=1):
        """Run the network; `mode` selects which heads execute. Returns a dict
        with whatever tensors the mode produces. When `timings` is a dict,
        per-stage wall-clock seconds are appended to it."""
        if mode not in ("joint", "occOnly", "detOnly"):
            raise ConfigurationError(f"unknown run mode {mode!r}")
        bn_mode = "train" if train else "eval"
        if isinstance(images, DenseTensor):
            b, n = images.data.shape[:2]
        else:
            images = np.asarray(images)
            b, n = images.shape[:2]

        out = {}
        t0 = time.perf_counter()
        cam_feats = self.encode_images(images, bn_mode)
        t1 = time.perf_counter()
        bev = self.view_transform(cam_feats, plans, b, n, workers=workers)
        out["bev_feature"] = bev
        t2 = time.perf_counter()

        need_shared_encoder = mode != "occOnly" or self.cfg.graft_location in ("b", "c")
        backbone_feats = neck = None
        if need_shared_encoder:
            backbone_feats, neck = self.bev_encoder.forward(bev, bn_mode)
            out["backbone_feats"] = backbone_feats
            out["neck"] = neck
        t3 = time.perf_counter()

        t_det = t3
        if mode in ("joint", "detOnly"):
            out["det"] = self.det_head.forward(neck, bn_mode)
            t_det = time.perf_counter()

        t_occ = t_det
        if mode in ("joint", "occOnly"):
            tap = self.graft_tap(bev, backbone_feats, neck, bn_mode)
            out["occ"] = self.occupancy_branch(tap, bn_mode)
            t_occ = time.perf_counter()

        if timings is not None:
            timings.setdefault("imageEncode", []).append(t1 - t0)
            timings.setdefault("viewTransform", []).append(t2 - t1)
            timings.setdefault("bevEncode", []).append(t3 - t2)
            timings.setdefault("detectionHead", []).append(t_det - t3)
            timings.setdefault("occupancyHead", []).append(t_occ - t_det)
        return out

    # -- reporting ----------------------------------------------------------

    def _component_ids(self):
        shared_trunk = (self.image_encoder.parameters()
                        + self.image_neck.parameters()
                        + self.depth_net.parameters())
        bev_backbone = self.bev_encoder.backbone.parameters()
        bev_neck = self.bev_encoder.neck.parameters()
        det = self.det_head.parameters()
        occ = self.occ_head.parameters()
        if self.occ_adapter is not None:
            occ = self.occ_adapter.parameters() + occ
        if self.cfg.graft_location == "b":
            occ = self.occ_fusion.parameters() + occ
        return shared_trunk, bev_backbone, bev_neck, det, occ

    def task_parameters(self, task):
        """Parameters reachable by one task's forward path."""
        trunk, backbone, neck, det, occ = self._component_ids()
        if task == "det":
            return trunk + backbone + neck + det
        if task == "occ":
            loc = self.cfg.graft_location
            if loc == "a":
                return trunk + occ
            if loc == "b":
                return trunk + backbone + occ
            return trunk + backbone + neck + occ
        raise ConfigurationError(f"unknown task {task!r}")

    def sharing_report(self):
        det_params = {p.id: p.data.size for p in self.task_parameters("det")}
        occ_params = {p.id: p.data.size for p in self.task_parameters("occ")}
        shared = sorted(set(det_params) & set(occ_params))
        return {
            "graft": self.cfg.graft_location,
            "det_param_count": sum(det_params.values()),
            "occ_param_count": sum(occ_params.values()),
            "shared_param_count": sum(det_params[i] for i in shared),
            "shared_ids": shared,
            "total_param_count": self.num_parameters(),
        }

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()
