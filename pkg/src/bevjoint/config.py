"""Model/training/data configuration: dataclasses, the flat text config
format, module-name tokens (LSS-64,128x128,1.0 / 3b-128-256-512 / FL-256 /
MH-128-256-288 / CenterPoint) and config digests.
"""

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .palette import NUM_CLASSES, THING_CLASSES, class_id
from .tensor import ConfigurationError
from .view_transform import BevGridSpec, DepthBinSpec

GRAFT_NAMES = {
    "a": "a",
    "b": "b",
    "c": "c",
    "bevfeature": "a",
    "bevbackbone": "b",
    "bevneck": "c",
    "bev_feature": "a",
    "bev_backbone": "b",
    "bev_neck": "c",
}

# desk-scale residual stand-ins for the pretrained backbones named in configs
IMAGE_ENCODER_PROFILES = {
    "R50": (32, 64, 128, 256),
    "R101": (64, 128, 256, 512),
}


@dataclass(frozen=True)
class OccGridSpec:
    """Voxel volume for occupancy: 0.4 m cells over +-40 m x/y, -1..5.4 m z."""

    x_min: float = -40.0
    x_max: float = 40.0
    y_min: float = -40.0
    y_max: float = 40.0
    z_min: float = -1.0
    z_max: float = 5.4
    voxel: float = 0.4

    def __post_init__(self):
        for lo, hi, n in ((self.x_min, self.x_max, self.nx),
                          (self.y_min, self.y_max, self.ny),
                          (self.z_min, self.z_max, self.nz)):
            if abs((hi - lo) / self.voxel - n) > 1e-9:
                raise ConfigurationError("occupancy extent is not a whole number of voxels")

    @property
    def nx(self):
        return int(round((self.x_max - self.x_min) / self.voxel))

    @property
    def ny(self):
        return int(round((self.y_max - self.y_min) / self.voxel))

    @property
    def nz(self):
        return int(round((self.z_max - self.z_min) / self.voxel))

    def voxel_centers_1d(self):
        xs = self.x_min + (np.arange(self.nx) + 0.5) * self.voxel
        ys = self.y_min + (np.arange(self.ny) + 0.5) * self.voxel
        zs = self.z_min + (np.arange(self.nz) + 0.5) * self.voxel
        return xs, ys, zs


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (64, 176)   # (height, width)
    image_channels: int = NUM_CLASSES
    image_widths: tuple = (32, 64, 128, 256)
    image_neck_channels: int = 256
    feature_stride: int = 16
    lss_channels: int = 64
    bev_cells: int = 128
    bev_pool_scale: float = 1.0
    depth_near: float = 1.0
    depth_far: float = 60.0
    depth_step: float = 1.0
    bev_backbone_channels: tuple = (128, 256, 512)
    bev_neck_channels: int = 256
    graft_location: str = "c"
    occ_head_channels: tuple = (128, 256, 288)
    occ_classes: int = NUM_CLASSES
    occ_z_bins: int = 16
    occ_crop_order: str = "crop_first"
    det_head: str = "CenterPoint"
    det_head_channels: int = 64
    det_classes: tuple = ("car", "pedestrian", "barrier")
    score_thresh: float = 0.1
    max_dets: int = 100
    nms_iou: float = 0.2
    bev_extent: float = 51.2
    bev_z_min: float = -5.0
    bev_z_max: float = 5.4
    det_z_min: float = -5.0
    det_z_max: float = 3.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.graft_location not in ("a", "b", "c"):
            raise ConfigurationError(
                f"graft: location must be one of a|b|c (BevFeature|BevBackbone|BevNeck), "
                f"got {self.graft_location!r}"
            )
        if self.occ_head_channels[-1] != self.occ_classes * self.occ_z_bins:
            raise ConfigurationError(
                f"occ_head: final channel count {self.occ_head_channels[-1]} != "
                f"occ_classes {self.occ_classes} * occ_z_bins {self.occ_z_bins}"
            )
        if self.occ_crop_order not in ("crop_first", "conv_first"):
            raise ConfigurationError("occ_crop_order must be crop_first|conv_first")
        if self.det_head != "CenterPoint":
            raise ConfigurationError(f"det_head: unsupported head {self.det_head!r}")
        if self.image_size[0] % self.feature_stride or self.image_size[1] % self.feature_stride:
            raise ConfigurationError("image_size must be divisible by the feature stride")
        for name in self.det_classes:
            class_id(name)

    @property
    def depth_bins(self):
        count = int(round((self.depth_far - self.depth_near) / self.depth_step))
        return DepthBinSpec(self.depth_near, self.depth_near + count * self.depth_step,
                            self.depth_step, count)

    @property
    def bev_grid(self):
        return BevGridSpec(
            x_min=-self.bev_extent, x_max=self.bev_extent,
            y_min=-self.bev_extent, y_max=self.bev_extent,
            z_min=self.bev_z_min, z_max=self.bev_z_max,
            cells=self.bev_cells,
        )

    @property
    def occ_grid(self):
        return OccGridSpec()

    @property
    def det_class_ids(self):
        return tuple(class_id(n) for n in self.det_classes)

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"           # joint | occOnly | detOnly
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 35.0
    epochs: int = 1
    steps: int = 0                # optional hard cap on optimizer steps (0 = by epochs)
    batch_size: int = 2
    bev_augment: str = "none"     # none | flip | flip_rotation
    det_weight: float = 1.0
    occ_weight: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("joint", "occOnly", "detOnly"):
            raise ConfigurationError(f"mode: must be joint|occOnly|detOnly, got {self.mode!r}")
        if self.bev_augment not in ("none", "flip", "flip_rotation"):
            raise ConfigurationError(
                f"bev_augment: must be none|flip|flip_rotation, got {self.bev_augment!r}"
            )
        if self.det_weight < 0 or self.occ_weight < 0:
            raise ConfigurationError("loss weights must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    samples: int = 64
    cameras: int = 6
    min_objects: int = 2
    max_objects: int = 8
    object_classes: tuple = ("car", "pedestrian", "barrier")
    noise_sigma: float = 0.05
    seed: int = 0
    train_path: str = ""
    eval_path: str = ""

    def __post_init__(self):
        for name in self.object_classes:
            if name not in THING_CLASSES:
                raise ConfigurationError(f"object_classes: {name!r} is not a thing class")
        if self.min_objects > self.max_objects:
            raise ConfigurationError("min_objects > max_objects")


@dataclass(frozen=True)
class AblateConfig:
    grafts: tuple = ()
    occ_weights: tuple = ()
    augments: tuple = ()
    steps: int = 40


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    text: str = ""

    def digest(self):
        return config_digest(self.text)

    def with_model(self, **kw):
        cfg = replace(self, model=replace(self.model, **kw))
        return replace(cfg, text=render_config(cfg))

    def with_train(self, **kw):
        cfg = replace(self, train=replace(self.train, **kw))
        return replace(cfg, text=render_config(cfg))


# ---------------------------------------------------------------------------
# token parsing


def parse_lss_token(tok, line=0):
    """'LSS-64,128x128,1.0' -> (channels, cells, scale)."""
    try:
        head, grid, sc = tok.split(",")
        if not head.upper().startswith("LSS-"):
            raise ValueError
        channels = int(head[4:])
        gx, gy = grid.lower().split("x")
        if int(gx) != int(gy):
            raise ValueError("BEV grid must be square")
        return channels, int(gx), float(sc)
    except ValueError as e:
        raise ConfigurationError(f"line {line}: lss: bad token {tok!r} ({e})") from None


def parse_stage_token(tok, prefix, line=0):
    """'3b-128-256-512' / 'MH-128-256-288' -> channel tuple."""
    if not tok.lower().startswith(prefix.lower() + "-"):
        raise ConfigurationError(f"line {line}: expected {prefix}-... token, got {tok!r}")
    try:
        return tuple(int(p) for p in tok[len(prefix) + 1 :].split("-"))
    except ValueError:
        raise ConfigurationError(f"line {line}: bad channel list in {tok!r}") from None


def parse_fl_token(tok, line=0):
    if not tok.upper().startswith("FL-"):
        raise ConfigurationError(f"line {line}: expected FL-<channels>, got {tok!r}")
    try:
        return int(tok[3:])
    except ValueError:
        raise ConfigurationError(f"line {line}: bad FL token {tok!r}") from None


def parse_image_encoder_token(tok, line=0):
    if tok in IMAGE_ENCODER_PROFILES:
        return IMAGE_ENCODER_PROFILES[tok]
    if tok.lower().startswith("4s-"):
        widths = tuple(int(p) for p in tok[3:].split("-"))
        if len(widths) != 4:
            raise ConfigurationError(f"line {line}: image_encoder 4s token needs 4 widths")
        return widths
    raise ConfigurationError(
        f"line {line}: image_encoder: unknown token {tok!r} (use R50, R101 or 4s-w-w-w-w)"
    )


def parse_size(tok, line=0):
    try:
        h, w = tok.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigurationError(f"line {line}: bad size token {tok!r} (want HxW)") from None


def parse_depth_token(tok, line=0):
    try:
        near, far, step = (float(p) for p in tok.split(":"))
        return near, far, step
    except ValueError:
        raise ConfigurationError(
            f"line {line}: depth_bins: want near:far:step, got {tok!r}"
        ) from None


def _csv(tok):
    return tuple(p.strip() for p in tok.split(",") if p.strip())


# ---------------------------------------------------------------------------
# flat-text parsing


def parse_config_text(text):
    """Parse `[section]` / `key = value` lines into EngineConfig.

    Raises ConfigurationError with line numbers on malformed input or unknown
    keys; values are validated by the dataclass constructors.
    """
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigurationError(f"line {lineno}: unterminated section header {raw!r}")
            current = line[1:-1].strip().lower()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        if current is None:
            raise ConfigurationError(f"line {lineno}: key outside any [section]")
        key, val = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        sections[current][key] = (val, lineno)

    known = {"model", "train", "data", "ablate"}
    for name in sections:
        if name not in known:
            raise ConfigurationError(f"unknown config section [{name}]")

    model = _build_model(sections.get("model", {}))
    train = _build_train(sections.get("train", {}))
    data = _build_data(sections.get("data", {}))
    ablate = _build_ablate(sections.get("ablate", {}))
    return EngineConfig(model=model, train=train, data=data, ablate=ablate, text=text)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _pop(sec, key):
    if key in sec:
        val, line = sec.pop(key)
        return val, line
    return None, 0


def _reject_unknown(sec, section_name):
    if sec:
        key = next(iter(sec))
        _, line = sec[key]
        raise ConfigurationError(f"line {line}: unknown key {key!r} in [{section_name}]")


def _build_model(sec):
    sec = dict(sec)
    kw = {}
    val, line = _pop(sec, "image_size")
    if val:
        kw["image_size"] = parse_size(val, line)
    val, line = _pop(sec, "image_channels")
    if val:
        kw["image_channels"] = int(val)
    val, line = _pop(sec, "image_encoder")
    if val:
        kw["image_widths"] = parse_image_encoder_token(val, line)
    val, line = _pop(sec, "image_neck")
    if val:
        kw["image_neck_channels"] = parse_fl_token(val, line)
    val, line = _pop(sec, "lss")
    if val:
        c, cells, scale = parse_lss_token(val, line)
        kw["lss_channels"], kw["bev_cells"], kw["bev_pool_scale"] = c, cells, scale
    val, line = _pop(sec, "depth_bins")
    if val:
        kw["depth_near"], kw["depth_far"], kw["depth_step"] = parse_depth_token(val, line)
    val, line = _pop(sec, "bev_backbone")
    if val:
        kw["bev_backbone_channels"] = parse_stage_token(val, "3b", line)
    val, line = _pop(sec, "bev_neck")
    if val:
        kw["bev_neck_channels"] = parse_fl_token(val, line)
    val, line = _pop(sec, "graft")
    if val:
        norm = GRAFT_NAMES.get(val.strip().lower())
        if norm is None:
            raise ConfigurationError(
                f"line {line}: graft: unknown location {val!r} "
                f"(want a|b|c or BevFeature|BevBackbone|BevNeck)"
            )
        kw["graft_location"] = norm
    val, line = _pop(sec, "occ_head")
    if val:
        kw["occ_head_channels"] = parse_stage_token(val, "MH", line)
    val, line = _pop(sec, "occ_crop_order")
    if val:
        kw["occ_crop_order"] = val
    val, line = _pop(sec, "det_head")
    if val:
        kw["det_head"] = val
    val, line = _pop(sec, "det_head_channels")
    if val:
        kw["det_head_channels"] = int(val)
    val, line = _pop(sec, "det_classes")
    if val:
        kw["det_classes"] = _csv(val)
    for name in ("score_thresh", "nms_iou", "bev_extent", "bev_z_min", "bev_z_max"):
        val, line = _pop(sec, name)
        if val:
            kw[name] = float(val)
    val, line = _pop(sec, "max_dets")
    if val:
        kw["max_dets"] = int(val)
    val, line = _pop(sec, "dtype")
    if val:
        if val not in ("float32", "float64"):
            raise ConfigurationError(f"line {line}: dtype must be float32|float64")
        kw["dtype"] = val
    _reject_unknown(sec, "model")
    return ModelConfig(**kw)


def _build_train(sec):
    sec = dict(sec)
    kw = {}
    for name, cast in (
        ("mode", str), ("learning_rate", float), ("weight_decay", float),
        ("grad_clip", float), ("epochs", int), ("steps", int), ("batch_size", int),
        ("bev_augment", str), ("det_weight", float), ("occ_weight", float), ("seed", int),
    ):
        val, line = _pop(sec, name)
        if val is not None:
            try:
                kw[name] = cast(val)
            except ValueError:
                raise ConfigurationError(f"line {line}: {name}: bad value {val!r}") from None
    _reject_unknown(sec, "train")
    return TrainConfig(**kw)


def _build_data(sec):
    sec = dict(sec)
    kw = {}
    for name, cast in (
        ("samples", int), ("cameras", int), ("min_objects", int), ("max_objects", int),
        ("noise_sigma", float), ("seed", int), ("train_path", str), ("eval_path", str),
    ):
        val, line = _pop(sec, name)
        if val is not None:
            try:
                kw[name] = cast(val)
            except ValueError:
                raise ConfigurationError(f"line {line}: {name}: bad value {val!r}") from None
    val, line = _pop(sec, "object_classes")
    if val:
        kw["object_classes"] = _csv(val)
    _reject_unknown(sec, "data")
    return DataConfig(**kw)


def _build_ablate(sec):
    sec = dict(sec)
    kw = {}
    val, line = _pop(sec, "grafts")
    if val:
        grafts = []
        for tok in _csv(val):
            norm = GRAFT_NAMES.get(tok.lower())
            if norm is None:
                raise ConfigurationError(f"line {line}: grafts: unknown location {tok!r}")
            grafts.append(norm)
        kw["grafts"] = tuple(grafts)
    val, line = _pop(sec, "occ_weights")
    if val:
        kw["occ_weights"] = tuple(float(p) for p in _csv(val))
    val, line = _pop(sec, "augments")
    if val:
        kw["augments"] = _csv(val)
    val, line = _pop(sec, "steps")
    if val:
        kw["steps"] = int(val)
    _reject_unknown(sec, "ablate")
    return AblateConfig(**kw)


# ---------------------------------------------------------------------------
# rendering + digest


def render_config(cfg: EngineConfig):
    """Canonical text for a config (used when a config was built in code)."""
    m, t, d = cfg.model, cfg.train, cfg.data
    lines = [
        "[model]",
        f"image_size = {m.image_size[0]}x{m.image_size[1]}",
        f"image_channels = {m.image_channels}",
        "image_encoder = 4s-" + "-".join(str(w) for w in m.image_widths),
        f"image_neck = FL-{m.image_neck_channels}",
        f"lss = LSS-{m.lss_channels},{m.bev_cells}x{m.bev_cells},{m.bev_pool_scale}",
        f"depth_bins = {m.depth_near}:{m.depth_far}:{m.depth_step}",
        "bev_backbone = 3b-" + "-".join(str(c) for c in m.bev_backbone_channels),
        f"bev_neck = FL-{m.bev_neck_channels}",
        f"graft = {m.graft_location}",
        "occ_head = MH-" + "-".join(str(c) for c in m.occ_head_channels),
        f"occ_crop_order = {m.occ_crop_order}",
        f"det_head = {m.det_head}",
        f"det_head_channels = {m.det_head_channels}",
        "det_classes = " + ",".join(m.det_classes),
        f"score_thresh = {m.score_thresh}",
        f"max_dets = {m.max_dets}",
        f"nms_iou = {m.nms_iou}",
        f"bev_extent = {m.bev_extent}",
        f"bev_z_min = {m.bev_z_min}",
        f"bev_z_max = {m.bev_z_max}",
        f"dtype = {m.dtype}",
        "",
        "[train]",
        f"mode = {t.mode}",
        f"learning_rate = {t.learning_rate}",
        f"weight_decay = {t.weight_decay}",
        f"grad_clip = {t.grad_clip}",
        f"epochs = {t.epochs}",
        f"steps = {t.steps}",
        f"batch_size = {t.batch_size}",
        f"bev_augment = {t.bev_augment}",
        f"det_weight = {t.det_weight}",
        f"occ_weight = {t.occ_weight}",
        f"seed = {t.seed}",
        "",
        "[data]",
        f"samples = {d.samples}",
        f"cameras = {d.cameras}",
        f"min_objects = {d.min_objects}",
        f"max_objects = {d.max_objects}",
        "object_classes = " + ",".join(d.object_classes),
        f"noise_sigma = {d.noise_sigma}",
        f"seed = {d.seed}",
        f"train_path = {d.train_path}",
        f"eval_path = {d.eval_path}",
    ]
    return "\n".join(lines) + "\n"


def config_digest(text):
    """Digest of the model-relevant config lines; equal model configs map to
    equal digests regardless of comments/whitespace."""
    cfg_lines = []
    current = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            current = line.strip("[] ").lower()
            continue
        if current == "model":
            key, val = (p.strip() for p in line.split("=", 1))
            cfg_lines.append(f"{key}={val}")
    blob = "\n".join(sorted(cfg_lines)).encode()
    return hashlib.sha256(blob).digest()


def default_config():
    cfg = EngineConfig()
    return replace(cfg, text=render_config(cfg))
