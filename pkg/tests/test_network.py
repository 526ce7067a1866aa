"""Network graph contracts: shapes, crop-window geometry, grafting behavior,
parameter accounting and head initialization."""

import numpy as np
import pytest

from bevjoint.config import ModelConfig
from bevjoint.network import PerceptionModel
from bevjoint.synth import default_rig
from bevjoint.tensor import ConfigurationError, DenseTensor
from bevjoint.view_transform import plan_for_rig

from conftest import tiny_model_config


def build(cfg, seed=0):
    return PerceptionModel(cfg, seed=seed)


def make_inputs(cfg, n_cams=2, batch=1, seed=0):
    rng = np.random.default_rng(seed)
    rig = default_rig(num_cameras=n_cams, image_size=cfg.image_size,
                      stride=cfg.feature_stride)
    plan = plan_for_rig(rig, cfg.depth_bins, cfg.bev_grid)
    images = rng.normal(size=(batch, n_cams, cfg.image_channels,
                              *cfg.image_size)).astype(cfg.np_dtype)
    return images, [plan] * batch


class TestShapes:
    def test_image_encoder_stride16(self):
        cfg = tiny_model_config(image_size=(64, 176))
        model = build(cfg)
        images, plans = make_inputs(cfg, n_cams=6)
        feats = model.encode_images(images, "eval")
        assert feats.data.shape == (6, cfg.image_neck_channels, 4, 11)

    def test_zero_images_finite(self):
        cfg = tiny_model_config()
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(np.zeros_like(images), plans, mode="joint")
        assert np.all(np.isfinite(out["occ"].data))
        assert np.all(np.isfinite(out["det"].heatmap.data))

    def test_end_to_end_contract_shapes(self):
        cfg = tiny_model_config()
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(images, plans, mode="joint")
        s = cfg.bev_cells
        assert out["bev_feature"].data.shape == (1, cfg.lss_channels, s, s)
        f1, f2, f3 = out["backbone_feats"]
        assert f1.data.shape[2:] == (s, s)
        assert f2.data.shape[2:] == (s // 2, s // 2)
        assert f3.data.shape[2:] == (s // 4, s // 4)
        assert out["neck"].data.shape == (1, cfg.bev_neck_channels, s, s)
        assert out["occ"].data.shape == (1, 18, 16, 200, 200)
        k = len(cfg.det_classes)
        assert out["det"].heatmap.data.shape == (1, k, s, s)
        reg_channels = sum(m.data.shape[1] for m in out["det"].regression_maps())
        assert reg_channels == 10

    def test_param_count_matches_shape_walk(self):
        cfg = tiny_model_config()
        model = build(cfg)
        # independent: walk the declared parameter list and re-sum shapes
        total = 0
        for p in model.parameters():
            n = 1
            for d in p.data.shape:
                n *= d
            total += n
        assert model.num_parameters() == total
        assert total > 0


class TestCropGeometry:
    def test_s128_crop_window(self):
        cfg = ModelConfig()
        model = build(cfg)
        head = model.occ_head
        assert head.crop_size == 100
        assert head.crop_offset == 14
        assert head.upsample_factor == 2

    def test_crop_rows_cover_occ_extent(self):
        # BEV cell centers inside the crop must fall inside +-40 m, the cell
        # just outside must not
        cfg = ModelConfig()
        grid = cfg.bev_grid
        x14 = grid.x_min + (14 + 0.5) * grid.cell_size
        x13 = grid.x_min + (13 + 0.5) * grid.cell_size
        x113 = grid.x_min + (113 + 0.5) * grid.cell_size
        x114 = grid.x_min + (114 + 0.5) * grid.cell_size
        assert -40.0 < x14 and x13 < -40.0
        assert x113 < 40.0 and x114 > 40.0

    def test_invalid_s_bev_rejected(self):
        with pytest.raises(ConfigurationError):
            build(tiny_model_config(bev_cells=48))  # 100/128*48 = 37.5

    def test_crop_locality(self):
        """A tap nonzero only outside the crop window produces the same
        occupancy logits as an all-zero tap."""
        cfg = tiny_model_config()
        model = build(cfg)
        head = model.occ_head
        s = cfg.bev_cells
        c = cfg.bev_neck_channels
        outside = np.zeros((1, c, s, s), dtype=np.float32)
        outside[:, :, : head.crop_offset, :] = 7.5
        outside[:, :, head.crop_offset + head.crop_size :, :] = -3.0
        out_outside = head.forward(DenseTensor(outside), "eval")
        out_zero = head.forward(DenseTensor(np.zeros_like(outside)), "eval")
        np.testing.assert_array_equal(out_outside.data, out_zero.data)

    def test_conv_first_order_supported(self):
        cfg = tiny_model_config(occ_crop_order="conv_first")
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(images, plans, mode="occOnly")
        assert out["occ"].data.shape == (1, 18, 16, 200, 200)


class TestGraft:
    def test_tap_c_is_neck_tensor(self):
        cfg = tiny_model_config(graft_location="c")
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(images, plans, mode="joint")
        tap = model.graft_tap(out["bev_feature"], out["backbone_feats"],
                              out["neck"])
        assert tap is out["neck"]

    def test_tap_a_is_raw_bev_channels(self):
        cfg = tiny_model_config(graft_location="a")
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(images, plans, mode="joint")
        tap = model.graft_tap(out["bev_feature"], out.get("backbone_feats"),
                              out.get("neck"))
        assert tap.data.shape[1] == cfg.lss_channels

    def test_tap_b_fused_shape(self):
        cfg = tiny_model_config(graft_location="b")
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(images, plans, mode="joint")
        tap = model.graft_tap(out["bev_feature"], out["backbone_feats"],
                              out["neck"])
        assert tap.data.shape == (1, cfg.bev_neck_channels, cfg.bev_cells,
                                  cfg.bev_cells)

    def test_sharing_order_a_lt_b_lt_c(self):
        counts = {}
        for graft in ("a", "b", "c"):
            model = build(tiny_model_config(graft_location=graft))
            counts[graft] = model.sharing_report()["shared_param_count"]
        assert counts["a"] < counts["b"] < counts["c"]

    def test_graft_c_shares_everything_upstream(self):
        model = build(tiny_model_config(graft_location="c"))
        rep = model.sharing_report()
        det_ids = {p.id for p in model.task_parameters("det")}
        occ_ids = {p.id for p in model.task_parameters("occ")}
        upstream = det_ids - {p.id for p in model.det_head.parameters()}
        assert upstream <= occ_ids
        assert rep["shared_param_count"] == sum(
            p.data.size for p in model.task_parameters("det")
            if p.id in occ_ids)


class TestDetectionHeadInit:
    def test_prior_bias_low_foreground(self):
        cfg = tiny_model_config()
        model = build(cfg)
        images, plans = make_inputs(cfg, seed=11)
        out = model.forward(images, plans, mode="detOnly")
        probs = 1.0 / (1.0 + np.exp(-out["det"].heatmap.data))
        assert probs.mean() < 0.05


class TestModes:
    def test_occ_only_skips_det(self):
        cfg = tiny_model_config()
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(images, plans, mode="occOnly")
        assert "det" not in out and "occ" in out

    def test_det_only_skips_occ(self):
        cfg = tiny_model_config()
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(images, plans, mode="detOnly")
        assert "occ" not in out and "det" in out

    def test_occ_only_graft_a_skips_shared_encoder(self):
        cfg = tiny_model_config(graft_location="a")
        model = build(cfg)
        images, plans = make_inputs(cfg)
        out = model.forward(images, plans, mode="occOnly")
        assert "neck" not in out
        assert out["occ"].data.shape == (1, 18, 16, 200, 200)

    def test_unknown_mode_rejected(self):
        cfg = tiny_model_config()
        model = build(cfg)
        images, plans = make_inputs(cfg)
        with pytest.raises(ConfigurationError):
            model.forward(images, plans, mode="both")


class TestLinearityProbe:
    def test_frozen_bn_eval_path_is_linear(self):
        """Doubling the weights of a bias-free conv + identity-BN (eval) path
        doubles its output."""
        from bevjoint.network import ConvBNReLU

        rng = np.random.default_rng(0)
        probe = ConvBNReLU("probe", 4, 6, 3, rng, np.float64, act=False)
        # identity running stats: mean 0, var 1 - eps correction
        probe.bn.running_var.tensor.data = np.full(6, 1.0 - probe.bn.eps)
        x = DenseTensor(rng.normal(size=(1, 4, 8, 8)))
        y1 = probe.forward(x, "eval").data.copy()
        probe.conv.weight.tensor.data = probe.conv.weight.data * 2.0
        y2 = probe.forward(x, "eval").data
        np.testing.assert_allclose(y2, 2.0 * y1, rtol=1e-9)
