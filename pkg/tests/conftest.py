import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bevjoint.config import DataConfig, EngineConfig, ModelConfig, TrainConfig, render_config
from dataclasses import replace


def tiny_model_config(**kw):
    """Smallest config that exercises every architectural element.

    S_BEV=64 is the smallest grid with a centered integer occupancy crop
    (50 cells, x4 upsample to the 200-cell voxel grid).
    """
    base = dict(
        image_size=(32, 64),
        image_channels=18,
        image_widths=(4, 8, 8, 16),
        image_neck_channels=16,
        lss_channels=8,
        bev_cells=64,
        depth_near=2.0,
        depth_far=34.0,
        depth_step=4.0,
        bev_backbone_channels=(8, 16, 16),
        bev_neck_channels=16,
        occ_head_channels=(8, 8, 288),
        det_head_channels=8,
        graft_location="c",
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_engine_config(**model_kw):
    cfg = EngineConfig(model=tiny_model_config(**model_kw),
                       train=TrainConfig(batch_size=1, seed=0),
                       data=DataConfig(samples=2, cameras=2, seed=7))
    return replace(cfg, text=render_config(cfg))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
