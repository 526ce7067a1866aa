"""Analytic-vs-finite-difference gradient checks for every differentiable op
(64-bit, central differences, h=1e-4, 1e-4 relative tolerance)."""

import numpy as np
import pytest

from bevjoint import ops
from bevjoint.losses import gaussian_focal_loss, masked_l1_loss
from bevjoint.view_transform import (BevGridSpec, DepthBinSpec, build_frustum,
                                     build_plan, lift_splat)
from bevjoint.synth import default_rig

from gradcheck import check_gradients

SEEDS = range(3)  # the acceptance suite re-runs these with >= 20 seeds


def _away_from_kinks(rng, shape, margin=0.08):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)
    return x


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_grads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    check_gradients(
        lambda ts: ops.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1),
        [x, w, b], probe_rng=rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_train_grads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 2, 4, 4))
    scale = rng.normal(size=2) + 1.5
    shift = rng.normal(size=2)

    def build(ts):
        stats = ops.RunningStats(2, dtype=np.float64)
        return ops.batchnorm2d(ts[0], ts[1], ts[2], stats, "train")

    check_gradients(build, [x, scale, shift], probe_rng=rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_add_concat_grads(seed):
    rng = np.random.default_rng(seed)
    a = _away_from_kinks(rng, (2, 3, 4, 4))
    b = rng.normal(size=(2, 3, 4, 4))
    c = rng.normal(size=(2, 2, 4, 4))

    def build(ts):
        return ops.concat_channels([ops.relu(ts[0]), ops.add(ts[1], ts[1]), ts[2]])

    check_gradients(build, [a, b, c], probe_rng=rng)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("factor", [2, 3])
def test_bilinear_upsample_grads(seed, factor):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 3, 4))
    check_gradients(lambda ts: ops.bilinear_upsample(ts[0], factor), [x],
                    probe_rng=rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_crop_and_channel_to_height_grads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 6, 6, 6))

    def build(ts):
        cropped = ops.crop2d(ts[0], 1, 1, 4, 4)
        return ops.channel_to_height(cropped, 2, 3)

    check_gradients(build, [x], probe_rng=rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_grads(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 2, 3, 3))
    targets = rng.integers(0, 2, size=(2, 3, 3))

    from bevjoint.tensor import DenseTensor
    from oracles import fd_gradient, grad_close

    lt = DenseTensor(logits, requires_grad=True)
    loss = ops.softmax_cross_entropy(lt, targets, weight=2.5)
    loss.backward()
    fd = fd_gradient(lambda a: ops.softmax_cross_entropy(
        DenseTensor(a), targets, weight=2.5).item(), logits)
    assert grad_close(lt.grad, fd)


@pytest.mark.parametrize("seed", SEEDS)
def test_focal_loss_grads(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(1, 2, 5, 5)) * 2.0
    target = np.zeros((1, 2, 5, 5))
    target[0, 0, 2, 2] = 1.0
    target[0, 0, 2, 3] = 0.6
    target[0, 1, 1, 1] = 1.0

    from bevjoint.tensor import DenseTensor
    from oracles import fd_gradient, grad_close

    lt = DenseTensor(logits, requires_grad=True)
    loss = gaussian_focal_loss(lt, target)
    loss.backward()
    fd = fd_gradient(lambda a: gaussian_focal_loss(DenseTensor(a), target).item(),
                     logits)
    assert grad_close(lt.grad, fd)


@pytest.mark.parametrize("seed", SEEDS)
def test_masked_l1_grads(seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(2, 4, 3, 3))
    target = rng.normal(size=(2, 4, 3, 3))
    # keep |pred-target| away from the |.| kink
    target = np.where(np.abs(pred - target) < 0.05, target + 0.1, target)
    valid = rng.random((2, 3, 3)) < 0.5

    from bevjoint.tensor import DenseTensor
    from oracles import fd_gradient, grad_close

    pt = DenseTensor(pred, requires_grad=True)
    loss = masked_l1_loss(pt, target, valid)
    loss.backward()
    fd = fd_gradient(lambda a: masked_l1_loss(DenseTensor(a), target, valid).item(),
                     pred)
    assert grad_close(pt.grad, fd)


@pytest.mark.parametrize("seed", SEEDS)
def test_lift_splat_grads(seed):
    rng = np.random.default_rng(seed)
    rig = default_rig(num_cameras=2, image_size=(32, 48), stride=16)
    bins = DepthBinSpec(2.0, 26.0, 6.0, 4)
    grid = BevGridSpec(cells=16)
    plan = build_plan([build_frustum(c, bins) for c in rig], grid)
    feats = rng.normal(size=(1, 2, 3, 2, 3))
    logits = rng.normal(size=(1, 2, 4, 2, 3))
    check_gradients(lambda ts: lift_splat(ts[0], ts[1], [plan]), [feats, logits],
                    probe_rng=rng)
