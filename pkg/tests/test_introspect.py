import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from detseglab.dataio import Task
from detseglab.introspect import (CamTarget, cam_from_activations, grad_cam, heatmap_rgb, overlay,
                                  save_composite, save_heatmap)
from detseglab.model import MultiTaskNet, state_fingerprint

from conftest import tiny_model_config


def _check_normalized(cam):
    assert cam.min() >= 0 and cam.max() <= 1
    assert cam.max() == pytest.approx(1.0) or not cam.any()


def test_zero_gradient_gives_zero_map():
    a = torch.rand(1, 4, 5, 5, requires_grad=True)
    score = (a * 0).sum()
    assert not cam_from_activations([a], score, (10, 10)).any()
    const = torch.full((1, 2, 3, 3), 0.7, requires_grad=True)
    cam = cam_from_activations([const], (const * 0.0).sum() + 1.0, (6, 6))
    assert cam.shape == (6, 6) and not cam.any()


def test_mean_target_on_constant_map_is_uniform():
    # weights are 1/(h w); the weighted sum of a constant map is constant
    a = torch.full((1, 1, 4, 6), 2.5, requires_grad=True)
    cam = cam_from_activations([a], a.mean(), (8, 12))
    assert np.allclose(cam, 1.0)


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 100))
def test_positive_rescaling_invariance(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(1, 3, 4, 4, generator=g).requires_grad_(True)
    w = torch.randn(1, 3, 4, 4, generator=g)
    base = cam_from_activations([a], (a * w).sum() ** 2, (8, 8))
    scaled = cam_from_activations([a], scale * (a * w).sum() ** 2, (8, 8))
    _check_normalized(base)
    assert np.allclose(base, scaled, atol=1e-6)


def test_target_parsing():
    assert CamTarget.parse("det") == CamTarget(Task.DET)
    assert CamTarget.parse("det:2:17") == CamTarget(Task.DET, 2, 17)
    assert CamTarget.parse("seg:3") == CamTarget(Task.SEG, 3)
    with pytest.raises(ValueError):
        CamTarget.parse("seg")


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return MultiTaskNet(tiny_model_config())


@pytest.mark.parametrize("target", ["det", "det:1", "det:0:5", "seg:2"])
def test_grad_cam_on_model(model, target):
    model.train()
    before = state_fingerprint(model)
    image = np.random.default_rng(0).random((30, 26, 3)).astype(np.float32)
    cam = grad_cam(model, image, CamTarget.parse(target), levels=(0, 1))
    assert cam.shape == (30, 26)
    _check_normalized(cam)
    assert model.training
    assert state_fingerprint(model) == before
    assert all(p.grad is None for p in model.parameters())


def test_bad_targets(model):
    img = torch.rand(3, 32, 32)
    with pytest.raises(ValueError, match="class"):
        grad_cam(model, img, CamTarget(Task.DET, 3))
    with pytest.raises(ValueError, match="class"):
        grad_cam(model, img, CamTarget(Task.SEG, 4))
    with pytest.raises(ValueError, match="anchor"):
        grad_cam(model, img, CamTarget(Task.DET, 0, 10 ** 6))
    with pytest.raises(ValueError, match="levels"):
        grad_cam(model, img, CamTarget(Task.DET), levels=(5,))
    seg_only = MultiTaskNet(tiny_model_config(), [Task.SEG])
    with pytest.raises(ValueError, match="detection head"):
        grad_cam(seg_only, img, CamTarget(Task.DET))


def test_figure_output(model, tmp_path):
    image = np.random.default_rng(1).random((32, 32, 3))
    cam = grad_cam(model, image, CamTarget(Task.SEG, 1))
    assert heatmap_rgb(cam).shape == (32, 32, 3) and heatmap_rgb(cam).dtype == np.uint8
    assert overlay(image, cam).shape == (32, 32, 3)
    png = save_heatmap(cam, tmp_path / "cam.png")
    assert Image.open(png).size == (32, 32)
    comp = save_composite(image, {"single-task": cam, "multi-task": cam[::-1]}, tmp_path / "fig" / "c.png", "demo")
    with Image.open(comp) as im:
        assert im.size[0] > im.size[1]
