import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image

from cxr_ef.cohort import Label
from cxr_ef.evaluation import PredictionRecord
from cxr_ef.explain import (
    AttributionError, Method, colormap, grad_cam, overlay, saliency_map, select_error_cases, write_composite_png,
    write_map_png,
)
from cxr_ef.models import BackboneKind, Model, ModelConfig, build_model

from .helpers import central_difference, gradcam_net, tinyconv64

R, P = Label.REDUCED, Label.PRESERVED


# -- saliency -------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("target", [R, P])
def test_saliency_matches_finite_differences(seed, target):
    model = tinyconv64(seed)
    rng = np.random.default_rng(100 + seed)
    img = rng.random((16, 16, 1))
    amap = saliency_map(model, img, target)
    for i, j in rng.integers(16, size=(30, 2)):
        fd = abs(central_difference(model, img, i, j, target=target))
        assert abs(amap.raw[i, j] - fd) / fd < 1e-3


def test_saliency_normalization_and_purity():
    model = tinyconv64(4)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    img = np.random.default_rng(0).random((16, 16, 1))
    copy = img.copy()
    a = saliency_map(model, img)
    b = saliency_map(model, img)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(img, copy)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    assert a.data.min() == 0.0 and a.data.max() == 1.0 and not a.degenerate
    assert a.method is Method.SALIENCY and a.target_class is R


def test_saliency_zero_head_is_degenerate():
    model = tinyconv64(0)
    with torch.no_grad():
        model.head.fc.weight.zero_()
    amap = saliency_map(model, np.random.default_rng(0).random((16, 16, 1)))
    assert amap.degenerate
    assert not amap.data.any()


class PixelHead(torch.nn.Module):
    """score = w * x[i, j]"""

    def __init__(self, i, j, w):
        super().__init__()
        self.i, self.j = i, j
        self.w = torch.nn.Parameter(torch.tensor(w, dtype=torch.float64))

    def forward(self, x):
        return (self.w * x[:, 0, self.i, self.j]).reshape(-1, 1)


def test_single_pixel_linear_model():
    model = Model(torch.nn.Identity(), PixelHead(3, 5, -2.5), input_shape=(1, 8, 8))
    amap = saliency_map(model, np.random.default_rng(0).random((8, 8, 1)))
    expected = np.zeros((8, 8))
    expected[3, 5] = 1.0
    np.testing.assert_array_equal(amap.data, expected)
    assert amap.raw[3, 5] == 2.5


def test_saliency_max_over_channels():
    class Mix(torch.nn.Module):
        def forward(self, x):
            return (2.0 * x[:, 0, 0, 0] - 3.0 * x[:, 1, 0, 0] + x[:, 2, 1, 1]).reshape(-1, 1)

    model = Model(torch.nn.Identity(), Mix().double(), input_shape=(3, 4, 4))
    amap = saliency_map(model, np.zeros((4, 4, 3)))
    assert amap.raw[0, 0] == 3.0 and amap.raw[1, 1] == 1.0


def test_nonfinite_gradient_raises():
    model = Model(torch.nn.Identity(), PixelHead(0, 0, float("nan")), input_shape=(1, 8, 8))
    with pytest.raises(AttributionError):
        saliency_map(model, np.ones((8, 8, 1)))


# -- Grad-CAM -------------------------------------------------------------------------------------

def test_gradcam_closed_form():
    a, b, w = 1.7, -0.4, 0.9
    img = np.random.default_rng(1).random((12, 10, 1))
    amap = grad_cam(gradcam_net(a, b, w, 0.3), img, R)
    expected = np.maximum(w / (12 * 10) * (a * img[:, :, 0] + b), 0.0)
    assert np.abs(amap.raw - expected).max() < 1e-6
    assert amap.coarse.shape == (12, 10)


def test_gradcam_closed_form_upsampled():
    a, b, w = -1.2, 0.8, 2.0
    img = np.random.default_rng(2).random((16, 16, 1))
    amap = grad_cam(gradcam_net(a, b, w, 0.0, stride=2), img, R)
    coarse = np.maximum(w / 64 * (a * img[::2, ::2, 0] + b), 0.0)
    up = F.interpolate(torch.from_numpy(coarse)[None, None], size=(16, 16), mode="bilinear",
                       align_corners=False)[0, 0].numpy()
    np.testing.assert_allclose(amap.coarse, coarse, atol=1e-12)
    assert np.abs(amap.raw - up).max() < 1e-6


def test_gradcam_preserved_target_flips_sign():
    img = np.random.default_rng(3).random((8, 8, 1))
    net = gradcam_net(1.0, 0.1, 1.0, 0.0)
    assert not grad_cam(net, img, R).degenerate
    # all activations positive, negative weight: everything clamps to zero
    flipped = grad_cam(net, img, P)
    assert flipped.degenerate and not flipped.data.any()


def test_gradcam_resnet_resolution():
    model = build_model(ModelConfig(BackboneKind.RESNET50, pretrained="none"))
    amap = grad_cam(model, np.random.default_rng(0).random((224, 224, 3)), R)
    assert amap.coarse.shape == (7, 7)
    assert amap.data.shape == (224, 224)
    assert amap.raw.min() >= 0.0
    assert model.training  # mode restored


def test_gradcam_requires_hooks():
    class Plain(torch.nn.Module):
        training = False

        def input_gradient(self, *a):
            raise AssertionError

    with pytest.raises(AttributionError):
        grad_cam(Plain(), np.zeros((8, 8, 1)))


# -- overlay / files ------------------------------------------------------------------------

def _map(seed=0, size=10):
    return saliency_map(tinyconv64(seed, size), np.random.default_rng(seed).random((size, size, 1)))


def test_overlay_alpha_edges():
    img = np.random.default_rng(5).random((10, 10, 1))
    amap = _map()
    zero = overlay(img, amap, 0.0)
    one = overlay(img, amap, 1.0)
    assert zero.shape == (10, 30, 3)
    np.testing.assert_allclose(zero[:, 20:], np.repeat(img, 3, axis=2))
    np.testing.assert_allclose(one[:, 20:], colormap(amap.data))
    np.testing.assert_allclose(zero[:, 10:20], one[:, 10:20])


def test_overlay_degenerate_map():
    model = tinyconv64(0, 10)
    with torch.no_grad():
        model.head.fc.weight.zero_()
    img = np.random.default_rng(6).random((10, 10, 1))
    amap = saliency_map(model, img)
    panels = overlay(img, amap, 0.7)
    np.testing.assert_allclose(panels[:, 20:], panels[:, :10])
    np.testing.assert_allclose(panels[:, 10:20], np.broadcast_to(colormap(np.zeros(1))[0], (10, 10, 3)))


def test_overlay_errors():
    amap = _map()
    with pytest.raises(ValueError):
        overlay(np.zeros((12, 10, 1)), amap)
    with pytest.raises(ValueError):
        overlay(np.zeros((10, 10, 1)), amap, alpha=1.5)


def test_map_png_and_sidecar(tmp_path):
    amap = _map()
    write_map_png(amap, tmp_path / "a" / "m.png", study_id="s1")
    write_map_png(_map(), tmp_path / "b" / "m.png", study_id="s1")
    assert (tmp_path / "a" / "m.png").read_bytes() == (tmp_path / "b" / "m.png").read_bytes()
    px = np.asarray(Image.open(tmp_path / "a" / "m.png"))
    assert px.dtype == np.uint16 and px.max() == 65535
    side = json.loads((tmp_path / "a" / "m.json").read_text())
    assert side == {"method": "saliency", "target_class": "reduced", "degenerate": False, "study_id": "s1"}


def test_composite_png(tmp_path):
    img = np.random.default_rng(7).random((10, 10, 1))
    write_composite_png(overlay(img, _map()), tmp_path / "c.png")
    assert Image.open(tmp_path / "c.png").size == (30, 10)


# -- case selection ------------------------------------------------------------------------------

def test_selection_hand_sorted():
    rows = [("a", 0.99, R), ("b", 0.55, R), ("c", 0.02, P), ("d", 0.97, P), ("e", 0.60, P),
            ("f", 0.10, R), ("g", 0.45, R), ("h", 0.02, P), ("i", 0.98, R), ("j", 0.51, P)]
    sel = select_error_cases([PredictionRecord(*r) for r in rows], k=2)
    # correct: a .49, c .48, h .48, i .48, b .05 -> a, then c/h/i tie at .48 by id
    assert sel.correct == ["a", "c"]
    assert sel.false_positive == ["d", "e"]      # .47, .10, (j .01)
    assert sel.false_negative == ["f", "g"]      # .40, .05
    full = select_error_cases([PredictionRecord(*r) for r in rows], k=10)
    assert full.correct == ["a", "c", "h", "i", "b"]
    assert full.false_positive == ["d", "e", "j"]


def test_selection_counts_and_disjoint():
    rng = np.random.default_rng(0)
    preds = [PredictionRecord(f"s{i}", float(rng.random()), R if rng.random() < 0.5 else P) for i in range(200)]
    sel = select_error_cases(preds, k=6)
    assert all(len(v) == 6 for v in sel.groups().values())
    ids = sum(sel.groups().values(), [])
    assert len(ids) == len(set(ids))


def test_selection_all_correct_and_k():
    preds = [PredictionRecord("a", 0.9, R), PredictionRecord("b", 0.1, P)]
    sel = select_error_cases(preds, k=6)
    assert sel.correct == ["a", "b"] and sel.false_positive == [] and sel.false_negative == []
    with pytest.raises(ValueError):
        select_error_cases(preds, k=0)
