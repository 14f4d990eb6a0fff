import numpy as np
import pytest
import torch

from cxr_ef.cohort import Label
from cxr_ef.models import (
    BackboneKind, BinaryHead, Model, ModelConfig, Pretrained, PretrainedWeightsUnavailable, build_model,
    checkpoint_bytes, count_parameters, load_checkpoint, parameter_report, save_checkpoint, tinyconv_closed_form,
)

TINY = ModelConfig(BackboneKind.TINYCONV, input_size=(16, 16))


def test_tinyconv_closed_form():
    assert tinyconv_closed_form() == 4 * (1 * 9 + 1) + 8 * (4 * 9 + 1) + (8 + 1) == 345
    assert count_parameters(build_model(TINY)) == 345


def test_tinyconv_report_has_no_reference():
    rep = parameter_report(build_model(TINY))
    assert rep.reported_count is None and not rep.discrepancy
    assert "345" in rep.describe()


def test_defaults():
    assert ModelConfig().pretrained is Pretrained.IMAGENET
    assert TINY.pretrained is Pretrained.NONE and TINY.in_channels == 1


@pytest.mark.parametrize("kwargs", [
    dict(backbone="resnet50", input_size=(100, 100)),
    dict(backbone="tinyconv", input_size=(4, 4)),
    dict(backbone="tinyconv", pretrained="imagenet"),
    dict(backbone="vgg16"),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_resnet50_shape_contract():
    m = build_model(ModelConfig(BackboneKind.RESNET50, pretrained="none"))
    x = np.random.default_rng(0).random((2, 224, 224, 3))
    p = m.predict_proba(x)
    assert p.shape == (2,)
    assert m(m.as_batch(x)).shape == (2,)
    assert m.last_conv_activations(x[:1]).shape == (1, 2048, 7, 7)


def test_pretrained_without_source_raises(monkeypatch):
    from torchvision.models import ResNet50_Weights

    def offline(*a, **k):
        raise OSError("network unreachable")

    monkeypatch.setattr(ResNet50_Weights.IMAGENET1K_V1.__class__, "get_state_dict", offline, raising=False)
    with pytest.raises(PretrainedWeightsUnavailable):
        build_model(ModelConfig(BackboneKind.RESNET50, pretrained="imagenet"))


def test_pretrained_from_file(tmp_path):
    from torchvision.models import resnet50

    torch.manual_seed(5)
    ref = resnet50()
    torch.save(ref.state_dict(), tmp_path / "w.pth")
    m = build_model(ModelConfig(BackboneKind.RESNET50, pretrained="imagenet", weights_path=str(tmp_path / "w.pth")))
    torch.testing.assert_close(m.features[0].weight, ref.conv1.weight)
    with pytest.raises(PretrainedWeightsUnavailable):
        build_model(ModelConfig(BackboneKind.RESNET50, weights_path=str(tmp_path / "nope.pth")))


def test_init_determinism():
    x = np.random.default_rng(1).random((3, 16, 16, 1))
    a = build_model(TINY, seed=4).predict_proba(x)
    b = build_model(TINY, seed=4).predict_proba(x)
    c = build_model(TINY, seed=5).predict_proba(x)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_build_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model(TINY, seed=9)
    torch.testing.assert_close(torch.rand(3), expected)


class ConstLogit(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, fmap):
        return torch.full((fmap.shape[0], 1), float(self.value), dtype=torch.float64) + 0 * self.dummy


def test_sigmoid_edges():
    x = np.zeros((2, 4, 4, 1))
    assert Model(torch.nn.Identity(), ConstLogit(0.0), input_shape=(1, 4, 4)).predict_proba(x)[0] == 0.5
    p = Model(torch.nn.Identity(), ConstLogit(50.0), input_shape=(1, 4, 4)).predict_proba(x)
    assert 1.0 - p[0] < 1e-20


def test_order_aligned_and_eval_deterministic():
    m = build_model(TINY)
    x = np.random.default_rng(2).random((5, 16, 16, 1))
    p = m.predict_proba(x)
    single = np.array([m.predict_proba(x[i:i + 1])[0] for i in range(5)])
    np.testing.assert_allclose(p, single, rtol=1e-6)
    np.testing.assert_array_equal(p, m.predict_proba(x))
    assert m.training  # predict_proba restores the mode


def test_shape_mismatch_names_both():
    m = build_model(TINY)
    with pytest.raises(ValueError, match=r"expected \(N, 1, 16, 16\).*got \(1, 1, 20, 20\)"):
        m.predict_proba(np.zeros((1, 20, 20, 1)))


def test_target_score_sign():
    z = torch.tensor([1.5, -2.0])
    assert torch.equal(Model.target_score(z, Label.REDUCED), z)
    assert torch.equal(Model.target_score(z, Label.PRESERVED), -z)


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(TINY, seed=3)
    save_checkpoint(tmp_path / "a.ckpt", m, {"epoch": 4})
    back, state = load_checkpoint(tmp_path / "a.ckpt")
    assert state == {"epoch": 4}
    assert back.config == m.config
    for k, v in m.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    save_checkpoint(tmp_path / "b.ckpt", back, {"epoch": 4})
    again, _ = load_checkpoint(tmp_path / "b.ckpt")
    for k, v in back.state_dict().items():
        assert torch.equal(v, again.state_dict()[k])
    x = np.random.default_rng(0).random((2, 16, 16, 1))
    np.testing.assert_array_equal(m.predict_proba(x), again.predict_proba(x))
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_rejects_foreign(tmp_path):
    torch.save({"hello": 1}, tmp_path / "x.ckpt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_bytes_is_torch_loadable():
    import io

    blob = torch.load(io.BytesIO(checkpoint_bytes(build_model(TINY))), weights_only=False)
    assert blob["config"]["backbone"] == "tinyconv"


def test_binary_head_dropout_toggle():
    assert isinstance(BinaryHead(8).dropout, torch.nn.Identity)
    assert isinstance(BinaryHead(8, 0.2).dropout, torch.nn.Dropout)
