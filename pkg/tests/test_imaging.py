import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cxr_ef.cohort import Label, central_region_mean
from cxr_ef.imaging import (
    AugmentationPolicy, CropBox, ImageDecodeError, RngStream, apply_policy, crop_resize, load_and_normalize,
    random_resized_crop, random_rotation, rotate, sample_crop_box, sample_rotation,
)


def _png(path, array, mode="L"):
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode=mode).save(path)
    return path


# -- load_and_normalize -----------------------------------------------------------------

def test_endpoints(tmp_path):
    arr = np.zeros((16, 16), dtype=np.uint8)
    arr[:, 8:] = 255
    img = load_and_normalize(_png(tmp_path / "a.png", arr), (16, 16))
    assert img.shape == (16, 16, 3)
    assert img[0, 0, 0] == 0.0 and img[0, 15, 2] == 1.0


def test_uniform_128_survives_resize(tmp_path):
    img = load_and_normalize(_png(tmp_path / "u.png", np.full((300, 200), 128)), (224, 224))
    np.testing.assert_allclose(img, 128 / 255, rtol=0, atol=1e-15)


def test_output_shape_from_512(tmp_path):
    src = np.random.default_rng(0).integers(0, 256, (512, 512))
    assert load_and_normalize(_png(tmp_path / "b.png", src)).shape == (224, 224, 3)


def test_single_channel_and_rgb(tmp_path):
    rgb = np.zeros((20, 20, 3), dtype=np.uint8)
    rgb[..., 1] = 200
    img = load_and_normalize(_png(tmp_path / "c.png", rgb, "RGB"), (20, 20), channels=1)
    assert img.shape == (20, 20, 1)
    assert 0 < img.mean() < 1


def test_jpeg(tmp_path):
    p = tmp_path / "d.jpg"
    Image.fromarray(np.full((32, 32), 90, dtype=np.uint8)).save(p, quality=95)
    img = load_and_normalize(p, (32, 32))
    assert abs(img.mean() - 90 / 255) < 0.01


def test_decode_errors(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png at all")
    with pytest.raises(ImageDecodeError) as exc:
        load_and_normalize(bad)
    assert str(bad) in str(exc.value)
    with pytest.raises(ImageDecodeError):
        load_and_normalize(tmp_path / "missing.png")
    with pytest.raises(ValueError):
        load_and_normalize(_png(tmp_path / "ok.png", np.zeros((8, 8))), (0, 10))


def test_sixteen_bit_rejected(tmp_path):
    p = tmp_path / "deep.png"
    Image.fromarray(np.full((10, 10), 40000, dtype=np.uint16)).save(p)
    with pytest.raises(ImageDecodeError):
        load_and_normalize(p, (10, 10))


# -- rotation ------------------------------------------------------------------------

def test_zero_max_deg_identity():
    img = np.random.default_rng(1).random((24, 24, 3))
    out = random_rotation(img, 0.0, RngStream(3))
    np.testing.assert_array_equal(out, img)
    assert out is not img


def test_rotation_bounds_checked():
    with pytest.raises(ValueError):
        sample_rotation(45.0, RngStream(0))
    with pytest.raises(ValueError):
        sample_rotation(-1.0, RngStream(0))


@settings(max_examples=40, deadline=None)
@given(angle=st.floats(-10, 10), value=st.floats(0, 1))
def test_constant_image_interior_constant(angle, value):
    img = np.full((40, 40, 1), value)
    out = rotate(img, angle)
    # an inscribed disc never samples outside the frame at these angles
    yy, xx = np.mgrid[0:40, 0:40]
    interior = (yy - 19.5) ** 2 + (xx - 19.5) ** 2 <= 18 ** 2
    np.testing.assert_allclose(out[interior, 0], value, atol=1e-12)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_angle_monte_carlo():
    rng = RngStream(11)
    angles = np.array([sample_rotation(10.0, rng) for _ in range(10_000)])
    assert angles.min() >= -10 and angles.max() <= 10
    assert abs(angles.mean()) < 0.3


# -- crop --------------------------------------------------------------------------------

def test_full_scale_crop_identity():
    img = np.random.default_rng(2).random((30, 30, 3))
    out = random_resized_crop(img, (1.0, 1.0), RngStream(5))
    np.testing.assert_array_equal(out, img)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), value=st.floats(0, 1))
def test_constant_image_crop_constant(seed, value):
    img = np.full((33, 21, 3), value)
    out = random_resized_crop(img, (0.75, 1.0), RngStream(seed))
    np.testing.assert_allclose(out, value, atol=1e-12)


def test_crop_scale_monte_carlo():
    rng = RngStream(12)
    boxes = [sample_crop_box((224, 224), (0.75, 1.0), rng) for _ in range(10_000)]
    area = np.array([b.height * b.width / 224**2 for b in boxes])
    assert area.min() >= 0.75 - 1e-12 and area.max() <= 1.0 + 1e-12
    assert all(0 <= b.top <= 224 - b.height and 0 <= b.left <= 224 - b.width for b in boxes)


def test_crop_errors():
    with pytest.raises(ValueError):
        sample_crop_box((10, 10), (0.001, 0.002), RngStream(0))
    with pytest.raises(ValueError):
        sample_crop_box((10, 10), (0.9, 0.8), RngStream(0))


def test_crop_picks_region():
    img = np.zeros((8, 8, 1))
    img[3:, 3:] = 1.0  # edge samples sit at 3.75 and blend pixel 3
    out = crop_resize(img, CropBox(4.0, 4.0, 4.0, 4.0, 0.25))
    np.testing.assert_allclose(out, 1.0)


# -- policy ----------------------------------------------------------------------------------

def test_disabled_policy_identity():
    img = np.random.default_rng(3).random((16, 16, 3))
    np.testing.assert_array_equal(apply_policy(img, AugmentationPolicy.disabled(), RngStream(1)), img)


def test_policy_deterministic():
    img = np.random.default_rng(4).random((32, 32, 3))
    a = apply_policy(img, AugmentationPolicy(), RngStream.for_sample(0, "s1", 2))
    b = apply_policy(img, AugmentationPolicy(), RngStream.for_sample(0, "s1", 2))
    c = apply_policy(img, AugmentationPolicy(), RngStream.for_sample(0, "s1", 3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(8, 40), w=st.integers(8, 40))
def test_policy_range_and_shape(seed, h, w):
    img = np.random.default_rng(seed).random((h, w, 3))
    out = apply_policy(img, AugmentationPolicy(), RngStream(seed))
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(rotation_max_deg=50)
    with pytest.raises(ValueError):
        AugmentationPolicy(crop_scale_min=0.0)


def test_signal_survives_augmentation(synthetic200):
    root = synthetic200.image_dir.parent
    recs = list(synthetic200.manifest)
    imgs = [load_and_normalize(root / r.image_ref, (64, 64), 1) for r in recs]
    truth = np.array([r.label is Label.REDUCED for r in recs])

    def oracle(images):
        means = np.array([central_region_mean(i) for i in images])
        return max(((means >= t) == truth).mean() for t in np.unique(means))

    aug = [apply_policy(im, AugmentationPolicy(), RngStream.for_sample(0, r.study_id, 0)) for im, r in zip(imgs, recs)]
    assert oracle(imgs) - oracle(aug) < 0.10
