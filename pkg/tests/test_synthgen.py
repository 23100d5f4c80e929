import cv2
import numpy as np
import pytest

from dalf.geometry import FlowField, warp_points
from dalf.synthgen import (PairSource, SynthConfig, difficulty_schedule, make_training_pair,
                           photometric_augment, procedural_texture, sample_warp,
                           write_synth_dataset)


@pytest.fixture(scope="module")
def texture():
    return procedural_texture(np.random.default_rng(0), 320)


def test_difficulty_schedule_examples():
    assert difficulty_schedule(6000, 10000) == 1.0
    assert difficulty_schedule(10000, 10000) == 1.0
    assert difficulty_schedule(3000, 10000, d0=0.2) == pytest.approx(0.6)
    assert difficulty_schedule(0, 10000) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        difficulty_schedule(10001, 10000)


def test_sample_warp_zero_is_identity():
    spec = sample_warp(5, 0.0)
    np.testing.assert_array_equal(spec.homography.matrix, np.eye(3))
    assert float(spec.tps.weights.abs().max()) == 0.0


def test_sample_warp_deterministic():
    a, b = sample_warp(123, 0.7), sample_warp(123, 0.7)
    np.testing.assert_array_equal(a.homography.matrix, b.homography.matrix)
    assert np.array_equal(a.tps.weights.numpy(), b.tps.weights.numpy())


def test_corner_displacement_bound():
    cfg = SynthConfig()
    rng = np.random.default_rng(0)
    limit = cfg.max_corner_jitter * cfg.crop
    for _ in range(1000):
        spec = sample_warp(rng, 1.0, cfg)
        px = np.linalg.norm(spec.corner_displacements, axis=1) * (cfg.crop - 1) / 2
        assert px.max() <= limit


def test_sample_warp_rejects_bad_difficulty():
    with pytest.raises(ValueError):
        sample_warp(0, 1.5)


def test_monotone_curriculum():
    cfg = SynthConfig()
    ys, xs = np.mgrid[0:256:16, 0:256:16]
    pts = np.stack([xs.ravel(), ys.ravel()], 1).astype(float)
    means = []
    for d in (0.0, 0.25, 0.5, 0.75, 1.0):
        rng = np.random.default_rng(7)
        disp = []
        for _ in range(100):
            spec = sample_warp(rng, d, cfg)
            mapped, _ = warp_points(spec.homography, spec.tps, pts, (256, 256))
            disp.append(np.linalg.norm(mapped - pts, axis=1).mean())
        means.append(np.mean(disp))
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_photometric_properties():
    img = np.random.default_rng(0).uniform(size=(32, 32))
    np.testing.assert_array_equal(photometric_augment(img, 0, 0.0), img)
    out = photometric_augment(img, 4, 1.0)
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(photometric_augment(img, 9, 0.8), photometric_augment(img, 9, 0.8))


def test_identity_pair(texture):
    pair = make_training_pair(texture, 3, 0.0, photometric=False)
    np.testing.assert_array_equal(pair.image_a, pair.image_b)
    np.testing.assert_allclose(pair.flow.map, FlowField.identity(256, 256).map, atol=1e-12)
    assert pair.flow.valid.all()


def test_undersized_source_raises():
    with pytest.raises(ValueError):
        make_training_pair(np.zeros((100, 100)), 0, 0.5)


def _psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return 10 * np.log10(1.0 / mse) if mse > 0 else np.inf


def test_round_trip_psnr(texture):
    """A resampled independently with OpenCV's remap agrees with the generator's A."""
    pair = make_training_pair(texture, 11, 0.8, photometric=False)
    m = pair.flow.map.astype(np.float32)
    remapped = cv2.remap(pair.image_b.astype(np.float32), m[..., 0], m[..., 1],
                         interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    interior = cv2.erode(pair.flow.valid.astype(np.uint8), np.ones((5, 5), np.uint8)) > 0
    assert interior.mean() > 0.3
    assert _psnr(remapped[interior], pair.image_a[interior]) > 30


def test_validity_is_containment(texture):
    pair = make_training_pair(texture, 12, 1.0, photometric=False)
    m = pair.flow.map
    inside = (m[..., 0] >= 0) & (m[..., 0] <= 255) & (m[..., 1] >= 0) & (m[..., 1] <= 255)
    np.testing.assert_array_equal(pair.flow.valid, inside)
    assert not inside.all()


def test_pair_source_deterministic(texture):
    src = PairSource([texture], seed=4)
    a, b = src(17, 0.5), src(17, 0.5)
    np.testing.assert_array_equal(a.image_a, b.image_a)
    np.testing.assert_array_equal(a.flow.map, b.flow.map)
    c = src(18, 0.5)
    assert not np.array_equal(a.image_a, c.image_a)


def test_write_synth_dataset(tmp_path):
    manifest = write_synth_dataset(None, tmp_path, 3, seed=1)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 3
    a, b, f, diff, seed = lines[0].split()
    assert (tmp_path / a).exists() and (tmp_path / f).exists()
    assert FlowField.load(tmp_path / f).height == 256
