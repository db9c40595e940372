"""PSNR, SSIM, and the LiDAR replay metrics."""

import numpy as np
import pytest

from fieldsim.metrics import PSNR_CAP, LidarMetrics, lidar_metrics, psnr, ssim
from fieldsim.render import SweepRender


def make_sweep(depth, intensity, miss):
    depth = np.asarray(depth, dtype=np.float64)
    n = len(depth)
    return SweepRender(depth=depth,
                       intensity=np.asarray(intensity, dtype=np.float64),
                       miss=np.asarray(miss, dtype=bool),
                       azimuth=np.zeros(n), elevation=np.zeros(n),
                       points=np.zeros((n, 3)))


class TestPsnr:
    def test_identical_images_hit_the_cap(self, rng):
        img = rng.uniform(size=(16, 16, 3))
        assert psnr(img, img) == PSNR_CAP

    def test_known_mse(self):
        a = np.zeros((8, 8))
        b = np.full((8, 8), 0.1)     # mse 0.01 -> 20 dB
        assert abs(psnr(a, b) - 20.0) < 1e-12

    def test_full_scale_error_is_zero_db(self):
        a = np.zeros((4, 4))
        b = np.ones((4, 4))
        assert abs(psnr(a, b)) < 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_symmetric(self, rng):
        a = rng.uniform(size=(12, 12))
        b = rng.uniform(size=(12, 12))
        assert psnr(a, b) == psnr(b, a)


class TestSsim:
    def test_identical_images_score_one(self, rng):
        img = rng.uniform(size=(24, 24, 3))
        assert abs(ssim(img, img) - 1.0) < 1e-9

    def test_noise_lowers_score(self, rng):
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
        s = ssim(a, b)
        assert s < 0.95

    def test_more_noise_scores_lower(self, rng):
        a = np.clip(rng.uniform(0.2, 0.8, size=(32, 32)), 0, 1)
        slight = np.clip(a + rng.normal(0, 0.02, size=a.shape), 0, 1)
        heavy = np.clip(a + rng.normal(0, 0.3, size=a.shape), 0, 1)
        assert ssim(a, heavy) < ssim(a, slight)

    def test_constant_offset_penalized_less_than_scramble(self, rng):
        a = rng.uniform(0.3, 0.6, size=(24, 24))
        offset = np.clip(a + 0.05, 0, 1)
        scramble = rng.permutation(a.ravel()).reshape(a.shape)
        assert ssim(a, offset) > ssim(a, scramble)

    def test_grayscale_and_stacked_gray_agree(self, rng):
        a = rng.uniform(size=(20, 20))
        b = rng.uniform(size=(20, 20))
        mono = ssim(a, b)
        color = ssim(np.stack([a] * 3, axis=2), np.stack([b] * 3, axis=2))
        assert abs(mono - color) < 1e-12

    def test_window_larger_than_image_raises(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape"):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))

    def test_bounded_above_by_one(self, rng):
        a = rng.uniform(size=(16, 16))
        b = rng.uniform(size=(16, 16))
        assert ssim(a, b) <= 1.0


class TestLidarMetrics:
    def test_hand_computed_case(self):
        ref = make_sweep([5.0, 6.0, 7.0, 8.0], [0.5, 0.6, 0.7, 0.8],
                         [False, False, False, True])
        sim = make_sweep([5.1, 6.0, 0.0, 1.0], [0.4, 0.6, 0.0, 0.2],
                         [False, False, True, False])
        m = lidar_metrics(sim, ref)
        assert m.n_reference == 3          # three reference returns
        assert m.n_mutual == 2             # sim misses the third
        assert abs(m.hit_rate - 2.0 / 3.0) < 1e-12
        # depth errors on mutual rays: |5.1-5| and |6-6|
        assert abs(m.depth_median_l2 - 0.05) < 1e-12
        assert abs(m.intensity_rmse - np.sqrt(0.01 / 2)) < 1e-12
        assert m.defined

    def test_perfect_replay(self):
        ref = make_sweep([3.0, 4.0], [0.2, 0.9], [False, False])
        m = lidar_metrics(ref, ref)
        assert m.hit_rate == 1.0
        assert m.depth_median_l2 == 0.0
        assert m.intensity_rmse == 0.0

    def test_no_mutual_returns_undefined(self):
        ref = make_sweep([3.0], [0.5], [False])
        sim = make_sweep([0.0], [0.0], [True])
        m = lidar_metrics(sim, ref)
        assert not m.defined
        assert m.hit_rate == 0.0
        assert np.isnan(m.depth_median_l2)
        assert np.isnan(m.intensity_rmse)

    def test_shape_mismatch_raises(self):
        ref = make_sweep([3.0], [0.5], [False])
        sim = make_sweep([3.0, 4.0], [0.5, 0.5], [False, False])
        with pytest.raises(ValueError, match="aligned"):
            lidar_metrics(sim, ref)

    def test_extra_sim_returns_do_not_count(self):
        """Rays the reference missed never enter any statistic."""
        ref = make_sweep([5.0, 0.0], [0.5, 0.0], [False, True])
        sim = make_sweep([5.0, 9.0], [0.5, 0.9], [False, False])
        m = lidar_metrics(sim, ref)
        assert m.n_reference == 1
        assert m.n_mutual == 1
        assert m.hit_rate == 1.0
        assert m.depth_median_l2 == 0.0
