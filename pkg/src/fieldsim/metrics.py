"""Image- and sweep-level evaluation metrics.

PSNR and SSIM follow the standard formulations on [0,1] images (SSIM with
an 11x11 Gaussian window, sigma 1.5, k1=0.01, k2=0.03, averaged per channel
over valid windows). LiDAR metrics follow the replay protocol: hit rate over
reference returns, median depth error and intensity RMSE over rays where
both sweeps return.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode windowed means of a single-channel image."""
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         window: int = 11, sigma: float = 1.5) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError("ssim: image smaller than the window")
    kern = _gaussian_kernel(window, sigma)
    c1 = k1 ** 2
    c2 = k2 ** 2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx = _window_mean(x, kern)
        my = _window_mean(y, kern)
        mxx = _window_mean(x * x, kern)
        myy = _window_mean(y * y, kern)
        mxy = _window_mean(x * y, kern)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass
class LidarMetrics:
    depth_median_l2: float
    hit_rate: float
    intensity_rmse: float
    n_reference: int
    n_mutual: int
    defined: bool = True


def lidar_metrics(sim, ref) -> LidarMetrics:
    """Compare a simulated sweep against a reference on aligned rays.

    Both arguments need .depth, .intensity and .miss arrays of equal length.
    """
    if sim.depth.shape != ref.depth.shape:
        raise ValueError("lidar_metrics: sweeps are not ray-aligned")
    ref_ret = ~ref.miss
    mutual = ref_ret & ~sim.miss
    n_ref = int(ref_ret.sum())
    n_mut = int(mutual.sum())
    if n_mut == 0:
        return LidarMetrics(float("nan"), 0.0 if n_ref else float("nan"),
                            float("nan"), n_ref, 0, defined=False)
    derr = np.abs(sim.depth[mutual] - ref.depth[mutual])
    ierr = sim.intensity[mutual] - ref.intensity[mutual]
    return LidarMetrics(
        depth_median_l2=float(np.median(derr)),
        hit_rate=float(n_mut / n_ref) if n_ref else float("nan"),
        intensity_rmse=float(np.sqrt(np.mean(ierr ** 2))),
        n_reference=n_ref, n_mutual=n_mut)
