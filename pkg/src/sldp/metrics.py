"""Image-similarity and dependence metrics used to score leakage and utility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class SSIMParams:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0 or self.data_range <= 0:
            raise ValueError("SSIM constants must be positive")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssim_map(a: np.ndarray, b: np.ndarray, p: SSIMParams = SSIMParams()) -> np.ndarray:
    """SSIM of every fully-contained ``window x window`` patch of two 2-D images.

    Window statistics are unweighted population moments.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim_map expects 2-D images")
    w = p.window
    if min(a.shape) < w:
        raise ValueError(f"image {a.shape} smaller than the {w}x{w} window")
    c1 = (p.k1 * p.data_range) ** 2
    c2 = (p.k2 * p.data_range) ** 2
    wa = sliding_window_view(a, (w, w))
    wb = sliding_window_view(b, (w, w))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, p: SSIMParams = SSIMParams()) -> float:
    """Mean SSIM; accepts (H, W) or (C, H, W) and averages over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        return float(ssim_map(a, b, p).mean())
    if a.ndim == 3:
        return float(np.mean([ssim_map(a[c], b[c], p).mean() for c in range(a.shape[0])]))
    raise ValueError(f"expected a 2-D or 3-D image, got shape {a.shape}")


def ssim_batch(a: np.ndarray, b: np.ndarray, p: SSIMParams = SSIMParams()) -> np.ndarray:
    a, b = _check_pair(a, b)
    return np.array([ssim(x, y, p) for x, y in zip(a, b)])


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = 1.0) -> float:
    err = mse(a, b)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range ** 2 / err))


def _centered_distances(x: np.ndarray) -> np.ndarray:
    d = cdist(x, x)
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def distance_correlation(a, b) -> float:
    """Sample distance correlation of paired rows (V-statistic form).

    Rows are samples; extra axes are flattened.  Returns 0 when either
    sample has zero distance variance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"row counts differ: {n} vs {b.shape[0]}")
    if n < 2:
        raise ValueError("distance correlation needs at least two rows")
    A = _centered_distances(a.reshape(n, -1))
    B = _centered_distances(b.reshape(n, -1))
    dcov2 = (A * B).mean()
    dvar_a = (A * A).mean()
    dvar_b = (B * B).mean()
    if dvar_a <= 0 or dvar_b <= 0:
        return 0.0
    return float(np.sqrt(max(dcov2, 0.0) / np.sqrt(dvar_a * dvar_b)))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))
