"""Image-quality measures: SSIM, PSNR and full width at half maximum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ArgumentError
from .image_core import as_hwc, luminance


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def window(self) -> np.ndarray:
        half = self.window_size // 2
        x = np.arange(-half, half + 1, dtype=np.float64)
        g = np.exp(-x ** 2 / (2 * self.sigma ** 2))
        w = np.outer(g, g)
        return w / w.sum()


DEFAULT_SSIM = SsimParams()


def _valid_filter(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    half = window.shape[0] // 2
    full = ndimage.correlate(x, window, mode="constant")
    return full[half:x.shape[0] - half, half:x.shape[1] - half]


def ssim_map(a: np.ndarray, b: np.ndarray, p: SsimParams = DEFAULT_SSIM) -> np.ndarray:
    """SSIM index at every valid window position of two 2-D arrays."""
    w = p.window()
    c1 = (p.k1 * p.dynamic_range) ** 2
    c2 = (p.k2 * p.dynamic_range) ** 2
    mu_a = _valid_filter(a, w)
    mu_b = _valid_filter(b, w)
    saa = _valid_filter(a * a, w) - mu_a ** 2
    sbb = _valid_filter(b * b, w) - mu_b ** 2
    sab = _valid_filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, p: SsimParams = DEFAULT_SSIM) -> float:
    """Mean SSIM over valid windows, averaged over channels."""
    a = as_hwc(a)
    b = as_hwc(b)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < p.window_size:
        raise ArgumentError("image smaller than the SSIM window")
    if np.array_equal(a, b):
        return 1.0
    vals = [ssim_map(a[:, :, c], b[:, :, c], p).mean() for c in range(a.shape[2])]
    return float(np.mean(vals))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; ``math.inf`` when identical."""
    a = as_hwc(a)
    b = as_hwc(b)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class Profile:
    samples: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.samples.size < 5:
            raise ArgumentError("a profile needs at least 5 samples")
        if self.spacing <= 0:
            raise ArgumentError("spacing must be positive")


def fwhm(profile) -> float | None:
    """Width between the half-maximum crossings either side of the peak.

    The profile minimum is taken as baseline.  A flat-topped peak is treated
    as one maximum spanning its plateau.  Returns ``None`` if either crossing
    is missing or the profile is constant.
    """
    if not isinstance(profile, Profile):
        profile = Profile(profile)
    p = profile.samples - profile.samples.min()
    top = p.max()
    if top <= 0:
        return None
    half = top / 2.0
    peak = int(np.argmax(p))
    lo = peak
    while lo > 0 and p[lo - 1] == top:
        lo -= 1
    hi = peak
    while hi < p.size - 1 and p[hi + 1] == top:
        hi += 1

    left = None
    for i in range(lo, 0, -1):
        if p[i - 1] < half <= p[i]:
            left = (i - 1) + (half - p[i - 1]) / (p[i] - p[i - 1])
            break
    right = None
    for i in range(hi, p.size - 1):
        if p[i + 1] < half <= p[i]:
            right = i + (p[i] - half) / (p[i] - p[i + 1])
            break
    if left is None or right is None:
        return None
    return float((right - left) * profile.spacing)


def line_profile(image, point, direction: str, half_window: int, invert: bool = False) -> np.ndarray:
    lum = luminance(image)
    y, x = (int(round(v)) for v in point)
    h, w = lum.shape
    if direction == "horizontal":
        if y < 0 or y >= h or x - half_window < 0 or x + half_window >= w:
            raise ArgumentError("profile window out of bounds")
        prof = lum[y, x - half_window:x + half_window + 1]
    elif direction == "vertical":
        if x < 0 or x >= w or y - half_window < 0 or y + half_window >= h:
            raise ArgumentError("profile window out of bounds")
        prof = lum[y - half_window:y + half_window + 1, x]
    else:
        raise ArgumentError("direction must be 'horizontal' or 'vertical'")
    return 1.0 - prof if invert else prof.copy()


def measure_feature_fwhm(image, point, direction: str, half_window: int,
                         invert: bool = False) -> float | None:
    """FWHM of the luminance line profile through ``point`` (``invert`` for dark features)."""
    return fwhm(Profile(line_profile(image, point, direction, half_window, invert)))


def michelson_contrast(values: np.ndarray) -> float:
    hi, lo = float(np.max(values)), float(np.min(values))
    if hi + lo <= 0:
        return 0.0
    return (hi - lo) / (hi + lo)


def resolvable_bar_width(image, mask: np.ndarray, threshold: float = 0.1) -> float | None:
    """Smallest bar width whose three-bar group keeps Michelson contrast above ``threshold``.

    ``mask`` is the label mask of a ``usaf`` phantom (one label per group).
    This is a surrogate resolution readout for the synthetic target.
    """
    lum = luminance(image)
    best = None
    for label in range(1, int(mask.max()) + 1):
        ys, xs = np.nonzero(mask == label)
        if ys.size == 0:
            continue
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        vertical_bars = (y1 - y0) > (x1 - x0)
        width = (x1 - x0) / 5 if vertical_bars else (y1 - y0) / 5
        block = lum[y0:y1, x0:x1]
        prof = block.mean(axis=0) if vertical_bars else block.mean(axis=1)
        if michelson_contrast(prof) >= threshold:
            best = width if best is None else min(best, width)
    return best
