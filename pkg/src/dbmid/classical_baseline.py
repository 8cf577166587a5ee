"""Richardson-Lucy deconvolution, non-blind and blind (alternating image/kernel updates)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .blur_classifier import spectral_features
from .blur_synthesis import BlurKernel, motion_kernel
from .errors import ArgumentError, NumericError
from .image_core import as_hwc, kernel_matrix

EPS = 1e-12
# kernels with a side longer than this are applied in the frequency domain
DIRECT_MAX = 7
INITIAL_KERNELS = ("spectral", "uniform", "gaussian")


@dataclass
class DeconvConfig:
    iterations: int = 30
    kernel_size_guess: int = 15
    initial_kernel: str = "spectral"
    clip_negatives: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ArgumentError("iterations must be >= 1")
        if self.kernel_size_guess < 3 or self.kernel_size_guess % 2 == 0:
            raise ArgumentError("kernel_size_guess must be odd and >= 3")
        if self.initial_kernel not in INITIAL_KERNELS:
            raise ArgumentError(f"initial_kernel must be one of {INITIAL_KERNELS}")


def _convolve_direct(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return ndimage.convolve(x, k, mode="reflect")


def _convolve_fft(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    ph, pw = k.shape[0] // 2, k.shape[1] // 2
    padded = np.pad(x, ((ph, ph), (pw, pw)), mode="symmetric")
    return signal.fftconvolve(padded, k, mode="valid")


def convolve_same(x: np.ndarray, k: np.ndarray, method: str = "auto") -> np.ndarray:
    """Reflect-boundary 2-D convolution, direct for small kernels and FFT otherwise."""
    if method == "auto":
        method = "fft" if max(k.shape) > DIRECT_MAX else "direct"
    if method == "fft":
        return _convolve_fft(x, k)
    return _convolve_direct(x, k)


def _rl_step(estimate: np.ndarray, observed: np.ndarray, k: np.ndarray, k_flip: np.ndarray) -> np.ndarray:
    blurred = convolve_same(estimate, k)
    ratio = observed / np.maximum(blurred, EPS)
    return estimate * convolve_same(ratio, k_flip)


def richardson_lucy(image, kernel, cfg: DeconvConfig | None = None) -> np.ndarray:
    """Non-blind RL with a known, normalised kernel; applied per channel."""
    cfg = cfg or DeconvConfig()
    obs = as_hwc(image)
    k = kernel_matrix(kernel)
    if abs(k.sum() - 1.0) > 1e-6 or np.any(k < 0):
        raise ArgumentError("kernel must be non-negative and sum to 1")
    if not np.any(obs):
        return obs.copy()
    k_flip = k[::-1, ::-1]
    out = np.empty_like(obs)
    for c in range(obs.shape[2]):
        y = np.maximum(obs[:, :, c], 0.0)
        x = y.copy()
        for _ in range(cfg.iterations):
            x = _rl_step(x, y, k, k_flip)
            if cfg.clip_negatives:
                np.maximum(x, 0.0, out=x)
        out[:, :, c] = x
    return np.clip(out, 0.0, 1.0)


def _spectral_seed(obs: np.ndarray, size: int) -> np.ndarray:
    """Line kernel from the image's Fourier fringes; a delta when none are found."""
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    if min(obs.shape[:2]) < 64:
        return k
    f = spectral_features(obs)
    if f.dominant_fringe_period_px is None:
        return k
    horizontal = f.fringe_energy_h >= f.fringe_energy_v
    length = int(round(f.motion_length_estimate(obs.shape[1] if horizontal else obs.shape[0])))
    length = min(length, size)
    if length < 2:
        return k
    line = motion_kernel(length, "horizontal" if horizontal else "vertical").matrix
    k[:] = 0.0
    oy, ox = (size - line.shape[0]) // 2, (size - line.shape[1]) // 2
    k[oy:oy + line.shape[0], ox:ox + line.shape[1]] = line
    return k


def _initial_kernel(obs: np.ndarray, size: int, kind: str) -> np.ndarray:
    if kind == "spectral":
        return _spectral_seed(obs, size)
    if kind == "uniform":
        k = np.ones((size, size))
    else:
        ax = np.arange(size) - size // 2
        sigma = size / 6.0
        g = np.exp(-ax ** 2 / (2 * sigma ** 2))
        k = np.outer(g, g)
    return k / k.sum()


def _kernel_gradient(ratio: np.ndarray, estimate: np.ndarray, size: int) -> np.ndarray:
    """Correlation sum_p ratio[p] * estimate[p - q] for offsets q within the kernel support."""
    h = size // 2
    full = signal.fftconvolve(ratio, estimate[::-1, ::-1], mode="full")
    cy, cx = estimate.shape[0] - 1, estimate.shape[1] - 1
    return full[cy - h:cy + h + 1, cx - h:cx + h + 1]


def blind_deconvolve(image, cfg: DeconvConfig | None = None) -> tuple[np.ndarray, BlurKernel]:
    """Alternate RL updates of the kernel (shared across channels) and of the latent image.

    Each outer iteration performs one kernel update, then re-normalises and
    clips the kernel, then one image update per channel.

    Starting from a flat kernel the alternation drifts to the trivial
    delta/blurred-image solution, so the default seed is a line kernel read
    off the Fourier fringes of the input (a delta if there are none).
    """
    cfg = cfg or DeconvConfig()
    obs = np.maximum(as_hwc(image), 0.0)
    g = cfg.kernel_size_guess
    if obs.shape[0] < 2 * g or obs.shape[1] < 2 * g:
        raise ArgumentError(f"image must be at least {2 * g} px on each side for kernel guess {g}")
    k = _initial_kernel(obs, g, cfg.initial_kernel)
    x = obs.copy()
    channels = range(obs.shape[2])
    for it in range(cfg.iterations):
        k_flip = k[::-1, ::-1]
        grad = np.zeros_like(k)
        norm = 0.0
        for c in channels:
            blurred = convolve_same(x[:, :, c], k)
            ratio = obs[:, :, c] / np.maximum(blurred, EPS)
            grad += _kernel_gradient(ratio, x[:, :, c], g)
            norm += x[:, :, c].sum()
        k = k * grad / max(norm, EPS)
        k = np.maximum(k, 0.0)
        total = k.sum()
        if not np.isfinite(total) or total <= 0:
            raise NumericError(f"kernel estimate degenerated at iteration {it}")
        k = k / total
        k_flip = k[::-1, ::-1]
        for c in channels:
            x[:, :, c] = _rl_step(x[:, :, c], obs[:, :, c], k, k_flip)
        if cfg.clip_negatives:
            np.maximum(x, 0.0, out=x)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite image estimate at iteration {it}")
    return np.clip(x, 0.0, 1.0), BlurKernel(k / k.sum(), "estimated", {"size": g})
