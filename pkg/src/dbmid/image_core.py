"""Image substrate: I/O, convolution, patch tiling and translation registration.

Pixel data travels between functions as float arrays shaped ``(H, W, C)``
with values in ``[0, 1]``.  :class:`Image` wraps such an array together with
acquisition metadata for the places that need it (file I/O, focal stacks).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage

from .errors import ArgumentError, FormatError, RegistrationError

MIN_SIDE = 8
STAIN_TAGS = ("TCT", "HE", "IHC", "target", "phantom")


@dataclass
class Image:
    pixels: np.ndarray
    source: str | None = None
    z_um: float | None = None
    stain: str | None = None
    bit_depth: int | None = None  # set when loaded from a file

    def __post_init__(self):
        self.pixels = as_hwc(self.pixels)
        if self.stain is not None and self.stain not in STAIN_TAGS:
            raise ArgumentError(f"unknown stain tag {self.stain!r}")

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def as_hwc(pixels) -> np.ndarray:
    """Return ``pixels`` as a float64 ``(H, W, C)`` array, validating the layout."""
    if isinstance(pixels, Image):
        return pixels.pixels
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ArgumentError(f"expected an HxW or HxWxC image with C in (1, 3), got shape {arr.shape}")
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise ArgumentError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {arr.shape[:2]}")
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


def to_rgb(pixels) -> np.ndarray:
    """Replicate a single-channel image to three channels (networks take RGB)."""
    arr = as_hwc(pixels)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def luminance(pixels) -> np.ndarray:
    """Rec. 601 luma as an ``(H, W)`` array."""
    arr = as_hwc(pixels)
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    return arr @ np.array([0.299, 0.587, 0.114])


# --------------------------------------------------------------------------
# File I/O

_PNG = {".png"}
_TIFF = {".tif", ".tiff"}


def load_image(path) -> Image:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in _PNG | _TIFF:
        raise FormatError(f"{path}: only PNG and TIFF are supported")
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"{path}: unreadable image file")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raise FormatError(f"{path}: alpha channels are not supported")
        if raw.shape[2] != 3:
            raise FormatError(f"{path}: unsupported channel count {raw.shape[2]}")
        raw = raw[:, :, ::-1]  # BGR -> RGB
    pixels = raw.astype(np.float64) / scale
    return Image(pixels, source=str(path), bit_depth=8 if scale == 255.0 else 16)


def save_image(image, path, bit_depth: int = 16) -> None:
    """Write ``image`` as PNG or TIFF, rounding to the nearest code value."""
    if bit_depth not in (8, 16):
        raise ArgumentError("bit_depth must be 8 or 16")
    path = Path(path)
    if path.suffix.lower() not in _PNG | _TIFF:
        raise FormatError(f"{path}: only PNG and TIFF are supported")
    arr = np.clip(as_hwc(image), 0.0, 1.0)
    maxval = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    data = np.rint(arr * maxval).astype(dtype)
    if data.shape[2] == 3:
        data = np.ascontiguousarray(data[:, :, ::-1])
    else:
        data = data[:, :, 0]
    parent = path.parent
    if not parent.exists():
        raise FileNotFoundError(f"{parent}: directory does not exist")
    if not os.access(parent, os.W_OK):
        raise PermissionError(f"{parent}: not writable")
    if not cv2.imwrite(str(path), data):
        raise OSError(f"{path}: write failed")


# --------------------------------------------------------------------------
# Convolution

_SCIPY_MODES = {"reflect": "reflect", "zero": "constant"}


def kernel_matrix(kernel) -> np.ndarray:
    """Accept a BlurKernel-like object (``.matrix``) or a bare array."""
    mat = getattr(kernel, "matrix", kernel)
    return np.asarray(mat, dtype=np.float64)


def convolve2d(image, kernel, boundary: str = "reflect", clamp: bool = True) -> np.ndarray:
    """Convolve every channel of ``image`` with ``kernel``.

    ``boundary="reflect"`` mirrors about the pixel edge (``dcba|abcd``).
    Pass ``clamp=False`` to keep the raw linear result.
    """
    arr = as_hwc(image)
    k = kernel_matrix(kernel)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ArgumentError(f"kernel dimensions must be odd, got {k.shape}")
    if abs(k.sum() - 1.0) > 1e-9:
        raise ArgumentError(f"kernel must sum to 1, sums to {k.sum():.12g}")
    if k.shape[0] > arr.shape[0] or k.shape[1] > arr.shape[1]:
        raise ArgumentError(f"kernel {k.shape} larger than image {arr.shape[:2]}")
    if boundary not in _SCIPY_MODES:
        raise ArgumentError(f"boundary must be one of {sorted(_SCIPY_MODES)}")
    if k.shape == (1, 1):
        out = arr * k[0, 0]
    else:
        out = np.empty_like(arr)
        for c in range(arr.shape[2]):
            ndimage.convolve(arr[:, :, c], k, output=out[:, :, c], mode=_SCIPY_MODES[boundary], cval=0.0)
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out


# --------------------------------------------------------------------------
# Registration

def register_translation(moving, reference) -> tuple[int, int]:
    """Integer shift ``(dy, dx)`` such that ``moving ~= reference`` shifted by it.

    Phase correlation on the luminance channel.  Rolling ``moving`` by
    ``(-dy, -dx)`` aligns it with ``reference``.
    """
    mov = luminance(moving)
    ref = luminance(reference)
    if mov.shape != ref.shape:
        raise ArgumentError(f"shape mismatch {mov.shape} vs {ref.shape}")
    mov = mov - mov.mean()
    ref = ref - ref.mean()
    if not np.any(np.abs(mov) > 1e-12) or not np.any(np.abs(ref) > 1e-12):
        raise RegistrationError("cannot register a constant image")
    cross = np.fft.fft2(mov) * np.conj(np.fft.fft2(ref))
    mag = np.abs(cross)
    cross = cross / np.maximum(mag, 1e-15 * mag.max())
    corr = np.fft.ifft2(cross).real
    dy, dx = np.unravel_index(int(np.argmax(corr)), corr.shape)
    h, w = corr.shape
    if dy > h // 2:
        dy -= h
    if dx > w // 2:
        dx -= w
    return int(dy), int(dx)


@dataclass
class FocalStack:
    images: list
    z_offsets: list
    in_focus_index: int
    residuals: list = field(default_factory=list)

    def __post_init__(self):
        self.images = [img if isinstance(img, Image) else Image(img) for img in self.images]
        if len(self.images) != len(self.z_offsets) or not self.images:
            raise ArgumentError("images and z_offsets must be non-empty and of equal length")
        if any(b <= a for a, b in zip(self.z_offsets, self.z_offsets[1:])):
            raise ArgumentError("z_offsets must be strictly increasing")
        if not 0 <= self.in_focus_index < len(self.images):
            raise ArgumentError("in_focus_index out of range")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise ArgumentError(f"stack images differ in shape: {sorted(shapes)}")


def register_stack(stack: FocalStack) -> tuple[FocalStack, list[tuple[int, int]]]:
    """Align every plane to the in-focus plane; returns the aligned stack and per-plane shifts.

    Residual shifts (re-registration after alignment) are stored on the result.
    """
    ref = stack.images[stack.in_focus_index].pixels
    aligned, shifts, residuals = [], [], []
    for img in stack.images:
        dy, dx = register_translation(img.pixels, ref)
        moved = np.roll(img.pixels, (-dy, -dx), axis=(0, 1))
        shifts.append((dy, dx))
        residuals.append(register_translation(moved, ref))
        aligned.append(Image(moved, source=img.source, z_um=img.z_um, stain=img.stain))
    out = FocalStack(aligned, list(stack.z_offsets), stack.in_focus_index, residuals)
    return out, shifts


# --------------------------------------------------------------------------
# Patches

def patch_positions(length: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)
    return starts


def extract_patches(image, size: int, stride: int) -> list[np.ndarray]:
    """Row-major tiling; the last row/column of patches is flush with the far edge."""
    arr = as_hwc(image)
    h, w = arr.shape[:2]
    if stride < 1:
        raise ArgumentError("stride must be >= 1")
    if size < 1 or size > min(h, w):
        raise ArgumentError(f"patch size {size} does not fit image {h}x{w}")
    return [arr[y:y + size, x:x + size].copy()
            for y in patch_positions(h, size, stride)
            for x in patch_positions(w, size, stride)]


def stack_images(images: Sequence) -> np.ndarray:
    return np.stack([as_hwc(im) for im in images])
