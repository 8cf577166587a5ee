"""Blur kernels, the forward blur model, phantom rendering and paired-dataset synthesis."""
from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .image_core import as_hwc, convolve2d, save_image

# Cosmetic map between defocus radius (px) and focal offset (um).
# 0.32 px/um puts the +-31.2 um extremes of the focal sweeps at ~10 px.
PX_PER_UM = 0.32

MOTION_LENGTHS = tuple(range(5, 41, 5))
DIRECTIONS = ("horizontal", "vertical")


class BlurClass(str, enum.Enum):
    """Four-way blur category; declaration order is also the tie-break order."""

    IN_FOCUS = "InFocus"
    DEFOCUS = "Defocus"
    MOTION = "Motion"
    MIXED = "Mixed"

    @property
    def index(self) -> int:
        return BLUR_CLASSES.index(self)

    @classmethod
    def parse(cls, value) -> "BlurClass":
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ArgumentError(f"unknown blur class {value!r}")


BLUR_CLASSES = tuple(BlurClass)


def radius_from_z(z_um: float) -> float:
    return PX_PER_UM * abs(z_um)


def z_from_radius(radius_px: float) -> float:
    return radius_px / PX_PER_UM


# --------------------------------------------------------------------------
# Kernels

@dataclass
class BlurKernel:
    matrix: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] % 2 == 0 or m.shape[1] % 2 == 0:
            raise ArgumentError(f"kernel dimensions must be odd, got {m.shape}")
        if np.any(m < 0):
            raise ArgumentError("kernel entries must be non-negative")
        if abs(m.sum() - 1.0) > 1e-9:
            raise ArgumentError("kernel must sum to 1")
        self.matrix = m

    @property
    def shape(self):
        return self.matrix.shape


def identity_kernel() -> BlurKernel:
    return BlurKernel(np.ones((1, 1)), "identity")


def motion_kernel(length_px: int, direction: str = "horizontal") -> BlurKernel:
    """Uniform linear motion kernel; even lengths get one trailing zero pad."""
    if int(length_px) != length_px or length_px < 1:
        raise ArgumentError(f"motion length must be a positive integer, got {length_px!r}")
    if direction not in DIRECTIONS:
        raise ArgumentError(f"direction must be one of {DIRECTIONS}")
    length = int(length_px)
    if length == 1:
        return identity_kernel()
    size = length + 1 if length % 2 == 0 else length
    row = np.zeros(size)
    row[:length] = 1.0 / length
    mat = row[None, :] if direction == "horizontal" else row[:, None]
    return BlurKernel(mat, "motion", {"length_px": length, "direction": direction})


def defocus_kernel(radius_px: float, supersample: int = 16) -> BlurKernel:
    """Pillbox PSF whose rim pixels carry their covered area fraction."""
    if radius_px < 0 or not math.isfinite(radius_px):
        raise ArgumentError(f"defocus radius must be >= 0, got {radius_px!r}")
    if radius_px == 0:
        return identity_kernel()
    # a pixel at offset i covers [i-0.5, i+0.5]
    half = max(0, int(math.ceil(radius_px - 0.5)))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    idx = np.arange(-half, half + 1)
    fine = (idx[:, None] + offs[None, :]).ravel()
    inside = (fine[:, None] ** 2 + fine[None, :] ** 2) <= radius_px ** 2
    n = 2 * half + 1
    cover = inside.reshape(n, supersample, n, supersample).mean(axis=(1, 3))
    if cover.sum() == 0:
        return identity_kernel()
    return BlurKernel(cover / cover.sum(), "defocus", {"radius_px": float(radius_px)})


# --------------------------------------------------------------------------
# Forward model

@dataclass
class BlurSpec:
    blur_class: BlurClass
    defocus_radius_px: float = 0.0
    motion_length_px: int = 0
    motion_direction: str = "horizontal"
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.blur_class = BlurClass.parse(self.blur_class)
        if self.defocus_radius_px < 0 or self.motion_length_px < 0 or self.noise_sigma < 0:
            raise ArgumentError("blur extents and noise must be non-negative")
        if self.motion_direction not in DIRECTIONS:
            raise ArgumentError(f"motion_direction must be one of {DIRECTIONS}")
        r, m = self.defocus_radius_px > 0, self.motion_length_px > 0
        expected = {
            BlurClass.IN_FOCUS: (False, False),
            BlurClass.DEFOCUS: (True, False),
            BlurClass.MOTION: (False, True),
            BlurClass.MIXED: (True, True),
        }[self.blur_class]
        if (r, m) != expected:
            raise ArgumentError(
                f"{self.blur_class.value} inconsistent with radius={self.defocus_radius_px}, "
                f"length={self.motion_length_px}")

    def kernels(self) -> list[BlurKernel]:
        out = []
        if self.motion_length_px > 0:
            out.append(motion_kernel(self.motion_length_px, self.motion_direction))
        if self.defocus_radius_px > 0:
            out.append(defocus_kernel(self.defocus_radius_px))
        return out


@dataclass
class PairedSample:
    sharp: np.ndarray
    blurred: np.ndarray
    spec: BlurSpec

    def __post_init__(self):
        if np.shape(self.sharp) != np.shape(self.blurred):
            raise ArgumentError("sharp and blurred images must share a shape")


def apply_blur(image, spec: BlurSpec, order: str = "motion-first") -> np.ndarray:
    """Motion kernel, then defocus kernel, then seeded Gaussian noise, then clamp."""
    out = as_hwc(image)
    kernels = spec.kernels()
    if order == "defocus-first":
        kernels = kernels[::-1]
    elif order != "motion-first":
        raise ArgumentError("order must be 'motion-first' or 'defocus-first'")
    for k in kernels:
        out = convolve2d(out, k, clamp=False)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    elif not kernels:
        out = out.copy()
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# Phantoms

PHANTOM_KINDS = ("cells", "usaf", "texture", "spots")
USAF_WIDTHS = (8, 6, 4, 3, 2, 1)


@dataclass
class Phantom:
    image: np.ndarray
    mask: np.ndarray
    spots: list = field(default_factory=list)


def _smooth_noise(rng, size: int, low: float, high: float) -> np.ndarray:
    """Band-limited noise with spatial periods between ``low`` and ``high`` px, scaled to [-1, 1]."""
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.hypot(fy, fx)
    band = (f >= 1.0 / high) & (f <= 1.0 / low)
    field_ = np.fft.ifft2(np.fft.fft2(white) * band).real
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def _cells(size: int, rng) -> Phantom:
    """Densely packed stained cells: textured cytoplasm, dark nuclei with chromatin."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    background = np.array([0.94, 0.84, 0.89])
    cytoplasm = np.array([0.82, 0.56, 0.72])
    nucleus = np.array([0.36, 0.20, 0.50])
    img = np.broadcast_to(background, (size, size, 3)).copy()
    img += 0.06 * _smooth_noise(rng, size, 4, 16)[:, :, None] * np.array([1.0, 1.2, 1.0])
    mask = np.zeros((size, size), dtype=np.int32)
    attempts = max(400, int(1200 * (size / 128) ** 2))
    radii = rng.uniform(5, 12, size=attempts)
    centres = rng.uniform(0, 1, size=(attempts, 2)) * (size - 2 * radii[:, None] - 2) + radii[:, None] + 1
    kept = np.zeros((0, 3))
    for (cy, cx), r in zip(centres, radii):
        gap = np.hypot(kept[:, 0] - cy, kept[:, 1] - cx) - kept[:, 2] - r
        if gap.size and gap.min() < 1.5:
            continue
        kept = np.vstack([kept, (cy, cx, r)])
    placed = [tuple(row) for row in kept]
    cyto_tex = _smooth_noise(rng, size, 4, 12)
    chromatin = _smooth_noise(rng, size, 3, 8)
    for label, (cy, cx, r) in enumerate(placed, start=1):
        aspect = rng.uniform(0.65, 1.0)
        theta = rng.uniform(0, np.pi)
        nuc_r = r * rng.uniform(0.35, 0.6)
        off = 0.25 * r * rng.uniform(-1, 1)
        shade = rng.uniform(0.85, 1.1)
        y0, y1 = max(0, int(cy - r) - 2), min(size, int(cy + r) + 3)
        x0, x1 = max(0, int(cx - r) - 2), min(size, int(cx + r) + 3)
        win = (slice(y0, y1), slice(x0, x1))
        dy, dx = yy[win] - cy, xx[win] - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        body = np.clip(r - np.sqrt(u ** 2 + (v / aspect) ** 2) + 0.5, 0.0, 1.0)[:, :, None]
        nuc = np.clip(nuc_r - np.hypot(u - off, v) + 0.5, 0.0, 1.0)[:, :, None] * body
        mask[win][body[:, :, 0] >= 0.5] = label
        cyto = np.clip(cytoplasm * shade, 0, 1) * (1 + 0.12 * cyto_tex[win][:, :, None])
        nuc_color = nucleus * (1 + 0.45 * chromatin[win][:, :, None])
        patch = img[win] * (1 - body) + cyto * body
        img[win] = patch * (1 - nuc) + nuc_color * nuc
    return Phantom(np.clip(img, 0.0, 1.0), mask)


def _usaf(size: int) -> Phantom:
    img = np.ones((size, size, 3))
    mask = np.zeros((size, size), dtype=np.int32)
    items = []
    for w in USAF_WIDTHS:
        items.append((w, "v"))
        items.append((w, "h"))
    margin = 2
    x = y = margin
    row_h = 0
    label = 0
    for w, orient in items:
        extent = 5 * w
        gap = max(2, w)
        if x + extent > size - margin:
            x = margin
            y += row_h + gap
            row_h = 0
        if y + extent > size - margin:
            continue
        label += 1
        for b in range(3):
            s = 2 * w * b
            if orient == "v":
                sl = (slice(y, y + extent), slice(x + s, x + s + w))
            else:
                sl = (slice(y + s, y + s + w), slice(x, x + extent))
            img[sl] = 0.0
            mask[sl] = label
        x += extent + gap
        row_h = max(row_h, extent)
    return Phantom(img, mask)


def _texture(size: int, rng) -> Phantom:
    base = _smooth_noise(rng, size, 8, 48)
    tint = _smooth_noise(rng, size, 6, 48)
    img = np.stack([0.5 + 0.35 * base + 0.05 * tint,
                    0.5 + 0.30 * base - 0.05 * tint,
                    0.5 + 0.33 * base], axis=2)
    return Phantom(np.clip(img, 0.0, 1.0), np.zeros((size, size), dtype=np.int32))


def _spots(size: int, rng, sigma: float = 1.5, spacing: int = 48) -> Phantom:
    """Dark point-like cells on a bright slide, on a jittered grid so each spot is isolated."""
    img = np.empty((size, size, 3))
    img[:] = np.array([0.92, 0.87, 0.90])
    mask = np.zeros((size, size), dtype=np.int32)
    depth = np.array([0.55, 0.62, 0.45])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centers = np.arange(spacing // 2, size - spacing // 2 + 1, spacing)
    jitter = max(1, spacing // 8)
    spots = []
    for cy in centers:
        for cx in centers:
            y = int(cy + rng.integers(-jitter, jitter + 1))
            x = int(cx + rng.integers(-jitter, jitter + 1))
            g = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * sigma ** 2))
            img -= depth * g[:, :, None]
            mask[g > 0.5] = len(spots) + 1
            spots.append((y, x))
    return Phantom(np.clip(img, 0.0, 1.0), mask, spots)


def render_phantom(kind: str, size: int, seed: int, **options) -> Phantom:
    """Render a phantom with its label mask (and spot centres for ``spots``)."""
    if kind not in PHANTOM_KINDS:
        raise ArgumentError(f"phantom kind must be one of {PHANTOM_KINDS}")
    if int(size) != size or size < 64:
        raise ArgumentError("phantom size must be an integer >= 64")
    rng = np.random.default_rng(seed)
    if kind == "cells":
        return _cells(size, rng)
    if kind == "usaf":
        return _usaf(size)
    if kind == "texture":
        return _texture(size, rng)
    return _spots(size, rng, **options)


def make_phantom(kind: str, size: int, seed: int) -> np.ndarray:
    return render_phantom(kind, size, seed).image


def adjust_contrast(image, factor: float) -> np.ndarray:
    """Scale deviations from the per-channel mean by ``factor``."""
    arr = as_hwc(image)
    mean = arr.mean(axis=(0, 1), keepdims=True)
    return np.clip(mean + factor * (arr - mean), 0.0, 1.0)


# --------------------------------------------------------------------------
# Datasets

MANIFEST_NAME = "manifest.csv"
# training-set composition of the original study, by blur class
PAPER_TRAINING_COUNTS = {"InFocus": 800, "Defocus": 12000, "Motion": 3200, "Mixed": 3200}
MANIFEST_FIELDS = ("index", "sharp_path", "blurred_path", "blur_class", "defocus_radius_px",
                   "motion_length_px", "motion_direction", "noise_sigma", "seed")


@dataclass
class DatasetConfig:
    counts: dict = field(default_factory=lambda: {c.value: 4 for c in BLUR_CLASSES})
    phantom_kinds: list = field(default_factory=lambda: ["cells"])
    size: int = 128
    defocus_radius_range: tuple = (3.0, 10.0)
    motion_lengths: list = field(default_factory=lambda: list(MOTION_LENGTHS))
    directions: list = field(default_factory=lambda: list(DIRECTIONS))
    noise_sigma: float = 0.0
    contrast: float = 1.0
    master_seed: int = 0
    bit_depth: int = 16

    def __post_init__(self):
        self.counts = {BlurClass.parse(k).value: int(v) for k, v in self.counts.items()}
        if any(v < 0 for v in self.counts.values()):
            raise ArgumentError("class counts must be >= 0")
        lo, hi = self.defocus_radius_range
        if not 0 < lo <= hi:
            raise ArgumentError("defocus_radius_range must satisfy 0 < lo <= hi")
        if not self.motion_lengths or min(self.motion_lengths) < 1:
            raise ArgumentError("motion_lengths must be positive integers")
        for d in self.directions:
            if d not in DIRECTIONS:
                raise ArgumentError(f"unknown direction {d!r}")
        for k in self.phantom_kinds:
            if k not in PHANTOM_KINDS:
                raise ArgumentError(f"unknown phantom kind {k!r}")
        reach = max(2 * math.ceil(hi) + 1, max(self.motion_lengths) + 1)
        if reach > self.size:
            raise ArgumentError("blur extents exceed the phantom size")
        self.defocus_radius_range = (float(lo), float(hi))

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ArgumentError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def preset(cls, name: str, **overrides) -> "DatasetConfig":
        counts = {
            "smoke": {c.value: 4 for c in BLUR_CLASSES},
            "desk": {c.value: 200 for c in BLUR_CLASSES},
            "paper": dict(PAPER_TRAINING_COUNTS),
        }
        if name not in counts:
            raise ArgumentError(f"unknown dataset preset {name!r}; choose from {sorted(counts)}")
        base = {"counts": counts[name], "phantom_kinds": ["cells"]}
        if name == "paper":
            base["size"] = 256
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defocus_radius_range"] = list(self.defocus_radius_range)
        return d


def sample_seed(master_seed: int, index: int) -> int:
    """Per-sample seed derived from (master_seed, index), independent of execution order."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint32)[0])


def sample_spec(config: DatasetConfig, blur_class: BlurClass, seed: int) -> tuple[str, BlurSpec]:
    rng = np.random.default_rng([seed, 1])
    kind = config.phantom_kinds[int(rng.integers(len(config.phantom_kinds)))]
    radius = length = 0
    if blur_class in (BlurClass.DEFOCUS, BlurClass.MIXED):
        lo, hi = config.defocus_radius_range
        radius = round(float(rng.uniform(lo, hi)), 3)
    if blur_class in (BlurClass.MOTION, BlurClass.MIXED):
        length = int(config.motion_lengths[int(rng.integers(len(config.motion_lengths)))])
    direction = config.directions[int(rng.integers(len(config.directions)))]
    spec = BlurSpec(blur_class, radius, length, direction, config.noise_sigma, seed)
    return kind, spec


def make_sample(config: DatasetConfig, blur_class: BlurClass, seed: int) -> PairedSample:
    kind, spec = sample_spec(config, blur_class, seed)
    sharp = make_phantom(kind, config.size, seed)
    if config.contrast != 1.0:
        sharp = adjust_contrast(sharp, config.contrast)
    return PairedSample(sharp, apply_blur(sharp, spec), spec)


@dataclass
class ManifestRow:
    index: int
    sharp_path: str
    blurred_path: str
    spec: BlurSpec

    def as_record(self) -> dict:
        s = self.spec
        return {
            "index": self.index,
            "sharp_path": self.sharp_path,
            "blurred_path": self.blurred_path,
            "blur_class": s.blur_class.value,
            "defocus_radius_px": repr(float(s.defocus_radius_px)),
            "motion_length_px": int(s.motion_length_px),
            "motion_direction": s.motion_direction,
            "noise_sigma": repr(float(s.noise_sigma)),
            "seed": s.seed,
        }


def synthesize_dataset(config: DatasetConfig | dict, out_dir, workers: int = 1) -> list[ManifestRow]:
    """Write sharp/blurred PNG pairs plus ``manifest.csv`` into ``out_dir``.

    Samples are laid out class by class in BlurClass order.
    """
    if isinstance(config, dict):
        config = DatasetConfig.from_dict(config)
    out = Path(out_dir)
    (out / "sharp").mkdir(parents=True, exist_ok=True)
    (out / "blurred").mkdir(parents=True, exist_ok=True)
    jobs = []
    for blur_class in BLUR_CLASSES:
        for _ in range(config.counts.get(blur_class.value, 0)):
            jobs.append((len(jobs), blur_class))

    def work(job) -> ManifestRow:
        index, blur_class = job
        seed = sample_seed(config.master_seed, index)
        sample = make_sample(config, blur_class, seed)
        sharp_rel = f"sharp/{index:05d}.png"
        blurred_rel = f"blurred/{index:05d}.png"
        save_image(sample.sharp, out / sharp_rel, config.bit_depth)
        save_image(sample.blurred, out / blurred_rel, config.bit_depth)
        return ManifestRow(index, sharp_rel, blurred_rel, sample.spec)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(work, jobs))
    else:
        rows = [work(j) for j in jobs]
    write_manifest(rows, out / MANIFEST_NAME)
    return rows


def write_manifest(rows, path) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_record())
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_manifest(path) -> list[ManifestRow]:
    """Parse a manifest; ``path`` may be the CSV itself or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ArgumentError(f"{path}: unexpected manifest header {reader.fieldnames}")
        rows = []
        for rec in reader:
            spec = BlurSpec(rec["blur_class"], float(rec["defocus_radius_px"]),
                            int(rec["motion_length_px"]), rec["motion_direction"],
                            float(rec["noise_sigma"]), int(rec["seed"]))
            rows.append(ManifestRow(int(rec["index"]), rec["sharp_path"], rec["blurred_path"], spec))
    return rows


def manifest_root(path) -> Path:
    path = Path(path)
    return path if path.is_dir() else path.parent
