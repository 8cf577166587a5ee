"""Blur-type classification: a small CNN, Fourier fringe features and confusion matrices."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blur_synthesis import BLUR_CLASSES, BlurClass, manifest_root, read_manifest
from .errors import ArgumentError, ConfigurationError, DatasetError, NumericError
from .image_core import as_hwc, load_image, luminance, to_rgb

log = logging.getLogger(__name__)

INPUT_SIZE = 128
# radial cutoff for high_freq_ratio, in cycles per pixel (Nyquist = 0.5)
HIGH_FREQ_CUTOFF = 0.25
# fringe energy floor; unblurred noise stays below 0.008, uniform motion above 0.08
FRINGE_THRESHOLD = 0.02
# dominant/other axis energy ratio needed to call a fringe directional (disk blur stays under 2)
FRINGE_ANISOTROPY = 3.0
# shortest motion length the fringe search looks for
MIN_FRINGE_INDEX = 5
# log-magnitude floor relative to the spectral peak (80 dB)
LOG_FLOOR = 1e-4


# --------------------------------------------------------------------------
# Spectral features

@dataclass
class SpectralFeatures:
    fringe_energy_h: float
    fringe_energy_v: float
    high_freq_ratio: float
    dominant_fringe_period_px: float | None

    def motion_length_estimate(self, extent: int) -> float | None:
        """Motion length implied by the null spacing on an ``extent``-sample axis."""
        if not self.dominant_fringe_period_px:
            return None
        return extent / self.dominant_fringe_period_px


def _fringe(profile: np.ndarray) -> tuple[float, float | None]:
    """Strength and period of periodic dips in a circular log-spectrum profile.

    A uniform blur of length L puts nulls every n/L bins, which shows up as a
    peak at index L of the profile's own DFT.  Returns the summed sinusoid
    power over the searched band and the period n/L (in frequency bins) of
    its strongest component.
    """
    n = profile.size
    d = profile - profile.mean()
    spec = np.abs(np.fft.rfft(d)) / n
    power = 2 * spec ** 2
    lo = MIN_FRINGE_INDEX
    hi = n // 2
    if hi <= lo + 1:
        return 0.0, None
    band = power[lo:hi]
    energy = float(band.sum())
    # only interior local maxima count; a falling envelope at the band edge is not a fringe
    peaks = (power[lo:hi] >= power[lo - 1:hi - 1]) & (power[lo:hi] >= power[lo + 1:hi + 1])
    if not peaks.any():
        return energy, None
    k = int(np.argmax(np.where(peaks, band, -1.0))) + lo
    # parabolic refinement of the peak index
    q = float(k)
    if lo < k < hi - 1:
        a, b, c = np.log(power[k - 1:k + 2] + 1e-30)
        den = a - 2 * b + c
        if den < 0:
            q = k + 0.5 * (a - c) / den
    return energy, n / q


def spectral_features(image) -> SpectralFeatures:
    lum = luminance(image)
    h, w = lum.shape
    if h < 64 or w < 64:
        raise ArgumentError("spectral features need an image of at least 64x64")
    centred = lum - lum.mean()
    total_var = float(np.sum(centred ** 2))
    if total_var <= 1e-20:
        return SpectralFeatures(0.0, 0.0, 0.0, None)
    window = np.outer(np.hanning(h), np.hanning(w))
    spectrum = np.fft.fft2(centred * window)
    power = np.abs(spectrum) ** 2
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.hypot(fy, fx)
    high = float(power[radius > HIGH_FREQ_CUTOFF].sum() / power.sum())

    mag = np.abs(spectrum)
    logmag = np.log(np.maximum(mag, LOG_FLOOR * mag.max()))
    # horizontal motion leaves nulls along the horizontal frequency axis
    energy_h, period_h = _fringe(logmag.mean(axis=0))
    energy_v, period_v = _fringe(logmag.mean(axis=1))
    period = None
    strong, weak = max(energy_h, energy_v), min(energy_h, energy_v)
    if strong >= FRINGE_THRESHOLD and strong >= FRINGE_ANISOTROPY * weak:
        period = period_h if energy_h >= energy_v else period_v
    return SpectralFeatures(energy_h, energy_v, high, period)


# --------------------------------------------------------------------------
# CNN classifier

@dataclass
class ClassifierConfig:
    stages: int = 4
    layers_per_stage: int = 2
    channels_per_stage: list = field(default_factory=lambda: [16, 32, 64, 128])
    kernel_size: int = 3
    input_size: int = INPUT_SIZE
    batch_norm: bool = True

    def __post_init__(self):
        self.channels_per_stage = [int(c) for c in self.channels_per_stage]
        if self.stages < 1 or self.layers_per_stage < 1:
            raise ConfigurationError("stages and layers_per_stage must be >= 1")
        if len(self.channels_per_stage) != self.stages:
            raise ConfigurationError("channels_per_stage must list one width per stage")
        if self.kernel_size not in (3, 5):
            raise ConfigurationError("kernel_size must be 3 or 5")
        if self.input_size % 2 ** (self.stages - 1):
            raise ConfigurationError("input_size must be divisible by the total downsampling")


class BlurClassifierNet(nn.Module):
    def __init__(self, config: ClassifierConfig | None = None, role: str = "classifier"):
        super().__init__()
        if role != "classifier":
            raise ConfigurationError("classifier role tag must be 'classifier'")
        self.config = config = config or ClassifierConfig()
        self.role = role
        layers = []
        cin = 3
        pad = config.kernel_size // 2
        for s, cout in enumerate(config.channels_per_stage):
            for j in range(config.layers_per_stage):
                stride = 2 if (s > 0 and j == 0) else 1
                layers.append(nn.Conv2d(cin, cout, config.kernel_size, stride=stride, padding=pad))
                if config.batch_norm:
                    layers.append(nn.BatchNorm2d(cout))
                layers.append(nn.ReLU())
                cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, len(BLUR_CLASSES))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x - 0.5)
        return self.head(h.mean(dim=(2, 3)))


def build_classifier(config: ClassifierConfig | None = None, seed: int = 0) -> BlurClassifierNet:
    model = BlurClassifierNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.ndim == 1:
                p.fill_(1.0)
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * np.sqrt(2.0 / fan_in))
    return model


def preprocess(image, size: int = INPUT_SIZE) -> np.ndarray:
    """Centre-crop to a square, then area-resample to ``size`` x ``size`` RGB."""
    rgb = to_rgb(image)
    h, w = rgb.shape[:2]
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    sq = rgb[y0:y0 + side, x0:x0 + side]
    if side != size:
        interp = cv2.INTER_AREA if side > size else cv2.INTER_LINEAR
        sq = cv2.resize(sq, (size, size), interpolation=interp)
    return np.ascontiguousarray(sq, dtype=np.float32)


def _batch_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def predict_scores(model: BlurClassifierNet, images) -> np.ndarray:
    batch = np.stack([preprocess(im, model.config.input_size) for im in images])
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(batch), 64):
            logits = model(_batch_tensor(batch[i:i + 64]))
            out.append(torch.softmax(logits.double(), dim=1).numpy())
    scores = np.concatenate(out)
    if not np.all(np.isfinite(scores)):
        raise NumericError("classifier produced non-finite scores")
    return scores


def classify(image, model: BlurClassifierNet) -> tuple[BlurClass, np.ndarray]:
    """Blur class and softmax scores; ties go to the earlier class in BlurClass order."""
    arr = as_hwc(image)
    scores = predict_scores(model, [arr])[0]
    return BLUR_CLASSES[int(np.argmax(scores))], scores


@dataclass
class ClassifierTrainConfig:
    epochs: int = 16
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("invalid classifier training config")


@dataclass
class ClassifierLog:
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def load_labeled(manifest) -> tuple[np.ndarray, np.ndarray]:
    root = manifest_root(manifest)
    rows = read_manifest(manifest)
    images = np.stack([preprocess(load_image(root / r.blurred_path).pixels) for r in rows])
    labels = np.array([r.spec.blur_class.index for r in rows])
    return images, labels


def fit_classifier(model: BlurClassifierNet, images: np.ndarray, labels: np.ndarray,
                   cfg: ClassifierTrainConfig) -> ClassifierLog:
    counts = np.bincount(labels, minlength=len(BLUR_CLASSES))
    missing = [BLUR_CLASSES[i].value for i, c in enumerate(counts) if c < 2]
    if missing:
        raise DatasetError(f"need at least 2 samples of every class; short: {missing}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.epochs, 1))
    hist = ClassifierLog()
    n = len(images)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        flips = rng.integers(0, 4, size=n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = images[idx].copy()
            if cfg.augment:
                for j, i in enumerate(idx):
                    if flips[i] & 1:
                        xb[j] = xb[j, :, ::-1]
                    if flips[i] & 2:
                        xb[j] = xb[j, ::-1]
            yb = torch.from_numpy(labels[idx])
            opt.zero_grad()
            logits = model(_batch_tensor(xb))
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise NumericError(f"classifier training diverged in epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.item()) * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
        sched.step()
        hist.epoch_loss.append(total / n)
        hist.epoch_accuracy.append(correct / n)
        log.info("classifier epoch %d loss %.4f acc %.4f", epoch, hist.epoch_loss[-1], hist.epoch_accuracy[-1])
    recalibrate_batch_norm(model, images, cfg.batch_size)
    return hist


def recalibrate_batch_norm(model: nn.Module, images: np.ndarray, batch_size: int = 32) -> None:
    """Replace running BN statistics by exact averages over ``images`` with final weights."""
    norms = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
    if not norms:
        model.eval()
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            model(_batch_tensor(images[start:start + batch_size]))
    for m, mom in zip(norms, saved):
        m.momentum = mom
    model.eval()


def train_classifier(dataset, config: ClassifierTrainConfig | None = None,
                     arch: ClassifierConfig | None = None) -> tuple[BlurClassifierNet, ClassifierLog]:
    config = config or ClassifierTrainConfig()
    images, labels = load_labeled(dataset)
    model = build_classifier(arch, config.seed)
    hist = fit_classifier(model, images, labels, config)
    return model, hist


# --------------------------------------------------------------------------
# Confusion matrix

@dataclass
class Confusion:
    matrix: np.ndarray  # rows = predicted, columns = actual
    accuracy: float

    def records(self):
        for i, pred in enumerate(BLUR_CLASSES):
            for j, actual in enumerate(BLUR_CLASSES):
                yield pred.value, actual.value, int(self.matrix[i, j])


def confusion_matrix(predictions, labels) -> Confusion:
    predictions = [BlurClass.parse(p) for p in predictions]
    labels = [BlurClass.parse(a) for a in labels]
    if len(predictions) != len(labels):
        raise ArgumentError("predictions and labels differ in length")
    if not predictions:
        raise ArgumentError("need at least one prediction")
    mat = np.zeros((4, 4), dtype=np.int64)
    for p, a in zip(predictions, labels):
        mat[p.index, a.index] += 1
    return Confusion(mat, float(np.trace(mat) / mat.sum()))
