"""Encoder-decoder deblurring network with symmetric sum skips.

The encoder is ``stages x layers_per_stage`` convolutions; the first layer of
every stage after the first has stride 2.  The decoder mirrors each encoder
layer with a transposed convolution (stride 2 where the encoder downsampled).
Every ``skip_interval`` layers the encoder feature map is added to the decoder
map of the same shape; encoder position 0 is the input image, so the output is
``input + decoded residual``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blur_synthesis import BlurClass, manifest_root, read_manifest
from .errors import ConfigurationError, DatasetError, NumericError
from .image_core import as_hwc, load_image, to_rgb

log = logging.getLogger(__name__)

ROLES = ("defocus", "motion")
ROLE_CLASS = {"defocus": BlurClass.DEFOCUS, "motion": BlurClass.MOTION}


@dataclass
class NetworkConfig:
    stages: int = 3
    layers_per_stage: int = 2
    channels_per_stage: list = field(default_factory=lambda: [32, 64, 128])
    kernel_size: int = 3
    skip_interval: int = 2
    downsample_factor: int = 2
    input_channels: int = 3

    def __post_init__(self):
        self.channels_per_stage = [int(c) for c in self.channels_per_stage]
        if self.stages < 1 or self.layers_per_stage < 1 or self.skip_interval < 1:
            raise ConfigurationError("stages, layers_per_stage and skip_interval must be >= 1")
        if len(self.channels_per_stage) != self.stages:
            raise ConfigurationError("channels_per_stage must list one width per stage")
        if any(c < 1 for c in self.channels_per_stage):
            raise ConfigurationError("channel widths must be positive")
        if self.kernel_size not in (3, 5):
            raise ConfigurationError("kernel_size must be 3 or 5")
        if self.downsample_factor != 2 or self.input_channels != 3:
            raise ConfigurationError("downsample_factor is fixed at 2 and input_channels at 3")

    @property
    def depth(self) -> int:
        return self.stages * self.layers_per_stage

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.stages - 1)

    def layer_plan(self) -> list[tuple[int, int, int]]:
        """``(in_channels, out_channels, stride)`` for each encoder layer."""
        plan = []
        cin = self.input_channels
        for s, cout in enumerate(self.channels_per_stage):
            for j in range(self.layers_per_stage):
                plan.append((cin, cout, 2 if (s > 0 and j == 0) else 1))
                cin = cout
        return plan

    @classmethod
    def paper(cls) -> "NetworkConfig":
        return cls(layers_per_stage=7)

    @classmethod
    def desk(cls) -> "NetworkConfig":
        return cls(layers_per_stage=2)

    @classmethod
    def preset(cls, name: str) -> "NetworkConfig":
        if name == "paper":
            return cls.paper()
        if name == "desk":
            return cls.desk()
        raise ConfigurationError(f"unknown network preset {name!r}")


class DeblurNet(nn.Module):
    def __init__(self, config: NetworkConfig, role: str = "defocus"):
        super().__init__()
        if role not in ROLES:
            raise ConfigurationError(f"role must be one of {ROLES}")
        self.config = config
        self.role = role
        k = config.kernel_size
        pad = (k - 1) // 2
        self.encoder = nn.ModuleList()
        self.decoder = nn.ModuleList()
        plan = config.layer_plan()
        for cin, cout, stride in plan:
            self.encoder.append(nn.Conv2d(cin, cout, k, stride=stride, padding=pad))
        # decoder[i] undoes encoder[depth-1-i]
        for cin, cout, stride in reversed(plan):
            self.decoder.append(nn.ConvTranspose2d(cout, cin, k, stride=stride, padding=pad,
                                                   output_padding=stride - 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        interval = self.config.skip_interval
        feats = [x]
        h = x
        for conv in self.encoder:
            h = F.relu(conv(h))
            feats.append(h)
        depth = len(self.encoder)
        for i, deconv in enumerate(self.decoder):
            pos = depth - 1 - i  # encoder position this layer reconstructs
            h = deconv(h)
            if pos % interval == 0:
                h = h + feats[pos]
            if pos > 0:
                h = F.relu(h)
        return h


def parameter_count(config: NetworkConfig) -> int:
    total = 0
    for cin, cout, _ in config.layer_plan():
        weights = config.kernel_size ** 2 * cin * cout
        total += 2 * weights + cout + cin
    return total


def init_weights(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * p[0, 0].numel()
                std = math.sqrt(2.0 / fan_in)
                p.copy_(torch.randn(p.shape, generator=gen) * std)
    # damp the initial residual; training experiments were calibrated with this scale
    last = getattr(model, "decoder", None)
    if last is not None:
        with torch.no_grad():
            last[-1].weight.mul_(0.1)


def build_network(config: NetworkConfig | None = None, seed: int = 0, role: str = "defocus") -> DeblurNet:
    model = DeblurNet(config or NetworkConfig(), role)
    init_weights(model, seed)
    return model


def _to_tensor(batch: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2), dtype=np.float32))


def infer(model: DeblurNet, image) -> np.ndarray:
    """Deblur one image of any size >= 16x16; output has the input's shape."""
    arr = as_hwc(image)
    h, w, c = arr.shape
    if h < 16 or w < 16:
        raise ConfigurationError("network input must be at least 16x16")
    rgb = to_rgb(arr)
    m = model.config.size_multiple
    ph, pw = (-h) % m, (-w) % m
    x = _to_tensor(rgb[None])
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    model.eval()
    with torch.no_grad():
        y = model(x)
    if not torch.isfinite(y).all():
        raise NumericError(f"non-finite activations in {model.role} network output")
    out = y[0, :, :h, :w].numpy().transpose(1, 2, 0).astype(np.float64)
    out = np.clip(out, 0.0, 1.0)
    if c == 1:
        out = out.mean(axis=2, keepdims=True)
    return out


# --------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int = 1000
    seed: int = 0
    patch_size: int = 64
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        self.betas = tuple(self.betas)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(learning_rate=1e-3, batch_size=8, patch_size=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk_fine_tune(cls, **overrides) -> "TrainConfig":
        """Desk preset with a tenfold smaller step, for warm starts on small sets."""
        return cls.desk(**{"learning_rate": 1e-4, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainingLog:
    losses: list = field(default_factory=list)
    warm_start: str | None = None
    role: str = ""
    samples: int = 0
    downstream: str | None = None

    def windowed(self, step: int, width: int = 20) -> float:
        lo = max(0, step - width)
        return float(np.mean(self.losses[lo:step]))

    def to_dict(self) -> dict:
        return asdict(self)


def load_pairs(manifest, blur_class: BlurClass | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Load sharp/blurred arrays from a manifest, optionally filtered to one class."""
    root = manifest_root(manifest)
    rows = read_manifest(manifest)
    if blur_class is not None:
        rows = [r for r in rows if r.spec.blur_class == blur_class]
    if not rows:
        raise DatasetError(f"{manifest}: no training pairs"
                           + (f" of class {blur_class.value}" if blur_class else ""))
    sharp = np.stack([to_rgb(load_image(root / r.sharp_path).pixels) for r in rows]).astype(np.float32)
    blurred = np.stack([to_rgb(load_image(root / r.blurred_path).pixels) for r in rows]).astype(np.float32)
    return sharp, blurred


def _patch_batch(rng, sharp, blurred, batch, patch, augment):
    n, h, w, _ = sharp.shape
    ps = min(patch, h, w)
    idx = rng.integers(0, n, size=batch)
    ys = rng.integers(0, h - ps + 1, size=batch)
    xs = rng.integers(0, w - ps + 1, size=batch)
    flips = rng.integers(0, 4, size=batch)
    xb = np.empty((batch, ps, ps, 3), np.float32)
    yb = np.empty_like(xb)
    for j in range(batch):
        b = blurred[idx[j], ys[j]:ys[j] + ps, xs[j]:xs[j] + ps]
        s = sharp[idx[j], ys[j]:ys[j] + ps, xs[j]:xs[j] + ps]
        if augment:
            if flips[j] & 1:
                b, s = b[:, ::-1], s[:, ::-1]
            if flips[j] & 2:
                b, s = b[::-1], s[::-1]
        xb[j], yb[j] = b, s
    return _to_tensor(xb), _to_tensor(yb)


def _check_patch(model: DeblurNet, tc: TrainConfig) -> None:
    m = model.config.size_multiple
    if tc.patch_size % m:
        raise ConfigurationError(f"patch_size must be a multiple of {m}")


def fit_arrays(model: DeblurNet, sharp: np.ndarray, blurred: np.ndarray, tc: TrainConfig,
               log_: TrainingLog | None = None) -> TrainingLog:
    """Minimise patch MSE between ``model(blurred)`` and ``sharp`` with Adam."""
    if len(sharp) == 0:
        raise DatasetError("empty training set")
    _check_patch(model, tc)
    log_ = log_ or TrainingLog(role=model.role)
    log_.samples = int(len(sharp))
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=tc.betas, eps=tc.eps)
    model.train()
    for step in range(tc.max_steps):
        x, y = _patch_batch(rng, sharp, blurred, tc.batch_size, tc.patch_size, tc.augment)
        opt.zero_grad()
        loss = F.mse_loss(model(x), y)
        if not torch.isfinite(loss):
            raise NumericError(f"training diverged at step {step}: loss={loss.item()}")
        loss.backward()
        opt.step()
        log_.losses.append(float(loss.item()))
        if step % 100 == 0:
            log.debug("%s step %d loss %.6f", model.role, step, log_.losses[-1])
    model.eval()
    return log_


def fit_cascade(model: DeblurNet, downstream: DeblurNet, motion: tuple, mixed: tuple, tc: TrainConfig,
                log_: TrainingLog | None = None) -> TrainingLog:
    """Train a motion model for the motion-then-defocus cascade.

    ``motion`` and ``mixed`` are ``(sharp, blurred)`` array pairs.  Each batch is
    split between them: motion patches are scored on ``model(x)`` and mixed
    patches on ``downstream(model(x))``, both against the sharp image, with the
    downstream weights frozen.  The motion stage thus learns to hand the defocus
    network an input it can finish, rather than a guessed defocus-only image.
    """
    (sharp_m, blurred_m), (sharp_x, blurred_x) = motion, mixed
    if len(sharp_m) == 0 or len(sharp_x) == 0:
        raise DatasetError("cascade training needs both motion and mixed pairs")
    if model.role != "motion" or downstream.role != "defocus":
        raise ConfigurationError("cascade training takes a motion model and a defocus downstream model")
    if tc.batch_size < 2:
        raise ConfigurationError("cascade training needs batch_size >= 2")
    _check_patch(model, tc)
    n_mixed = tc.batch_size // 2
    n_motion = tc.batch_size - n_mixed
    frozen = clone(downstream)
    for p in frozen.parameters():
        p.requires_grad_(False)
    log_ = log_ or TrainingLog(role=model.role)
    log_.samples = int(len(sharp_m) + len(sharp_x))
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=tc.betas, eps=tc.eps)
    model.train()
    for step in range(tc.max_steps):
        xm, ym = _patch_batch(rng, sharp_m, blurred_m, n_motion, tc.patch_size, tc.augment)
        xx, yx = _patch_batch(rng, sharp_x, blurred_x, n_mixed, tc.patch_size, tc.augment)
        opt.zero_grad()
        loss = (n_motion * F.mse_loss(model(xm), ym) + n_mixed * F.mse_loss(frozen(model(xx)), yx)) / tc.batch_size
        if not torch.isfinite(loss):
            raise NumericError(f"training diverged at step {step}: loss={loss.item()}")
        loss.backward()
        opt.step()
        log_.losses.append(float(loss.item()))
    model.eval()
    return log_


def train(model: DeblurNet, pairs, tc: TrainConfig, downstream: DeblurNet | None = None,
          downstream_name: str = "in-memory model") -> tuple[DeblurNet, TrainingLog]:
    """Train on the manifest rows whose class matches the model's role.

    With a ``downstream`` defocus model, a motion model is trained with
    ``fit_cascade`` on the Motion and Mixed rows instead.
    """
    if downstream is None:
        sharp, blurred = load_pairs(pairs, ROLE_CLASS[model.role])
        return model, fit_arrays(model, sharp, blurred, tc)
    log_ = TrainingLog(role=model.role, downstream=downstream_name)
    fit_cascade(model, downstream, load_pairs(pairs, BlurClass.MOTION), load_pairs(pairs, BlurClass.MIXED), tc, log_)
    return model, log_


def fine_tune(model: DeblurNet, pairs, tc: TrainConfig,
              provenance: str = "in-memory model") -> tuple[DeblurNet, TrainingLog]:
    """Continue training from the given weights (modified in place)."""
    sharp, blurred = load_pairs(pairs, ROLE_CLASS[model.role])
    log_ = TrainingLog(role=model.role, warm_start=provenance)
    fit_arrays(model, sharp, blurred, tc, log_)
    return model, log_


def clone(model: DeblurNet) -> DeblurNet:
    other = DeblurNet(NetworkConfig(**asdict(model.config)), model.role)
    other.load_state_dict(model.state_dict())
    other.eval()
    return other
