"""Oracles and fixtures shared by several test modules."""
import json
import math

import numpy as np
import torch
from scipy.optimize import brentq
from scipy.special import erf

from dbmid import cli
from dbmid.blur_classifier import ClassifierConfig, build_classifier
from dbmid.blur_synthesis import BLUR_CLASSES, BlurClass

SMALL_CLS = ClassifierConfig(stages=2, layers_per_stage=1, channels_per_stage=[4, 8], input_size=32)
SMOKE_CSVS = ("defocus_sweep", "motion_sweep", "mixed_grid", "classification", "generalization")


def brute_force_ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Loop over every fully-contained window; independent of the filtering path."""
    half = size // 2
    g = [math.exp(-(i - half) ** 2 / (2 * sigma ** 2)) for i in range(size)]
    w = np.array([[gi * gj for gj in g] for gi in g])
    w /= w.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    vals = []
    for ch in range(a.shape[2]):
        total, count = 0.0, 0
        for y in range(a.shape[0] - size + 1):
            for x in range(a.shape[1] - size + 1):
                pa = a[y:y + size, x:x + size, ch]
                pb = b[y:y + size, x:x + size, ch]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
                count += 1
        vals.append(total / count)
    return float(np.mean(vals))


def box_gaussian_fwhm(length: float, sigma: float = 1.5) -> float:
    """FWHM of a unit-area box of width ``length`` convolved with a Gaussian (dense closed form)."""
    if length <= 1:
        return 2 * math.sqrt(2 * math.log(2)) * sigma
    s = sigma * math.sqrt(2)
    f = lambda x: erf((x + length / 2) / s) - erf((x - length / 2) / s)
    half = f(0.0) / 2
    return 2 * brentq(lambda x: f(x) - half, 0, length + 10 * sigma)


def rigged_classifier(cls):
    """Small classifier whose output ignores the image and always favours ``cls``."""
    model = build_classifier(SMALL_CLS, 0)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.copy_(torch.tensor([5.0 if c == BlurClass.parse(cls) else 0.0 for c in BLUR_CLASSES]))
    return model


def run(argv):
    assert cli.main(argv) == 0, argv


def smoke_run(root):
    """synth -> train (three models, tiny budgets) -> eval, all through the CLI, inside ``root``."""
    run(["--workers", "2", "synth", "--out", str(root / "data"), "--preset", "smoke", "--size", "64"])
    for task, extra in (("defocus", []), ("motion", ["--defocus", str(root / "defocus.ckpt")])):
        run(["train", "--task", task, "--data", str(root / "data"), "--out", str(root / f"{task}.ckpt"),
             "--steps", "3"] + extra)
    run(["train", "--task", "classifier", "--data", str(root / "data"), "--out", str(root / "cls.ckpt"),
         "--epochs", "1"])
    (root / "exp.json").write_text(json.dumps({
        "checkpoints": {"classifier": "cls.ckpt", "defocus": "defocus.ckpt", "motion": "motion.ckpt"},
        "experiments": [
            {"kind": "defocus_sweep", "radii": [0, 3], "n": 2, "size": 64},
            {"kind": "motion_sweep", "lengths": [5], "n_images": 1, "size": 128},
            {"kind": "mixed_grid", "radii": [0, 3], "lengths": [0, 5], "n": 1, "size": 64, "use_classifier": True},
            {"kind": "classification", "n_per_class": 2, "dataset": {"size": 64}},
            {"kind": "generalization", "radii": [3], "n": 1, "base_train_size": 20, "fine_tune_steps": 2,
             "dataset": {"size": 64, "noise_sigma": 0.002}},
        ]}))
    run(["eval", "--experiment", str(root / "exp.json"), "--out", str(root / "results")])
