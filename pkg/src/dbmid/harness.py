"""Desk-scale experiment runners that emit CSV tables.

Each runner takes already-loaded models and a small set of sweep
parameters, evaluates every sweep point on seeded synthetic phantoms and
returns rows keyed by the schema headers in ``SCHEMAS``.  Sweep points run
in a thread pool but rows are always ordered by parameter value.
``run_experiment_file`` ties the runners to JSON experiment configs.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blur_classifier import BlurClassifierNet, classify, confusion_matrix
from .blur_synthesis import (BLUR_CLASSES, DIRECTIONS, BlurClass, BlurSpec, DatasetConfig, adjust_contrast,
                             apply_blur, make_phantom, make_sample, render_phantom, sample_seed, z_from_radius)
from .checkpoint import load_checkpoint
from .classical_baseline import DeconvConfig, blind_deconvolve
from .deblur_net import DeblurNet, TrainConfig, clone, fit_arrays, infer
from .errors import CheckpointError, ConfigurationError
from .metrics import measure_feature_fwhm, ssim
from .pipeline import Pipeline

log = logging.getLogger(__name__)

SCHEMAS = {
    "defocus_sweep": ("radius_px", "z_um", "method", "ssim_mean", "ssim_std", "n"),
    "motion_sweep": ("length_px", "direction", "method", "fwhm_mean", "fwhm_std", "n"),
    "mixed_grid": ("radius_px", "length_px", "surface", "ssim_mean", "n"),
    "classification": ("predicted", "actual", "count"),
    "runtime": ("method", "height", "width", "median_s", "iqr_s", "reps"),
}
# the generalization comparison reuses the sweep layout
SCHEMAS["generalization"] = SCHEMAS["defocus_sweep"]

SURFACES = ("blurred", "dl_defocus", "dl_motion", "dbmid")


@dataclass(frozen=True)
class EvaluationRecord:
    experiment: str
    params: dict
    method: str
    metric: str
    mean: float
    std: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("an evaluation record needs n >= 1")
        if self.std < 0:
            raise ConfigurationError("std must be non-negative")


def _summary(values) -> tuple[float, float, int]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ConfigurationError("no measurements for a sweep point")
    return float(arr.mean()), float(arr.std()), int(arr.size)


def _pmap(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# CSV output

def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".8g")
    return str(value)


def validate_rows(kind: str, rows: list[dict]) -> None:
    if kind not in SCHEMAS:
        raise ConfigurationError(f"unknown CSV schema {kind!r}")
    header = SCHEMAS[kind]
    for row in rows:
        if tuple(row) != header:
            raise ConfigurationError(f"{kind} row has columns {tuple(row)}, expected {header}")
        for key in ("n", "reps", "count"):
            if key in row and int(row[key]) < (0 if key == "count" else 1):
                raise ConfigurationError(f"{kind}: invalid {key}={row[key]}")
        for key in ("ssim_std", "fwhm_std", "iqr_s"):
            if key in row and not row[key] >= 0:
                raise ConfigurationError(f"{kind}: invalid {key}={row[key]}")


def rows_to_csv(kind: str, rows: list[dict]) -> str:
    validate_rows(kind, rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCHEMAS[kind])
    for row in rows:
        writer.writerow([_fmt(v) for v in row.values()])
    return buf.getvalue()


def write_csv(kind: str, rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(kind, rows))
    return path


def read_csv(path) -> tuple[str, list[dict]]:
    """Rows of a harness CSV plus the schema name its header matches."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        rows = list(reader)
    for kind in ("defocus_sweep", "motion_sweep", "mixed_grid", "classification", "runtime"):
        if SCHEMAS[kind] == header:
            return kind, rows
    raise ConfigurationError(f"{path}: header {header} matches no harness schema")


# --------------------------------------------------------------------------
# Defocus sweep

def _test_phantoms(n: int, size: int, kinds, seed: int, contrast: float = 1.0):
    out = []
    for i in range(n):
        s = sample_seed(seed, i)
        kind = kinds[i % len(kinds)]
        img = make_phantom(kind, size, s)
        if contrast != 1.0:
            img = adjust_contrast(img, contrast)
        out.append((kind, s, img))
    return out


def _defocus_blur(radius: float, noise_sigma: float, seed: int) -> BlurSpec:
    cls = BlurClass.DEFOCUS if radius > 0 else BlurClass.IN_FOCUS
    return BlurSpec(cls, radius, 0, "horizontal", noise_sigma, seed)


def run_defocus_sweep(model: DeblurNet, radii, n: int = 50, size: int = 128, phantom_kinds=("cells",),
                      noise_sigma: float = 0.0, seed: int = 0, per_kind_models: dict | None = None,
                      contrast: float = 1.0, workers: int = 1) -> list[dict]:
    """SSIM of blurred and deblurred images against the sharp phantom, per radius.

    Every radius uses the same sharp phantoms so curves are paired.  With
    ``per_kind_models`` (phantom kind -> model) each image is also deblurred
    by the model trained on its own kind, reported as ``dl_defocus_per_kind``.
    """
    if model is None:
        raise ConfigurationError("defocus sweep needs a DL_defocus model")
    kinds = list(phantom_kinds)
    if per_kind_models and set(kinds) - set(per_kind_models):
        raise ConfigurationError(f"per-kind models missing for {sorted(set(kinds) - set(per_kind_models))}")
    phantoms = _test_phantoms(n, size, kinds, seed, contrast)

    def point(radius):
        blurred_s, deblurred_s, per_kind_s = [], [], []
        for kind, s, sharp in phantoms:
            blurred = apply_blur(sharp, _defocus_blur(radius, noise_sigma, s))
            blurred_s.append(ssim(blurred, sharp))
            deblurred_s.append(ssim(infer(model, blurred), sharp))
            if per_kind_models:
                per_kind_s.append(ssim(infer(per_kind_models[kind], blurred), sharp))
        rows = [("none", blurred_s), ("dl_defocus", deblurred_s)]
        if per_kind_models:
            rows.append(("dl_defocus_per_kind", per_kind_s))
        return [_sweep_row(radius, method, vals) for method, vals in rows]

    radii = sorted(float(r) for r in radii)
    return [row for rows in _pmap(point, radii, workers) for row in rows]


def _sweep_row(radius: float, method: str, values) -> dict:
    mean, std, count = _summary(values)
    return {"radius_px": float(radius), "z_um": round(z_from_radius(radius), 6), "method": method,
            "ssim_mean": mean, "ssim_std": std, "n": count}


# --------------------------------------------------------------------------
# Motion sweep

def spot_fwhms(image, spots, direction: str, half_window: int) -> list[float]:
    h, w = image.shape[:2]
    out = []
    for y, x in spots:
        along = x if direction == "horizontal" else y
        extent = w if direction == "horizontal" else h
        if along - half_window < 0 or along + half_window >= extent:
            continue
        v = measure_feature_fwhm(image, (y, x), direction, half_window, invert=True)
        if v is not None:
            out.append(v)
    return out


def run_motion_sweep(model: DeblurNet, lengths, directions=DIRECTIONS, n_images: int = 6, size: int = 256,
                     spacing: int = 64, half_window: int = 24, noise_sigma: float = 0.0, seed: int = 0,
                     blind: DeconvConfig | None = None, workers: int = 1) -> list[dict]:
    """Mean FWHM of point-like spots along the blur direction.

    Methods: ``in_focus`` (reference, same at every length), ``none``
    (blurred), ``dl_motion`` and, when ``blind`` is given, ``blind_deconv``.
    """
    if model is None:
        raise ConfigurationError("motion sweep needs a DL_motion model")
    phantoms = [render_phantom("spots", size, sample_seed(seed, i), spacing=spacing) for i in range(n_images)]
    points = [(int(L), d) for L in sorted(set(int(v) for v in lengths)) for d in directions]

    def point(job):
        length, direction = job
        ref, blurred_w, deblurred_w, blind_w = [], [], [], []
        for i, ph in enumerate(phantoms):
            ref += spot_fwhms(ph.image, ph.spots, direction, half_window)
            spec = (BlurSpec("Motion", 0, length, direction, noise_sigma, sample_seed(seed, i))
                    if length > 0 else BlurSpec("InFocus", noise_sigma=noise_sigma, seed=sample_seed(seed, i)))
            blurred = apply_blur(ph.image, spec)
            blurred_w += spot_fwhms(blurred, ph.spots, direction, half_window)
            deblurred_w += spot_fwhms(infer(model, blurred), ph.spots, direction, half_window)
            if blind is not None:
                blind_w += spot_fwhms(blind_deconvolve(blurred, blind)[0], ph.spots, direction, half_window)
        rows = [("in_focus", ref), ("none", blurred_w), ("dl_motion", deblurred_w)]
        if blind is not None:
            rows.append(("blind_deconv", blind_w))
        out = []
        for method, vals in rows:
            mean, std, count = _summary(vals)
            out.append({"length_px": length, "direction": direction, "method": method,
                        "fwhm_mean": mean, "fwhm_std": std, "n": count})
        return out

    return [row for rows in _pmap(point, points, workers) for row in rows]


# --------------------------------------------------------------------------
# Mixed grid

def _grid_spec(radius: float, length: int, direction: str, noise_sigma: float, seed: int) -> BlurSpec:
    cls = {(False, False): BlurClass.IN_FOCUS, (True, False): BlurClass.DEFOCUS,
           (False, True): BlurClass.MOTION, (True, True): BlurClass.MIXED}[(radius > 0, length > 0)]
    return BlurSpec(cls, radius, length, direction, noise_sigma, seed)


def run_mixed_grid(defocus: DeblurNet, motion: DeblurNet, radii, lengths, n: int = 10, size: int = 128,
                   phantom_kinds=("cells",), directions=DIRECTIONS, noise_sigma: float = 0.0, seed: int = 0,
                   classifier: BlurClassifierNet | None = None, workers: int = 1) -> list[dict]:
    """SSIM heatmaps over (radius, length) for the four surfaces in ``SURFACES``.

    The ``dbmid`` surface routes each image by its true blur class, or by
    ``classifier`` when one is given.  The single-net surfaces run that one
    network regardless of class.
    """
    if defocus is None or motion is None:
        raise ConfigurationError("mixed grid needs both DL_defocus and DL_motion models")
    pipe = Pipeline(classifier, defocus, motion)
    phantoms = _test_phantoms(n, size, list(phantom_kinds), seed)
    cells = [(float(r), int(L)) for r in sorted(set(float(v) for v in radii))
             for L in sorted(set(int(v) for v in lengths))]

    def point(cell):
        radius, length = cell
        scores = {s: [] for s in SURFACES}
        for i, (_, s, sharp) in enumerate(phantoms):
            spec = _grid_spec(radius, length, directions[i % len(directions)], noise_sigma, s)
            blurred = apply_blur(sharp, spec)
            scores["blurred"].append(ssim(blurred, sharp))
            scores["dl_defocus"].append(ssim(infer(defocus, blurred), sharp))
            scores["dl_motion"].append(ssim(infer(motion, blurred), sharp))
            force = None if classifier is not None else spec.blur_class
            out, _ = pipe.deblur(blurred, force_class=force)
            scores["dbmid"].append(ssim(out, sharp))
        return [{"radius_px": radius, "length_px": length, "surface": surface,
                 "ssim_mean": _summary(scores[surface])[0], "n": len(scores[surface])} for surface in SURFACES]

    return [row for rows in _pmap(point, cells, workers) for row in rows]


def grid_means(rows: list[dict], positive_only: bool = True) -> dict:
    """Mean SSIM per surface over grid cells (both extents > 0 by default)."""
    acc = {}
    for row in rows:
        if positive_only and not (float(row["radius_px"]) > 0 and float(row["length_px"]) > 0):
            continue
        acc.setdefault(row["surface"], []).append(float(row["ssim_mean"]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# --------------------------------------------------------------------------
# Classification

def held_out_set(config: DatasetConfig, n_per_class: int, seed_offset: int = 1_000_000):
    """Blurred images and labels drawn from ``config`` with indices disjoint from training."""
    images, labels = [], []
    for c, cls in enumerate(BLUR_CLASSES):
        for i in range(n_per_class):
            s = sample_seed(config.master_seed, seed_offset + c * n_per_class + i)
            images.append(make_sample(config, cls, s).blurred)
            labels.append(cls)
    return images, labels


def run_classification_eval(classifier: BlurClassifierNet, images, labels, workers: int = 1):
    """Confusion-matrix rows (rows = predicted, columns = actual) and the Confusion object."""
    if classifier is None:
        raise ConfigurationError("classification eval needs a classifier model")
    preds = _pmap(lambda im: classify(im, classifier)[0], images, workers)
    conf = confusion_matrix(preds, labels)
    rows = [{"predicted": p, "actual": a, "count": c} for p, a, c in conf.records()]
    return rows, conf


# --------------------------------------------------------------------------
# Runtime

def benchmark_runtime(methods: dict, sizes, reps: int = 5, warmup: int = 2, seed: int = 0) -> list[dict]:
    """Median and IQR wall time per (method, size); the first ``warmup`` runs are discarded.

    ``methods`` maps a name to a callable taking one image.
    """
    if reps < 1:
        raise ConfigurationError("reps must be >= 1")
    rows = []
    for size in sorted(int(s) for s in sizes):
        sharp = make_phantom("cells", size, sample_seed(seed, size))
        image = apply_blur(sharp, BlurSpec("Mixed", 4.0, 15, "horizontal"))
        for name, fn in methods.items():
            times = []
            for i in range(warmup + reps):
                t0 = time.perf_counter()
                fn(image)
                if i >= warmup:
                    times.append(time.perf_counter() - t0)
            q1, med, q3 = np.percentile(times, [25, 50, 75])
            rows.append({"method": name, "height": size, "width": size, "median_s": float(med),
                         "iqr_s": float(q3 - q1) if reps > 1 else 0.0, "reps": reps})
    return rows


# --------------------------------------------------------------------------
# Generalization / fine-tuning

def shifted_config(base: DatasetConfig, noise_factor: float = 4.0, contrast_factor: float = 0.7,
                   master_seed: int | None = None) -> DatasetConfig:
    """Same generator with noise scaled by ``noise_factor`` and contrast by ``contrast_factor``."""
    d = base.to_dict()
    d["noise_sigma"] = base.noise_sigma * noise_factor
    d["contrast"] = base.contrast * contrast_factor
    if master_seed is not None:
        d["master_seed"] = master_seed
    return DatasetConfig.from_dict(d)


def fine_tune_set(config: DatasetConfig, count: int, seed_offset: int = 2_000_000):
    sharp, blurred = [], []
    for i in range(count):
        sample = make_sample(config, BlurClass.DEFOCUS, sample_seed(config.master_seed, seed_offset + i))
        sharp.append(sample.sharp)
        blurred.append(sample.blurred)
    return np.stack(sharp).astype(np.float32), np.stack(blurred).astype(np.float32)


def run_generalization_eval(base_model: DeblurNet, shifted: DatasetConfig, radii, fine_tune_fraction: float = 0.1,
                            base_train_size: int = 200, train: TrainConfig | None = None, n: int = 50,
                            workers: int = 1) -> tuple[list[dict], DeblurNet]:
    """Blurred, base-model and fine-tuned SSIM curves on a distribution-shifted set.

    The fine-tune set has ``round(fine_tune_fraction * base_train_size)``
    defocus pairs drawn from ``shifted``; fraction 0 skips training so the
    fine-tuned curve equals the base curve.
    """
    if base_model is None:
        raise ConfigurationError("generalization eval needs a base DL_defocus model")
    tuned = clone(base_model)
    count = int(round(fine_tune_fraction * base_train_size))
    if count > 0:
        sharp, blurred = fine_tune_set(shifted, count)
        fit_arrays(tuned, sharp, blurred, train or TrainConfig.desk_fine_tune(max_steps=200, seed=shifted.master_seed))
    seed = sample_seed(shifted.master_seed, 3_000_000)
    phantoms = _test_phantoms(n, shifted.size, list(shifted.phantom_kinds), seed, shifted.contrast)

    def point(radius):
        vals = {"none": [], "dl_defocus": [], "dl_defocus_finetuned": []}
        for _, s, sharp in phantoms:
            blurred = apply_blur(sharp, _defocus_blur(radius, shifted.noise_sigma, s))
            vals["none"].append(ssim(blurred, sharp))
            vals["dl_defocus"].append(ssim(infer(base_model, blurred), sharp))
            vals["dl_defocus_finetuned"].append(
                vals["dl_defocus"][-1] if count == 0 else ssim(infer(tuned, blurred), sharp))
        return [_sweep_row(radius, m, v) for m, v in vals.items()]

    radii = sorted(float(r) for r in radii)
    return [row for rows in _pmap(point, radii, workers) for row in rows], tuned


def method_means(rows: list[dict], metric: str = "ssim_mean", min_radius: float | None = None) -> dict:
    acc = {}
    for row in rows:
        if min_radius is not None and float(row["radius_px"]) < min_radius:
            continue
        acc.setdefault(row["method"], []).append(float(row[metric]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# --------------------------------------------------------------------------
# JSON experiment files

EXPERIMENT_KEYS = {
    "defocus_sweep": {"radii", "n", "size", "phantom_kinds", "noise_sigma", "seed", "per_kind_checkpoints"},
    "motion_sweep": {"lengths", "directions", "n_images", "size", "spacing", "half_window", "noise_sigma",
                     "seed", "blind_iterations"},
    "mixed_grid": {"radii", "lengths", "n", "size", "phantom_kinds", "directions", "noise_sigma", "seed",
                   "use_classifier"},
    "classification": {"n_per_class", "dataset"},
    "generalization": {"radii", "fine_tune_fraction", "base_train_size", "n", "dataset", "noise_factor",
                       "contrast_factor", "fine_tune_steps", "seed"},
    "runtime": {"sizes", "reps", "warmup", "blind_iterations", "seed"},
}
CHECKPOINT_ROLES = {"classifier": "classifier", "defocus": "defocus", "motion": "motion"}


def load_experiment_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    unknown = set(data) - {"checkpoints", "experiments", "seed"}
    if unknown:
        raise ConfigurationError(f"{path}: unknown top-level keys {sorted(unknown)}")
    checkpoints = {}
    for role, rel in (data.get("checkpoints") or {}).items():
        if role not in CHECKPOINT_ROLES:
            raise ConfigurationError(f"{path}: unknown checkpoint role {role!r}")
        checkpoints[role] = str((path.parent / rel).resolve())
    experiments = data.get("experiments") or []
    names = set()
    for exp in experiments:
        kind = exp.get("kind")
        if kind not in EXPERIMENT_KEYS:
            raise ConfigurationError(f"{path}: unknown experiment kind {kind!r}")
        extra = set(exp) - EXPERIMENT_KEYS[kind] - {"kind", "name"}
        if extra:
            raise ConfigurationError(f"{path}: {kind} does not accept {sorted(extra)}")
        name = exp.setdefault("name", kind)
        if name in names:
            raise ConfigurationError(f"{path}: duplicate experiment name {name!r}")
        names.add(name)
        if "per_kind_checkpoints" in exp:
            exp["per_kind_checkpoints"] = {k: str((path.parent / v).resolve())
                                           for k, v in exp["per_kind_checkpoints"].items()}
    return {"checkpoints": checkpoints, "experiments": experiments, "seed": int(data.get("seed", 0))}


class _Models:
    def __init__(self, paths: dict):
        self.paths = paths
        self.cache = {}

    def get(self, role: str, required: bool = True, path: str | None = None):
        path = path or self.paths.get(role)
        if path is None:
            if required:
                raise ConfigurationError(f"experiment needs a {role} checkpoint")
            return None
        if path not in self.cache:
            try:
                self.cache[path] = load_checkpoint(path, CHECKPOINT_ROLES.get(role, role))
            except CheckpointError as exc:
                raise ConfigurationError(str(exc)) from None
        return self.cache[path]


def run_experiment(exp: dict, models: _Models, seed: int, workers: int = 1) -> tuple[str, list[dict], dict]:
    """Run one experiment dict; returns (schema, rows, summary)."""
    kind = exp["kind"]
    s = int(exp.get("seed", seed))
    if kind == "defocus_sweep":
        per_kind = None
        if exp.get("per_kind_checkpoints"):
            per_kind = {k: models.get("defocus", path=p) for k, p in exp["per_kind_checkpoints"].items()}
        rows = run_defocus_sweep(models.get("defocus"), exp.get("radii", [0, 1, 2, 3, 5, 7, 10]),
                                 n=exp.get("n", 50), size=exp.get("size", 128),
                                 phantom_kinds=exp.get("phantom_kinds", ["cells"]),
                                 noise_sigma=exp.get("noise_sigma", 0.0), seed=s, per_kind_models=per_kind,
                                 workers=workers)
        summary = {"mean_ssim_radius_ge_3": method_means(rows, min_radius=3)}
        if per_kind:
            summary["aggregate"] = method_means(rows)
        return kind, rows, summary
    if kind == "motion_sweep":
        blind = DeconvConfig(iterations=exp["blind_iterations"]) if exp.get("blind_iterations") else None
        rows = run_motion_sweep(models.get("motion"), exp.get("lengths", [5, 10, 15, 20]),
                                exp.get("directions", list(DIRECTIONS)), n_images=exp.get("n_images", 6),
                                size=exp.get("size", 256), spacing=exp.get("spacing", 64),
                                half_window=exp.get("half_window", 24), noise_sigma=exp.get("noise_sigma", 0.0),
                                seed=s, blind=blind, workers=workers)
        return kind, rows, {}
    if kind == "mixed_grid":
        classifier = models.get("classifier") if exp.get("use_classifier") else None
        rows = run_mixed_grid(models.get("defocus"), models.get("motion"), exp.get("radii", [0, 3, 5, 7, 10]),
                              exp.get("lengths", [0, 5, 10, 15, 20]), n=exp.get("n", 10),
                              size=exp.get("size", 128), phantom_kinds=exp.get("phantom_kinds", ["cells"]),
                              directions=exp.get("directions", list(DIRECTIONS)),
                              noise_sigma=exp.get("noise_sigma", 0.0), seed=s, classifier=classifier,
                              workers=workers)
        return kind, rows, {"grid_means": grid_means(rows)}
    if kind == "classification":
        cfg = DatasetConfig.from_dict({"master_seed": s, **exp.get("dataset", {})})
        images, labels = held_out_set(cfg, exp.get("n_per_class", 200))
        rows, conf = run_classification_eval(models.get("classifier"), images, labels, workers)
        return kind, rows, {"accuracy": conf.accuracy, "n": int(conf.matrix.sum())}
    if kind == "generalization":
        base = DatasetConfig.from_dict({"master_seed": s, **exp.get("dataset", {})})
        shifted = shifted_config(base, exp.get("noise_factor", 4.0), exp.get("contrast_factor", 0.7))
        tc = TrainConfig.desk_fine_tune(max_steps=exp.get("fine_tune_steps", 200), seed=s)
        rows, _ = run_generalization_eval(models.get("defocus"), shifted, exp.get("radii", [3, 5, 7, 10]),
                                          exp.get("fine_tune_fraction", 0.1), exp.get("base_train_size", 200),
                                          tc, n=exp.get("n", 50), workers=workers)
        return "generalization", rows, {"means": method_means(rows)}
    if kind == "runtime":
        pipe = Pipeline(models.get("classifier", required=False), models.get("defocus"), models.get("motion"),
                        force_class=None if "classifier" in models.paths else BlurClass.MIXED)
        blind = DeconvConfig(iterations=exp.get("blind_iterations", 30))
        methods = {"dbmid": pipe.deblur, "blind_deconv": lambda im: blind_deconvolve(im, blind)}
        rows = benchmark_runtime(methods, exp.get("sizes", [256, 512]), exp.get("reps", 5),
                                 exp.get("warmup", 2), s)
        return kind, rows, {}
    raise ConfigurationError(f"unknown experiment kind {kind!r}")


def run_experiment_file(path, out_dir, workers: int = 1, figures: bool = True) -> dict:
    """Run every experiment in a JSON file, writing ``<name>.csv`` (and ``<name>.png``) to ``out_dir``."""
    spec = load_experiment_file(path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models = _Models(spec["checkpoints"])
    summary = {}
    for exp in spec["experiments"]:
        log.info("running %s (%s)", exp["name"], exp["kind"])
        schema, rows, extra = run_experiment(exp, models, spec["seed"], workers)
        csv_path = write_csv(schema, rows, out_dir / f"{exp['name']}.csv")
        summary[exp["name"]] = {"kind": exp["kind"], "csv": csv_path.name, **extra}
        if figures:
            from .plotting import plot_csv
            plot_csv(csv_path, out_dir / f"{exp['name']}.png")
            summary[exp["name"]]["figure"] = f"{exp['name']}.png"
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
