"""Classify-then-route deblurring workflow."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blur_classifier import BlurClassifierNet, classify
from .blur_synthesis import BlurClass
from .checkpoint import load_checkpoint
from .deblur_net import DeblurNet, infer
from .errors import CheckpointError, ConfigurationError, DbmidError
from .image_core import as_hwc

NONE = "none"
DL_MOTION = "DL_motion"
DL_DEFOCUS = "DL_defocus"

ROUTES = {
    BlurClass.IN_FOCUS: (NONE,),
    BlurClass.DEFOCUS: (DL_DEFOCUS,),
    BlurClass.MOTION: (DL_MOTION,),
    BlurClass.MIXED: (DL_MOTION, DL_DEFOCUS),
}


def route(predicted: BlurClass, force_class: BlurClass | None = None) -> tuple[str, ...]:
    return ROUTES[BlurClass.parse(force_class if force_class is not None else predicted)]


@dataclass
class PipelineConfig:
    classifier_checkpoint: str | None = None
    defocus_checkpoint: str | None = None
    motion_checkpoint: str | None = None
    force_class: BlurClass | None = None

    def __post_init__(self):
        if self.force_class is not None:
            self.force_class = BlurClass.parse(self.force_class)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        known = {"classifier_checkpoint", "defocus_checkpoint", "motion_checkpoint", "force_class"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"{path}: unknown pipeline keys {sorted(unknown)}")
        # checkpoint paths are relative to the config file
        for key in known - {"force_class"}:
            if data.get(key):
                data[key] = str((path.parent / data[key]).resolve())
        return cls(**data)


@dataclass
class DeblurReport:
    predicted_class: BlurClass
    class_scores: list
    stages_applied: list
    stage_seconds: dict = field(default_factory=dict)
    force_class: BlurClass | None = None

    def to_dict(self) -> dict:
        return {
            "predicted_class": self.predicted_class.value,
            "class_scores": [float(s) for s in self.class_scores],
            "stages_applied": list(self.stages_applied),
            "stage_seconds": {k: float(v) for k, v in self.stage_seconds.items()},
            "force_class": self.force_class.value if self.force_class else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class Pipeline:
    """Holds loaded weights; ``deblur`` may be called concurrently."""

    def __init__(self, classifier: BlurClassifierNet | None, defocus: DeblurNet | None,
                 motion: DeblurNet | None, force_class: BlurClass | None = None):
        for model, role in ((defocus, "defocus"), (motion, "motion"), (classifier, "classifier")):
            if model is not None and model.role != role:
                raise ConfigurationError(f"expected a {role} model, got role {model.role!r}")
        self.classifier = classifier
        self.networks = {DL_DEFOCUS: defocus, DL_MOTION: motion}
        self.force_class = BlurClass.parse(force_class) if force_class is not None else None

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "Pipeline":
        def load(path, role):
            if not path:
                return None
            try:
                return load_checkpoint(path, role)
            except CheckpointError as exc:
                raise ConfigurationError(str(exc)) from None
        return cls(load(config.classifier_checkpoint, "classifier"),
                   load(config.defocus_checkpoint, "defocus"),
                   load(config.motion_checkpoint, "motion"),
                   config.force_class)

    def deblur(self, image, force_class: BlurClass | None = None) -> tuple[np.ndarray, DeblurReport]:
        arr = as_hwc(image)
        force = BlurClass.parse(force_class) if force_class is not None else self.force_class
        if self.classifier is not None:
            try:
                predicted, scores = classify(arr, self.classifier)
            except DbmidError as exc:
                raise type(exc)(f"classification stage: {exc}") from exc
        elif force is not None:
            predicted, scores = force, np.eye(4)[force.index]
        else:
            raise ConfigurationError("no classifier loaded and no force_class given")
        stages = route(predicted, force)
        timings = {}
        out = arr.copy()  # never hand back the caller's buffer
        for stage in stages:
            if stage == NONE:
                continue
            net = self.networks[stage]
            if net is None:
                raise ConfigurationError(f"route needs {stage} but no checkpoint was configured")
            t0 = time.perf_counter()
            try:
                out = infer(net, out)
            except DbmidError as exc:
                raise type(exc)(f"{stage} stage: {exc}") from exc
            timings[stage] = time.perf_counter() - t0
        report = DeblurReport(predicted, list(scores), list(stages), timings, force)
        return out, report


def deblur(image, config: PipelineConfig | Pipeline) -> tuple[np.ndarray, DeblurReport]:
    pipe = config if isinstance(config, Pipeline) else Pipeline.from_config(config)
    return pipe.deblur(image)
