"""Shared domain types, their invariants, and artifact serialization."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

PERSON = "person"

SIDECAR_SUFFIX = ".json"


def as_pixels(image) -> torch.Tensor:
    """Coerce an ImagePlane, tensor, or array to an (H, W, 3) float tensor.

    Integer inputs are rescaled from [0, 255]; float inputs pass through
    (dtype preserved, so float64 probes survive for numeric checks).
    """
    if isinstance(image, ImagePlane):
        return image.pixels
    t = torch.as_tensor(image)
    if not t.is_floating_point():
        t = t.to(torch.float32) / 255.0
    return t


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """Quantize [0, 1] float pixels to uint8 with round-to-nearest."""
    arr = pixels.detach().cpu().clamp(0.0, 1.0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class ImagePlane:
    """One RGB image: (H, W, 3) float32 pixels in [0, 1]."""

    pixels: torch.Tensor

    @classmethod
    def from_array(cls, array) -> "ImagePlane":
        return cls(as_pixels(array).to(torch.float32))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, corners (x_min, y_min), (x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_label: str
    confidence: float


@dataclass(frozen=True)
class LabeledBox:
    """Ground-truth box with a class label (no confidence)."""

    box: BoundingBox
    class_label: str = PERSON


@dataclass(frozen=True)
class FrameTruth:
    """Annotations for one frame, with optional capture-axis metadata."""

    image_id: str
    boxes: tuple[LabeledBox, ...]
    angle_deg: float | None = None
    distance_m: float | None = None

    def person_boxes(self) -> list[BoundingBox]:
        return [b.box for b in self.boxes if b.class_label == PERSON]


# Patch side length is l = c * d with c = kappa * c0; c0 is the baseline
# fraction of the wearer's box diagonal d, kappa the relative size knob.
DEFAULT_C0 = 0.2
DEFAULT_PATCH_RESOLUTION = 300


@dataclass(frozen=True)
class PatchSpec:
    """A square adversarial patch plus its sizing rule."""

    pixels: torch.Tensor  # (res, res, 3) float in [0, 1]
    c0: float = DEFAULT_C0
    kappa: float = 1.0

    @property
    def c(self) -> float:
        return self.kappa * self.c0

    @property
    def resolution(self) -> int:
        return int(self.pixels.shape[0])


def latent_shape(base_h: int, base_w: int, gamma: float) -> tuple[int, int]:
    """Padded latent size for a (base_h, base_w) texture: base + floor(gamma * base)."""
    return (base_h + math.floor(gamma * base_h), base_w + math.floor(gamma * base_w))


@dataclass(frozen=True)
class LatentTextureMap:
    """Oversized texture canvas from which (base_h, base_w) crops are worn."""

    pixels: torch.Tensor  # (latent_h, latent_w, 3) float in [0, 1]
    base_h: int
    base_w: int
    gamma: float

    @classmethod
    def create(
        cls,
        base_h: int,
        base_w: int,
        gamma: float,
        rng: torch.Generator | None = None,
        fill: float | None = None,
    ) -> "LatentTextureMap":
        lh, lw = latent_shape(base_h, base_w, gamma)
        if fill is not None:
            px = torch.full((lh, lw, 3), float(fill))
        else:
            px = torch.rand((lh, lw, 3), generator=rng)
        return cls(px, base_h, base_w, gamma)

    @property
    def latent_h(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def latent_w(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def margin(self) -> tuple[int, int]:
        """(rows, cols) of jitter headroom: floor(gamma * base)."""
        return (self.latent_h - self.base_h, self.latent_w - self.base_w)


@dataclass(frozen=True)
class MaskMap:
    """Per-pixel mask, (H, W) float values in [0, 1]; 1 marks suspect pixels."""

    values: torch.Tensor

    @property
    def coverage(self) -> float:
        return float(self.values.float().mean())


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    confidence_threshold: float = 0.5
    target_class: str = PERSON


@dataclass(frozen=True)
class OptimConfig:
    epochs: int = 100
    learning_rate: float = 0.01
    optimizer: str = "adam"
    tv_weight: float = 0.1
    nps_weight: float = 0.01
    gamma: float = 0.1
    batch_size: int = 8
    seed: int = 0


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, field_name: str, message: str) -> None:
        self.violations.append(f"{field_name}: {message}")


def _check_pixels(report: ValidationReport, t: torch.Tensor, name: str, channels: int | None = 3) -> None:
    if channels is None:
        if t.dim() != 2:
            report.add(name, f"expected 2 dims, got shape {tuple(t.shape)}")
            return
    else:
        if t.dim() != 3 or t.shape[2] != channels:
            report.add(name, f"expected (H, W, {channels}), got shape {tuple(t.shape)}")
            return
    if t.numel() == 0:
        report.add(name, "empty")
        return
    if not torch.isfinite(t).all():
        report.add(name, "contains non-finite values")
        return
    lo, hi = float(t.min()), float(t.max())
    if lo < 0.0 or hi > 1.0:
        report.add(name, f"values outside [0, 1] (min {lo:.6g}, max {hi:.6g})")


def validate(entity) -> ValidationReport:
    """Check an entity's structural invariants. Reports violations, never raises."""
    rep = ValidationReport()
    if isinstance(entity, ImagePlane):
        _check_pixels(rep, entity.pixels, "pixels")
    elif isinstance(entity, BoundingBox):
        if not (entity.x_min < entity.x_max):
            rep.add("x_max", f"must exceed x_min ({entity.x_min} >= {entity.x_max})")
        if not (entity.y_min < entity.y_max):
            rep.add("y_max", f"must exceed y_min ({entity.y_min} >= {entity.y_max})")
        for f in ("x_min", "y_min", "x_max", "y_max"):
            if not math.isfinite(getattr(entity, f)):
                rep.add(f, "must be finite")
    elif isinstance(entity, Detection):
        rep.violations.extend(validate(entity.box).violations)
        if not (0.0 <= entity.confidence <= 1.0):
            rep.add("confidence", f"must lie in [0, 1], got {entity.confidence}")
        if not entity.class_label:
            rep.add("class_label", "must be non-empty")
    elif isinstance(entity, LabeledBox):
        rep.violations.extend(validate(entity.box).violations)
        if not entity.class_label:
            rep.add("class_label", "must be non-empty")
    elif isinstance(entity, FrameTruth):
        if not entity.image_id:
            rep.add("image_id", "must be non-empty")
        for i, lb in enumerate(entity.boxes):
            for v in validate(lb).violations:
                rep.add(f"boxes[{i}]", v)
        if entity.angle_deg is not None and not (-180.0 <= entity.angle_deg <= 180.0):
            rep.add("angle_deg", f"must lie in [-180, 180], got {entity.angle_deg}")
        if entity.distance_m is not None and entity.distance_m <= 0.0:
            rep.add("distance_m", f"must be positive, got {entity.distance_m}")
    elif isinstance(entity, PatchSpec):
        _check_pixels(rep, entity.pixels, "pixels")
        if entity.pixels.dim() == 3 and entity.pixels.shape[0] != entity.pixels.shape[1]:
            rep.add("pixels", f"patch must be square, got {tuple(entity.pixels.shape[:2])}")
        if entity.c0 <= 0.0:
            rep.add("c0", f"must be positive, got {entity.c0}")
        if entity.kappa <= 0.0:
            rep.add("kappa", f"must be positive, got {entity.kappa}")
    elif isinstance(entity, LatentTextureMap):
        _check_pixels(rep, entity.pixels, "pixels")
        if not (0.0 <= entity.gamma < 1.0):
            rep.add("gamma", f"must lie in [0, 1), got {entity.gamma}")
        if entity.base_h < 1 or entity.base_w < 1:
            rep.add("base_h/base_w", "must be at least 1")
        elif entity.pixels.dim() == 3:
            want = latent_shape(entity.base_h, entity.base_w, entity.gamma)
            got = (entity.latent_h, entity.latent_w)
            if want != got:
                rep.add("pixels", f"latent dims {got} do not match required {want}")
    elif isinstance(entity, MaskMap):
        _check_pixels(rep, entity.values, "values", channels=None)
    elif isinstance(entity, EvalConfig):
        if not (0.0 < entity.iou_threshold < 1.0):
            rep.add("iou_threshold", f"must lie in (0, 1), got {entity.iou_threshold}")
        if not (0.0 < entity.confidence_threshold < 1.0):
            rep.add("confidence_threshold", f"must lie in (0, 1), got {entity.confidence_threshold}")
        if not entity.target_class:
            rep.add("target_class", "must be non-empty")
    elif isinstance(entity, OptimConfig):
        if entity.epochs < 1:
            rep.add("epochs", f"must be at least 1, got {entity.epochs}")
        if entity.learning_rate <= 0.0:
            rep.add("learning_rate", f"must be positive, got {entity.learning_rate}")
        if entity.optimizer not in ("adam", "sgd"):
            rep.add("optimizer", f"unknown optimizer {entity.optimizer!r}")
        if entity.tv_weight < 0.0 or entity.nps_weight < 0.0:
            rep.add("tv_weight/nps_weight", "loss weights must be non-negative")
        if not (0.0 <= entity.gamma < 1.0):
            rep.add("gamma", f"must lie in [0, 1), got {entity.gamma}")
        if entity.batch_size < 1:
            rep.add("batch_size", f"must be at least 1, got {entity.batch_size}")
    else:
        rep.add("entity", f"no validator for type {type(entity).__name__}")
    return rep


# --- annotation schema -------------------------------------------------------

def frame_truth_to_dict(truth: FrameTruth, file_name: str | None = None) -> dict:
    d: dict = {
        "image_id": truth.image_id,
        "file": file_name if file_name is not None else f"{truth.image_id}.png",
        "boxes": [
            {
                "x_min": lb.box.x_min,
                "y_min": lb.box.y_min,
                "x_max": lb.box.x_max,
                "y_max": lb.box.y_max,
                "class": lb.class_label,
            }
            for lb in truth.boxes
        ],
    }
    if truth.angle_deg is not None:
        d["angle_deg"] = truth.angle_deg
    if truth.distance_m is not None:
        d["distance_m"] = truth.distance_m
    return d


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, fixed separators."""
    return json.dumps(obj, sort_keys=True, indent=2)


def write_json(path: Path | str, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def read_json(path: Path | str):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# --- artifact persistence ----------------------------------------------------
#
# Pixels go to 8-bit RGB PNG; scalar fields go to a JSON sidecar next to it.
# The quantization step is the declared storage precision for pixel data;
# sidecar scalars round-trip exactly.

def _save_png(path: Path, pixels: torch.Tensor) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path)


def _load_png(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def save_patch(path: Path | str, patch: PatchSpec, seed: int | None = None) -> Path:
    path = Path(path)
    _save_png(path, patch.pixels)
    sidecar = {"kind": "patch", "c0": patch.c0, "kappa": patch.kappa, "seed": seed}
    write_json(path.with_suffix(SIDECAR_SUFFIX), sidecar)
    return path


def save_texture(path: Path | str, texture: LatentTextureMap, seed: int | None = None) -> Path:
    path = Path(path)
    _save_png(path, texture.pixels)
    sidecar = {
        "kind": "texture",
        "gamma": texture.gamma,
        "base_w": texture.base_w,
        "base_h": texture.base_h,
        "seed": seed,
    }
    write_json(path.with_suffix(SIDECAR_SUFFIX), sidecar)
    return path


def load_artifact(path: Path | str) -> tuple[PatchSpec | LatentTextureMap, dict]:
    """Load a saved patch or texture plus its sidecar metadata."""
    path = Path(path)
    sidecar = read_json(path.with_suffix(SIDECAR_SUFFIX))
    pixels = _load_png(path)
    kind = sidecar.get("kind")
    if kind == "patch":
        return PatchSpec(pixels, c0=sidecar["c0"], kappa=sidecar["kappa"]), sidecar
    if kind == "texture":
        return (
            LatentTextureMap(pixels, base_h=sidecar["base_h"], base_w=sidecar["base_w"], gamma=sidecar["gamma"]),
            sidecar,
        )
    raise ValueError(f"unrecognized artifact kind {kind!r} in {path.with_suffix(SIDECAR_SUFFIX)}")
