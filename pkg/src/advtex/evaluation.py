"""Detection metrics, capture-axis aggregation, and frameset IO."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    BoundingBox,
    Detection,
    EvalConfig,
    FrameTruth,
    ImagePlane,
    LabeledBox,
    PERSON,
    read_json,
    validate,
)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when they do not overlap."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def _person_truth_boxes(truth: FrameTruth | list | tuple, target_class: str) -> list[BoundingBox]:
    if isinstance(truth, FrameTruth):
        return [lb.box for lb in truth.boxes if lb.class_label == target_class]
    boxes = []
    for item in truth:
        if isinstance(item, LabeledBox):
            if item.class_label == target_class:
                boxes.append(item.box)
        elif isinstance(item, BoundingBox):
            boxes.append(item)
        else:
            raise TypeError(f"unsupported truth entry {type(item).__name__}")
    return boxes


def match_frame(
    detections: list[Detection],
    truth_boxes: list[BoundingBox],
    iou_threshold: float,
    target_class: str = PERSON,
) -> list[tuple[int, float, bool]]:
    """Greedy matching for one frame.

    Detections are taken in descending confidence (ties keep list order, so
    the pooled ordering is frame index then box index); each claims the
    unmatched truth box of highest IoU when that IoU reaches the threshold.
    Returns (det_index, confidence, is_tp) rows for target-class detections.
    """
    order = sorted(
        (i for i, d in enumerate(detections) if d.class_label == target_class),
        key=lambda i: (-detections[i].confidence, i),
    )
    taken = [False] * len(truth_boxes)
    rows = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, tb in enumerate(truth_boxes):
            if taken[j]:
                continue
            v = iou(detections[i].box, tb)
            if v > best_iou:
                best_j, best_iou = j, v
        tp = best_j >= 0 and best_iou >= iou_threshold
        if tp:
            taken[best_j] = True
        rows.append((i, detections[i].confidence, tp))
    return rows


def pr_curve(
    detections_per_frame: list[list[Detection]],
    truths_per_frame: list,
    config: EvalConfig = EvalConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Pooled precision/recall points in descending-confidence order."""
    if len(detections_per_frame) != len(truths_per_frame):
        raise ValueError("detections and truths must align frame by frame")
    n_truth = 0
    pooled = []  # (confidence, frame_idx, det_idx, tp)
    for f, (dets, truth) in enumerate(zip(detections_per_frame, truths_per_frame)):
        gt = _person_truth_boxes(truth, config.target_class)
        n_truth += len(gt)
        for i, conf, tp in match_frame(dets, gt, config.iou_threshold, config.target_class):
            pooled.append((conf, f, i, tp))
    if n_truth == 0:
        raise ValueError("undefined metric: no ground-truth boxes for the target class")
    pooled.sort(key=lambda r: (-r[0], r[1], r[2]))
    tps = np.array([r[3] for r in pooled], dtype=np.float64)
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(1.0 - tps)
    recalls = tp_cum / n_truth
    precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    return recalls, precisions


def average_precision(
    detections_per_frame: list[list[Detection]],
    truths_per_frame: list,
    config: EvalConfig = EvalConfig(),
) -> float:
    """Area under the precision envelope over the pooled detection ranking."""
    recalls, precisions = pr_curve(detections_per_frame, truths_per_frame, config)
    if recalls.size == 0:
        return 0.0
    mrec = np.concatenate(([0.0], recalls, [1.0]))
    mpre = np.concatenate(([0.0], precisions, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def frame_success(detections: list[Detection], truth, config: EvalConfig = EvalConfig()) -> bool:
    """True when no confident detection still overlaps a person truth box."""
    gt = _person_truth_boxes(truth, config.target_class)
    if not gt:
        raise ValueError("attack success is undefined for a frame with no person annotation")
    for d in detections:
        if d.class_label != config.target_class or d.confidence <= config.confidence_threshold:
            continue
        if any(iou(d.box, tb) > config.iou_threshold for tb in gt):
            return False
    return True


def attack_success_rate(
    detections_per_frame: list[list[Detection]],
    truths_per_frame: list,
    config: EvalConfig = EvalConfig(),
) -> float:
    """Fraction of frames where the person evades every confident detection."""
    if len(detections_per_frame) != len(truths_per_frame):
        raise ValueError("detections and truths must align frame by frame")
    if not truths_per_frame:
        raise ValueError("attack success rate is undefined on an empty frame set")
    wins = [frame_success(d, t, config) for d, t in zip(detections_per_frame, truths_per_frame)]
    return float(sum(wins)) / len(wins)


AXES = ("angle_deg", "distance_m")


def aggregate(
    detections_per_frame: list[list[Detection]],
    truths_per_frame: list[FrameTruth],
    axis: str,
    buckets: list[tuple[float, float]],
    config: EvalConfig = EvalConfig(),
    metric: str = "ap",
) -> dict:
    """Bucket a metric along a capture axis; the summary averages over buckets.

    Buckets are [lo, hi) intervals except the last, which is closed. Every
    frame must carry the axis metadata. Empty buckets are reported with a null
    value and excluded from the mean, so each populated bucket weighs equally.
    """
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}, expected one of {AXES}")
    if not buckets:
        raise ValueError("at least one bucket required")
    values = []
    for i, t in enumerate(truths_per_frame):
        v = getattr(t, axis)
        if v is None:
            raise ValueError(f"frame {t.image_id!r} is missing {axis} metadata")
        values.append(v)

    out_buckets = []
    kept = []
    for bi, (lo, hi) in enumerate(buckets):
        last = bi == len(buckets) - 1
        members = [
            i for i, v in enumerate(values)
            if (lo <= v < hi) or (last and v == hi)
        ]
        entry: dict = {"lo": lo, "hi": hi, "n_frames": len(members)}
        if members:
            dets = [detections_per_frame[i] for i in members]
            trus = [truths_per_frame[i] for i in members]
            if metric == "ap":
                entry["value"] = average_precision(dets, trus, config)
            elif metric == "asr":
                entry["value"] = attack_success_rate(dets, trus, config)
            else:
                raise ValueError(f"unknown metric {metric!r}")
            kept.append(entry["value"])
        else:
            entry["value"] = None
        out_buckets.append(entry)
    return {
        "axis": axis,
        "metric": metric,
        "buckets": out_buckets,
        "mean": float(np.mean(kept)) if kept else None,
    }


# --- frameset IO -------------------------------------------------------------

def _require(d: dict, key: str, path: str):
    if key not in d:
        raise ValueError(f"{path}: missing key {key!r}")
    return d[key]


def parse_frameset(doc: dict, path_label: str = "$") -> list[FrameTruth]:
    """Validate the annotation document and build FrameTruth records."""
    if not isinstance(doc, dict):
        raise ValueError(f"{path_label}: expected an object")
    frames = _require(doc, "frames", path_label)
    if not isinstance(frames, list) or not frames:
        raise ValueError(f"{path_label}.frames: expected a non-empty list")
    truths = []
    for fi, fr in enumerate(frames):
        fp = f"{path_label}.frames[{fi}]"
        if not isinstance(fr, dict):
            raise ValueError(f"{fp}: expected an object")
        image_id = _require(fr, "image_id", fp)
        _require(fr, "file", fp)
        raw_boxes = _require(fr, "boxes", fp)
        if not isinstance(raw_boxes, list):
            raise ValueError(f"{fp}.boxes: expected a list")
        boxes = []
        for bi, rb in enumerate(raw_boxes):
            bp = f"{fp}.boxes[{bi}]"
            if not isinstance(rb, dict):
                raise ValueError(f"{bp}: expected an object")
            vals = {k: _require(rb, k, bp) for k in ("x_min", "y_min", "x_max", "y_max")}
            cls = _require(rb, "class", bp)
            box = BoundingBox(float(vals["x_min"]), float(vals["y_min"]), float(vals["x_max"]), float(vals["y_max"]))
            rep = validate(box)
            if not rep.ok:
                raise ValueError(f"{bp}: {'; '.join(rep.violations)}")
            boxes.append(LabeledBox(box, str(cls)))
        truth = FrameTruth(
            image_id=str(image_id),
            boxes=tuple(boxes),
            angle_deg=float(fr["angle_deg"]) if "angle_deg" in fr else None,
            distance_m=float(fr["distance_m"]) if "distance_m" in fr else None,
        )
        rep = validate(truth)
        if not rep.ok:
            raise ValueError(f"{fp}: {'; '.join(rep.violations)}")
        truths.append(truth)

    for axis in AXES:
        have = [t for t in truths if getattr(t, axis) is not None]
        if have and len(have) != len(truths):
            raise ValueError(f"{path_label}.frames: {axis} must be present on all frames or none")
    return truths


def load_frameset(annotations: Path | str, image_root: Path | str | None = None) -> list[tuple[ImagePlane, FrameTruth]]:
    """Load (image, truth) pairs from an annotation file and its image files."""
    annotations = Path(annotations)
    doc = read_json(annotations)
    truths = parse_frameset(doc)
    root = Path(image_root) if image_root is not None else annotations.parent
    out = []
    for fr, truth in zip(doc["frames"], truths):
        img_path = root / fr["file"]
        if not img_path.exists():
            raise FileNotFoundError(f"frame {truth.image_id!r}: image file not found: {img_path}")
        from PIL import Image  # local import keeps metric paths free of PIL

        arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
        out.append((ImagePlane.from_array(arr), truth))
    return out


# --- reports -----------------------------------------------------------------

@dataclass
class FrameRecord:
    image_id: str
    n_truth: int
    n_detections: int
    max_confidence: float
    best_iou: float
    success: bool | None
    angle_deg: float | None = None
    distance_m: float | None = None


@dataclass
class EvalReport:
    kind: str
    ap: float
    asr: float | None
    records: list[FrameRecord]
    config: dict
    breakdowns: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "ap": self.ap,
            "asr": self.asr,
            "config": self.config,
            "breakdowns": self.breakdowns,
            "records": [vars(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            kind=d["kind"],
            ap=d["ap"],
            asr=d["asr"],
            records=[FrameRecord(**r) for r in d["records"]],
            config=d["config"],
            breakdowns=d.get("breakdowns", {}),
        )

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "n_truth", "n_detections", "max_confidence", "best_iou", "success", "angle_deg", "distance_m"])
        for r in self.records:
            w.writerow([
                r.image_id,
                r.n_truth,
                r.n_detections,
                f"{r.max_confidence:.6f}",
                f"{r.best_iou:.6f}",
                "" if r.success is None else int(r.success),
                "" if r.angle_deg is None else f"{r.angle_deg:.4f}",
                "" if r.distance_m is None else f"{r.distance_m:.4f}",
            ])
        return buf.getvalue()


def build_report(
    detections_per_frame: list[list[Detection]],
    truths_per_frame: list[FrameTruth],
    config: EvalConfig = EvalConfig(),
    kind: str = "eval",
    axes_buckets: dict[str, list[tuple[float, float]]] | None = None,
) -> EvalReport:
    """Assemble the full per-frame + summary report for one detector pass."""
    ap = average_precision(detections_per_frame, truths_per_frame, config)
    all_have_truth = all(_person_truth_boxes(t, config.target_class) for t in truths_per_frame)
    asr = attack_success_rate(detections_per_frame, truths_per_frame, config) if all_have_truth else None
    records = []
    for dets, truth in zip(detections_per_frame, truths_per_frame):
        gt = _person_truth_boxes(truth, config.target_class)
        person_dets = [d for d in dets if d.class_label == config.target_class]
        best = 0.0
        for d in person_dets:
            for tb in gt:
                best = max(best, iou(d.box, tb))
        records.append(
            FrameRecord(
                image_id=truth.image_id,
                n_truth=len(gt),
                n_detections=len(person_dets),
                max_confidence=max((d.confidence for d in person_dets), default=0.0),
                best_iou=best,
                success=frame_success(dets, truth, config) if gt else None,
                angle_deg=truth.angle_deg,
                distance_m=truth.distance_m,
            )
        )
    breakdowns = {}
    if axes_buckets:
        for axis, buckets in axes_buckets.items():
            breakdowns[axis] = aggregate(detections_per_frame, truths_per_frame, axis, buckets, config)
    return EvalReport(
        kind=kind,
        ap=ap,
        asr=asr,
        records=records,
        config=vars(config).copy() if not isinstance(config, dict) else dict(config),
        breakdowns=breakdowns,
    )
