"""Small fully-convolutional person scorer for synthetic scenes.

One person class, dense predictions at stride 8: a logit plus four box-edge
distances per cell. Intermediate activations are exposed as named taps so
feature-space defenses can clip or filter them in place.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .core import BoundingBox, Detection, FrameTruth, PERSON, as_pixels, canonical_json
from .evaluation import average_precision
from .gateway import DetectorHandle, GatewayError, letterbox_image
from . import scenes

STRIDE = 8
TAPS = ("stem", "block2", "block3", "block4")


class ToyPersonDetector(nn.Module):
    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(3, 16, 5, stride=2, padding=2)
        self.block2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.block3 = nn.Conv2d(32, 48, 3, stride=2, padding=1)
        self.block4 = nn.Conv2d(48, 48, 3, stride=1, padding=1)
        self.head = nn.Conv2d(48, 5, 3, stride=1, padding=1)

    def forward(self, x: torch.Tensor, filters: dict | None = None):
        """x: (B, 3, S, S) normalized. Returns (logits, distances, taps)."""
        taps = {}
        for name in TAPS:
            x = F.relu(getattr(self, name)(x))
            if filters and name in filters:
                x = filters[name](x)
            taps[name] = x
        out = self.head(x)
        logits = out[:, :1]
        dists = F.softplus(out[:, 1:]) * STRIDE
        return logits, dists, taps


def _normalize(pixels_chw: torch.Tensor) -> torch.Tensor:
    return (pixels_chw - 0.5) / 0.5


def _cell_centers(grid: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    c = (torch.arange(grid, dtype=dtype) + 0.5) * STRIDE
    gy, gx = torch.meshgrid(c, c.clone(), indexing="ij")
    return gy, gx


def _nms(boxes: list[BoundingBox], confs: list[float], iou_threshold: float) -> list[int]:
    from .evaluation import iou as box_iou

    order = sorted(range(len(boxes)), key=lambda i: (-confs[i], i))
    keep: list[int] = []
    for i in order:
        if all(box_iou(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep


class ToyDetectorHandle(DetectorHandle):
    """Gateway handle around a trained ToyPersonDetector."""

    def __init__(self, model: ToyPersonDetector, manifest: dict):
        self.model = model.eval()
        self.manifest = manifest
        self._filters: dict | None = None
        self.conf_floor = 0.05
        self.nms_iou = 0.5

    # -- feature taps
    def list_feature_taps(self) -> list[str]:
        return list(TAPS)

    def set_feature_filters(self, filters: dict | None) -> None:
        if filters:
            unknown = set(filters) - set(TAPS)
            if unknown:
                raise GatewayError(f"unknown feature taps {sorted(unknown)}; available: {list(TAPS)}")
        self._filters = dict(filters) if filters else None

    # -- scoring
    def _forward(self, pixels: torch.Tensor):
        boxed, plan = letterbox_image(pixels, self.input_size)
        x = _normalize(boxed.permute(2, 0, 1).unsqueeze(0))
        logits, dists, taps = self.model(x, self._filters)
        return logits, dists, taps, plan

    def person_score_on(self, pixels: torch.Tensor) -> torch.Tensor:
        """Max person score before any suppression, as a graph-connected scalar."""
        logits, _, _, _ = self._forward(pixels)
        return torch.sigmoid(logits.max())

    def person_score_and_grad(self, image) -> tuple[float, torch.Tensor]:
        pixels = as_pixels(image)
        leaf = pixels.detach().clone().requires_grad_(True)
        score = self.person_score_on(leaf)
        score.backward()
        return float(score), leaf.grad.detach()

    def detect(self, image) -> list[Detection]:
        pixels = as_pixels(image)
        with torch.no_grad():
            logits, dists, _, plan = self._forward(pixels)
            conf = torch.sigmoid(logits)[0, 0]
            grid = conf.shape[0]
            gy, gx = _cell_centers(grid, dtype=conf.dtype)
            l, t, r, b = dists[0]
            keep = conf >= self.conf_floor
            idx = keep.nonzero(as_tuple=False)
            boxes, confs = [], []
            for i, j in idx.tolist():
                net_box = BoundingBox(
                    float(gx[i, j] - l[i, j]),
                    float(gy[i, j] - t[i, j]),
                    float(gx[i, j] + r[i, j]),
                    float(gy[i, j] + b[i, j]),
                )
                img_box = plan.to_image(net_box)
                x0 = min(max(img_box.x_min, 0.0), plan.orig_w - 1.0)
                y0 = min(max(img_box.y_min, 0.0), plan.orig_h - 1.0)
                x1 = min(max(img_box.x_max, x0 + 1e-3), float(plan.orig_w))
                y1 = min(max(img_box.y_max, y0 + 1e-3), float(plan.orig_h))
                boxes.append(BoundingBox(x0, y0, x1, y1))
                confs.append(float(conf[i, j]))
            kept = _nms(boxes, confs, self.nms_iou)
        return [Detection(boxes[k], PERSON, confs[k]) for k in kept]


# --- training ------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTrainConfig:
    seed: int = 0
    size: int = scenes.SCENE_SIZE
    n_train: int = 260
    n_val: int = 64
    steps: int = 550
    batch_size: int = 8
    learning_rate: float = 2e-3
    occlude_prob: float = 0.6
    near_edge_frac: float = 0.15
    min_val_ap: float = 0.95


class ToyTrainingError(RuntimeError):
    pass


def scene_dataset(
    seed: int,
    n: int,
    size: int = scenes.SCENE_SIZE,
    n_persons: tuple[int, int] = (1, 2),
    occlude_prob: float = 0.0,
    near_edge_frac: float = 0.0,
    with_axes: bool = False,
) -> list[tuple[torch.Tensor, FrameTruth]]:
    """Rendered scenes with random clothing; the bread-and-butter image source."""
    rng = torch.Generator().manual_seed(seed)
    out = []
    for k in range(n):
        angle = dist = None
        if with_axes:
            angle = float(torch.empty(1).uniform_(-180.0, 180.0, generator=rng))
            dist = float(torch.empty(1).uniform_(2.0, 5.0, generator=rng))
        near_edge = float(torch.rand(1, generator=rng)) < near_edge_frac
        sc = scenes.sample_scene(rng, size, n_persons, angle_deg=angle, distance_m=dist, near_edge=near_edge)
        img = scenes.render_scene(sc, clothing=None, rng=rng)
        for g in sc.persons:
            if float(torch.rand(1, generator=rng)) < occlude_prob:
                img = scenes.occlude_person(img, g, rng)
        out.append((img, sc.truth(f"scene_{seed}_{k:04d}")))
    return out


def assign_targets(truths: list[FrameTruth], size: int, grid: int):
    """FCOS-style assignment: cells in the central half of a box are positive.

    Returns (cls_target, cls_weight, dist_target) with shapes
    (B, grid, grid), (B, grid, grid), (B, 4, grid, grid). Cells inside a box
    but outside its core get weight 0 (ignored); overlaps go to the smaller box.
    """
    b = len(truths)
    cls_t = torch.zeros((b, grid, grid))
    weight = torch.ones((b, grid, grid))
    dist_t = torch.zeros((b, 4, grid, grid))
    owner_area = torch.full((b, grid, grid), float("inf"))
    gy, gx = _cell_centers(grid)
    for bi, truth in enumerate(truths):
        for lb in truth.boxes:
            if lb.class_label != PERSON:
                continue
            box = lb.box
            inside = (gx >= box.x_min) & (gx < box.x_max) & (gy >= box.y_min) & (gy < box.y_max)
            cw, ch = 0.25 * box.width, 0.25 * box.height
            cx, cy = box.center
            core = (gx >= cx - cw) & (gx < cx + cw) & (gy >= cy - ch) & (gy < cy + ch)
            smaller = box.area < owner_area[bi]
            take = core & smaller
            ring = inside & ~core
            weight[bi][ring & (cls_t[bi] == 0)] = 0.0
            if take.any():
                cls_t[bi][take] = 1.0
                weight[bi][take] = 1.0
                owner_area[bi][take] = box.area
                dist_t[bi, 0][take] = (gx - box.x_min)[take]
                dist_t[bi, 1][take] = (gy - box.y_min)[take]
                dist_t[bi, 2][take] = (box.x_max - gx)[take]
                dist_t[bi, 3][take] = (box.y_max - gy)[take]
    return cls_t, weight, dist_t


def detection_loss(model: ToyPersonDetector, images: torch.Tensor, truths: list[FrameTruth]) -> torch.Tensor:
    """Classification + box loss on native-size images (B, S, S, 3) in [0, 1]."""
    size = int(images.shape[1])
    x = _normalize(images.permute(0, 3, 1, 2))
    logits, dists, _ = model(x)
    grid = logits.shape[-1]
    if grid * STRIDE != size:
        raise ValueError(f"detection_loss expects native {grid * STRIDE}-pixel images, got {size}")
    cls_t, weight, dist_t = assign_targets(truths, size, grid)
    pos = cls_t > 0
    bce = F.binary_cross_entropy_with_logits(
        logits[:, 0], cls_t, weight=weight, pos_weight=torch.tensor(6.0), reduction="sum"
    ) / weight.sum().clamp_min(1.0)
    if pos.any():
        pred = dists.permute(0, 2, 3, 1)[pos] / STRIDE
        tgt = dist_t.permute(0, 2, 3, 1)[pos] / STRIDE
        box_l = F.l1_loss(pred, tgt)
    else:
        box_l = torch.zeros(())
    return bce + 1.5 * box_l


def _weights_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _make_manifest(model: nn.Module, cfg: ToyTrainConfig, val_ap: float, name: str = "toy", robust: bool = False) -> dict:
    return {
        "name": name,
        "weights_hash": _weights_hash(model),
        "input_size": cfg.size,
        "normalization": {"mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]},
        "capabilities": {"grads": True, "feature_taps": True},
        "score_mode": "pre_nms_class",
        "val_ap": val_ap,
        "robust": robust,
        "train_seed": cfg.seed,
    }


def evaluate_handle(handle: DetectorHandle, dataset: list[tuple[torch.Tensor, FrameTruth]]) -> float:
    dets = [handle.detect(img) for img, _ in dataset]
    return average_precision(dets, [t for _, t in dataset])


def train_toy_detector(cfg: ToyTrainConfig = ToyTrainConfig()) -> ToyDetectorHandle:
    """Train from scratch; deterministic for a fixed config and seed."""
    torch.manual_seed(cfg.seed)
    model = ToyPersonDetector()
    train = scene_dataset(
        cfg.seed * 1000 + 1, cfg.n_train, cfg.size,
        occlude_prob=cfg.occlude_prob, near_edge_frac=cfg.near_edge_frac,
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = torch.Generator().manual_seed(cfg.seed * 1000 + 2)
    model.train()
    for _step in range(cfg.steps):
        idx = torch.randint(0, len(train), (cfg.batch_size,), generator=rng).tolist()
        images = torch.stack([train[i][0] for i in idx])
        truths = [train[i][1] for i in idx]
        loss = detection_loss(model, images, truths)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()

    val = scene_dataset(cfg.seed * 1000 + 3, cfg.n_val, cfg.size)
    handle = ToyDetectorHandle(model, _make_manifest(model, cfg, val_ap=0.0))
    val_ap = evaluate_handle(handle, val)
    if val_ap < cfg.min_val_ap:
        raise ToyTrainingError(f"validation AP {val_ap:.3f} below the {cfg.min_val_ap} gate")
    handle.manifest = _make_manifest(model, cfg, val_ap=val_ap)
    return handle


def trained_toy_detector(cache_dir: Path | str | None = None, **overrides) -> ToyDetectorHandle:
    """Train or load from cache; the cache key pins config and torch version."""
    cfg = replace(ToyTrainConfig(), **overrides) if overrides else ToyTrainConfig()
    if cache_dir is None:
        return train_toy_detector(cfg)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key_doc = {"cfg": vars(cfg).copy(), "torch": torch.__version__, "kind": "toy"}
    key = hashlib.sha256(canonical_json(key_doc).encode()).hexdigest()[:16]
    weights_path = cache_dir / f"toy_{key}.pt"
    if weights_path.exists():
        payload = torch.load(weights_path, weights_only=True)
        model = ToyPersonDetector()
        model.load_state_dict(payload["state_dict"])
        import json as _json

        return ToyDetectorHandle(model, _json.loads(payload["manifest_json"]))
    handle = train_toy_detector(cfg)
    torch.save(
        {"state_dict": handle.model.state_dict(), "manifest_json": canonical_json(handle.manifest)},
        weights_path,
    )
    return handle
