"""Uniform access to person detectors: local models, ensembles, remote adapters."""

from __future__ import annotations

import socket
import subprocess
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import BoundingBox, Detection, as_pixels, validate
from .protocol import AdapterManifest, Connection, ProtocolError


class GatewayError(RuntimeError):
    """A capability or transport failure at the detector boundary."""


class DetectorHandle:
    """Base interface every detector target implements.

    Concrete handles fill in `manifest` (a JSON-ready dict with name,
    weights_hash, input_size, normalization, capabilities, score_mode) and
    the two entry points below.
    """

    manifest: dict

    @property
    def identifier(self) -> str:
        return self.manifest["name"]

    @property
    def input_size(self) -> int:
        return int(self.manifest["input_size"])

    @property
    def grads_available(self) -> bool:
        return bool(self.manifest.get("capabilities", {}).get("grads", False))

    @property
    def feature_taps_available(self) -> bool:
        return bool(self.manifest.get("capabilities", {}).get("feature_taps", False))

    def detect(self, image) -> list[Detection]:
        raise NotImplementedError

    def person_score_and_grad(self, image) -> tuple[float, torch.Tensor]:
        raise GatewayError(f"detector {self.identifier!r} does not expose gradients")

    # feature taps are optional; in-process models override these
    def list_feature_taps(self) -> list[str]:
        raise GatewayError(f"detector {self.identifier!r} does not expose feature taps")

    def set_feature_filters(self, filters: dict | None) -> None:
        if filters:
            raise GatewayError(f"detector {self.identifier!r} does not expose feature taps")


def detect(handle: DetectorHandle, image) -> list[Detection]:
    """Run a detector and validate its output before handing it on."""
    dets = handle.detect(image)
    for i, d in enumerate(dets):
        rep = validate(d)
        if not rep.ok:
            raise GatewayError(
                f"detector {handle.identifier!r} returned an invalid detection [{i}]: {'; '.join(rep.violations)}"
            )
    return dets


def person_score_and_grad(handle: DetectorHandle, image) -> tuple[float, torch.Tensor]:
    """Max person score plus its gradient w.r.t. the input pixels."""
    pixels = as_pixels(image)
    score, grad = handle.person_score_and_grad(pixels)
    grad = torch.as_tensor(grad)
    if tuple(grad.shape) != tuple(pixels.shape):
        raise GatewayError(
            f"detector {handle.identifier!r} returned gradient of shape {tuple(grad.shape)} "
            f"for image of shape {tuple(pixels.shape)}"
        )
    return float(score), grad.to(pixels.dtype)


# --- letterbox geometry -------------------------------------------------------

@dataclass(frozen=True)
class Letterbox:
    """Resize-with-padding transform between image and network coordinates."""

    scale: float
    pad_x: float
    pad_y: float
    orig_h: int
    orig_w: int
    size: int

    def to_network(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(
            box.x_min * self.scale + self.pad_x,
            box.y_min * self.scale + self.pad_y,
            box.x_max * self.scale + self.pad_x,
            box.y_max * self.scale + self.pad_y,
        )

    def to_image(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(
            (box.x_min - self.pad_x) / self.scale,
            (box.y_min - self.pad_y) / self.scale,
            (box.x_max - self.pad_x) / self.scale,
            (box.y_max - self.pad_y) / self.scale,
        )


def letterbox_plan(h: int, w: int, size: int) -> Letterbox:
    scale = size / max(h, w)
    new_h, new_w = round(h * scale), round(w * scale)
    return Letterbox(
        scale=scale,
        pad_x=(size - new_w) / 2.0,
        pad_y=(size - new_h) / 2.0,
        orig_h=h,
        orig_w=w,
        size=size,
    )


def letterbox_image(pixels: torch.Tensor, size: int, fill: float = 0.5) -> tuple[torch.Tensor, Letterbox]:
    """Differentiable resize + center-pad of (H, W, 3) pixels to (size, size, 3)."""
    h, w = int(pixels.shape[0]), int(pixels.shape[1])
    plan = letterbox_plan(h, w, size)
    if (h, w) == (size, size):
        return pixels, plan
    chw = pixels.permute(2, 0, 1).unsqueeze(0)
    new_h, new_w = round(h * plan.scale), round(w * plan.scale)
    resized = F.interpolate(chw, size=(new_h, new_w), mode="bilinear", align_corners=False)
    pl = int(plan.pad_x)
    pt = int(plan.pad_y)
    padded = F.pad(resized, (pl, size - new_w - pl, pt, size - new_h - pt), value=fill)
    return padded[0].permute(1, 2, 0), plan


# --- ensembles ----------------------------------------------------------------

class EnsembleHandle(DetectorHandle):
    """Weighted combination of detector handles for joint optimization.

    The attack objective sees the weighted mean of member scores (weights are
    normalized to sum 1); `detect` reports the first member, which keeps
    evaluation semantics single-detector.
    """

    def __init__(self, members: list[DetectorHandle], weights: list[float] | None = None):
        if not members:
            raise GatewayError("ensemble needs at least one member")
        weights = [1.0] * len(members) if weights is None else list(weights)
        if len(weights) != len(members):
            raise GatewayError(f"{len(members)} members but {len(weights)} weights")
        if any(w < 0 for w in weights):
            raise GatewayError("ensemble weights must be non-negative")
        total = sum(weights)
        if total <= 0:
            raise GatewayError("ensemble weights must not all be zero")
        self.members = members
        self.weights = [w / total for w in weights]
        self.manifest = {
            "name": "ensemble(" + "+".join(m.identifier for m in members) + ")",
            "weights_hash": "|".join(m.manifest.get("weights_hash", "?") for m in members),
            "input_size": members[0].input_size,
            "normalization": members[0].manifest.get("normalization", {}),
            "capabilities": {
                "grads": all(m.grads_available for m in members),
                "feature_taps": False,
            },
            "score_mode": members[0].manifest.get("score_mode", "pre_nms_class"),
            "members": [m.identifier for m in members],
            "member_weights": self.weights,
        }

    def detect(self, image) -> list[Detection]:
        return self.members[0].detect(image)

    def person_score_and_grad(self, image) -> tuple[float, torch.Tensor]:
        pixels = as_pixels(image)
        total_score = 0.0
        total_grad = torch.zeros_like(pixels, dtype=torch.float32)
        for m, w in zip(self.members, self.weights):
            if w == 0.0:
                continue
            s, g = m.person_score_and_grad(pixels)
            total_score += w * float(s)
            total_grad = total_grad + w * torch.as_tensor(g, dtype=torch.float32)
        return total_score, total_grad


def make_ensemble(handles: list[DetectorHandle], weights: list[float] | None = None) -> EnsembleHandle:
    return EnsembleHandle(handles, weights)


# --- remote adapters ----------------------------------------------------------

class RemoteDetectorHandle(DetectorHandle):
    """Detector living behind a protocol connection (pipe or socket)."""

    def __init__(self, conn: Connection, label: str | None = None):
        self._conn = conn
        try:
            reply = conn.request({"type": "manifest"})
        except ProtocolError as exc:
            raise GatewayError(f"adapter {label or '(unnamed)'} failed the manifest handshake: {exc}") from exc
        self.manifest = AdapterManifest.from_dict(reply["manifest"]).to_dict()

    def detect(self, image) -> list[Detection]:
        pixels = as_pixels(image)
        try:
            reply = self._conn.request({"type": "detect", "image": pixels})
        except ProtocolError as exc:
            raise GatewayError(f"adapter {self.identifier!r}: {exc}") from exc
        dets = []
        for d in reply["detections"]:
            x0, y0, x1, y1 = (float(v) for v in d["box"])
            dets.append(Detection(BoundingBox(x0, y0, x1, y1), str(d["class"]), float(d["confidence"])))
        return dets

    def person_score_and_grad(self, image) -> tuple[float, torch.Tensor]:
        if not self.grads_available:
            raise GatewayError(f"detector {self.identifier!r} does not expose gradients")
        pixels = as_pixels(image)
        try:
            reply = self._conn.request({"type": "score_grad", "image": pixels})
        except ProtocolError as exc:
            raise GatewayError(f"adapter {self.identifier!r}: {exc}") from exc
        return float(reply["score"]), torch.as_tensor(reply["grad"], dtype=torch.float32)

    def close(self) -> None:
        self._conn.close()


def connect_tcp(host: str, port: int) -> RemoteDetectorHandle:
    sock = socket.create_connection((host, port))
    return RemoteDetectorHandle(Connection.from_socket(sock), label=f"tcp:{host}:{port}")


def spawn_adapter(argv: list[str]) -> RemoteDetectorHandle:
    """Launch an adapter subprocess speaking the protocol on stdin/stdout."""
    proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    conn = Connection(proc.stdout, proc.stdin)
    handle = RemoteDetectorHandle(conn, label=" ".join(argv))
    handle._process = proc  # keep it alive alongside the handle
    return handle


# --- registry -----------------------------------------------------------------

_REGISTRY: dict[str, dict] = {}


def register_detector(name: str, factory, description: str = "") -> None:
    _REGISTRY[name] = {"factory": factory, "description": description}


def create_detector(name: str, **kwargs) -> DetectorHandle:
    if name not in _REGISTRY:
        raise GatewayError(f"unknown detector {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name]["factory"](**kwargs)


def list_adapters() -> list[dict]:
    return [{"name": k, "description": v["description"]} for k, v in sorted(_REGISTRY.items())]


def _toy_factory(**kwargs):
    from . import toydet

    return toydet.trained_toy_detector(**kwargs)


register_detector("toy", _toy_factory, "built-in convolutional person scorer on synthetic scenes")
