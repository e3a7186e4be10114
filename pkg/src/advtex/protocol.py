"""Wire protocol for out-of-process detector adapters.

Framing: a 4-byte big-endian payload length, then UTF-8 JSON. Every message
carries a protocol version; tensors travel as base64 little-endian buffers
with explicit dtype and shape so both ends agree on layout byte-for-byte.
"""

from __future__ import annotations

import base64
import json
import socket
import struct
from dataclasses import dataclass

import numpy as np
import torch

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024

_LEN = struct.Struct(">I")


class ProtocolError(RuntimeError):
    pass


def encode_tensor(t) -> dict:
    arr = np.ascontiguousarray(t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t))
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return {
        "__tensor__": True,
        "dtype": arr.dtype.name,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_tensor(d: dict) -> torch.Tensor:
    try:
        dtype = np.dtype(d["dtype"]).newbyteorder("<")
        shape = tuple(int(s) for s in d["shape"])
        raw = base64.b64decode(d["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed tensor field: {exc}") from exc
    arr = np.frombuffer(raw, dtype=dtype)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ProtocolError(f"tensor payload size {arr.size} does not match shape {shape}")
    return torch.from_numpy(arr.reshape(shape).copy())


def _encode_value(v):
    if isinstance(v, (torch.Tensor, np.ndarray)):
        return encode_tensor(v)
    if isinstance(v, dict):
        return {k: _encode_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_encode_value(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _decode_value(v):
    if isinstance(v, dict):
        if v.get("__tensor__"):
            return decode_tensor(v)
        return {k: _decode_value(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_decode_value(x) for x in v]
    return v


def encode_message(msg: dict) -> bytes:
    body = dict(msg)
    body.setdefault("v", PROTOCOL_VERSION)
    payload = json.dumps(_encode_value(body), sort_keys=True).encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds limit")
    return _LEN.pack(len(payload)) + payload


def decode_message(payload: bytes) -> dict:
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable frame: {exc}") from exc
    if not isinstance(msg, dict):
        raise ProtocolError("frame payload must be a JSON object")
    if msg.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: got {msg.get('v')!r}, want {PROTOCOL_VERSION}")
    if "type" not in msg:
        raise ProtocolError("frame missing 'type'")
    return {k: _decode_value(v) for k, v in msg.items()}


class Connection:
    """Framed messages over a pair of binary streams (socket or pipes)."""

    def __init__(self, reader, writer):
        self._reader = reader
        self._writer = writer

    @classmethod
    def from_socket(cls, sock: socket.socket) -> "Connection":
        f = sock.makefile("rwb")
        return cls(f, f)

    def send(self, msg: dict) -> None:
        self._writer.write(encode_message(msg))
        self._writer.flush()

    def recv(self) -> dict:
        header = self._read_exact(_LEN.size)
        (length,) = _LEN.unpack(header)
        if length > MAX_FRAME_BYTES:
            raise ProtocolError(f"announced frame of {length} bytes exceeds limit")
        return decode_message(self._read_exact(length))

    def request(self, msg: dict) -> dict:
        self.send(msg)
        reply = self.recv()
        if reply["type"] == "error":
            raise ProtocolError(f"adapter error: {reply.get('message', '(no message)')}")
        return reply

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining > 0:
            chunk = self._reader.read(remaining)
            if not chunk:
                raise ProtocolError("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        for f in {self._reader, self._writer}:
            try:
                f.close()
            except OSError:
                pass


@dataclass
class AdapterManifest:
    """Self-description every adapter must provide before first use."""

    name: str
    weights_hash: str
    input_size: int
    normalization: dict
    capabilities: dict
    score_mode: str = "pre_nms_class"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "weights_hash": self.weights_hash,
            "input_size": self.input_size,
            "normalization": self.normalization,
            "capabilities": self.capabilities,
            "score_mode": self.score_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterManifest":
        missing = [k for k in ("name", "weights_hash", "input_size", "normalization", "capabilities") if k not in d]
        if missing:
            raise ProtocolError(f"adapter manifest missing keys: {missing}")
        return cls(
            name=str(d["name"]),
            weights_hash=str(d["weights_hash"]),
            input_size=int(d["input_size"]),
            normalization=dict(d["normalization"]),
            capabilities=dict(d["capabilities"]),
            score_mode=str(d.get("score_mode", "pre_nms_class")),
        )


def serve_handle(conn: Connection, handle) -> None:
    """Answer protocol requests with a local detector handle until EOF.

    The reference server half: wraps any in-process handle so tests (and
    external processes) can exercise the remote path against real logic.
    """
    from .core import Detection  # noqa: F401  (documents the reply payload)

    while True:
        try:
            msg = conn.recv()
        except ProtocolError:
            return
        try:
            reply = _handle_request(msg, handle)
        except Exception as exc:  # adapter must answer, not die
            reply = {"type": "error", "message": f"{type(exc).__name__}: {exc}"}
        try:
            conn.send(reply)
        except (ProtocolError, OSError, ValueError):
            return


def _handle_request(msg: dict, handle) -> dict:
    kind = msg["type"]
    if kind == "manifest":
        return {"type": "manifest", "manifest": handle.manifest}
    if kind == "detect":
        dets = handle.detect(msg["image"])
        return {
            "type": "detections",
            "detections": [
                {
                    "box": [d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max],
                    "class": d.class_label,
                    "confidence": d.confidence,
                }
                for d in dets
            ],
        }
    if kind == "score_grad":
        score, grad = handle.person_score_and_grad(msg["image"])
        return {"type": "score_grad", "score": float(score), "grad": grad}
    raise ProtocolError(f"unsupported request type {kind!r}")
