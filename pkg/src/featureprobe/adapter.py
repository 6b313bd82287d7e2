"""Wire protocol for out-of-process generator and SUT backends.

Everything on the wire is length-prefixed: a message is a 4-byte
little-endian unsigned length followed by a UTF-8 JSON frame, and the frame
may announce binary blocks (field ``blocks``, a list of kind strings) that
follow it in order, each again as a 4-byte length plus payload. Tensor
blocks use the core interchange encoding (8-byte magic, little-endian
float32, row-major); style blocks use the core style-state encoding.

Request frames carry ``op`` and a client-chosen ``id``; responses echo the
id with ``ok: true`` or ``ok: false`` plus an ``error`` object whose code
``NOT_DIFFERENTIABLE`` maps to the capability error, everything else to a
backend error.

Generator ops: ``topology``, ``sample``, ``synth``, ``jvp``, ``close``.
The topology response reports the mean style and per-layer standard
deviations used for truncation and SmoothGrad scaling. ``jvp`` applies the
channel Jacobian to a pixel-space cotangent and returns one 1-D tensor of
gradients per layer.

SUT ops: ``caps``, ``forward``, ``grad_input``, ``close``.
"""

from __future__ import annotations

import json
import logging
import struct
import threading

import numpy as np

from .core import (
    Colorspace,
    ImageTensor,
    LogitVector,
    StyleState,
    decode_tensor,
    deserialize_style_state,
    encode_tensor,
    serialize_style_state,
)
from .errors import (
    BackendError,
    DecodeError,
    NotDifferentiableError,
    ValidationError,
)
from .generator import GeneratorTopology, LayerBand
from .sut import SUTCapabilities, TaskKind

log = logging.getLogger(__name__)

_LEN = struct.Struct("<I")
_MAX_PAYLOAD = 1 << 30


def _read_exact(rfile, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = rfile.read(remaining)
        if not chunk:
            raise DecodeError("stream closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _read_chunk(rfile) -> bytes:
    header = rfile.read(_LEN.size)
    if not header:
        raise EOFError("stream closed")
    if len(header) < _LEN.size:
        header += _read_exact(rfile, _LEN.size - len(header))
    (length,) = _LEN.unpack(header)
    if length > _MAX_PAYLOAD:
        raise DecodeError(f"chunk length {length} exceeds limit")
    return _read_exact(rfile, length)


def _write_chunk(wfile, payload: bytes) -> None:
    if len(payload) > _MAX_PAYLOAD:
        raise ValidationError("payload too large for the wire")
    wfile.write(_LEN.pack(len(payload)))
    wfile.write(payload)


def write_frame(wfile, frame: dict, blocks=()) -> None:
    frame = dict(frame)
    frame["blocks"] = [kind for kind, _ in blocks]
    _write_chunk(wfile, json.dumps(frame, sort_keys=True).encode("utf-8"))
    for _, payload in blocks:
        _write_chunk(wfile, payload)
    wfile.flush()


def read_frame(rfile):
    """Returns (frame dict, list of raw block payloads, in frame order)."""
    frame = json.loads(_read_chunk(rfile).decode("utf-8"))
    payloads = [_read_chunk(rfile) for _ in frame.get("blocks", [])]
    return frame, payloads


def _error_frame(request_id, code: str, message: str) -> dict:
    return {"id": request_id, "ok": False,
            "error": {"code": code, "message": message}}


def _raise_for_error(frame: dict):
    error = frame.get("error") or {}
    code = error.get("code", "BACKEND_ERROR")
    message = error.get("message", "backend reported an error")
    if code == "NOT_DIFFERENTIABLE":
        raise NotDifferentiableError(message)
    raise BackendError(message, code=code)


class _RpcClient:
    """Shared request/response plumbing; one in-flight request at a time."""

    def __init__(self, rfile, wfile):
        self._rfile = rfile
        self._wfile = wfile
        self._lock = threading.Lock()
        self._next_id = 0

    def call(self, op: str, fields: dict | None = None, blocks=()):
        with self._lock:
            self._next_id += 1
            request_id = self._next_id
            frame = {"op": op, "id": request_id}
            if fields:
                frame.update(fields)
            try:
                write_frame(self._wfile, frame, blocks)
                response, payloads = read_frame(self._rfile)
            except (OSError, EOFError, DecodeError) as exc:
                raise BackendError(f"adapter transport failed: {exc}") from exc
        if response.get("id") != request_id:
            raise BackendError(
                f"response id {response.get('id')} != request id {request_id}"
            )
        if not response.get("ok"):
            _raise_for_error(response)
        return response, payloads

    def close(self):
        try:
            self.call("close")
        except BackendError:
            pass


def _decode_single_tensor(payload: bytes) -> np.ndarray:
    array, offset = decode_tensor(payload)
    if offset != len(payload):
        raise DecodeError("trailing bytes after tensor block")
    return array


def _decode_image(payload: bytes) -> ImageTensor:
    data = _decode_single_tensor(payload)
    colorspace = Colorspace.GRAY if data.shape[-1] == 1 else Colorspace.RGB
    return ImageTensor.from_raw(data, colorspace)


class AdapterGenerator:
    """Client-side generator backed by a remote service."""

    def __init__(self, rfile, wfile):
        self._rpc = _RpcClient(rfile, wfile)
        response, _ = self._rpc.call("topology")
        self._topology = GeneratorTopology(
            layer_widths=tuple(int(w) for w in response["layer_widths"]),
            layer_band=tuple(LayerBand(b) for b in response["layer_band"]),
            image_shape=tuple(int(v) for v in response["image_shape"]),
        )
        self.differentiable = bool(response.get("differentiable", False))
        self._mean_style = tuple(
            np.asarray(layer, dtype=np.float64)
            for layer in response["mean_style"]
        )
        self._style_std = tuple(float(v) for v in response["style_std"])

    @property
    def topology(self) -> GeneratorTopology:
        return self._topology

    def mean_style(self):
        return self._mean_style

    def style_std(self):
        return self._style_std

    def sample_style_state(self, seed: int, truncation: float = 1.0) -> StyleState:
        _, payloads = self._rpc.call(
            "sample", {"seed": int(seed), "truncation": float(truncation)}
        )
        if len(payloads) != 1:
            raise BackendError("sample response must carry one style block")
        return deserialize_style_state(payloads[0])

    def synthesize(self, state: StyleState) -> ImageTensor:
        self._topology.check_state(state)
        _, payloads = self._rpc.call(
            "synth", blocks=[("style", serialize_style_state(state))]
        )
        if len(payloads) != 1:
            raise BackendError("synth response must carry one tensor block")
        data = _decode_single_tensor(payloads[0])
        colorspace = Colorspace.GRAY if data.shape[-1] == 1 else Colorspace.RGB
        return ImageTensor.from_raw(data, colorspace)

    def gradient_of_composite(self, state: StyleState, sut, target: int):
        """∂y[target]/∂s: pixel gradient from the SUT, then the remote
        backend applies its channel Jacobian (vjp) to that cotangent."""
        if not self.differentiable:
            raise NotDifferentiableError("remote generator has no jvp support")
        if not sut.capabilities().differentiable:
            raise NotDifferentiableError("SUT does not expose input gradients")
        image = self.synthesize(state)
        cotangent = np.asarray(sut.grad_input(image, target), dtype=np.float64)
        _, payloads = self._rpc.call(
            "jvp",
            blocks=[("style", serialize_style_state(state)),
                    ("tensor", encode_tensor(cotangent))],
        )
        if len(payloads) != len(self._topology.layer_widths):
            raise BackendError("jvp response must carry one block per layer")
        grads = tuple(_decode_single_tensor(p) for p in payloads)
        for layer_id, (grad, width) in enumerate(
                zip(grads, self._topology.layer_widths)):
            if grad.shape != (width,):
                raise BackendError(
                    f"jvp layer {layer_id} has shape {grad.shape}, "
                    f"expected ({width},)"
                )
        return grads

    def close(self):
        self._rpc.close()


class AdapterSUT:
    """Client-side SUT backed by a remote service."""

    def __init__(self, rfile, wfile):
        self._rpc = _RpcClient(rfile, wfile)
        response, _ = self._rpc.call("caps")
        target = response.get("target_class")
        self._caps = SUTCapabilities(
            differentiable=bool(response["differentiable"]),
            task_kind=TaskKind(response["task_kind"]),
            num_classes=int(response["num_classes"]),
            target_class=None if target is None else int(target),
            concurrency_safe=bool(response.get("concurrency_safe", False)),
        )

    def capabilities(self) -> SUTCapabilities:
        return self._caps

    def forward(self, image: ImageTensor) -> LogitVector:
        response, _ = self._rpc.call(
            "forward", blocks=[("tensor", encode_tensor(image.data))]
        )
        return LogitVector(np.asarray(response["logits"], dtype=np.float64))

    def grad_input(self, image: ImageTensor, target: int) -> np.ndarray:
        if not self._caps.differentiable:
            raise NotDifferentiableError("remote SUT has no gradient support")
        _, payloads = self._rpc.call(
            "grad_input", {"target": int(target)},
            blocks=[("tensor", encode_tensor(image.data))],
        )
        if len(payloads) != 1:
            raise BackendError("grad_input response must carry one tensor")
        return _decode_single_tensor(payloads[0])

    def close(self):
        self._rpc.close()


class GeneratorService:
    """Server side: exposes an in-process generator over the wire."""

    def __init__(self, backend):
        self.backend = backend

    def serve(self, rfile, wfile) -> None:
        while True:
            try:
                frame, payloads = read_frame(rfile)
            except EOFError:
                return
            if not self._dispatch(frame, payloads, wfile):
                return

    def _dispatch(self, frame, payloads, wfile) -> bool:
        op = frame.get("op")
        request_id = frame.get("id")
        try:
            if op == "close":
                write_frame(wfile, {"id": request_id, "ok": True})
                return False
            if op == "topology":
                topology = self.backend.topology
                write_frame(wfile, {
                    "id": request_id, "ok": True,
                    "layer_widths": list(topology.layer_widths),
                    "layer_band": [b.value for b in topology.layer_band],
                    "image_shape": list(topology.image_shape),
                    "differentiable": bool(
                        getattr(self.backend, "differentiable", False)),
                    "mean_style": [list(map(float, layer))
                                   for layer in self.backend.mean_style()],
                    "style_std": [float(v) for v in self.backend.style_std()],
                })
            elif op == "sample":
                state = self.backend.sample_style_state(
                    int(frame["seed"]), float(frame["truncation"]))
                write_frame(wfile, {"id": request_id, "ok": True},
                            blocks=[("style", serialize_style_state(state))])
            elif op == "synth":
                state = deserialize_style_state(payloads[0])
                image = self.backend.synthesize(state)
                write_frame(wfile, {"id": request_id, "ok": True},
                            blocks=[("tensor", encode_tensor(image.data))])
            elif op == "jvp":
                if not getattr(self.backend, "differentiable", False):
                    write_frame(wfile, _error_frame(
                        request_id, "NOT_DIFFERENTIABLE",
                        "backend does not provide Jacobians"))
                    return True
                state = deserialize_style_state(payloads[0])
                cotangent = _decode_single_tensor(payloads[1])
                _, jacobian = self.backend.synthesize_with_jacobian(state)
                blocks = []
                for layer_jac in jacobian:
                    grad = np.tensordot(layer_jac, cotangent, axes=3)
                    blocks.append(("tensor", encode_tensor(grad)))
                write_frame(wfile, {"id": request_id, "ok": True},
                            blocks=blocks)
            else:
                write_frame(wfile, _error_frame(
                    request_id, "UNSUPPORTED", f"unknown op {op!r}"))
        except Exception as exc:  # service must answer, not die
            log.exception("generator service failed on op=%s", op)
            write_frame(wfile, _error_frame(
                request_id, "BACKEND_ERROR", str(exc)))
        return True


class SutService:
    """Server side: exposes an in-process SUT over the wire."""

    def __init__(self, sut):
        self.sut = sut

    def serve(self, rfile, wfile) -> None:
        while True:
            try:
                frame, payloads = read_frame(rfile)
            except EOFError:
                return
            if not self._dispatch(frame, payloads, wfile):
                return

    def _dispatch(self, frame, payloads, wfile) -> bool:
        op = frame.get("op")
        request_id = frame.get("id")
        try:
            if op == "close":
                write_frame(wfile, {"id": request_id, "ok": True})
                return False
            if op == "caps":
                caps = self.sut.capabilities()
                write_frame(wfile, {
                    "id": request_id, "ok": True,
                    "differentiable": caps.differentiable,
                    "task_kind": caps.task_kind.value,
                    "num_classes": caps.num_classes,
                    "target_class": caps.target_class,
                    "concurrency_safe": caps.concurrency_safe,
                })
            elif op == "forward":
                image = _decode_image(payloads[0])
                logits = self.sut.forward(image)
                write_frame(wfile, {
                    "id": request_id, "ok": True,
                    "logits": [float(v) for v in logits.values],
                })
            elif op == "grad_input":
                image = _decode_image(payloads[0])
                try:
                    grad = self.sut.grad_input(image, int(frame["target"]))
                except NotDifferentiableError as exc:
                    write_frame(wfile, _error_frame(
                        request_id, "NOT_DIFFERENTIABLE", str(exc)))
                    return True
                write_frame(wfile, {"id": request_id, "ok": True},
                            blocks=[("tensor", encode_tensor(grad))])
            else:
                write_frame(wfile, _error_frame(
                    request_id, "UNSUPPORTED", f"unknown op {op!r}"))
        except Exception as exc:
            log.exception("SUT service failed on op=%s", op)
            write_frame(wfile, _error_frame(
                request_id, "BACKEND_ERROR", str(exc)))
        return True
