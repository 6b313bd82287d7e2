"""Domain types shared by every stage: channel addresses, style states,
images, logits, probe outcomes, and their canonical serializations.

All types are immutable after construction and safe to share between
workers. Two serialization formats live here:

* a binary format for :class:`StyleState` (float64, bit-exact round trip),
* the raw tensor interchange used on the adapter wire (little-endian
  float32, row-major, 8-byte magic header) -- see ``docs/PROTOCOL.md``.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, ValidationError

# Raw tensor interchange: 8-byte magic, uint32 ndim, ndim x uint32 dims,
# then float32 little-endian row-major payload.
TENSOR_MAGIC = b"FPTENSR1"
# StyleState container: 8-byte magic, then header + per-layer float64 blocks.
STYLE_MAGIC = b"FPSTYLE1"


class Colorspace(enum.Enum):
    RGB = "rgb"
    GRAY = "gray"


class FeatureLabel(enum.Enum):
    RELEVANT = "relevant"
    SPURIOUS = "spurious"
    UNDETERMINED = "undetermined"


class ProbeVerdict(enum.Enum):
    INFLUENTIAL = "influential"
    MISCLASSIFIED = "misclassified"
    NO_EFFECT = "no_effect"


class JudgeVote(enum.Enum):
    RELEVANT_CHANGE = "relevant_change"
    NO_RELEVANT_CHANGE = "no_relevant_change"
    AMBIGUOUS = "ambiguous"


class RelabelResult(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True, order=True)
class ChannelRef:
    """Address of one style coordinate: (synthesis layer, channel index)."""

    layer_id: int
    channel: int

    def __post_init__(self):
        if self.layer_id < 0 or self.channel < 0:
            raise ValidationError(f"negative channel address {self!r}")

    def key(self) -> str:
        return f"{self.layer_id}:{self.channel}"

    @classmethod
    def from_key(cls, key: str) -> "ChannelRef":
        layer, _, chan = key.partition(":")
        return cls(int(layer), int(chan))


@dataclass(frozen=True)
class StyleState:
    """One seed's full set of per-layer style vectors.

    ``vectors`` is a tuple of 1-D float64 arrays, one per synthesis layer
    (widths may differ between layers). ``truncation`` is the psi in (0, 1]
    the state was sampled with.
    """

    vectors: tuple
    seed: int
    truncation: float = 1.0

    def __post_init__(self):
        if len(self.vectors) == 0:
            raise ValidationError("style state needs at least one layer")
        frozen = []
        for i, vec in enumerate(self.vectors):
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0:
                raise ValidationError(f"layer {i} is not a non-empty vector")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"layer {i} contains non-finite values")
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "vectors", tuple(frozen))
        if not (0.0 < self.truncation <= 1.0):
            raise ValidationError(
                f"truncation must be in (0, 1], got {self.truncation}"
            )

    @property
    def layer_widths(self) -> tuple:
        return tuple(len(v) for v in self.vectors)

    def get(self, ref: ChannelRef) -> float:
        self._check_ref(ref)
        return float(self.vectors[ref.layer_id][ref.channel])

    def with_channel(self, ref: ChannelRef, delta: float) -> "StyleState":
        """Copy of this state with exactly one coordinate shifted by delta."""
        self._check_ref(ref)
        vecs = [v.copy() for v in self.vectors]
        vecs[ref.layer_id][ref.channel] += delta
        return StyleState(tuple(vecs), seed=self.seed, truncation=self.truncation)

    def _check_ref(self, ref: ChannelRef):
        if ref.layer_id >= len(self.vectors):
            raise ValidationError(f"layer {ref.layer_id} out of range")
        if ref.channel >= len(self.vectors[ref.layer_id]):
            raise ValidationError(
                f"channel {ref.channel} out of range for layer {ref.layer_id}"
            )


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C float image with values in [0, 1]."""

    data: np.ndarray
    colorspace: Colorspace = Colorspace.RGB

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"image must be HxWxC, got shape {arr.shape}")
        expected_c = 3 if self.colorspace is Colorspace.RGB else 1
        if arr.shape[2] != expected_c:
            raise ValidationError(
                f"{self.colorspace.value} image needs {expected_c} channels, "
                f"got {arr.shape[2]}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("image values outside [0, 1]; use from_raw")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_raw(cls, data, colorspace=Colorspace.RGB) -> "ImageTensor":
        """Clamp raw generator output into [0, 1] at the type boundary."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains non-finite values")
        return cls(np.clip(arr, 0.0, 1.0), colorspace)

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class LogitVector:
    """Unnormalized class scores. Binary tasks use K=1 and target 0."""

    values: np.ndarray
    target_index: int = 0

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if arr.ndim != 1 or arr.size < 1:
            raise ValidationError("logits must be a non-empty vector")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("logits contain non-finite values")
        if not (0 <= self.target_index < arr.size):
            raise ValidationError(
                f"target index {self.target_index} out of range for K={arr.size}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def k(self) -> int:
        return int(self.values.size)

    @property
    def target_value(self) -> float:
        return float(self.values[self.target_index])


def predicted_label(logits: LogitVector) -> int:
    """Predicted class index.

    Binary (K=1): 1 if the single logit is strictly positive, else 0.
    Multiclass: argmax, ties broken by the lowest class index.
    """
    if logits.k == 1:
        return 1 if logits.values[0] > 0.0 else 0
    return int(np.argmax(logits.values))


def logit_margin(logits: LogitVector) -> float:
    """Distance of the logits from the decision boundary, always >= 0.

    Binary (K=1): |logit|. Multiclass: top-1 minus top-2 logit gap.
    """
    if logits.k == 1:
        return float(abs(logits.values[0]))
    top = np.partition(logits.values, -2)[-2:]
    return float(top[1] - top[0])


@dataclass(frozen=True)
class ProbeResult:
    """Outcome of perturbing a single channel of one seed."""

    channel: ChannelRef
    delta: float
    original_image: ImageTensor
    perturbed_image: ImageTensor
    original_logits: LogitVector
    perturbed_logits: LogitVector
    verdict: ProbeVerdict
    refined_delta: float | None = None

    def __post_init__(self):
        if self.verdict is ProbeVerdict.MISCLASSIFIED:
            if predicted_label(self.perturbed_logits) == predicted_label(
                self.original_logits
            ):
                raise ValidationError(
                    "MISCLASSIFIED verdict but predicted label did not flip"
                )


@dataclass(frozen=True)
class FeatureVerdict:
    """Relevant/spurious call for one influential channel."""

    channel: ChannelRef
    label: FeatureLabel
    votes: tuple
    n_samples: int = -1

    def __post_init__(self):
        object.__setattr__(self, "votes", tuple(self.votes))
        if self.n_samples < 0:
            object.__setattr__(self, "n_samples", len(self.votes))
        elif self.n_samples != len(self.votes):
            raise ValidationError("n_samples must equal len(votes)")


# ---------------------------------------------------------------------------
# Canonical JSON schemas (field names match the type definitions, snake_case)
# ---------------------------------------------------------------------------

def channel_ref_to_json(ref: ChannelRef) -> dict:
    return {"layer_id": ref.layer_id, "channel": ref.channel}


def channel_ref_from_json(obj: dict) -> ChannelRef:
    return ChannelRef(int(obj["layer_id"]), int(obj["channel"]))


def logit_vector_to_json(lv: LogitVector) -> dict:
    return {"values": [float(v) for v in lv.values],
            "target_index": lv.target_index}


def logit_vector_from_json(obj: dict) -> LogitVector:
    return LogitVector(np.asarray(obj["values"], dtype=np.float64),
                       int(obj["target_index"]))


def probe_result_to_json(result: ProbeResult, original_image: str,
                         perturbed_image: str) -> dict:
    """Canonical ProbeResult record.

    Image fields hold relative file paths; the raster data itself is written
    separately as lossless PNG (see the perturb stage).
    """
    return {
        "channel": channel_ref_to_json(result.channel),
        "delta": float(result.delta),
        "original_image": original_image,
        "perturbed_image": perturbed_image,
        "original_logits": logit_vector_to_json(result.original_logits),
        "perturbed_logits": logit_vector_to_json(result.perturbed_logits),
        "verdict": result.verdict.value,
        "refined_delta": (None if result.refined_delta is None
                          else float(result.refined_delta)),
    }


def feature_verdict_to_json(verdict: FeatureVerdict) -> dict:
    return {
        "channel": channel_ref_to_json(verdict.channel),
        "label": verdict.label.value,
        "votes": [v.value for v in verdict.votes],
        "n_samples": verdict.n_samples,
    }


def feature_verdict_from_json(obj: dict) -> FeatureVerdict:
    return FeatureVerdict(
        channel=channel_ref_from_json(obj["channel"]),
        label=FeatureLabel(obj["label"]),
        votes=tuple(JudgeVote(v) for v in obj["votes"]),
        n_samples=int(obj["n_samples"]),
    )


def dump_json(obj, path=None, **kwargs):
    """Deterministic JSON: sorted keys, no whitespace drift."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), **kwargs)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return text


# ---------------------------------------------------------------------------
# Raw tensor interchange (adapter wire format)
# ---------------------------------------------------------------------------

def encode_tensor(arr: np.ndarray) -> bytes:
    """Encode an array as the float32 interchange block."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    parts = [TENSOR_MAGIC, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensor(buf: bytes, offset: int = 0):
    """Decode one tensor block; returns (array, next_offset)."""
    end = offset + len(TENSOR_MAGIC)
    if buf[offset:end] != TENSOR_MAGIC:
        raise DecodeError("bad tensor magic")
    if len(buf) < end + 4:
        raise DecodeError("truncated tensor header")
    (ndim,) = struct.unpack_from("<I", buf, end)
    end += 4
    if ndim > 8:
        raise DecodeError(f"implausible tensor rank {ndim}")
    if len(buf) < end + 4 * ndim:
        raise DecodeError("truncated tensor shape")
    shape = struct.unpack_from(f"<{ndim}I", buf, end)
    end += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = 4 * count
    if len(buf) < end + nbytes:
        raise DecodeError("truncated tensor payload")
    arr = np.frombuffer(buf[end:end + nbytes], dtype="<f4").reshape(shape)
    return arr.astype(np.float64), end + nbytes


# ---------------------------------------------------------------------------
# StyleState binary serialization (float64, bit-exact)
# ---------------------------------------------------------------------------

def serialize_style_state(state: StyleState) -> bytes:
    """Serialize a StyleState; round-trips bit-exactly via deserialize."""
    parts = [
        STYLE_MAGIC,
        struct.pack("<qdI", state.seed, state.truncation, len(state.vectors)),
    ]
    for vec in state.vectors:
        parts.append(struct.pack("<I", len(vec)))
        parts.append(np.ascontiguousarray(vec, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_style_state(buf: bytes) -> StyleState:
    if buf[: len(STYLE_MAGIC)] != STYLE_MAGIC:
        raise DecodeError("bad style-state magic")
    offset = len(STYLE_MAGIC)
    header = struct.calcsize("<qdI")
    if len(buf) < offset + header:
        raise DecodeError("truncated style-state header")
    seed, truncation, n_layers = struct.unpack_from("<qdI", buf, offset)
    offset += header
    if n_layers == 0:
        raise DecodeError("style state declares zero layers")
    vectors = []
    for i in range(n_layers):
        if len(buf) < offset + 4:
            raise DecodeError(f"truncated width of layer {i}")
        (width,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        nbytes = 8 * width
        if len(buf) < offset + nbytes:
            raise DecodeError(f"truncated payload of layer {i}")
        vec = np.frombuffer(buf[offset:offset + nbytes], dtype="<f8").copy()
        if not np.all(np.isfinite(vec)):
            raise DecodeError(f"non-finite values in layer {i}")
        offset += nbytes
        vectors.append(vec)
    try:
        return StyleState(tuple(vectors), seed=seed, truncation=truncation)
    except ValidationError as exc:
        raise DecodeError(str(exc)) from exc
