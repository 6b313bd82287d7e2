"""Generator backends: seed -> style state -> image.

Two backends satisfy the same protocol:

* :class:`SyntheticStyleGenerator` -- a built-in smooth renderer with three
  style layers (COARSE / MIDDLE / FINE) whose per-channel semantics are known
  exactly, so relevance ground truth is available for acceptance testing.
  It is differentiable in every style coordinate and exposes the analytic
  channel Jacobian.
* :class:`~featureprobe.adapter.AdapterGenerator` -- a client for an external
  style-based generator process speaking the wire protocol in
  ``docs/PROTOCOL.md``.

A backend instance is single-threaded; parallel pipelines construct one
backend per worker.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import ChannelRef, Colorspace, ImageTensor, StyleState
from .errors import NotDifferentiableError, TopologyError, ValidationError


class LayerBand(enum.Enum):
    COARSE = "coarse"
    MIDDLE = "middle"
    FINE = "fine"


_BAND_ORDER = {LayerBand.COARSE: 0, LayerBand.MIDDLE: 1, LayerBand.FINE: 2}


@dataclass(frozen=True)
class GeneratorTopology:
    """Declared layer layout of a generator backend."""

    layer_widths: tuple
    layer_band: tuple
    image_shape: tuple

    def __post_init__(self):
        if len(self.layer_widths) != len(self.layer_band):
            raise ValidationError("band list must match layer list")
        orders = [_BAND_ORDER[b] for b in self.layer_band]
        if any(a > b for a, b in zip(orders, orders[1:])):
            raise ValidationError("bands must be monotone coarse -> fine")

    @property
    def total_channels(self) -> int:
        return int(sum(self.layer_widths))

    def channels(self):
        """All channel refs in (layer, channel) order."""
        for layer, width in enumerate(self.layer_widths):
            for chan in range(width):
                yield ChannelRef(layer, chan)

    def check_state(self, state: StyleState):
        if state.layer_widths != tuple(self.layer_widths):
            for i, (got, want) in enumerate(
                zip(state.layer_widths, self.layer_widths)
            ):
                if got != want:
                    raise TopologyError(
                        f"layer {i}: state width {got} != topology width {want}"
                    )
            raise TopologyError(
                f"state has {len(state.layer_widths)} layers, "
                f"topology declares {len(self.layer_widths)}"
            )


@dataclass(frozen=True)
class GroundTruthMap:
    """Synthetic backend only: channel -> (semantic tag, task relevance)."""

    tags: dict
    relevant: dict

    def semantic_tag(self, ref: ChannelRef) -> str:
        return self.tags[ref]

    def is_task_relevant(self, ref: ChannelRef) -> bool:
        return self.relevant[ref]

    def channels(self):
        return sorted(self.tags.keys())

    def to_json(self) -> dict:
        return {
            ref.key(): {"tag": self.tags[ref], "task_relevant": self.relevant[ref]}
            for ref in self.channels()
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruthMap":
        tags, relevant = {}, {}
        for key, entry in obj.items():
            ref = ChannelRef.from_key(key)
            tags[ref] = entry["tag"]
            relevant[ref] = bool(entry["task_relevant"])
        return cls(tags, relevant)


def truncate_state(raw: StyleState, mean_style, psi: float) -> StyleState:
    """Linear truncation toward the mean style: s <- mean + psi * (s - mean)."""
    if not (0.0 < psi <= 1.0):
        raise ValidationError(f"truncation must be in (0, 1], got {psi}")
    vecs = tuple(
        mean + psi * (vec - mean) for vec, mean in zip(raw.vectors, mean_style)
    )
    return StyleState(vecs, seed=raw.seed, truncation=psi)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _dsigmoid(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


# Render constants. The object is a soft warm ellipse near the image center
# (COARSE layer); the planted cue is a small cool blob in the top-left corner
# (MIDDLE layer); FINE channels apply global photometric shifts. Everything
# is composed in pre-activation space and squashed through a sigmoid, so the
# image is smooth in every style coordinate and never needs clamping.
_Z_BG = np.array([-1.2, -1.0, -0.8])
_Z_MID = -1.0
_OBJ_AMP = 4.0
_OBJ_COLOR = np.array([1.0, 0.9, 0.25])
_OBJ_R0, _OBJ_KR = 0.28, 0.35
_OBJ_KE = 0.3
_OBJ_KP = 0.25
_CUE_AMP = 3.5
_CUE_COLOR = np.array([0.2, 0.9, 1.0])
_CUE_R0, _CUE_KR = 0.18, 0.4
_CUE_CENTER = (-0.62, -0.62)
_CUE_KP = 0.08
_FINE_KB = 0.3
_FINE_KT = 0.2
_TINT_COLOR = np.array([1.0, 0.0, -1.0])
_FINE_KC = 0.25
_FINE_KV = 0.5

_CHANNEL_TAGS = (
    ("object_presence", True),
    ("object_size", False),
    ("object_eccentricity", False),
    ("object_position", False),
    ("cue_presence", False),
    ("cue_size", False),
    ("cue_position_x", False),
    ("cue_position_y", False),
    ("brightness", False),
    ("tint", False),
    ("contrast", False),
    ("vignette", False),
)


class SyntheticStyleGenerator:
    """Smooth synthetic renderer with known per-channel semantics.

    Layers: 0 COARSE (object presence / size / eccentricity / x-position),
    1 MIDDLE (secondary cue blob: presence / size / x / y), 2 FINE
    (brightness / tint / contrast / vignette). Widths are fixed at (4, 4, 4).
    """

    LAYER_WIDTHS = (4, 4, 4)

    def __init__(self, image_size: int = 48, cue_amplitude: float = _CUE_AMP):
        if image_size < 8:
            raise ValidationError("image_size must be >= 8")
        self.image_size = int(image_size)
        self.cue_amplitude = float(cue_amplitude)
        self._topology = GeneratorTopology(
            layer_widths=self.LAYER_WIDTHS,
            layer_band=(LayerBand.COARSE, LayerBand.MIDDLE, LayerBand.FINE),
            image_shape=(self.image_size, self.image_size, 3),
        )
        # Pixel-center coordinates in [-1, 1].
        axis = (np.arange(self.image_size) + 0.5) / self.image_size * 2.0 - 1.0
        self._u, self._v = np.meshgrid(axis, axis)  # u: x (width), v: y
        self._vignette_field = (self._u**2 + self._v**2) / 2.0
        # Per-layer sampling scale around the zero mean style.
        self._style_std = (1.5, 1.0, 1.0)

    # -- protocol surface ---------------------------------------------------

    @property
    def topology(self) -> GeneratorTopology:
        return self._topology

    @property
    def differentiable(self) -> bool:
        return True

    def mean_style(self):
        return tuple(np.zeros(w) for w in self.LAYER_WIDTHS)

    def style_std(self):
        return self._style_std

    def sample_style_state(self, seed: int, truncation: float = 1.0) -> StyleState:
        """Deterministic style sample for (seed, truncation)."""
        if not (0.0 < truncation <= 1.0):
            raise ValidationError(
                f"truncation must be in (0, 1], got {truncation}"
            )
        rng = np.random.default_rng(seed)
        vecs = tuple(
            rng.standard_normal(w) * std
            for w, std in zip(self.LAYER_WIDTHS, self._style_std)
        )
        raw = StyleState(vecs, seed=seed, truncation=1.0)
        if truncation == 1.0:
            return raw
        return truncate_state(raw, self.mean_style(), truncation)

    def synthesize(self, state: StyleState) -> ImageTensor:
        self._topology.check_state(state)
        z = self._preactivation(state)[0]
        return ImageTensor.from_raw(_sigmoid(z), Colorspace.RGB)

    def synthesize_with_jacobian(self, state: StyleState):
        """Image plus d(pixel)/d(channel) for every style coordinate.

        Returns ``(image, jac)`` where ``jac[layer][c]`` is an (H, W, 3)
        array of partial derivatives of the unclamped image.
        """
        self._topology.check_state(state)
        z, dz = self._preactivation(state, want_jacobian=True)
        pixels = _sigmoid(z)
        dpix = pixels * (1.0 - pixels)
        jac = [
            np.stack([dpix * dz_c for dz_c in layer_dz])
            for layer_dz in dz
        ]
        return ImageTensor.from_raw(pixels, Colorspace.RGB), jac

    def gradient_of_composite(self, state: StyleState, sut, target: int):
        """d(target logit)/d(style) through render + SUT in one pass."""
        if not sut.capabilities().differentiable:
            raise NotDifferentiableError("SUT does not expose input gradients")
        image, jac = self.synthesize_with_jacobian(state)
        g = sut.grad_input(image, target)
        return [
            np.array([float(np.sum(g * layer_jac[c]))
                      for c in range(layer_jac.shape[0])])
            for layer_jac in jac
        ]

    def ground_truth_map(self) -> GroundTruthMap:
        tags, relevant = {}, {}
        i = 0
        for layer, width in enumerate(self.LAYER_WIDTHS):
            for chan in range(width):
                tag, rel = _CHANNEL_TAGS[i]
                ref = ChannelRef(layer, chan)
                tags[ref] = tag
                relevant[ref] = rel
                i += 1
        return GroundTruthMap(tags, relevant)

    def ground_truth_label(self, state: StyleState) -> int:
        """Task label: 1 iff the object-presence channel renders the object."""
        return 1 if state.vectors[0][0] > 0.0 else 0

    def config(self) -> dict:
        return {
            "kind": "synthetic",
            "image_size": self.image_size,
            "cue_amplitude": self.cue_amplitude,
            "layer_widths": list(self.LAYER_WIDTHS),
        }

    # -- rendering ----------------------------------------------------------

    def _preactivation(self, state: StyleState, want_jacobian: bool = False):
        s0, s1, s2 = state.vectors
        u, v = self._u, self._v

        # COARSE: elliptical object near the center.
        amp_o = _OBJ_AMP * _sigmoid(s0[0])
        r_o = _OBJ_R0 * np.exp(_OBJ_KR * np.tanh(s0[1]))
        ecc = np.exp(_OBJ_KE * np.tanh(s0[2]))
        cx_o = _OBJ_KP * np.tanh(s0[3])
        dx_o, dy_o = u - cx_o, v
        sx, sy = r_o * ecc, r_o / ecc
        qx = dx_o**2 / (2.0 * sx**2)
        qy = dy_o**2 / (2.0 * sy**2)
        g_obj = np.exp(-(qx + qy))

        # MIDDLE: small circular cue blob in the corner.
        amp_c = self.cue_amplitude * _sigmoid(s1[0])
        r_c = _CUE_R0 * np.exp(_CUE_KR * np.tanh(s1[1]))
        cx_c = _CUE_CENTER[0] + _CUE_KP * np.tanh(s1[2])
        cy_c = _CUE_CENTER[1] + _CUE_KP * np.tanh(s1[3])
        dx_c, dy_c = u - cx_c, v - cy_c
        q_c = (dx_c**2 + dy_c**2) / (2.0 * r_c**2)
        g_cue = np.exp(-q_c)

        # FINE: global photometric adjustments.
        brightness = _FINE_KB * np.tanh(s2[0])
        tint = _FINE_KT * np.tanh(s2[1])
        gamma = np.exp(_FINE_KC * np.tanh(s2[2]))
        vig = _FINE_KV * _sigmoid(s2[3])

        z0 = (
            _Z_BG[None, None, :]
            + amp_o * g_obj[:, :, None] * _OBJ_COLOR[None, None, :]
            + amp_c * g_cue[:, :, None] * _CUE_COLOR[None, None, :]
        )
        z = (
            gamma * (z0 - _Z_MID)
            + _Z_MID
            + brightness
            + tint * _TINT_COLOR[None, None, :]
            - vig * self._vignette_field[:, :, None]
        )
        if not want_jacobian:
            return z, None

        obj3 = (g_obj[:, :, None] * _OBJ_COLOR[None, None, :])
        cue3 = (g_cue[:, :, None] * _CUE_COLOR[None, None, :])
        q_o = qx + qy

        d0 = np.empty((4,) + z.shape)
        d0[0] = gamma * obj3 * (_OBJ_AMP * _dsigmoid(s0[0]))
        dr = r_o * _OBJ_KR * _sech2(s0[1])
        d0[1] = gamma * amp_o * obj3 * (2.0 * q_o / r_o)[:, :, None] * dr
        de = ecc * _OBJ_KE * _sech2(s0[2])
        d0[2] = gamma * amp_o * obj3 * (2.0 * (qx - qy) / ecc)[:, :, None] * de
        dcx = _OBJ_KP * _sech2(s0[3])
        d0[3] = gamma * amp_o * obj3 * (dx_o / sx**2)[:, :, None] * dcx

        d1 = np.empty((4,) + z.shape)
        d1[0] = gamma * cue3 * (self.cue_amplitude * _dsigmoid(s1[0]))
        dr_c = r_c * _CUE_KR * _sech2(s1[1])
        d1[1] = gamma * amp_c * cue3 * (2.0 * q_c / r_c)[:, :, None] * dr_c
        dcx_c = _CUE_KP * _sech2(s1[2])
        d1[2] = gamma * amp_c * cue3 * (dx_c / r_c**2)[:, :, None] * dcx_c
        dcy_c = _CUE_KP * _sech2(s1[3])
        d1[3] = gamma * amp_c * cue3 * (dy_c / r_c**2)[:, :, None] * dcy_c

        ones3 = np.ones_like(z)
        d2 = np.empty((4,) + z.shape)
        d2[0] = ones3 * (_FINE_KB * _sech2(s2[0]))
        d2[1] = (_FINE_KT * _sech2(s2[1])) * np.broadcast_to(
            _TINT_COLOR[None, None, :], z.shape
        )
        d2[2] = (z0 - _Z_MID) * gamma * (_FINE_KC * _sech2(s2[2]))
        d2[3] = -(_FINE_KV * _dsigmoid(s2[3])) * np.broadcast_to(
            self._vignette_field[:, :, None], z.shape
        )

        return z, [d0, d1, d2]
