"""Channel-sensitivity screening: signed per-channel scores and top-k selection.

Three interchangeable scorers produce a :class:`SensitivityMap` over the
generator's style space:

* ``grad_saliency`` — one backward pass through the SUT∘generator composite.
* ``smoothgrad``    — mean of ``n`` gradients at noise-perturbed states.
* ``fda``           — forward differences; black-box, one SUT forward per
                      channel plus one baseline.

Scores keep their sign; selection ranks by magnitude only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ChannelRef,
    channel_ref_from_json,
    channel_ref_to_json,
    dump_json,
)
from .errors import ValidationError
from .generator import GeneratorTopology, LayerBand


class ScoreMethod(enum.Enum):
    GRAD = "grad"
    SMOOTHGRAD = "smoothgrad"
    FDA = "fda"


@dataclass(frozen=True)
class SensitivityMap:
    """Per-channel signed scores, one array per generator layer."""

    scores: tuple
    method: ScoreMethod
    target: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        frozen = tuple(np.asarray(s, dtype=np.float64) for s in self.scores)
        for layer_id, arr in enumerate(frozen):
            if arr.ndim != 1:
                raise ValidationError(f"layer {layer_id} scores must be 1-D")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"layer {layer_id} has non-finite scores")
            arr.setflags(write=False)
        object.__setattr__(self, "scores", frozen)

    @property
    def layer_widths(self):
        return tuple(arr.size for arr in self.scores)

    def get(self, ref: ChannelRef) -> float:
        return float(self.scores[ref.layer_id][ref.channel])

    def items(self):
        for layer_id, arr in enumerate(self.scores):
            for channel in range(arr.size):
                yield ChannelRef(layer_id, channel), float(arr[channel])


@dataclass(frozen=True)
class CandidateSet:
    """Channels retained for perturbation, with their signed scores.

    Entries are grouped by layer; within a layer they are sorted by
    descending magnitude (ties broken by ascending channel index).
    """

    entries: tuple  # of (ChannelRef, float)
    k_coarse_mid: int
    k_fine: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def channels(self):
        return tuple(ref for ref, _ in self.entries)


def _check_topology(generator, state):
    generator.topology.check_state(state)


def grad_saliency(state, generator, sut, target: int) -> SensitivityMap:
    """α = ∂y[target]/∂s via one backward pass through SUT∘generator.

    Raises NOT_DIFFERENTIABLE (from the backend) when either side cannot
    supply gradients.
    """
    _check_topology(generator, state)
    grads = generator.gradient_of_composite(state, sut, target)
    return SensitivityMap(grads, ScoreMethod.GRAD, target)


def smoothgrad(state, generator, sut, target: int, n: int = 10,
               sigma=None, seed: int = 0) -> SensitivityMap:
    """Mean of ``n`` gradients at ``state + ε``, ε ~ N(0, σ²I) per layer.

    ``sigma`` may be a scalar, a per-layer sequence, or None, in which case
    it defaults to 0.1 × the backend's per-layer style standard deviation.
    The noise RNG is seeded for reproducibility.
    """
    _check_topology(generator, state)
    if n < 1:
        raise ValidationError("smoothgrad needs n >= 1 samples")
    widths = state.layer_widths
    if sigma is None:
        sigmas = tuple(0.1 * s for s in generator.style_std())
    elif np.isscalar(sigma):
        sigmas = (float(sigma),) * len(widths)
    else:
        sigmas = tuple(float(s) for s in sigma)
    if len(sigmas) != len(widths) or any(s <= 0 for s in sigmas):
        raise ValidationError("sigma must be positive, one value per layer")

    rng = np.random.default_rng(seed)
    acc = [np.zeros(w) for w in widths]
    for _ in range(n):
        noisy = [
            vec + sigmas[i] * rng.standard_normal(vec.size)
            for i, vec in enumerate(state.vectors)
        ]
        noisy_state = type(state)(tuple(noisy), state.seed, state.truncation)
        grads = generator.gradient_of_composite(noisy_state, sut, target)
        for i, g in enumerate(grads):
            acc[i] += g
    scores = tuple(a / n for a in acc)
    return SensitivityMap(
        scores, ScoreMethod.SMOOTHGRAD, target,
        params={"n": n, "sigma": list(sigmas), "seed": seed},
    )


def fda(state, generator, sut, target: int, delta: float = 0.1) -> SensitivityMap:
    """Forward-difference scores: (y_t(s + Δe_c) − y_t(s)) / Δ per channel.

    Black-box path: needs no gradients and performs exactly one SUT forward
    per channel plus one baseline (Σ dᵢ + 1 total).
    """
    _check_topology(generator, state)
    if delta <= 0:
        raise ValidationError("fda step must be positive")
    base = sut.forward(generator.synthesize(state)).values
    y0 = _target_value(base, target)
    scores = []
    for layer_id, width in enumerate(state.layer_widths):
        layer_scores = np.zeros(width)
        for channel in range(width):
            ref = ChannelRef(layer_id, channel)
            shifted = state.with_channel(ref, delta)
            y1 = _target_value(sut.forward(generator.synthesize(shifted)).values,
                               target)
            layer_scores[channel] = (y1 - y0) / delta
        scores.append(layer_scores)
    return SensitivityMap(tuple(scores), ScoreMethod.FDA, target,
                          params={"delta": delta})


def _target_value(values: np.ndarray, target: int) -> float:
    if not 0 <= target < values.size:
        raise ValidationError(f"target {target} out of range for K={values.size}")
    return float(values[target])


def select_candidates(sensitivity: SensitivityMap, topology: GeneratorTopology,
                      k_coarse_mid: int = 15, k_fine: int = 5) -> CandidateSet:
    """Per-layer top-k by |score|; the budget depends on the layer's band.

    Coarse and middle layers share ``k_coarse_mid``; fine layers use
    ``k_fine``. Ties in magnitude break toward the lower channel index, so
    selection is deterministic. Signs are preserved from the map.
    """
    if k_coarse_mid < 0 or k_fine < 0:
        raise ValidationError("band budgets must be non-negative")
    if sensitivity.layer_widths != topology.layer_widths:
        raise ValidationError("sensitivity map does not match generator topology")
    entries = []
    for layer_id, arr in enumerate(sensitivity.scores):
        band = topology.layer_band[layer_id]
        budget = k_fine if band is LayerBand.FINE else k_coarse_mid
        if budget == 0:
            continue
        # stable sort on (-|score|, channel): magnitude first, index tie-break
        order = sorted(range(arr.size), key=lambda c: (-abs(arr[c]), c))
        for channel in order[:budget]:
            entries.append((ChannelRef(layer_id, channel), float(arr[channel])))
    return CandidateSet(tuple(entries), k_coarse_mid, k_fine)


def sensitivity_map_to_json(sensitivity: SensitivityMap) -> dict:
    """Flattened per-layer export for offline inspection and plots."""
    return {
        "method": sensitivity.method.value,
        "target": sensitivity.target,
        "params": sensitivity.params,
        "scores": [[float(v) for v in arr] for arr in sensitivity.scores],
    }


def sensitivity_map_from_json(obj: dict) -> SensitivityMap:
    return SensitivityMap(
        tuple(np.asarray(layer, dtype=np.float64) for layer in obj["scores"]),
        ScoreMethod(obj["method"]),
        int(obj["target"]),
        dict(obj.get("params", {})),
    )


def candidate_set_to_json(candidates: CandidateSet) -> dict:
    return {
        "k_coarse_mid": candidates.k_coarse_mid,
        "k_fine": candidates.k_fine,
        "entries": [
            {"channel": channel_ref_to_json(ref), "score": score}
            for ref, score in candidates.entries
        ],
    }


def candidate_set_from_json(obj: dict) -> CandidateSet:
    entries = tuple(
        (channel_ref_from_json(e["channel"]), float(e["score"]))
        for e in obj["entries"]
    )
    return CandidateSet(entries, int(obj["k_coarse_mid"]), int(obj["k_fine"]))


def save_sensitivity_map(sensitivity: SensitivityMap, path) -> None:
    dump_json(sensitivity_map_to_json(sensitivity), path)
