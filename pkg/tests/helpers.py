"""Test-only generator with an exactly linear style-to-logit composite.

Each channel adds a constant amount to a disjoint pixel block, so for any
mean-pooling SUT the composite logit is an affine function of the style
coordinates. That makes gradient, SmoothGrad, and forward differences agree
to machine precision, and gives every decision boundary a closed-form root
delta* = -y0 / slope_c.
"""

from __future__ import annotations

import numpy as np

from featureprobe.core import Colorspace, ImageTensor, StyleState
from featureprobe.errors import NotDifferentiableError
from featureprobe.generator import GeneratorTopology, LayerBand, truncate_state

BASE_PIXEL = 0.5


class LinearTestGenerator:
    """Affine renderer: image = BASE + sum_c s_c * basis_c.

    ``layer_widths`` defaults to (2, 3, 1) over COARSE/MIDDLE/FINE. Basis
    patterns are disjoint constant blocks along the rows, one block per
    channel, with per-channel amplitudes small enough that pixels never
    leave [0, 1] even under |delta| = 10 single-channel perturbations (so
    the clamp in ImageTensor.from_raw stays inactive and the composite is
    exactly affine), yet distinct enough to order every channel.
    """

    def __init__(self, layer_widths=(2, 3, 1), image_size: int = 12):
        self.layer_widths = tuple(int(w) for w in layer_widths)
        self.image_size = int(image_size)
        bands = (LayerBand.COARSE, LayerBand.MIDDLE, LayerBand.FINE)
        self._topology = GeneratorTopology(
            layer_widths=self.layer_widths,
            layer_band=bands[: len(self.layer_widths)],
            image_shape=(self.image_size, self.image_size, 3),
        )
        total = sum(self.layer_widths)
        if total > self.image_size:
            raise ValueError("need at least one image row per channel")
        self._basis = []  # flat channel order
        shape = self._topology.image_shape
        for idx in range(total):
            pattern = np.zeros(shape)
            pattern[idx, :, :] = 0.004 * (idx + 1)
            self._basis.append(pattern)
        self._style_std = tuple(1.0 for _ in self.layer_widths)

    # -- protocol surface ----------------------------------------------------

    @property
    def topology(self) -> GeneratorTopology:
        return self._topology

    @property
    def differentiable(self) -> bool:
        return True

    def mean_style(self):
        return tuple(np.zeros(w) for w in self.layer_widths)

    def style_std(self):
        return self._style_std

    def sample_style_state(self, seed: int, truncation: float = 1.0):
        rng = np.random.default_rng(seed)
        vecs = tuple(rng.standard_normal(w) * 0.5 for w in self.layer_widths)
        raw = StyleState(vecs, seed=seed, truncation=1.0)
        if truncation == 1.0:
            return raw
        return truncate_state(raw, self.mean_style(), truncation)

    def _flat(self, state: StyleState):
        return np.concatenate([np.asarray(v) for v in state.vectors])

    def synthesize(self, state: StyleState) -> ImageTensor:
        self._topology.check_state(state)
        pixels = np.full(self._topology.image_shape, BASE_PIXEL)
        for coeff, pattern in zip(self._flat(state), self._basis):
            pixels = pixels + coeff * pattern
        return ImageTensor.from_raw(pixels, Colorspace.RGB)

    def synthesize_with_jacobian(self, state: StyleState):
        image = self.synthesize(state)
        jac, idx = [], 0
        for width in self.layer_widths:
            jac.append(np.stack(self._basis[idx:idx + width]))
            idx += width
        return image, jac

    def gradient_of_composite(self, state: StyleState, sut, target: int):
        if not sut.capabilities().differentiable:
            raise NotDifferentiableError("SUT does not expose input gradients")
        image, jac = self.synthesize_with_jacobian(state)
        g = sut.grad_input(image, target)
        return [
            np.array([float(np.sum(g * layer_jac[c]))
                      for c in range(layer_jac.shape[0])])
            for layer_jac in jac
        ]

    def config(self) -> dict:
        return {"kind": "linear_test", "layer_widths": list(self.layer_widths)}

    # -- closed forms for oracles ---------------------------------------------

    def composite_slopes(self, sut_w: float) -> np.ndarray:
        """d(logit)/d(s_c) for a LinearMeanSUT with weight ``sut_w``."""
        return np.array(
            [sut_w * float(p.mean()) for p in self._basis]
        )


def mine_influential(scenario, seed, tau_fraction=0.4, truncation=1.0):
    """Screen -> select -> perturb one probe seed of a synthetic scenario.

    Returns (state, influential channel list, all probe results) using the
    confidence oracle at the given threshold fraction.
    """
    from featureprobe.core import ProbeVerdict
    from featureprobe.perturb import OracleKind, OracleSpec, channel_perturb
    from featureprobe.sensitivity import grad_saliency, select_candidates

    gen, sut = scenario.generator, scenario.sut
    state = gen.sample_style_state(seed, truncation)
    smap = grad_saliency(state, gen, sut, 0)
    candidates = select_candidates(smap, gen.topology)
    results = channel_perturb(
        state, gen, sut, candidates,
        OracleSpec(OracleKind.CONFIDENCE, tau_fraction=tau_fraction),
    )
    influential = [r.channel for r in results
                   if r.verdict is ProbeVerdict.INFLUENTIAL]
    return state, influential, results
