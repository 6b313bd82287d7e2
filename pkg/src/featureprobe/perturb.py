"""Oracle-driven single-channel perturbation and boundary refinement.

The probe loop perturbs one style coordinate at a time by

    delta = -epsilon * sign(alpha) * sign(y[t])   (binary)
    delta = -epsilon * sign(alpha)                (multiclass / detection)

and records channels according to the active oracle: the confidence oracle
flags channels whose perturbation drops the target logit by more than a
fraction of its original magnitude; the misclassification oracle flags
label flips and then bisects the perturbation magnitude down to the
decision boundary.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    ChannelRef,
    LogitVector,
    ProbeResult,
    ProbeVerdict,
    channel_ref_from_json,
    channel_ref_to_json,
    logit_margin,
    predicted_label,
)
from .errors import BackendError, ValidationError
from .sensitivity import CandidateSet
from .sut import TaskKind

log = logging.getLogger(__name__)


class OracleKind(enum.Enum):
    CONFIDENCE = "confidence"
    MISCLASSIFICATION = "misclassification"


class DropConvention(enum.Enum):
    """How a confidence drop is measured between original and perturbed logits.

    SIGNED: movement toward the decision threshold — y0 - y1 for y0 >= 0,
    y1 - y0 otherwise. ABSOLUTE: |y1 - y0| regardless of direction.
    """

    SIGNED = "signed"
    ABSOLUTE = "absolute"


@dataclass(frozen=True)
class OracleSpec:
    kind: OracleKind
    tau_fraction: float = 0.4
    epsilon: float = 10.0
    drop_convention: DropConvention = DropConvention.SIGNED

    def __post_init__(self):
        if self.tau_fraction <= 0:
            raise ValidationError("tau_fraction must be positive")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")


@dataclass(frozen=True)
class BoundaryRefinement:
    """Result of bisecting toward the decision boundary.

    ``converged`` is False when the iteration budget ran out before the
    margin fell under the tolerance — the result is still the smallest
    flipping magnitude observed, never an extrapolation.
    """

    channel: ChannelRef
    delta_star: float
    margin_at_star: float
    iterations: int
    tolerance: float
    converged: bool


def _signp(x: float) -> float:
    """Sign with sign(0) = +1, so the zero logit counts as the positive side
    (consistent with predicted_label's strict-positivity rule pushing a zero
    logit toward class 0: perturbation still moves it downward)."""
    return 1.0 if x >= 0.0 else -1.0


def confidence_drop(y_orig: float, y_pert: float,
                    convention: DropConvention = DropConvention.SIGNED) -> float:
    if convention is DropConvention.ABSOLUTE:
        return abs(y_pert - y_orig)
    return y_orig - y_pert if y_orig >= 0.0 else y_pert - y_orig


def perturbation_delta(alpha: float, y_t: float, epsilon: float,
                       task_kind: TaskKind) -> float:
    """Signed perturbation step opposing the channel's influence on y[t]."""
    if alpha == 0.0:
        raise ValidationError(
            "zero sensitivity gives no direction; skip the channel upstream"
        )
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    if task_kind is TaskKind.BINARY:
        return -epsilon * _signp(alpha) * _signp(y_t)
    return -epsilon * _signp(alpha)


def channel_perturb(state, generator, sut, candidates: CandidateSet,
                    oracle: OracleSpec, target: int = 0,
                    refinements: dict | None = None,
                    tolerance: float = 1e-2,
                    max_iterations: int = 12) -> list:
    """Probe every candidate channel once under the given oracle.

    Returns one ProbeResult per successfully probed channel, in candidate
    order. Backend failures abort only the affected channel (logged at
    WARNING) and the loop continues.

    Under the misclassification oracle, every flip is refined to the
    boundary; pass ``refinements`` (a dict) to collect the full
    BoundaryRefinement per channel key in addition to the ``refined_delta``
    recorded on the probe itself.
    """
    if len(candidates) == 0:
        raise ValidationError("candidate set is empty")
    generator.topology.check_state(state)
    task_kind = sut.capabilities().task_kind

    original_image = generator.synthesize(state)
    original_logits = _forward(sut, original_image, target)
    y0 = original_logits.target_value
    label0 = predicted_label(original_logits)
    tau = oracle.tau_fraction * abs(y0)

    results = []
    for ref, alpha in candidates:
        if alpha == 0.0:
            log.debug("skipping %s: zero sensitivity", ref.key())
            continue
        delta = perturbation_delta(alpha, y0, oracle.epsilon, task_kind)
        try:
            perturbed_state = state.with_channel(ref, delta)
            perturbed_image = generator.synthesize(perturbed_state)
            perturbed_logits = _forward(sut, perturbed_image, target)
        except BackendError as exc:
            log.warning("probe %s aborted: %s", ref.key(), exc)
            continue

        refined_delta = None
        if oracle.kind is OracleKind.CONFIDENCE:
            drop = confidence_drop(y0, perturbed_logits.target_value,
                                   oracle.drop_convention)
            verdict = (ProbeVerdict.INFLUENTIAL if drop > tau
                       else ProbeVerdict.NO_EFFECT)
        else:
            flipped = predicted_label(perturbed_logits) != label0
            if flipped:
                verdict = ProbeVerdict.MISCLASSIFIED
                try:
                    refinement = refine_boundary(
                        state, generator, sut, ref, delta, target=target,
                        tolerance=tolerance, max_iterations=max_iterations,
                    )
                except BackendError as exc:
                    log.warning("refinement %s aborted: %s", ref.key(), exc)
                    refinement = None
                if refinement is not None:
                    refined_delta = refinement.delta_star
                    if refinements is not None:
                        refinements[ref.key()] = refinement
            else:
                verdict = ProbeVerdict.NO_EFFECT

        results.append(ProbeResult(
            channel=ref,
            delta=delta,
            original_image=original_image,
            perturbed_image=perturbed_image,
            original_logits=original_logits,
            perturbed_logits=perturbed_logits,
            verdict=verdict,
            refined_delta=refined_delta,
        ))
    return results


def refine_boundary(state, generator, sut, channel: ChannelRef,
                    delta_flip: float, target: int = 0,
                    tolerance: float = 1e-2,
                    max_iterations: int = 12) -> BoundaryRefinement:
    """Bisect |delta| on [0, |delta_flip|] down to the decision boundary.

    Precondition: ``delta_flip`` flips the predicted label (the unperturbed
    state must not). The sign of delta is preserved throughout; the returned
    ``delta_star`` is the smallest flipping magnitude observed. When the
    margin at ``delta_flip`` is already within tolerance the input is
    returned unchanged with zero iterations.
    """
    if delta_flip == 0.0:
        raise ValidationError("delta_flip must be non-zero")
    if tolerance <= 0 or max_iterations < 1:
        raise ValidationError("tolerance must be > 0 and max_iterations >= 1")
    generator.topology.check_state(state)

    base_logits = _forward(sut, generator.synthesize(state), target)
    label0 = predicted_label(base_logits)
    sign = 1.0 if delta_flip > 0 else -1.0

    def probe(magnitude: float):
        shifted = state.with_channel(channel, sign * magnitude)
        logits = _forward(sut, generator.synthesize(shifted), target)
        return predicted_label(logits) != label0, logit_margin(logits)

    hi = abs(delta_flip)
    flipped, margin_hi = probe(hi)
    if not flipped:
        raise ValidationError(
            f"delta_flip={delta_flip} does not flip the label at {channel.key()}"
        )
    if margin_hi <= tolerance:
        return BoundaryRefinement(channel, sign * hi, margin_hi, 0,
                                  tolerance, True)

    lo = 0.0
    iterations = 0
    while iterations < max_iterations:
        mid = 0.5 * (lo + hi)
        iterations += 1
        flipped, margin = probe(mid)
        if flipped:
            hi, margin_hi = mid, margin
            if margin_hi <= tolerance:
                break
        else:
            lo = mid
    return BoundaryRefinement(
        channel=channel,
        delta_star=sign * hi,
        margin_at_star=margin_hi,
        iterations=iterations,
        tolerance=tolerance,
        converged=margin_hi <= tolerance,
    )


def boundary_refinement_to_json(refinement: BoundaryRefinement) -> dict:
    return {
        "channel": channel_ref_to_json(refinement.channel),
        "delta_star": refinement.delta_star,
        "margin_at_star": refinement.margin_at_star,
        "iterations": refinement.iterations,
        "tolerance": refinement.tolerance,
        "converged": refinement.converged,
    }


def boundary_refinement_from_json(obj: dict) -> BoundaryRefinement:
    return BoundaryRefinement(
        channel=channel_ref_from_json(obj["channel"]),
        delta_star=float(obj["delta_star"]),
        margin_at_star=float(obj["margin_at_star"]),
        iterations=int(obj["iterations"]),
        tolerance=float(obj["tolerance"]),
        converged=bool(obj["converged"]),
    )


def _forward(sut, image, target: int) -> LogitVector:
    logits = sut.forward(image)
    if logits.target_index != target:
        logits = LogitVector(logits.values, target)
    return logits
