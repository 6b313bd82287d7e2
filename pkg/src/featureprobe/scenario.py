"""Reproducible synthetic scenario: renderer + shortcut-trained toy SUT.

The scenario realizes the relevant/spurious distinction with known ground
truth. Training images are sampled from the synthetic generator with the
object-presence channel pinned to +/-presence_margin according to the
label, and the planted cue channel pinned to agree with the label in a
controllable fraction of samples (``spurious_strength``). A pixel-space
logistic head is then fit by L-BFGS; at full correlation it provably leans
on the cue, at zero correlation it cannot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from .core import StyleState, dump_json
from .errors import ScenarioError, ValidationError
from .generator import GroundTruthMap, SyntheticStyleGenerator
from .sut import LogisticPixelSUT

PRESENCE_CHANNEL = (0, 0)
CUE_CHANNEL = (1, 0)


@dataclass(frozen=True)
class ScenarioSpec:
    spurious_strength: float
    n_train: int = 1600
    rng_seed: int = 0
    image_size: int = 48
    presence_margin: float = 2.0
    cue_margin: float = 2.0
    l2_reg: float = 1e-2
    min_train_accuracy: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ValidationError("spurious_strength must be in [0, 1]")
        if self.n_train < 10:
            raise ValidationError("n_train must be at least 10")
        if self.image_size < 16:
            raise ValidationError("image_size must be at least 16")

    def to_json(self) -> dict:
        return {
            "spurious_strength": self.spurious_strength,
            "n_train": self.n_train,
            "rng_seed": self.rng_seed,
            "image_size": self.image_size,
            "presence_margin": self.presence_margin,
            "cue_margin": self.cue_margin,
            "l2_reg": self.l2_reg,
            "min_train_accuracy": self.min_train_accuracy,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioSpec":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if k in obj})


@dataclass(frozen=True)
class Scenario:
    spec: ScenarioSpec
    generator: SyntheticStyleGenerator
    sut: LogisticPixelSUT
    gt_map: GroundTruthMap
    train_accuracy: float

    def label_fn(self, state: StyleState) -> int:
        return self.generator.ground_truth_label(state)


def _draw_training_state(generator, rng, spec: ScenarioSpec):
    """One (state, label) pair from the shortcut-learning distribution.

    All per-sample randomness is drawn unconditionally so the stream does
    not depend on spurious_strength: scenarios across a strength grid share
    their training draws sample-for-sample (common random numbers) and
    differ only in the cue coordinate. Grid comparisons are therefore
    paired, which is what makes aggregate statistics such as R_Relevance
    move monotonically with strength instead of drowning in head-to-head
    sampling noise.
    """
    label = int(rng.integers(0, 2))
    follows_label = rng.random() < spec.spurious_strength
    independent_cue = int(rng.integers(0, 2))
    cue_label = label if follows_label else independent_cue
    vectors = []
    for std, width in zip(generator.style_std(), generator.topology.layer_widths):
        vectors.append(std * rng.standard_normal(width))
    vectors[PRESENCE_CHANNEL[0]][PRESENCE_CHANNEL[1]] = (
        (2 * label - 1) * spec.presence_margin
    )
    vectors[CUE_CHANNEL[0]][CUE_CHANNEL[1]] = (
        (2 * cue_label - 1) * spec.cue_margin
    )
    state = StyleState(
        tuple(vectors), seed=int(rng.integers(0, 2**31 - 1)), truncation=1.0
    )
    return state, label


def sample_training_set(generator, spec: ScenarioSpec, n: int, rng):
    """Render ``n`` training images; labels are ground-truth object presence
    (which the construction pins, so label == drawn label)."""
    states, images, labels = [], [], []
    for _ in range(n):
        state, label = _draw_training_state(generator, rng, spec)
        states.append(state)
        images.append(generator.synthesize(state).data)
        labels.append(label)
    return states, np.stack(images), np.array(labels, dtype=int)


def _fit_logistic_head(x: np.ndarray, y: np.ndarray, l2_reg: float):
    """Ridge-regularized logistic regression on centered pixels (L-BFGS)."""
    n = x.shape[0]
    mean_image = x.mean(axis=0)
    flat = (x - mean_image[None]).reshape(n, -1)
    d = flat.shape[1]

    def objective(theta):
        w, b = theta[:d], theta[d]
        z = flat @ w + b
        # log(1 + e^z) - y z, computed stably
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        p = 1.0 / (1.0 + np.exp(-z))
        grad_z = (p - y) / n
        grad_w = flat.T @ grad_z + l2_reg * w
        grad_b = grad_z.sum()
        return (loss + 0.5 * l2_reg * float(w @ w),
                np.concatenate([grad_w, [grad_b]]))

    result = optimize.minimize(
        objective, np.zeros(d + 1), jac=True, method="L-BFGS-B",
        options={"maxiter": 500},
    )
    theta = result.x
    return theta[:d], float(theta[d]), mean_image


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """Construct the generator, train the toy SUT, and bundle ground truth.

    Raises ScenarioError when the head cannot reach the required training
    accuracy (try a different rng_seed or more samples).
    """
    generator = SyntheticStyleGenerator(image_size=spec.image_size)
    rng = np.random.default_rng(spec.rng_seed)
    _, x, y = sample_training_set(generator, spec, spec.n_train, rng)
    weights_flat, bias, mean_image = _fit_logistic_head(x, y, spec.l2_reg)
    sut = LogisticPixelSUT(
        weights_flat.reshape(x.shape[1:]), bias, mean_image
    )
    accuracy = sut.accuracy(x, y)
    if accuracy < spec.min_train_accuracy:
        raise ScenarioError(
            f"toy SUT reached only {accuracy:.3f} train accuracy "
            f"(need {spec.min_train_accuracy}); try a different rng_seed "
            f"or a larger n_train"
        )
    return Scenario(
        spec=spec,
        generator=generator,
        sut=sut,
        gt_map=generator.ground_truth_map(),
        train_accuracy=accuracy,
    )


def make_original_set(scenario: Scenario, n: int, rng_seed: int):
    """Fresh labeled originals from the scenario's training distribution,
    for the repair mix. Returns (states, images NHWC, labels)."""
    rng = np.random.default_rng(rng_seed)
    return sample_training_set(scenario.generator, scenario.spec, n, rng)


def save_scenario(scenario: Scenario, out_dir) -> None:
    """Persist the three artifacts: spec+generator config, SUT, truth map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json({
        "spec": scenario.spec.to_json(),
        "generator": scenario.generator.config(),
        "train_accuracy": scenario.train_accuracy,
    }, out / "scenario.json")
    scenario.sut.to_npz(out / "sut.npz")
    dump_json(scenario.gt_map.to_json(), out / "ground_truth.json")


def load_scenario(scenario_dir) -> Scenario:
    root = Path(scenario_dir)
    meta_path = root / "scenario.json"
    if not meta_path.exists():
        raise ScenarioError(f"{scenario_dir} does not contain scenario.json")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = ScenarioSpec.from_json(meta["spec"])
    generator = SyntheticStyleGenerator(
        image_size=int(meta["generator"]["image_size"]),
        cue_amplitude=float(meta["generator"]["cue_amplitude"]),
    )
    sut = LogisticPixelSUT.from_npz(root / "sut.npz")
    with open(root / "ground_truth.json", encoding="utf-8") as fh:
        gt_map = GroundTruthMap.from_json(json.load(fh))
    return Scenario(
        spec=spec,
        generator=generator,
        sut=sut,
        gt_map=gt_map,
        train_accuracy=float(meta["train_accuracy"]),
    )
