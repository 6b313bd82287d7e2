"""Shared fixtures.

The synthetic scenario and the end-to-end pipeline run are expensive enough
(~1 s and ~3 s) that they are built once per session and shared read-only.
"""

from __future__ import annotations

import pytest

from featureprobe.config import load_config
from featureprobe.generator import SyntheticStyleGenerator
from featureprobe.pipeline import run_all
from featureprobe.scenario import ScenarioSpec, build_scenario


@pytest.fixture(scope="session")
def synth_gen():
    return SyntheticStyleGenerator()


@pytest.fixture(scope="session")
def scenario_full():
    """Default scenario: the toy SUT fully exploits the planted cue."""
    return build_scenario(ScenarioSpec(spurious_strength=1.0))


@pytest.fixture(scope="session")
def scenario_clean():
    """Control scenario: cue uncorrelated with the label during training."""
    return build_scenario(ScenarioSpec(spurious_strength=0.0))


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """One full default-preset run; stages read from ``run_dir``."""
    out = tmp_path_factory.mktemp("pipeline") / "run"
    config = load_config(preset="synthetic",
                         overrides=[f"output_dir={out}"])
    run_all(config)
    return out, config
