"""Feature-aware test generation for vision models.

Perturbs single channels of a style-based generator's latent space to find
the channels a classifier actually relies on, separates them into
task-relevant and spurious via a judgment backend, synthesizes
decision-boundary tests, and assembles a repair dataset.
"""

from .core import (
    ChannelRef,
    Colorspace,
    FeatureLabel,
    FeatureVerdict,
    ImageTensor,
    JudgeVote,
    LogitVector,
    ProbeResult,
    ProbeVerdict,
    RelabelResult,
    StyleState,
    logit_margin,
    predicted_label,
    serialize_style_state,
    deserialize_style_state,
)
from .errors import (
    BackendError,
    ConfigError,
    DecodeError,
    FeatureProbeError,
    MissingArtifactError,
    NotDifferentiableError,
    ScenarioError,
    TopologyError,
    UnsupportedOperationError,
    ValidationError,
)
from .generator import (
    GeneratorTopology,
    GroundTruthMap,
    LayerBand,
    SyntheticStyleGenerator,
    truncate_state,
)
from .sut import (
    DetectionShimSUT,
    FinetuneConfig,
    LinearMeanSUT,
    LogisticPixelSUT,
    SoftmaxLinearSUT,
    SUTCapabilities,
    TaskKind,
    detection_target_score,
)
from .sensitivity import (
    CandidateSet,
    ScoreMethod,
    SensitivityMap,
    fda,
    grad_saliency,
    select_candidates,
    smoothgrad,
)
from .perturb import (
    BoundaryRefinement,
    DropConvention,
    OracleKind,
    OracleSpec,
    channel_perturb,
    confidence_drop,
    perturbation_delta,
    refine_boundary,
)
from .attribution import (
    GroundTruthJudge,
    JudgmentBackendConfig,
    JudgmentBackendKind,
    TieRule,
    TriptychQuery,
    VlmHttpJudge,
    attribute_channel,
    build_diff_mask,
    judge_pair,
    relabel_boundary_image,
)
from .metrics import (
    MetricReport,
    d2_boundary,
    d2_image,
    ms_ssim,
    r_relevance,
)
from .repair import (
    ManifestEntry,
    RepairHyper,
    RepairManifest,
    RepairSource,
    Split,
    assemble_repair_set,
    load_manifest,
    run_repair,
    save_manifest,
)
from .scenario import (
    Scenario,
    ScenarioSpec,
    build_scenario,
    load_scenario,
    make_original_set,
    save_scenario,
)
from .config import PipelineConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BoundaryRefinement",
    "CandidateSet",
    "ChannelRef",
    "Colorspace",
    "ConfigError",
    "DecodeError",
    "DetectionShimSUT",
    "DropConvention",
    "FeatureLabel",
    "FeatureProbeError",
    "FeatureVerdict",
    "FinetuneConfig",
    "GeneratorTopology",
    "GroundTruthJudge",
    "GroundTruthMap",
    "ImageTensor",
    "JudgeVote",
    "JudgmentBackendConfig",
    "JudgmentBackendKind",
    "LayerBand",
    "LinearMeanSUT",
    "LogisticPixelSUT",
    "LogitVector",
    "ManifestEntry",
    "MetricReport",
    "MissingArtifactError",
    "NotDifferentiableError",
    "OracleKind",
    "OracleSpec",
    "PipelineConfig",
    "ProbeResult",
    "ProbeVerdict",
    "RelabelResult",
    "RepairHyper",
    "RepairManifest",
    "RepairSource",
    "Scenario",
    "ScenarioError",
    "ScenarioSpec",
    "ScoreMethod",
    "SensitivityMap",
    "SoftmaxLinearSUT",
    "Split",
    "StyleState",
    "SUTCapabilities",
    "SyntheticStyleGenerator",
    "TaskKind",
    "TieRule",
    "TopologyError",
    "TriptychQuery",
    "UnsupportedOperationError",
    "ValidationError",
    "VlmHttpJudge",
    "assemble_repair_set",
    "attribute_channel",
    "build_diff_mask",
    "build_scenario",
    "channel_perturb",
    "confidence_drop",
    "d2_boundary",
    "d2_image",
    "detection_target_score",
    "fda",
    "grad_saliency",
    "judge_pair",
    "load_config",
    "load_manifest",
    "load_scenario",
    "logit_margin",
    "make_original_set",
    "ms_ssim",
    "perturbation_delta",
    "predicted_label",
    "r_relevance",
    "refine_boundary",
    "relabel_boundary_image",
    "run_repair",
    "save_manifest",
    "save_scenario",
    "select_candidates",
    "serialize_style_state",
    "deserialize_style_state",
    "smoothgrad",
    "truncate_state",
]
