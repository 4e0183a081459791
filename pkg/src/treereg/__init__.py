"""Incremental multi-view pointmap registration along similarity-driven
spanning trees, with a synthetic oracle, toy stereo network, ensemble
post-optimization, and pose metrics."""

from .geometry import (
    ConfidenceMap,
    Intrinsics,
    NormalizationParams,
    Pointmap,
    Se3Pose,
    Sim3Transform,
)
from .predictor import (
    ExternalPredictor,
    InitPairResult,
    OracleNoiseConfig,
    OraclePredictor,
    PredictorRequest,
    PredictorResponse,
    ToyNetPredictor,
)
from .registration import (
    ReconstructionResult,
    RegistrationPlan,
    plan_registration,
    reconstruct,
    reconstruct_infer_then_align,
)
from .view_graph import SimilarityMatrix, SpanningForest, SpanningTree

__version__ = "0.1.0"

__all__ = [
    "ConfidenceMap",
    "ExternalPredictor",
    "InitPairResult",
    "Intrinsics",
    "NormalizationParams",
    "OracleNoiseConfig",
    "OraclePredictor",
    "Pointmap",
    "PredictorRequest",
    "PredictorResponse",
    "ReconstructionResult",
    "RegistrationPlan",
    "Se3Pose",
    "Sim3Transform",
    "SimilarityMatrix",
    "SpanningForest",
    "SpanningTree",
    "ToyNetPredictor",
    "plan_registration",
    "reconstruct",
    "reconstruct_infer_then_align",
    "__version__",
]
