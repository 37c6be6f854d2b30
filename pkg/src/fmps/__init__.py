"""Flow-matching posterior sampling on numpy.

The public surface is re-exported here; see the submodules for details.
"""

__version__ = "0.1.0"

from .errors import ContractViolation, DivergenceError, FMPSError, ShapeError, TapeError
from .tensor import Tape, Tensor, no_record
from .schedule import FlowSchedule, ScheduleCoeffs, ScheduleKind, forward_interpolate
from .gaussian import GaussianPosterior, GaussianSpec, exact_posterior, marginal_at, score_at, true_velocity
from .velocity import (
    Classifier,
    GaussianVelocityField,
    MLPVelocityField,
    VelocityField,
    load_checkpoint,
    save_checkpoint,
)
from .datasets import Dataset, DatasetKind
from .training import TrainConfig, cfm_loss, train, train_classifier
from .guidance import (
    ClassifierLogitEnergy,
    Downsample,
    GaussianBlur,
    GuidanceEnergy,
    Identity,
    InpaintMask,
    PredictorVariant,
    X0Predictor,
    energy_gradient,
    normalize_correction,
    predict_x0_gradient_aware,
    predict_x0_gradient_free,
)
from .sampler import (
    SamplerConfig,
    Trajectory,
    Variant,
    guided_step,
    sample,
    sample_fmps_free,
    sample_fmps_gradient,
    sample_unconditional,
)
from .metrics import SampleSet, mmd_rbf, psnr, residual_norm, sliced_wasserstein

__all__ = [
    "__version__",
    "ContractViolation",
    "DivergenceError",
    "FMPSError",
    "ShapeError",
    "TapeError",
    "Tape",
    "Tensor",
    "no_record",
    "FlowSchedule",
    "ScheduleCoeffs",
    "ScheduleKind",
    "forward_interpolate",
    "GaussianPosterior",
    "GaussianSpec",
    "exact_posterior",
    "marginal_at",
    "score_at",
    "true_velocity",
    "Classifier",
    "GaussianVelocityField",
    "MLPVelocityField",
    "VelocityField",
    "load_checkpoint",
    "save_checkpoint",
    "Dataset",
    "DatasetKind",
    "TrainConfig",
    "cfm_loss",
    "train",
    "train_classifier",
    "ClassifierLogitEnergy",
    "Downsample",
    "GaussianBlur",
    "GuidanceEnergy",
    "Identity",
    "InpaintMask",
    "PredictorVariant",
    "X0Predictor",
    "energy_gradient",
    "normalize_correction",
    "predict_x0_gradient_aware",
    "predict_x0_gradient_free",
    "SamplerConfig",
    "Trajectory",
    "Variant",
    "guided_step",
    "sample",
    "sample_fmps_free",
    "sample_fmps_gradient",
    "sample_unconditional",
    "SampleSet",
    "mmd_rbf",
    "psnr",
    "residual_norm",
    "sliced_wasserstein",
]
