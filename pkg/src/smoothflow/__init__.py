"""Generative modelling of sparse functional data via flow matching.

The package learns a smooth three-dimensional vector field transporting a
latent Gaussian or Student-t base process to the observed data marginals,
estimates the base's latent correlation, and generates new smooth curves.
"""

__version__ = "0.1.0"

from .dataset import IrregularDataset, RegularGrid, Subject, load_csv
from .errors import (
    NumericalError,
    SmoothflowError,
    StageError,
    ValidationError,
)
from .evaluate import fpca_summary, mse_against_truth, prediction_task, wasserstein2
from .flow import FlowTrainingConfig, TensorSplineField, fit_vector_field
from .generator import GeneratedEnsemble, SfmModel, fit, generate
from .regress import denoise_dataset, smoothing_spline_1d
from .simgen import SamplingSpec, TruthOracle, simulate

__all__ = [
    "__version__",
    "IrregularDataset",
    "RegularGrid",
    "Subject",
    "load_csv",
    "SmoothflowError",
    "ValidationError",
    "NumericalError",
    "StageError",
    "FlowTrainingConfig",
    "TensorSplineField",
    "fit_vector_field",
    "GeneratedEnsemble",
    "SfmModel",
    "fit",
    "generate",
    "denoise_dataset",
    "smoothing_spline_1d",
    "SamplingSpec",
    "TruthOracle",
    "simulate",
    "fpca_summary",
    "mse_against_truth",
    "prediction_task",
    "wasserstein2",
]
