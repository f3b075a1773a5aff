"""Peer-group Bayesian Poisson models for anomaly detection in authentication logs."""

from .clustering import GroupAssignment, GroupingMethod
from .detect import AnomalyReport, HpdiInterval, detect, hpdi
from .evaluate import WaicResult, waic
from .inference import FitReport, PosteriorSamples, VariationalParams, fit_svi, sample_posterior
from .ingest import Dataset, HourlyCount, Method, RawEvent
from .models import MODEL_IDS, ModelSpec, Observations
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AnomalyReport",
    "Dataset",
    "FitReport",
    "GroupAssignment",
    "GroupingMethod",
    "HourlyCount",
    "HpdiInterval",
    "MODEL_IDS",
    "Method",
    "ModelSpec",
    "Observations",
    "PipelineConfig",
    "PosteriorSamples",
    "RawEvent",
    "VariationalParams",
    "WaicResult",
    "detect",
    "fit_svi",
    "hpdi",
    "run_pipeline",
    "sample_posterior",
    "waic",
]
