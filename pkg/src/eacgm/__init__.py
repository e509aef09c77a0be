"""Trace analysis for ML systems: layered events, synthetic fault workloads,
Gaussian-mixture modeling and threshold anomaly detection."""

__version__ = "0.1.0"

from .detect import DetectionReport, DetectorConfig, calibrate_threshold, detect, run_pipeline
from .events import AnomalyLabel, FeatureMatrix, FeatureSpec, Layer, TraceEvent, extract_features, validate_event
from .gmm import (
    GmmModel,
    component_log_density,
    fit_em,
    load_model,
    mixture_density,
    responsibilities,
    save_model,
    select_k_bic,
)
from .traceio import AttachPlan, ProbeSpec, export_perfetto, read_trace, resolve_attach_plan, write_trace
from .workload import FaultKind, FaultSpec, WorkloadConfig, ratio_report, simulate

__all__ = [
    "AnomalyLabel",
    "AttachPlan",
    "DetectionReport",
    "DetectorConfig",
    "FaultKind",
    "FaultSpec",
    "FeatureMatrix",
    "FeatureSpec",
    "GmmModel",
    "Layer",
    "ProbeSpec",
    "TraceEvent",
    "WorkloadConfig",
    "calibrate_threshold",
    "component_log_density",
    "detect",
    "export_perfetto",
    "extract_features",
    "fit_em",
    "load_model",
    "mixture_density",
    "ratio_report",
    "read_trace",
    "resolve_attach_plan",
    "responsibilities",
    "run_pipeline",
    "save_model",
    "select_k_bic",
    "simulate",
    "validate_event",
    "write_trace",
]
