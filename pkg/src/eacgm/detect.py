"""Threshold anomaly detection on a fitted mixture.

Each point is assigned to the component under which it is most likely
(unweighted component density), and flagged when that density is strictly
below the threshold. ``use_mixture=True`` thresholds the full mixture
density instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, EmptyLayer, EmptyTraining, InsufficientTraining
from .events import FeatureMatrix, FeatureSpec, Layer, Standardization, TraceEvent, extract_features
from .gmm import GmmModel, component_log_densities, fit_em, mixture_log_densities, select_k_bic


@dataclass(frozen=True)
class DetectorConfig:
    layer: Layer = Layer.NCCL
    k: int | tuple[int, ...] = 2  # a tuple means: pick K by BIC from these
    delta: float | None = None
    quantile_q: float | None = 0.01
    train_window: float = 0.5
    seed: int = 0
    init: str = "kmeans++"
    tol: float = 1e-6
    max_iter: int = 200
    reg: float | None = None
    use_mixture: bool = False
    features: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "layer", Layer.parse(self.layer))
        if (self.delta is None) == (self.quantile_q is None):
            raise DataError("set exactly one of delta and quantile_q")
        if self.delta is not None and not self.delta > 0:
            raise DataError("delta must be positive")
        if self.quantile_q is not None and not 0 < self.quantile_q < 1:
            raise DataError("quantile_q must lie in (0, 1)")
        if not 0 < self.train_window <= 1:
            raise DataError("train_window must lie in (0, 1]")

    @property
    def k_min(self) -> int:
        return self.k if isinstance(self.k, int) else min(self.k)

    def em_options(self) -> dict:
        return {"init": self.init, "tol": self.tol, "max_iter": self.max_iter, "reg": self.reg, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class DetectionReport:
    flags: np.ndarray  # (N,) bool
    best_component: np.ndarray  # (N,) int
    log_density: np.ndarray  # (N,) float
    delta: float
    model: GmmModel
    event_index: np.ndarray | None = None  # trace position of each row
    meta: dict = field(default_factory=dict)

    @property
    def anomaly_indices(self) -> list[int]:
        return np.flatnonzero(self.flags).tolist()

    @property
    def n(self) -> int:
        return self.flags.size


def best_log_density(model: GmmModel, X, use_mixture: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (best component, log density used for thresholding)."""
    comp = component_log_densities(model, X)
    best = np.argmax(comp, axis=1)  # first maximum wins ties
    if use_mixture:
        return best, mixture_log_densities(model, X)
    return best, comp[np.arange(comp.shape[0]), best]


def _log_delta(delta: float) -> float:
    if delta <= 0:
        raise DataError("delta must be positive")
    return math.log(delta) if math.isfinite(delta) else math.inf


def detect(model: GmmModel, X, delta: float, use_mixture: bool = False) -> DetectionReport:
    best, logp = best_log_density(model, X, use_mixture)
    flags = logp < _log_delta(delta)
    return DetectionReport(
        flags=flags,
        best_component=best,
        log_density=logp,
        delta=float(delta),
        model=model,
        event_index=getattr(X, "event_index", None),
    )


def calibrate_threshold(model: GmmModel, X_train, q: float, use_mixture: bool = False) -> float:
    """Return the q-quantile (linear interpolation) of training densities."""
    if not 0 < q < 1:
        raise DataError("q must lie in (0, 1)")
    data = getattr(X_train, "data", X_train)
    if np.asarray(data).shape[0] == 0:
        raise EmptyTraining()
    _, logp = best_log_density(model, X_train, use_mixture)
    return float(np.quantile(np.exp(logp), q))


# -- pipeline ----------------------------------------------------------------


@dataclass(frozen=True)
class PreparedLayer:
    """Features of one layer, standardized on the earliest train_window of its events."""

    features: FeatureMatrix
    train_mask: np.ndarray

    @property
    def train(self) -> FeatureMatrix:
        return self.features.subset(self.train_mask)


def prepare_layer(events: Sequence[TraceEvent], cfg: DetectorConfig) -> PreparedLayer:
    idx = [i for i, ev in enumerate(events) if ev.layer is cfg.layer]
    if not idx:
        raise EmptyLayer(cfg.layer.value)
    # stable sort by start time; traces are normally sorted already
    order = sorted(range(len(idx)), key=lambda r: events[idx[r]].ts_start)
    n_train = int(math.floor(cfg.train_window * len(idx)))
    train_rows = np.zeros(len(idx), dtype=bool)
    train_rows[np.asarray(order[:n_train], dtype=np.int64)] = True
    spec = FeatureSpec(features=cfg.features, standardize=True)
    if n_train < 10 * cfg.k_min:
        raise InsufficientTraining(n_train, 10 * cfg.k_min)
    fm = extract_features(events, cfg.layer, spec, train_mask=train_rows)
    return PreparedLayer(fm, train_rows)


def fit_layer(prepared: PreparedLayer, cfg: DetectorConfig) -> GmmModel:
    train = prepared.train
    if isinstance(cfg.k, int):
        model = fit_em(train, cfg.k, **cfg.em_options())
    else:
        best, _, models = select_k_bic(train, cfg.k, **cfg.em_options())
        model = models[best]
    std = prepared.features.standardization
    meta = {
        "layer": cfg.layer.value,
        "feature_names": list(prepared.features.feature_names),
        "standardization": None if std is None else std.to_json(),
    }
    return GmmModel(model.weights, model.means, model.covariances, model.fit_report, meta)


def run_pipeline(events: Sequence[TraceEvent], labels=None, cfg: DetectorConfig | None = None):
    """Split by time, fit on the train split, score every event of the layer.

    Returns ``(DetectionReport, EvalSummary | None)``; the summary is present
    only when ``labels`` (one AnomalyLabel per trace event) are given.
    """
    cfg = cfg or DetectorConfig()
    prepared = prepare_layer(events, cfg)
    model = fit_layer(prepared, cfg)
    if cfg.delta is not None:
        delta = cfg.delta
    else:
        delta = calibrate_threshold(model, prepared.train, cfg.quantile_q, cfg.use_mixture)
    report = detect(model, prepared.features, delta, cfg.use_mixture)
    report.meta.update(
        layer=cfg.layer.value,
        k=model.k,
        seed=cfg.seed,
        quantile_q=cfg.quantile_q,
        n_train=int(prepared.train_mask.sum()),
    )
    summary = None
    if labels is not None:
        from .evaluate import evaluate_flags

        summary = evaluate_flags(
            labels,
            report.flags,
            report.event_index,
            method="gmm",
            layer=cfg.layer,
            params={"K": model.k, "delta": delta, "q": cfg.quantile_q},
        )
    return report, summary


def score_with_model(events: Sequence[TraceEvent], model: GmmModel, cfg: DetectorConfig) -> DetectionReport:
    """Detect with a saved model, reusing the standardization it was trained with.

    A quantile threshold is calibrated on the earliest ``train_window`` of the
    trace's events for the layer.
    """
    layer = Layer.parse(model.meta.get("layer", cfg.layer))
    if layer is not cfg.layer:
        raise DataError(f"model was trained on {layer.value}, not {cfg.layer.value}")
    names = model.meta.get("feature_names")
    std = model.meta.get("standardization")
    spec = FeatureSpec(features=tuple(names) if names else cfg.features)
    fm = extract_features(events, layer, spec, standardization=Standardization.from_json(std) if std else None)
    if cfg.delta is not None:
        delta = cfg.delta
    else:
        ts = np.array([events[i].ts_start for i in fm.event_index])
        n_train = int(cfg.train_window * fm.rows)
        if n_train == 0:
            raise InsufficientTraining(0, 1)
        train = np.zeros(fm.rows, dtype=bool)
        train[np.argsort(ts, kind="stable")[:n_train]] = True
        delta = calibrate_threshold(model, fm.subset(train), cfg.quantile_q, cfg.use_mixture)
    report = detect(model, fm, delta, cfg.use_mixture)
    seed = model.fit_report.seed if model.fit_report is not None else cfg.seed
    report.meta.update(layer=layer.value, k=model.k, seed=seed, quantile_q=cfg.quantile_q)
    return report


def write_report(report: DetectionReport, path) -> None:
    """JSON-lines: one header record, then one record per scored event."""
    header = {
        "header": True,
        "delta": report.delta,
        "log_delta": _log_delta(report.delta) if math.isfinite(report.delta) else None,
        "K": report.model.k,
        "seed": report.meta.get("seed"),
        "layer": report.meta.get("layer"),
        "n": report.n,
        "n_flagged": int(report.flags.sum()),
    }
    idx = report.event_index if report.event_index is not None else np.arange(report.n)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i in range(report.n):
            rec = {
                "event_index": int(idx[i]),
                "best_component": int(report.best_component[i]),
                "log_density": float(report.log_density[i]),
                "flagged": bool(report.flags[i]),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_report(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or not lines[0].get("header"):
        raise DataError(f"{path}: missing report header record")
    return lines[0], lines[1:]
