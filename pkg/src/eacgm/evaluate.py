"""Detection metrics, the KMeans baseline and parameter sweeps.

Anomaly is the positive class everywhere.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .detect import DetectorConfig, calibrate_threshold, detect, fit_layer, prepare_layer
from .errors import EacgmError, EmptyMatrix, InsufficientTraining, LengthMismatch, TooFewPoints
from .events import AnomalyLabel, Layer, TraceEvent
from .kmeans import lloyd, nearest_distance


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class EvalSummary:
    accuracy: float
    precision: float
    recall: float
    f1: float
    cm: ConfusionMatrix
    method: str = "gmm"
    layer: Layer | None = None
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "layer": None if self.layer is None else self.layer.value,
            "params": self.params,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.cm.tp,
            "fp": self.cm.fp,
            "tn": self.cm.tn,
            "fn": self.cm.fn,
        }


def confusion(labels: Sequence[bool], flags: Sequence[bool]) -> ConfusionMatrix:
    y = np.asarray(labels, dtype=bool)
    f = np.asarray(flags, dtype=bool)
    if y.shape != f.shape:
        raise LengthMismatch(y.size, f.size)
    tp = int(np.sum(y & f))
    fp = int(np.sum(~y & f))
    fn = int(np.sum(y & ~f))
    tn = int(np.sum(~y & ~f))
    return ConfusionMatrix(tp, fp, tn, fn)


def metrics(cm: ConfusionMatrix) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1); zero divisions score 0."""
    if cm.n <= 0:
        raise EmptyMatrix()
    accuracy = (cm.tp + cm.tn) / cm.n
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, precision, recall, f1


def summarize(cm: ConfusionMatrix, method: str = "gmm", layer=None, params=None) -> EvalSummary:
    acc, prec, rec, f1 = metrics(cm)
    return EvalSummary(acc, prec, rec, f1, cm, method, None if layer is None else Layer.parse(layer), dict(params or {}))


def labels_for(labels: Sequence[AnomalyLabel], event_index) -> np.ndarray:
    """Ground truth for the given trace positions."""
    by_index = {lab.event_index: lab.is_anomaly for lab in labels}
    return np.array([by_index[int(i)] for i in event_index], dtype=bool)


def evaluate_flags(labels, flags, event_index=None, method="gmm", layer=None, params=None) -> EvalSummary:
    if labels and isinstance(labels[0], AnomalyLabel):
        if event_index is None:
            event_index = np.arange(len(flags))
        truth = labels_for(labels, event_index)
    else:
        truth = np.asarray(labels, dtype=bool)
    return summarize(confusion(truth, flags), method, layer, params)


# -- KMeans baseline ---------------------------------------------------------


def kmeans_baseline(X, k: int, q: float, seed: int = 0, train_mask=None) -> np.ndarray:
    """Flag rows whose distance to the nearest centroid exceeds the (1-q) train quantile.

    Centroids come from Lloyd's algorithm (k-means++ seeds) on the rows
    selected by ``train_mask`` (all rows when omitted).
    """
    X = np.asarray(getattr(X, "data", X), dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    train = X if train_mask is None else X[np.asarray(train_mask, dtype=bool)]
    if train.shape[0] < k:
        raise TooFewPoints(train.shape[0], k)
    centers, _ = lloyd(train, k, np.random.default_rng(seed))
    threshold = np.quantile(nearest_distance(train, centers), 1.0 - q)
    return nearest_distance(X, centers) > threshold


def run_kmeans(events: Sequence[TraceEvent], labels, cfg: DetectorConfig) -> tuple[np.ndarray, EvalSummary | None]:
    """KMeans counterpart of run_pipeline: same features, split and seed."""
    if not isinstance(cfg.k, int):
        raise EacgmError("the KMeans baseline needs a fixed K")
    prepared = prepare_layer(events, cfg)
    flags = kmeans_baseline(prepared.features, cfg.k, cfg.quantile_q or 0.01, cfg.seed, prepared.train_mask)
    summary = None
    if labels is not None:
        summary = evaluate_flags(
            labels,
            flags,
            prepared.features.event_index,
            method="kmeans",
            layer=cfg.layer,
            params={"K": cfg.k, "q": cfg.quantile_q},
        )
    return flags, summary


# -- sensitivity sweep -------------------------------------------------------

GRID_COLUMNS = ("layer", "K", "q", "seed_count", "accuracy", "precision", "recall", "f1", "status")


@dataclass(frozen=True)
class SweepCell:
    layer: Layer
    k: int
    q: float
    seed_count: int
    accuracy: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    f1: float = math.nan
    status: str = "ok"
    runs: tuple[EvalSummary, ...] = ()

    def row(self) -> dict:
        return {
            "layer": self.layer.value,
            "K": self.k,
            "q": self.q,
            "seed_count": self.seed_count,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "status": self.status,
        }


def sensitivity_sweep(
    events: Sequence[TraceEvent],
    labels: Sequence[AnomalyLabel],
    layer,
    k_range: Sequence[int],
    q_range: Sequence[float],
    seeds: Sequence[int],
    base: DetectorConfig | None = None,
) -> list[SweepCell]:
    """Evaluate every (K, q) pair, averaging metrics over ``seeds``.

    Each cell matches what run_pipeline reports for the same config; one fit
    per (K, seed) is shared across the q values. Cells come back in K-major
    order. A failing run marks its cell ``error:<ErrorName>`` instead of
    aborting the sweep.
    """
    if not k_range or not q_range or not seeds:
        raise EacgmError("sweep ranges must be nonempty")
    layer = Layer.parse(layer)
    base = replace(base or DetectorConfig(), layer=layer, delta=None, quantile_q=float(q_range[0]))
    try:
        prepared = prepare_layer(events, replace(base, k=min(int(k) for k in k_range)))
    except EacgmError as exc:
        status = f"error:{type(exc).__name__}"
        return [SweepCell(layer, int(k), float(q), len(seeds), status=status) for k, q in itertools.product(k_range, q_range)]

    cells = []
    for k in k_range:
        runs: dict[float, list[EvalSummary]] = {float(q): [] for q in q_range}
        status = "ok"
        for seed in seeds:
            cfg = replace(base, k=int(k), seed=int(seed))
            try:
                if prepared.train_mask.sum() < 10 * cfg.k_min:
                    raise InsufficientTraining(int(prepared.train_mask.sum()), 10 * cfg.k_min)
                model = fit_layer(prepared, cfg)
                for q in runs:
                    delta = calibrate_threshold(model, prepared.train, q, cfg.use_mixture)
                    report = detect(model, prepared.features, delta, cfg.use_mixture)
                    runs[q].append(
                        evaluate_flags(
                            labels,
                            report.flags,
                            report.event_index,
                            method="gmm",
                            layer=layer,
                            params={"K": model.k, "delta": delta, "q": q},
                        )
                    )
            except EacgmError as exc:
                status = f"error:{type(exc).__name__}"
                break
        for q in q_range:
            q = float(q)
            if status != "ok":
                cells.append(SweepCell(layer, int(k), q, len(seeds), status=status))
                continue
            avg = {m: float(np.mean([getattr(r, m) for r in runs[q]])) for m in ("accuracy", "precision", "recall", "f1")}
            cells.append(SweepCell(layer, int(k), q, len(seeds), runs=tuple(runs[q]), **avg))
    return cells


def write_grid_csv(cells: Sequence[SweepCell], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for c in cells:
            writer.writerow(c.row())


def render_grid(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    buf.write(f"{'layer':<10} {'K':>3} {'q':>9} {'acc':>7} {'prec':>7} {'recall':>7} {'f1':>7}  status\n")
    for c in cells:
        buf.write(
            f"{c.layer.value:<10} {c.k:>3} {c.q:>9.2g} {c.accuracy:>7.4f} {c.precision:>7.4f} "
            f"{c.recall:>7.4f} {c.f1:>7.4f}  {c.status}\n"
        )
    return buf.getvalue()
