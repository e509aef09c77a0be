"""Layered event taxonomy and per-layer feature extraction."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    EmptyLayer,
    MissingField,
    NonFiniteFeature,
    RangeViolation,
    UnknownLayer,
)


class Layer(str, enum.Enum):
    CUDA = "Cuda"
    PYTHON = "Python"
    TORCH = "Torch"
    NCCL = "Nccl"
    GPU_SAMPLE = "GpuSample"

    @classmethod
    def parse(cls, value) -> "Layer":
        """Accept a Layer, its canonical name, or any case variant ("nccl", "gpu_sample")."""
        if isinstance(value, Layer):
            return value
        if isinstance(value, str):
            key = value.replace("_", "").replace("-", "").lower()
            for layer in cls:
                if layer.value.lower() == key:
                    return layer
        raise UnknownLayer(value)

    @property
    def is_latency(self) -> bool:
        return self in (Layer.CUDA, Layer.PYTHON, Layer.TORCH)


@dataclass(frozen=True)
class TraceEvent:
    layer: Layer
    kind: str
    ts_start: int
    duration_ns: int
    pid: int
    tid: int
    device: int | None = None
    attrs: Mapping[str, float] = field(default_factory=dict)

    @property
    def ts_end(self) -> int:
        return self.ts_start + self.duration_ns

    def to_record(self) -> dict:
        rec = {
            "layer": self.layer.value,
            "kind": self.kind,
            "ts_start": self.ts_start,
            "duration_ns": self.duration_ns,
            "pid": self.pid,
            "tid": self.tid,
        }
        if self.device is not None:
            rec["device"] = self.device
        rec["attrs"] = dict(self.attrs)
        return rec


@dataclass(frozen=True)
class AnomalyLabel:
    event_index: int
    is_anomaly: bool
    fault_id: str | None = None

    def __post_init__(self):
        if self.is_anomaly != (self.fault_id is not None):
            raise DataError("fault_id must be present iff is_anomaly")

    def to_record(self) -> dict:
        rec = {"event_index": self.event_index, "is_anomaly": self.is_anomaly}
        if self.fault_id is not None:
            rec["fault_id"] = self.fault_id
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "AnomalyLabel":
        return cls(int(rec["event_index"]), bool(rec["is_anomaly"]), rec.get("fault_id"))


_REQUIRED = ("layer", "kind", "ts_start", "duration_ns", "pid", "tid")


def _as_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RangeViolation(name, value)
    if isinstance(value, float):
        if not value.is_integer():
            raise RangeViolation(name, value)
        value = int(value)
    return value


def _as_number(name: str, value) -> float | int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RangeViolation(name, value)
    if isinstance(value, float) and not math.isfinite(value):
        raise RangeViolation(name, value)
    return value


def validate_event(raw: Mapping) -> TraceEvent:
    """Build a TraceEvent from a decoded record, enforcing every invariant.

    Raises the error for the first violated field, checking fields in the
    canonical key order.
    """
    if not isinstance(raw, Mapping):
        raise DataError(f"record must be an object, got {type(raw).__name__}")
    if "layer" not in raw:
        raise MissingField("layer")
    layer = Layer.parse(raw["layer"])
    attrs_raw = raw.get("attrs", {})
    if not isinstance(attrs_raw, Mapping):
        raise RangeViolation("attrs", attrs_raw)
    attrs = {str(k): _as_number(str(k), v) for k, v in attrs_raw.items()}

    # GpuSample range checks come before the scalar fields: a sample with a
    # bogus reading is wrong no matter how its header looks.
    if layer is Layer.GPU_SAMPLE:
        for name in ("util_pct", "mem_used_mb", "temp_c"):
            if name in attrs:
                _check_gpu_attr(name, attrs[name])

    for name in _REQUIRED[1:]:
        if name not in raw:
            raise MissingField(name)
    kind = raw["kind"]
    if not isinstance(kind, str) or not kind:
        raise RangeViolation("kind", kind)
    ts_start = _as_int("ts_start", raw["ts_start"])
    if ts_start <= 0:
        raise RangeViolation("ts_start", ts_start)
    duration = _as_int("duration_ns", raw["duration_ns"])
    if duration < 0:
        raise RangeViolation("duration_ns", duration)
    pid = _as_int("pid", raw["pid"])
    tid = _as_int("tid", raw["tid"])
    device = raw.get("device")
    if device is not None:
        device = _as_int("device", device)
        if device < 0:
            raise RangeViolation("device", device)

    if layer is Layer.NCCL:
        if "message_bytes" not in attrs:
            raise MissingField("message_bytes")
        if attrs["message_bytes"] < 0:
            raise RangeViolation("message_bytes", attrs["message_bytes"])
    elif layer is Layer.GPU_SAMPLE:
        for name in ("util_pct", "mem_used_mb", "temp_c"):
            if name not in attrs:
                raise MissingField(name)

    return TraceEvent(layer, kind, ts_start, duration, pid, tid, device, attrs)


def _check_gpu_attr(name: str, value) -> None:
    if name == "util_pct" and not 0 <= value <= 100:
        raise RangeViolation(name, value)
    if name == "mem_used_mb" and value < 0:
        raise RangeViolation(name, value)
    if name == "temp_c" and not -50 < value < 150:
        raise RangeViolation(name, value)


# -- features ----------------------------------------------------------------

DEFAULT_FEATURES: dict[Layer, tuple[str, ...]] = {
    Layer.CUDA: ("log_duration",),
    Layer.PYTHON: ("log_duration",),
    Layer.TORCH: ("log_duration",),
    Layer.NCCL: ("log_duration", "log_message_bytes"),
    Layer.GPU_SAMPLE: ("util_pct", "mem_used_mb", "temp_c"),
}


@dataclass(frozen=True)
class FeatureSpec:
    """Which columns to extract and whether to z-score them.

    Column names: ``log_duration`` is log10(duration_ns + 1), ``duration_ns``
    is the raw duration, ``log_<attr>`` is log10(attr + 1), anything else is
    read verbatim from ``attrs``. ``features=None`` uses the layer default.
    """

    features: tuple[str, ...] | None = None
    standardize: bool = False


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray  # 0 marks a constant column that was centered only

    def scale(self) -> np.ndarray:
        return np.where(self.std > 0, self.std, 1.0)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.scale()

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.scale() + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Standardization":
        return cls(np.asarray(obj["mean"], dtype=float), np.asarray(obj["std"], dtype=float))


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray
    feature_names: tuple[str, ...]
    event_index: np.ndarray
    standardization: Standardization | None = None
    raw: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def subset(self, mask: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(
            self.data[mask],
            self.feature_names,
            self.event_index[mask],
            self.standardization,
            None if self.raw is None else self.raw[mask],
        )


def _column(event: TraceEvent, name: str) -> float:
    if name == "log_duration":
        return math.log10(event.duration_ns + 1)
    if name == "duration_ns":
        return float(event.duration_ns)
    if name in event.attrs:
        return float(event.attrs[name])
    if name.startswith("log_") and name[4:] in event.attrs:
        return math.log10(event.attrs[name[4:]] + 1)
    raise MissingField(name)


def fit_standardization(raw: np.ndarray) -> Standardization:
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    # Identical values can leave rounding-level spread; treat that as constant.
    tiny = 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(std > tiny, std, 0.0)
    return Standardization(mean, std)


def extract_features(
    events: Sequence[TraceEvent],
    layer,
    spec: FeatureSpec | None = None,
    train_mask: np.ndarray | None = None,
    standardization: Standardization | None = None,
) -> FeatureMatrix:
    """Turn the events of one layer into an N x d matrix.

    ``train_mask`` selects (within the layer's rows) which rows feed the
    standardization statistics; it defaults to all rows. Passing a fitted
    ``standardization`` reuses it instead of computing new statistics.
    """
    layer = Layer.parse(layer)
    spec = spec or FeatureSpec()
    names = spec.features or DEFAULT_FEATURES[layer]
    idx = [i for i, ev in enumerate(events) if ev.layer is layer]
    if not idx:
        raise EmptyLayer(layer.value)

    raw = np.empty((len(idx), len(names)), dtype=float)
    for r, i in enumerate(idx):
        ev = events[i]
        for c, name in enumerate(names):
            raw[r, c] = _column(ev, name)
    bad = np.argwhere(~np.isfinite(raw))
    if bad.size:
        raise NonFiniteFeature(int(bad[0, 0]), int(bad[0, 1]))

    data = raw
    if standardization is None and spec.standardize:
        rows = raw if train_mask is None else raw[np.asarray(train_mask, dtype=bool)]
        if rows.shape[0] == 0:
            raise EmptyLayer(layer.value)
        standardization = fit_standardization(rows)
    if standardization is not None:
        data = standardization.apply(raw)
    return FeatureMatrix(data, tuple(names), np.asarray(idx, dtype=np.int64), standardization, raw)
