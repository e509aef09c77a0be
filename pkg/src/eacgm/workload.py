"""Deterministic synthetic multi-layer workloads with injected faults.

Random draws come from numpy's PCG64 generator. One ``SeedSequence`` per
config is split into an independent child stream per layer plus one for
fault perturbations, so changing the fault list never shifts the baseline
draws.

Fault magnitudes are interpreted per kind:

* ``SoftwareLatency`` / ``CudaLatency``: duration is multiplied by ``1 + magnitude``.
* ``NetLatency``: ``magnitude`` milliseconds are added to the NCCL duration.
* ``NetPacketLoss``: duration is multiplied by ``1 + magnitude * (0.5 + E)``,
  E ~ Exp(1) drawn from the fault stream (a retransmission factor).
* ``HwContention``: utilisation moves toward 100 by ``magnitude / (1 + magnitude)``
  of the remaining headroom; memory, temperature and power rise by
  ``magnitude`` times a fixed offset.

An event is hit by a fault when its start time lies in ``[t_start, t_end)``
and it matches the fault's selector.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyLabels, InvalidConfig
from .events import AnomalyLabel, Layer, TraceEvent

log = logging.getLogger(__name__)

EPOCH_NS = 1_700_000_000 * 10**9
A40_MEM_MB = 49_152


class FaultKind(str, enum.Enum):
    SOFTWARE_LATENCY = "SoftwareLatency"
    CUDA_LATENCY = "CudaLatency"
    HW_CONTENTION = "HwContention"
    NET_LATENCY = "NetLatency"
    NET_PACKET_LOSS = "NetPacketLoss"


DEFAULT_FAULT_LAYER = {
    FaultKind.SOFTWARE_LATENCY: Layer.TORCH,
    FaultKind.CUDA_LATENCY: Layer.CUDA,
    FaultKind.HW_CONTENTION: Layer.GPU_SAMPLE,
    FaultKind.NET_LATENCY: Layer.NCCL,
    FaultKind.NET_PACKET_LOSS: Layer.NCCL,
}

_ALLOWED_LAYERS = {
    FaultKind.SOFTWARE_LATENCY: {Layer.PYTHON, Layer.TORCH},
    FaultKind.CUDA_LATENCY: {Layer.CUDA},
    FaultKind.HW_CONTENTION: {Layer.GPU_SAMPLE},
    FaultKind.NET_LATENCY: {Layer.NCCL},
    FaultKind.NET_PACKET_LOSS: {Layer.NCCL},
}


@dataclass(frozen=True)
class FaultSpec:
    fault_id: str
    kind: FaultKind
    window: tuple[float, float]
    magnitude: float
    layer: Layer | None = None  # None: the kind's natural layer
    devices: tuple[int, ...] | None = None  # global rank indices; None: all
    kinds: tuple[str, ...] | None = None  # event kinds; None: all

    def __post_init__(self):
        if self.layer is None:
            object.__setattr__(self, "layer", DEFAULT_FAULT_LAYER[FaultKind(self.kind)])

    @property
    def target_layer(self) -> Layer:
        return self.layer

    def to_json(self) -> dict:
        affected = {"layer": self.target_layer.value}
        if self.devices is not None:
            affected["devices"] = list(self.devices)
        if self.kinds is not None:
            affected["kinds"] = list(self.kinds)
        return {
            "fault_id": self.fault_id,
            "kind": self.kind.value,
            "window": list(self.window),
            "magnitude": self.magnitude,
            "affected": affected,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FaultSpec":
        try:
            kind = FaultKind(obj["kind"])
        except (KeyError, ValueError):
            raise InvalidConfig("faults.kind", repr(obj.get("kind"))) from None
        affected = obj.get("affected") or {}
        devices = affected.get("devices")
        kinds = affected.get("kinds")
        return cls(
            fault_id=str(obj["fault_id"]),
            kind=kind,
            window=(float(obj["window"][0]), float(obj["window"][1])),
            magnitude=float(obj["magnitude"]),
            layer=Layer.parse(affected["layer"]) if "layer" in affected else None,
            devices=None if devices is None else tuple(int(d) for d in devices),
            kinds=None if kinds is None else tuple(kinds),
        )


def _default_rates() -> dict[str, float]:
    # Cuda/Python/Torch/Nccl: events per second across the cluster.
    # GpuSample: samples per second per device.
    return {"Cuda": 64.0, "Python": 40.0, "Torch": 52.0, "Nccl": 32.0, "GpuSample": 1.0}


def _default_baseline() -> dict:
    return {
        "Cuda": {
            "kinds": [
                {"kind": "cudaLaunchKernel", "weight": 0.6, "median_ns": 8_000, "sigma": 0.25},
                {"kind": "cudaMalloc", "weight": 0.15, "median_ns": 60_000, "sigma": 0.35},
                {"kind": "cudaFree", "weight": 0.1, "median_ns": 25_000, "sigma": 0.3},
                {"kind": "cudaMemcpy", "weight": 0.15, "median_ns": 400_000, "sigma": 0.3},
            ]
        },
        "Python": {
            "kinds": [
                {"kind": "PyObject_CallFunction", "weight": 0.75, "median_ns": 3_000, "sigma": 0.4},
                {"kind": "PyObject_CallFunction", "weight": 0.25, "median_ns": 80_000, "sigma": 0.35},
            ],
            "threads": 4,
        },
        "Torch": {
            "kinds": [
                {"kind": "TorchLinear", "weight": 0.4, "median_ns": 150_000, "sigma": 0.2},
                {"kind": "TorchConv2d", "weight": 0.2, "median_ns": 600_000, "sigma": 0.2},
                {"kind": "TorchReLU", "weight": 0.25, "median_ns": 20_000, "sigma": 0.25},
                {"kind": "TorchMatmul", "weight": 0.15, "median_ns": 300_000, "sigma": 0.2},
            ]
        },
        "Nccl": {
            # duration = (base_latency_ns + bytes / bytes_per_ns) * LogNormal(0, noise_sigma)
            "kinds": [
                {"kind": "ncclAllReduce", "weight": 0.6, "bytes_median": 25_000_000, "bytes_sigma": 0.35},
                {"kind": "ncclBroadcast", "weight": 0.4, "bytes_median": 8_192, "bytes_sigma": 0.7},
            ],
            "base_latency_ns": 15_000,
            "bytes_per_ns": 12.0,
            "noise_sigma": 0.08,
        },
        "GpuSample": {
            "util_pct": [82.0, 4.0],
            "mem_used_mb": [30_000.0, 600.0],
            "temp_c": [64.0, 1.5],
            "power_w": [250.0, 10.0],
        },
    }


def _default_faults() -> list[FaultSpec]:
    # Windows sit in the second half of the run so the earliest-half train
    # split sees healthy behaviour; each layer gets 100 s of 600 s faulted.
    F = FaultKind
    return [
        FaultSpec("cuda-timeout-1", F.CUDA_LATENCY, (310.0, 340.0), 2.0),
        FaultSpec("cuda-timeout-2", F.CUDA_LATENCY, (450.0, 480.0), 1.0),
        FaultSpec("cuda-memerr-1", F.CUDA_LATENCY, (540.0, 580.0), 4.0),
        FaultSpec("py-delay-1", F.SOFTWARE_LATENCY, (330.0, 380.0), 1.5, layer=Layer.PYTHON),
        FaultSpec("py-delay-2", F.SOFTWARE_LATENCY, (470.0, 520.0), 2.5, layer=Layer.PYTHON),
        FaultSpec("torch-delay-1", F.SOFTWARE_LATENCY, (350.0, 400.0), 1.0),
        FaultSpec("torch-delay-2", F.SOFTWARE_LATENCY, (520.0, 570.0), 3.0),
        FaultSpec("gpu-contention-1", F.HW_CONTENTION, (360.0, 410.0), 1.0),
        FaultSpec("gpu-contention-2", F.HW_CONTENTION, (480.0, 530.0), 0.6),
        FaultSpec("net-latency-1", F.NET_LATENCY, (320.0, 350.0), 1.5),
        FaultSpec("net-loss-1", F.NET_PACKET_LOSS, (400.0, 440.0), 0.6),
        FaultSpec("net-latency-2", F.NET_LATENCY, (500.0, 530.0), 0.8),
    ]


@dataclass
class WorkloadConfig:
    seed: int = 42
    duration_s: float = 600.0
    nodes: int = 2
    gpus_per_node: int = 6
    event_rates: dict = field(default_factory=_default_rates)
    baseline_params: dict = field(default_factory=_default_baseline)
    faults: list = field(default_factory=_default_faults)
    target_anomaly_ratio: float = 1 / 6

    @property
    def n_ranks(self) -> int:
        return self.nodes * self.gpus_per_node

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed", "must fit in an unsigned 64-bit integer")
        if not self.duration_s > 0:
            raise InvalidConfig("duration_s", "must be positive")
        if self.nodes < 1:
            raise InvalidConfig("nodes", "need at least one node")
        if self.gpus_per_node < 1:
            raise InvalidConfig("gpus_per_node", "need at least one GPU per node")
        for name, rate in self.event_rates.items():
            try:
                Layer.parse(name)
            except Exception:
                raise InvalidConfig("event_rates", f"unknown layer {name!r}") from None
            if not rate > 0:
                raise InvalidConfig("event_rates", f"rate for {name} must be positive")
        if not 0 < self.target_anomaly_ratio < 0.5:
            raise InvalidConfig("target_anomaly_ratio", "must lie in (0, 0.5)")
        seen = set()
        for f in self.faults:
            t0, t1 = f.window
            if not 0 <= t0 < t1 <= self.duration_s:
                raise InvalidConfig("faults.window", f"{f.fault_id}: need 0 <= t_start < t_end <= duration_s")
            if not f.magnitude > 0:
                raise InvalidConfig("faults.magnitude", f"{f.fault_id}: must be positive")
            if f.target_layer not in _ALLOWED_LAYERS[f.kind]:
                raise InvalidConfig("faults.affected", f"{f.kind.value} cannot target {f.target_layer.value}")
            if f.devices is not None and any(not 0 <= d < self.n_ranks for d in f.devices):
                raise InvalidConfig("faults.affected", f"{f.fault_id}: device outside 0..{self.n_ranks - 1}")
            if f.fault_id in seen:
                raise InvalidConfig("faults.fault_id", f"duplicate id {f.fault_id!r}")
            seen.add(f.fault_id)

    def to_json(self) -> dict:
        out = asdict(self)
        out["faults"] = [f.to_json() for f in self.faults]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "WorkloadConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(sorted(unknown)[0], "unknown field")
        kw = dict(obj)
        if "faults" in kw:
            kw["faults"] = [FaultSpec.from_json(f) for f in kw["faults"]]
        base = cls()
        if "event_rates" in kw:
            kw["event_rates"] = {**base.event_rates, **kw["event_rates"]}
        if "baseline_params" in kw:
            kw["baseline_params"] = {**base.baseline_params, **kw["baseline_params"]}
        return cls(**kw)


def load_config(path) -> WorkloadConfig:
    with open(path, encoding="utf-8") as fh:
        return WorkloadConfig.from_json(json.load(fh))


def save_config(config: WorkloadConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, indent=2)
        fh.write("\n")


# -- generation --------------------------------------------------------------

_LAYER_ORDER = (Layer.CUDA, Layer.PYTHON, Layer.TORCH, Layer.NCCL, Layer.GPU_SAMPLE)


@dataclass
class _Stream:
    """Column-oriented events of one layer before they become TraceEvents."""

    layer: Layer
    t: np.ndarray  # seconds from run start
    rank: np.ndarray
    tid: np.ndarray
    kind: list
    duration: np.ndarray  # float ns, rounded at the end
    attrs: dict  # name -> float array


def _pick_kinds(rng, specs, n):
    w = np.array([s["weight"] for s in specs], dtype=float)
    return rng.choice(len(specs), size=n, p=w / w.sum())


def _arrivals(rng, rate, duration, n_ranks):
    n = int(rng.poisson(rate * duration))
    t = np.sort(rng.uniform(0.0, duration, size=n))
    rank = rng.integers(0, n_ranks, size=n)
    return t, rank


def _latency_stream(layer, rng, cfg: WorkloadConfig) -> _Stream:
    params = cfg.baseline_params[layer.value]
    t, rank = _arrivals(rng, cfg.event_rates[layer.value], cfg.duration_s, cfg.n_ranks)
    n = t.size
    which = _pick_kinds(rng, params["kinds"], n)
    median = np.array([params["kinds"][i]["median_ns"] for i in which], dtype=float)
    sigma = np.array([params["kinds"][i]["sigma"] for i in which], dtype=float)
    duration = median * np.exp(sigma * rng.standard_normal(n))
    threads = int(params.get("threads", 1))
    tid = rng.integers(0, threads, size=n) if threads > 1 else np.zeros(n, dtype=np.int64)
    kinds = [params["kinds"][i]["kind"] for i in which]
    return _Stream(layer, t, rank, tid, kinds, duration, {})


def _nccl_stream(rng, cfg: WorkloadConfig) -> _Stream:
    params = cfg.baseline_params["Nccl"]
    t, rank = _arrivals(rng, cfg.event_rates["Nccl"], cfg.duration_s, cfg.n_ranks)
    n = t.size
    which = _pick_kinds(rng, params["kinds"], n)
    med = np.array([params["kinds"][i]["bytes_median"] for i in which], dtype=float)
    sig = np.array([params["kinds"][i]["bytes_sigma"] for i in which], dtype=float)
    nbytes = np.round(med * np.exp(sig * rng.standard_normal(n)))
    noise = np.exp(params["noise_sigma"] * rng.standard_normal(n))
    duration = (params["base_latency_ns"] + nbytes / params["bytes_per_ns"]) * noise
    kinds = [params["kinds"][i]["kind"] for i in which]
    return _Stream(Layer.NCCL, t, rank, np.zeros(n, dtype=np.int64), kinds, duration, {"message_bytes": nbytes})


def _gpu_stream(rng, cfg: WorkloadConfig) -> _Stream:
    params = cfg.baseline_params["GpuSample"]
    period = 1.0 / cfg.event_rates["GpuSample"]
    ticks = np.arange(0.0, cfg.duration_s, period)
    ranks = cfg.n_ranks
    t = np.repeat(ticks, ranks) + rng.uniform(0.0, 0.05 * period, size=ticks.size * ranks)
    rank = np.tile(np.arange(ranks), ticks.size)
    keep = t < cfg.duration_s
    t, rank = t[keep], rank[keep]
    n = t.size
    attrs = {}
    for name in ("util_pct", "mem_used_mb", "temp_c", "power_w"):
        mu, sd = params[name]
        attrs[name] = mu + sd * rng.standard_normal(n)
    attrs["util_pct"] = np.clip(attrs["util_pct"], 0.0, 100.0)
    attrs["mem_used_mb"] = np.clip(attrs["mem_used_mb"], 0.0, A40_MEM_MB)
    attrs["temp_c"] = np.clip(attrs["temp_c"], -49.0, 149.0)
    attrs["power_w"] = np.maximum(attrs["power_w"], 0.0)
    kinds = ["gpu_sample"] * n
    return _Stream(Layer.GPU_SAMPLE, t, rank, np.zeros(n, dtype=np.int64), kinds, np.zeros(n), attrs)


def _fault_mask(f: FaultSpec, s: _Stream) -> np.ndarray:
    t0, t1 = f.window
    mask = (s.t >= t0) & (s.t < t1)
    if f.devices is not None:
        mask &= np.isin(s.rank, f.devices)
    if f.kinds is not None:
        mask &= np.isin(np.asarray(s.kind, dtype=object), f.kinds)
    return mask


def _apply_fault(f: FaultSpec, s: _Stream, mask: np.ndarray, rng) -> None:
    m = f.magnitude
    if f.kind in (FaultKind.SOFTWARE_LATENCY, FaultKind.CUDA_LATENCY):
        s.duration[mask] *= 1.0 + m
    elif f.kind is FaultKind.NET_LATENCY:
        s.duration[mask] += m * 1e6
    elif f.kind is FaultKind.NET_PACKET_LOSS:
        factor = 1.0 + m * (0.5 + rng.exponential(1.0, size=int(mask.sum())))
        s.duration[mask] *= factor
    elif f.kind is FaultKind.HW_CONTENTION:
        a = s.attrs
        util = a["util_pct"][mask]
        a["util_pct"][mask] = 100.0 - (100.0 - util) / (1.0 + m)
        a["mem_used_mb"][mask] = np.minimum(a["mem_used_mb"][mask] + m * 8_000.0, A40_MEM_MB)
        a["temp_c"][mask] = np.minimum(a["temp_c"][mask] + m * 12.0, 149.0)
        a["power_w"][mask] = a["power_w"][mask] + m * 60.0


_ROUNDING = {"util_pct": 2, "mem_used_mb": 1, "temp_c": 2, "power_w": 1}


def simulate(config: WorkloadConfig | None = None) -> tuple[list[TraceEvent], list[AnomalyLabel]]:
    """Generate a sorted, labeled event trace for ``config``.

    Every event hit by at least one fault is perturbed by each matching
    fault in list order and labeled with the first one's id.
    """
    cfg = config or WorkloadConfig()
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(len(_LAYER_ORDER) + 1)
    fault_rng = np.random.Generator(np.random.PCG64(children[-1]))
    streams = []
    for layer, child in zip(_LAYER_ORDER, children):
        if layer.value not in cfg.event_rates:
            continue
        rng = np.random.Generator(np.random.PCG64(child))
        if layer is Layer.NCCL:
            streams.append(_nccl_stream(rng, cfg))
        elif layer is Layer.GPU_SAMPLE:
            streams.append(_gpu_stream(rng, cfg))
        else:
            streams.append(_latency_stream(layer, rng, cfg))

    fault_of: list[np.ndarray] = []
    for s in streams:
        owner = np.full(s.t.size, -1, dtype=np.int64)
        for fi, f in enumerate(cfg.faults):
            if f.target_layer is not s.layer:
                continue
            mask = _fault_mask(f, s)
            if mask.any():
                _apply_fault(f, s, mask, fault_rng)
                owner[mask & (owner < 0)] = fi
        fault_of.append(owner)

    ts = np.concatenate([EPOCH_NS + np.round(s.t * 1e9).astype(np.int64) for s in streams])
    layer_pos = np.concatenate([np.full(s.t.size, _LAYER_ORDER.index(s.layer)) for s in streams])
    rank = np.concatenate([s.rank for s in streams])
    order = np.lexsort((rank, layer_pos, ts))

    flat = []
    for s, owner in zip(streams, fault_of):
        dur = np.maximum(np.round(s.duration), 0).astype(np.int64)
        cols = {k: np.round(v, _ROUNDING.get(k, 0)) for k, v in s.attrs.items()}
        for i in range(s.t.size):
            r = int(s.rank[i])
            pid = 4000 + r
            attrs = {}
            for k, v in cols.items():
                x = float(v[i])
                attrs[k] = int(x) if k == "message_bytes" else x
            ev = TraceEvent(
                layer=s.layer,
                kind=s.kind[i],
                ts_start=0,
                duration_ns=int(dur[i]),
                pid=pid,
                tid=pid if s.layer is not Layer.PYTHON else pid * 10 + int(s.tid[i]),
                device=r % cfg.gpus_per_node,
                attrs=attrs,
            )
            fi = int(owner[i])
            flat.append((ev, cfg.faults[fi].fault_id if fi >= 0 else None))

    events = []
    labels = []
    for new_idx, old in enumerate(order):
        ev, fault_id = flat[old]
        events.append(_with_ts(ev, int(ts[old])))
        labels.append(AnomalyLabel(new_idx, fault_id is not None, fault_id))

    n_anom = sum(lab.is_anomaly for lab in labels)
    if events and cfg.faults:
        frac = n_anom / len(events)
        if abs(frac - cfg.target_anomaly_ratio) > 0.02:
            log.warning(
                "anomalous fraction %.4f is off target %.4f; adjust fault windows",
                frac,
                cfg.target_anomaly_ratio,
            )
    return events, labels


def _with_ts(ev: TraceEvent, ts: int) -> TraceEvent:
    return TraceEvent(ev.layer, ev.kind, ts, ev.duration_ns, ev.pid, ev.tid, ev.device, ev.attrs)


def ratio_report(labels: Sequence[AnomalyLabel]) -> tuple[int, int, float]:
    """Return ``(n_normal, n_anomalous, n_normal / n_anomalous)``; the ratio is inf when nothing is anomalous."""
    if not labels:
        raise EmptyLabels()
    n_anom = sum(1 for lab in labels if lab.is_anomaly)
    n_norm = len(labels) - n_anom
    return n_norm, n_anom, (n_norm / n_anom if n_anom else math.inf)


def write_labels(labels: Sequence[AnomalyLabel], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_record(), separators=(",", ":")))
            fh.write("\n")


def read_labels(path) -> list[AnomalyLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(AnomalyLabel.from_record(json.loads(line)))
    return out
