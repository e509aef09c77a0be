"""Trace files, Perfetto export and probe attach-plan resolution.

The canonical trace format is UTF-8 JSON-lines, one event per line with keys
``layer, kind, ts_start, duration_ns, pid, tid, device?, attrs``.

Symbol manifests are ``nm``-style text::

    # comment
    LIB libnccl.so.2
    0000000000001120 T ncclAllReduce
                     U malloc

Undefined symbols (no address) and zero addresses are never attach targets.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from .errors import DataError, ManifestParseError, ParseError, TraceValidationError
from .events import Layer, TraceEvent, validate_event

_DUMP = dict(separators=(",", ":"), ensure_ascii=False)


def event_to_json(event: TraceEvent) -> str:
    return json.dumps(event.to_record(), **_DUMP)


def read_trace(path) -> list[TraceEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, exc.msg) from None
            try:
                events.append(validate_event(rec))
            except DataError as exc:
                raise TraceValidationError(line_no, exc) from None
    return events


def write_trace(events: Iterable[TraceEvent], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(event_to_json(ev))
            fh.write("\n")


def perfetto_records(events: Iterable[TraceEvent]) -> list[dict]:
    out = []
    for ev in events:
        if ev.layer is Layer.GPU_SAMPLE:
            rec = {"name": ev.kind, "ph": "C", "ts": ev.ts_start / 1000, "pid": ev.pid}
            if ev.device is not None:
                rec["id"] = ev.device
        else:
            rec = {
                "name": ev.kind,
                "cat": ev.layer.value,
                "ph": "X",
                "ts": ev.ts_start / 1000,
                "dur": ev.duration_ns / 1000,
                "pid": ev.pid,
                "tid": ev.tid,
            }
        rec["args"] = dict(ev.attrs)
        out.append(rec)
    return out


def export_perfetto(events: Iterable[TraceEvent], path) -> None:
    """Write Chrome trace-event JSON loadable by Perfetto (timestamps in µs)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"traceEvents": perfetto_records(events)}, fh, **_DUMP)


# -- attach plans ------------------------------------------------------------


@dataclass(frozen=True)
class ProbeSpec:
    layer: Layer
    symbol_pattern: str
    library_hint: str

    def __post_init__(self):
        if not self.symbol_pattern:
            raise DataError("symbol_pattern must be nonempty")

    @property
    def is_prefix(self) -> bool:
        return self.symbol_pattern.endswith("*")

    def matches(self, symbol: str) -> bool:
        if self.is_prefix:
            return symbol.startswith(self.symbol_pattern[:-1])
        return symbol == self.symbol_pattern


DEFAULT_PROBES: tuple[ProbeSpec, ...] = (
    ProbeSpec(Layer.CUDA, "cudaMalloc", "libcudart"),
    ProbeSpec(Layer.CUDA, "cudaFree", "libcudart"),
    ProbeSpec(Layer.CUDA, "cudaLaunchKernel", "libcudart"),
    ProbeSpec(Layer.PYTHON, "PyObject_CallFunction", "libpython"),
    ProbeSpec(Layer.NCCL, "ncclAllReduce", "libnccl"),
    ProbeSpec(Layer.NCCL, "ncclBroadcast", "libnccl"),
)

# Torch operator entry points are mangled C++; prefixes stand in for demangling.
TORCH_PROBES: tuple[ProbeSpec, ...] = (
    ProbeSpec(Layer.TORCH, "_ZN2at6native6linear*", "libtorch"),
    ProbeSpec(Layer.TORCH, "_ZN2at6native12convolution*", "libtorch"),
)


@dataclass(frozen=True)
class Symbol:
    library: str
    name: str
    address: int
    type_char: str
    order: int


@dataclass(frozen=True)
class PlanEntry:
    spec: ProbeSpec
    resolved_symbol: str
    address: int
    source_library: str

    def to_json(self) -> dict:
        return {
            "layer": self.spec.layer.value,
            "symbol_pattern": self.spec.symbol_pattern,
            "library_hint": self.spec.library_hint,
            "resolved_symbol": self.resolved_symbol,
            "address": f"0x{self.address:x}",
            "source_library": self.source_library,
        }


@dataclass
class AttachPlan:
    entries: list[PlanEntry] = field(default_factory=list)
    unresolved: list[ProbeSpec] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "entries": [e.to_json() for e in self.entries],
            "unresolved": [
                {"layer": s.layer.value, "symbol_pattern": s.symbol_pattern, "library_hint": s.library_hint}
                for s in self.unresolved
            ],
        }


def parse_manifest(lines: Iterable[str]) -> list[Symbol]:
    symbols = []
    library = ""
    for line_no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if parts[0] == "LIB":
            if len(parts) != 2:
                raise ManifestParseError(line_no, "LIB header takes exactly one name")
            library = parts[1]
            continue
        if len(parts) == 2 and len(parts[0]) == 1:
            # undefined/weak import without an address
            continue
        if len(parts) != 3 or len(parts[1]) != 1:
            raise ManifestParseError(line_no, "expected '<hex> <type> <symbol>'")
        try:
            address = int(parts[0], 16)
        except ValueError:
            raise ManifestParseError(line_no, f"bad address {parts[0]!r}") from None
        if address == 0:
            continue
        symbols.append(Symbol(library, parts[2], address, parts[1], len(symbols)))
    return symbols


def resolve_symbols(symbols: Sequence[Symbol], specs: Iterable[ProbeSpec]) -> AttachPlan:
    plan = AttachPlan()
    for spec in specs:
        candidates = [s for s in symbols if spec.library_hint in s.library and spec.matches(s.name)]
        if not candidates:
            plan.unresolved.append(spec)
            continue
        if spec.is_prefix:
            best = min(candidates, key=lambda s: (s.address, s.order))
        else:
            best = candidates[0]
        plan.entries.append(PlanEntry(spec, best.name, best.address, best.library))
    return plan


def resolve_attach_plan(manifest_path, specs: Iterable[ProbeSpec] = DEFAULT_PROBES) -> AttachPlan:
    with open(manifest_path, encoding="utf-8") as fh:
        symbols = parse_manifest(fh)
    return resolve_symbols(symbols, specs)


def default_manifest_path() -> str:
    """Path of the bundled symbol manifest for libnccl/libpython/libtorch/libcudart."""
    return os.fspath(resources.files("eacgm") / "data" / "default.manifest")


def load_probe_specs(path) -> list[ProbeSpec]:
    """Read probe specs from a JSON list of {layer, symbol_pattern, library_hint}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [ProbeSpec(Layer.parse(r["layer"]), r["symbol_pattern"], r["library_hint"]) for r in raw]
