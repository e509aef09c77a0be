from __future__ import annotations

import numpy as np
import pytest

from eacgm.events import Layer, TraceEvent
from eacgm.workload import WorkloadConfig, simulate

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((name, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def default_dataset():
    """The built-in 5:1 workload, generated once per test session (~120k events)."""
    return simulate(WorkloadConfig())


@pytest.fixture(scope="session")
def small_dataset():
    cfg = WorkloadConfig(seed=7, duration_s=120.0, faults=[])
    return simulate(cfg)


def make_event(layer=Layer.NCCL, kind="ncclAllReduce", ts=10, dur=500, pid=1, tid=1, device=None, **attrs):
    if layer is Layer.NCCL and "message_bytes" not in attrs:
        attrs["message_bytes"] = 4096
    return TraceEvent(layer, kind, ts, dur, pid, tid, device, attrs)


def two_blobs(n=2000, sep=5.0, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    return np.concatenate([rng.normal(-sep, 1.0, half), rng.normal(sep, 1.0, n - half)]).reshape(-1, 1)
