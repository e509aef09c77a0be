import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_event
from eacgm.errors import EmptyLayer, MissingField, RangeViolation, UnknownLayer
from eacgm.events import (
    AnomalyLabel,
    FeatureSpec,
    Layer,
    TraceEvent,
    extract_features,
    fit_standardization,
    validate_event,
)

NCCL_RAW = {
    "layer": "Nccl",
    "kind": "ncclAllReduce",
    "ts_start": 10,
    "duration_ns": 500,
    "pid": 1,
    "tid": 1,
    "attrs": {"message_bytes": 4096},
}


class TestValidateEvent:
    def test_valid_nccl(self):
        ev = validate_event(NCCL_RAW)
        assert ev == TraceEvent(Layer.NCCL, "ncclAllReduce", 10, 500, 1, 1, None, {"message_bytes": 4096})

    def test_negative_duration(self):
        with pytest.raises(RangeViolation) as exc:
            validate_event({**NCCL_RAW, "duration_ns": -1})
        assert (exc.value.field, exc.value.value) == ("duration_ns", -1)

    def test_gpu_util_out_of_range(self):
        with pytest.raises(RangeViolation) as exc:
            validate_event({"layer": "GpuSample", "attrs": {"util_pct": 250}})
        assert (exc.value.field, exc.value.value) == ("util_pct", 250)

    def test_unknown_layer(self):
        with pytest.raises(UnknownLayer):
            validate_event({**NCCL_RAW, "layer": "Rdma"})

    def test_missing_field_named(self):
        raw = dict(NCCL_RAW)
        del raw["tid"]
        with pytest.raises(MissingField) as exc:
            validate_event(raw)
        assert exc.value.name == "tid"

    def test_nccl_needs_message_bytes(self):
        with pytest.raises(MissingField, match="message_bytes"):
            validate_event({**NCCL_RAW, "attrs": {}})

    @pytest.mark.parametrize(
        "attrs, field",
        [
            ({"util_pct": 50, "mem_used_mb": -1, "temp_c": 60}, "mem_used_mb"),
            ({"util_pct": 50, "mem_used_mb": 1, "temp_c": 150}, "temp_c"),
            ({"util_pct": 50, "mem_used_mb": 1, "temp_c": -50}, "temp_c"),
        ],
    )
    def test_gpu_ranges(self, attrs, field):
        raw = {"layer": "GpuSample", "kind": "gpu_sample", "ts_start": 1, "duration_ns": 0, "pid": 1, "tid": 1, "attrs": attrs}
        with pytest.raises(RangeViolation) as exc:
            validate_event(raw)
        assert exc.value.field == field

    def test_ts_start_positive(self):
        with pytest.raises(RangeViolation, match="ts_start"):
            validate_event({**NCCL_RAW, "ts_start": 0})

    def test_layer_aliases(self):
        assert Layer.parse("nccl") is Layer.NCCL
        assert Layer.parse("gpu_sample") is Layer.GPU_SAMPLE
        assert Layer.parse("GpuSample") is Layer.GPU_SAMPLE


def test_anomaly_label_fault_iff_anomaly():
    AnomalyLabel(0, True, "f1")
    AnomalyLabel(0, False)
    with pytest.raises(ValueError):
        AnomalyLabel(0, True)
    with pytest.raises(ValueError):
        AnomalyLabel(0, False, "f1")


class TestExtractFeatures:
    def test_nccl_powers_of_ten(self):
        fm = extract_features([make_event(dur=999, message_bytes=9)], Layer.NCCL)
        np.testing.assert_allclose(fm.data, [[3.0, 1.0]], rtol=0, atol=1e-15)
        assert fm.feature_names == ("log_duration", "log_message_bytes")

    def test_gpu_identity(self):
        ev = make_event(Layer.GPU_SAMPLE, "gpu_sample", dur=0, util_pct=50, mem_used_mb=1024, temp_c=60)
        fm = extract_features([ev], Layer.GPU_SAMPLE)
        assert fm.data.tolist() == [[50.0, 1024.0, 60.0]]

    def test_constant_column_centered_not_scaled(self):
        events = [make_event(ts=10 + i, dur=999, message_bytes=9) for i in range(3)]
        fm = extract_features(events, Layer.NCCL, FeatureSpec(standardize=True))
        # oracle: mean of three identical rows is the row itself, stddev is 0
        assert fm.standardization.std.tolist() == [0.0, 0.0]
        np.testing.assert_allclose(fm.standardization.mean, [3.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(fm.data, np.zeros((3, 2)), atol=1e-15)

    def test_filters_layer_and_keeps_index(self):
        events = [
            make_event(Layer.CUDA, "cudaMalloc", ts=1, dur=9),
            make_event(ts=2, dur=99),
            make_event(Layer.CUDA, "cudaFree", ts=3, dur=99),
        ]
        fm = extract_features(events, "cuda")
        assert fm.event_index.tolist() == [0, 2]
        np.testing.assert_allclose(fm.data.ravel(), [1.0, 2.0])

    def test_empty_layer(self):
        with pytest.raises(EmptyLayer):
            extract_features([make_event()], Layer.TORCH)

    def test_feature_override(self):
        fm = extract_features([make_event(dur=7)], Layer.NCCL, FeatureSpec(features=("duration_ns", "message_bytes")))
        assert fm.data.tolist() == [[7.0, 4096.0]]

    def test_standardize_on_train_rows_only(self):
        events = [make_event(ts=i + 1, dur=d) for i, d in enumerate([9, 99, 999, 99999])]
        train = np.array([True, True, True, False])
        fm = extract_features(events, Layer.NCCL, FeatureSpec(standardize=True), train_mask=train)
        tr = fm.data[train, 0]
        assert abs(tr.mean()) < 1e-9
        assert abs(tr.std() - 1) < 1e-9
        # the held-out row sits at (5 - 2) / std(1, 2, 3)
        assert fm.data[3, 0] == pytest.approx(3 / math.sqrt(2 / 3), abs=1e-12)


durations = st.lists(st.integers(min_value=0, max_value=10**12), min_size=2, max_size=40)


@settings(max_examples=60, deadline=None)
@given(durations, st.randoms(use_true_random=False))
def test_permutation_permutes_rows(durs, rnd):
    events = [make_event(ts=i + 1, dur=d, message_bytes=d % 5000) for i, d in enumerate(durs)]
    perm = list(range(len(events)))
    rnd.shuffle(perm)
    a = extract_features(events, Layer.NCCL).data
    b = extract_features([events[p] for p in perm], Layer.NCCL).data
    np.testing.assert_array_equal(b, a[perm])


@settings(max_examples=60, deadline=None)
@given(durations)
def test_standardization_properties(durs):
    events = [make_event(ts=i + 1, dur=d, message_bytes=(d * 7) % 100003) for i, d in enumerate(durs)]
    fm = extract_features(events, Layer.NCCL, FeatureSpec(standardize=True))
    assert np.all(np.isfinite(fm.data))
    std = fm.standardization
    for c in range(fm.dim):
        if std.std[c] > 0:
            assert abs(fm.data[:, c].mean()) < 1e-9
            assert abs(fm.data[:, c].std() - 1) < 1e-9
    np.testing.assert_allclose(std.invert(fm.data), fm.raw, rtol=1e-12, atol=1e-9)


def test_fit_standardization_roundtrip_json():
    s = fit_standardization(np.array([[1.0, 5.0], [3.0, 5.0]]))
    again = type(s).from_json(s.to_json())
    assert again.mean.tolist() == s.mean.tolist() and again.std.tolist() == [1.0, 0.0]
