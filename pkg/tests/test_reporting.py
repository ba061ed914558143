from __future__ import annotations

import csv
import dataclasses
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tinymark.device_sim import DeploymentResult, Status
from tinymark.errors import NotRun, ShapeMismatch
from tinymark.reporting import (
    CSV_COLUMNS,
    MetricsRecord,
    deployment_error,
    emit_report,
    exe_time,
    records_from_json,
    to_csv,
    to_json,
    to_markdown,
    write_reports,
)


def _rec(model="m", variant="basic", backend="b", device="d", status="Ok", **kw):
    base = dict(error=0.01, exe_time_ms=1.5, exe_time_std_ms=0.0, flash_model_kb=2.0, flash_total_kb=54.2, ram_model_kb=3.0, ram_total_kb=5.0, arena_kb=1.0)
    if status != "Ok":
        base = {}
    base.update(kw)
    return MetricsRecord(model, variant, backend, device, status, **base)


# -- deployment error --------------------------------------------------------------------


def test_identical_outputs_have_zero_error():
    ref = [np.array([0.3, -1.0, 2.0]), np.array([5.0])]
    assert deployment_error([r.copy() for r in ref], ref) == 0.0


def test_hand_computed_error():
    assert deployment_error([np.array([2.2, -2.2])], [np.array([2.0, -2.0])]) == pytest.approx(0.1)


def test_error_averages_over_inputs():
    ref = [np.array([1.0]), np.array([1.0])]
    dev = [np.array([1.5]), np.array([1.0])]
    assert deployment_error(dev, ref) == pytest.approx(0.25)


@settings(max_examples=200)
@given(
    arrays(np.float64, 6, elements=st.floats(-10, 10)),
    arrays(np.float64, 6, elements=st.floats(-1, 1)),
    st.floats(0.01, 100),
)
def test_error_is_scale_covariant(ref, noise, lam):
    if np.max(np.abs(ref)) < 1e-3:
        ref = ref + 1.0
    dev = ref + noise
    # the epsilon guard is the only scale-dependent term
    guard = 1e-9 * (1 + 1 / lam) / float(np.max(np.abs(ref)))
    assert deployment_error([lam * dev], [lam * ref]) == pytest.approx(deployment_error([dev], [ref]), rel=2 * guard + 1e-12, abs=1e-12)


@settings(max_examples=100)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_error_is_non_negative(a, b):
    assert deployment_error([a], [b]) >= 0.0


def test_error_shape_checks():
    with pytest.raises(ShapeMismatch):
        deployment_error([np.zeros(2)], [np.zeros(3)])
    with pytest.raises(ShapeMismatch):
        deployment_error([np.zeros(2)], [np.zeros(2), np.zeros(2)])
    with pytest.raises(ShapeMismatch):
        deployment_error([], [])


# -- execution time ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class _Clock:
    clock_hz: int


def test_exe_time_of_identical_runs():
    res = DeploymentResult(Status.OK, cycles_per_run=[240000] * 10)
    mean, std = exe_time(res, _Clock(120_000_000))
    assert mean == pytest.approx(240000 / 120000)
    assert std == 0.0


def test_doubling_clock_halves_time():
    res = DeploymentResult(Status.OK, cycles_per_run=[12345] * 10)
    slow, _ = exe_time(res, _Clock(60_000_000))
    fast, _ = exe_time(res, _Clock(120_000_000))
    assert fast * 2 == slow


def test_exe_time_needs_a_run():
    with pytest.raises(NotRun):
        exe_time(DeploymentResult(Status.RUNTIME_ALLOC_FAIL), _Clock(1))


def test_exe_time_uses_shipped_clock(devices):
    res = DeploymentResult(Status.OK, cycles_per_run=[120000] * 10)
    assert exe_time(res, devices["cm4f-sim"])[0] == pytest.approx(1.0)


# -- documents -------------------------------------------------------------------------------


def test_empty_reports_have_headers_only():
    rows = list(csv.reader(io.StringIO(to_csv([]))))
    assert rows == [list(CSV_COLUMNS)]
    doc = json.loads(to_json([]))
    assert doc["schema_version"] == 1 and doc["records"] == []
    md = to_markdown([])
    assert "| Variant |" in md


def test_failed_cells_render_as_dash():
    r = _rec(status="RuntimeAllocFail", reason="arena needs 4096 B")
    md = to_markdown([r])
    row = next(line for line in md.splitlines() if line.startswith("| basic"))
    cells = [c.strip() for c in row.strip("|").split("|")]
    assert cells[3:8] == ["-"] * 5
    assert "RuntimeAllocFail" in cells[8]
    csv_row = list(csv.DictReader(io.StringIO(to_csv([r]))))[0]
    assert csv_row["status"] == "RuntimeAllocFail" and csv_row["error"] == ""
    assert json.loads(to_json([r]))["records"][0]["status"] == "RuntimeAllocFail"


def test_json_to_csv_round_trip():
    records = [_rec("a", error=0.1234567891234), _rec("b", status="Skipped", reason="rnn unsupported"), _rec("c", error=0.0)]
    again = records_from_json(to_json(records, {"seed": 0}, "2026-01-01T00:00:00Z"))
    assert again == records
    assert to_csv(again) == to_csv(records)
    parsed = list(csv.DictReader(io.StringIO(to_csv(records))))
    assert float(parsed[0]["error"]) == 0.1234567891234


def test_ordering_is_deterministic():
    records = [_rec("b", "int8"), _rec("a", "int8"), _rec("a", "basic"), _rec("a", "basic", device="c")]
    shuffled = list(reversed(records))
    assert to_csv(records) == to_csv(shuffled)
    keys = [(r["model"], r["variant"], r["device"]) for r in csv.DictReader(io.StringIO(to_csv(records)))]
    assert keys == sorted(keys)


@settings(max_examples=100)
@given(
    st.lists(
        st.builds(
            _rec,
            st.text(st.characters(min_codepoint=32, max_codepoint=126), min_size=1, max_size=8),
            st.sampled_from(["basic", "int8", "16x8"]),
            st.text(st.characters(min_codepoint=32, max_codepoint=126), max_size=5),
            st.just("d"),
            st.sampled_from(["Ok", "Skipped", "DeviceMemoryOverflow"]),
        ),
        max_size=6,
    )
)
def test_csv_column_count_is_constant(records):
    rows = list(csv.reader(io.StringIO(to_csv(records), newline="")))
    assert all(len(row) == len(CSV_COLUMNS) for row in rows)
    assert rows[0] == list(CSV_COLUMNS)


def test_unknown_format():
    with pytest.raises(ValueError):
        emit_report([], "xml")


def test_unsupported_schema_version():
    with pytest.raises(ValueError):
        records_from_json(json.dumps({"schema_version": 99, "records": []}))


def test_write_reports(tmp_path):
    paths = write_reports([_rec()], tmp_path, {"seed": 0}, "t")
    assert {p.name for p in paths.values()} == {"report.json", "report.csv", "report.md"}
    assert all(p.parent == tmp_path / "reports" for p in paths.values())
    assert (tmp_path / "reports" / "report.csv").read_bytes().endswith(b"\r\n")
    assert json.loads(paths["json"].read_text())["generated_at"] == "t"
