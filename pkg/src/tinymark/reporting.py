"""Metrics and report emission (json, csv, markdown)."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .device_sim import DeploymentResult, DeviceProfile
from .errors import NotRun, ShapeMismatch

SCHEMA_VERSION = 1
KB = 1024
EPS = 1e-9
CSV_COLUMNS = ("model", "variant", "backend", "device", "error", "exe_ms", "flash_kb", "ram_kb", "arena_kb", "status")
OK = "Ok"


@dataclass
class MetricsRecord:
    model: str
    variant: str
    backend: str
    device: str
    status: str
    reason: str = ""
    error: float | None = None
    exe_time_ms: float | None = None
    exe_time_std_ms: float | None = None
    flash_model_kb: float | None = None
    flash_total_kb: float | None = None
    ram_model_kb: float | None = None
    ram_total_kb: float | None = None
    arena_kb: float | None = None
    arena_estimate_kb: float | None = None
    cycles: int | None = None

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.model, self.variant, self.backend, self.device)

    @property
    def ok(self) -> bool:
        return self.status == OK

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> MetricsRecord:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


def deployment_error(device_outputs: list[np.ndarray], reference_outputs: list[np.ndarray]) -> float:
    """Mean over inputs of mean|dev - ref| / (max|ref| + 1e-9).

    Each input's absolute differences are normalized by the largest magnitude
    in that input's reference output, which keeps the metric dimensionless.
    """
    if len(device_outputs) != len(reference_outputs):
        raise ShapeMismatch(f"{len(device_outputs)} device outputs vs {len(reference_outputs)} references")
    if not device_outputs:
        raise ShapeMismatch("no outputs to compare")
    per_input = []
    for i, (dev, ref) in enumerate(zip(device_outputs, reference_outputs)):
        dev = np.asarray(dev, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if dev.shape != ref.shape:
            raise ShapeMismatch(f"input {i}: device shape {dev.shape} vs reference {ref.shape}")
        per_input.append(float(np.mean(np.abs(dev - ref))) / (float(np.max(np.abs(ref))) + EPS))
    return float(np.mean(per_input))


def exe_time(result: DeploymentResult, device: DeviceProfile) -> tuple[float, float]:
    """Mean and population standard deviation (ms) of the timed runs."""
    if not result.ok or not result.cycles_per_run:
        raise NotRun(f"deployment did not run (status {result.status.value})")
    ms = [c * 1000.0 / device.clock_hz for c in result.cycles_per_run]
    return statistics.fmean(ms), statistics.pstdev(ms)


def kb(n_bytes: int | None) -> float | None:
    return None if n_bytes is None else n_bytes / KB


def sort_records(records: Iterable[MetricsRecord]) -> list[MetricsRecord]:
    return sorted(records, key=lambda r: r.key)


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_row(r: MetricsRecord) -> list[str]:
    values = {
        "model": r.model,
        "variant": r.variant,
        "backend": r.backend,
        "device": r.device,
        "error": r.error,
        "exe_ms": r.exe_time_ms,
        "flash_kb": r.flash_model_kb,
        "ram_kb": r.ram_model_kb,
        "arena_kb": r.arena_kb,
        "status": r.status,
    }
    return [_cell(values[c]) for c in CSV_COLUMNS]


def to_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(CSV_COLUMNS)
    for r in sort_records(records):
        writer.writerow(csv_row(r))
    return buf.getvalue()


def to_json(records: Iterable[MetricsRecord], metadata: dict[str, Any] | None = None, generated_at: str = "") -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "generated_at": generated_at,
        "run": metadata or {},
        "records": [r.to_dict() for r in sort_records(records)],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def records_from_json(text: str) -> list[MetricsRecord]:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')!r}")
    return [MetricsRecord.from_dict(r) for r in doc["records"]]


def _fmt(value: float | None, digits: int) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def to_markdown(records: Iterable[MetricsRecord]) -> str:
    """One table per model; cells of jobs that did not run show "-"."""
    lines = ["# Benchmark report", ""]
    header = "| Variant | Backend | Device | Error | Exe (ms) | Flash (kB) | RAM (kB) | Arena (kB) | Status |"
    rule = "|---|---|---|---:|---:|---:|---:|---:|---|"
    by_model: dict[str, list[MetricsRecord]] = {}
    for r in sort_records(records):
        by_model.setdefault(r.model, []).append(r)
    if not by_model:
        lines += [header, rule, ""]
    for model, rows in by_model.items():
        lines += [f"## {model}", "", header, rule]
        for r in rows:
            if r.ok:
                cells = [f"{r.error:.4g}", _fmt(r.exe_time_ms, 3), _fmt(r.flash_model_kb, 1), _fmt(r.ram_model_kb, 1), _fmt(r.arena_kb, 1)]
            else:
                cells = ["-"] * 5
            status = r.status if not r.reason else f"{r.status} ({r.reason})"
            lines.append("| " + " | ".join([r.variant, r.backend, r.device, *cells, status]) + " |")
        lines.append("")
    return "\n".join(lines)


def emit_report(
    records: Iterable[MetricsRecord],
    fmt: str,
    metadata: dict[str, Any] | None = None,
    generated_at: str = "",
) -> str:
    records = list(records)
    if fmt == "json":
        return to_json(records, metadata, generated_at)
    if fmt == "csv":
        return to_csv(records)
    if fmt in ("md", "markdown"):
        return to_markdown(records)
    raise ValueError(f"unknown report format {fmt!r}")


def write_reports(
    records: Iterable[MetricsRecord],
    output_dir: str | Path,
    metadata: dict[str, Any] | None = None,
    generated_at: str = "",
) -> dict[str, Path]:
    """Write report.json, report.csv and report.md under ``output_dir/reports``."""
    records = list(records)
    target = Path(output_dir) / "reports"
    target.mkdir(parents=True, exist_ok=True)
    paths = {}
    for fmt, name in (("json", "report.json"), ("csv", "report.csv"), ("markdown", "report.md")):
        path = target / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(emit_report(records, fmt, metadata, generated_at))
        paths[fmt] = path
    return paths
