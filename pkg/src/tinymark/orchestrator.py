"""Pipeline engine: job planning, the benchmark run, artifact cache, and the menu."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import __version__
from .config import ModelSpec, scan_config_dir
from .datasets import SampleSet, generate_samples
from .device_sim import (
    BackendProfile,
    Deployer,
    DeviceProfile,
    Status,
    check_capabilities,
    load_profiles,
    run_variant,
)
from .errors import EmptySelection, Infeasible, SelectionError, TinymarkError
from .graph import Graph, build_graph
from .kernels import run_reference
from .mem_plan import (
    ArenaSearchParams,
    TrialOutcome,
    TrialRecord,
    estimate_arena,
    find_min_arena,
    plan_arena,
    raw_arena_estimate,
    select_resolution,
)
from .optimize import VariantDescriptor, make_variant
from .reporting import MetricsRecord, deployment_error, exe_time, kb, sort_records, write_reports

STAGES = ("generate", "optimize", "convert", "deploy")
DEFAULT_VARIANTS = (
    "basic",
    "dynamic",
    "int8",
    "int8_only",
    "16x8",
    "16x8_int_only",
    "float16",
    "basic+pruned",
    "basic+clustered",
    "int8_only+pruned",
    "int8_only+clustered",
)
CALIBRATION_SAMPLES = 64
EVAL_SAMPLES = 10
DEFAULT_OUTPUT_DIR = "tinymark-out"
OUTPUT_ENV = "EDGEMARK_OUT"
SKIPPED = "Skipped"
FAILED = "Error"


def suite_dir() -> Path:
    return Path(str(resources.files("tinymark") / "suite"))


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT_DIR


@dataclass(frozen=True)
class PipelineSelection:
    stages: tuple[str, ...] = STAGES
    variants: tuple[str, ...] = DEFAULT_VARIANTS
    backends: tuple[str, ...] = ()
    devices: tuple[str, ...] = ()
    config_dir: str = ""
    output_dir: str = DEFAULT_OUTPUT_DIR
    profile_path: str | None = None
    workers: int = 1

    def validate(self, devices: dict[str, DeviceProfile] | None = None, backends: dict[str, BackendProfile] | None = None) -> None:
        if not self.stages:
            raise EmptySelection("no stages selected")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise SelectionError(f"unknown stages {sorted(unknown)}")
        for later, earlier in zip(STAGES[1:], STAGES):
            if later in self.stages and earlier not in self.stages:
                raise SelectionError(f"stage {later} requires {earlier}")
        for name in self.variants:
            try:
                VariantDescriptor.parse(name)
            except ValueError as exc:
                raise SelectionError(str(exc)) from exc
        if devices is not None:
            missing = set(self.devices) - set(devices)
            if missing:
                raise SelectionError(f"unknown devices {sorted(missing)}")
        if backends is not None:
            missing = set(self.backends) - set(backends)
            if missing:
                raise SelectionError(f"unknown backends {sorted(missing)}")
        if self.workers < 1:
            raise SelectionError("workers must be >= 1")


def default_selection(
    config_dir: str | Path | None = None,
    output_dir: str | Path | None = None,
    profile_path: str | None = None,
) -> PipelineSelection:
    """Everything selected: all stages, variants, backends and devices."""
    devices, backends = load_profiles(profile_path)
    return PipelineSelection(
        stages=STAGES,
        variants=DEFAULT_VARIANTS,
        backends=tuple(backends),
        devices=tuple(devices),
        config_dir=str(config_dir or suite_dir()),
        output_dir=str(output_dir or default_output_dir()),
        profile_path=profile_path,
    )


@dataclass
class BenchmarkJob:
    model: str
    spec_hash: str
    variant: str
    backend: str
    device: str
    status: str = "pending"  # pending | done | failed | skipped
    reason: str = ""

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.model, self.variant, self.backend, self.device)


def _resolve(selection: PipelineSelection):
    devices, backends = load_profiles(selection.profile_path)
    selection.validate(devices, backends)
    dev_names = selection.devices or tuple(devices)
    bk_names = selection.backends or tuple(backends)
    return devices, backends, dev_names, bk_names


def plan_jobs(selection: PipelineSelection, models: list[tuple[str, ModelSpec]] | None = None) -> list[BenchmarkJob]:
    """Cartesian product models x variants x backends x devices, in that order.

    Cells the backend cannot run are kept and marked skipped with the reason.
    """
    devices, backends, dev_names, bk_names = _resolve(selection)
    if models is None:
        models = scan_config_dir(selection.config_dir).models
    if not models or not selection.variants or not bk_names or not dev_names:
        raise EmptySelection("the selection yields no jobs")
    jobs = []
    for name, spec in models:
        graph = build_graph(spec, name)
        for vname in selection.variants:
            variant = VariantDescriptor.parse(vname)
            for bk in bk_names:
                cap = check_capabilities(graph, variant, backends[bk])
                for dev in dev_names:
                    job = BenchmarkJob(name, spec.digest(), vname, bk, dev)
                    if not cap.ok:
                        job.status, job.reason = "skipped", cap.reason
                    jobs.append(job)
    return jobs


# -- artifacts ---------------------------------------------------------------------


def cache_key(job: BenchmarkJob, backend: BackendProfile, device: DeviceProfile) -> str:
    doc = {
        "spec": job.spec_hash,
        "variant": job.variant,
        "backend": [backend.name, backend.digest()],
        "device": [device.name, device.digest()],
        "code": __version__,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:24]


class ArtifactStore:
    """Content-addressed files under the output directory; writes are atomic."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    def path(self, kind: str, name: str) -> Path:
        return self.root / kind / name

    def write_bytes(self, kind: str, name: str, data: bytes) -> Path:
        target = self.path(kind, name)
        with self._lock:
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_name(f".{target.name}.{threading.get_ident()}.tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)
        return target

    def write_text(self, kind: str, name: str, text: str) -> Path:
        return self.write_bytes(kind, name, text.encode("utf-8"))

    def save_graph(self, kind: str, graph: Graph, label: str) -> Path:
        name = f"{label}-{graph.digest()}.npz"
        target = self.path(kind, name)
        if target.exists():
            return target
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(f".{name}.{threading.get_ident()}.tmp.npz")
        graph.save(tmp)
        os.replace(tmp, target)
        return target

    def load_cached(self, key: str) -> MetricsRecord | None:
        path = self.path("cache", f"{key}.json")
        if not path.exists():
            return None
        try:
            return MetricsRecord.from_dict(json.loads(path.read_text(encoding="utf-8"))["record"])
        except (ValueError, KeyError, TypeError):
            return None

    def store_cached(self, key: str, record: MetricsRecord) -> None:
        self.write_text("cache", f"{key}.json", json.dumps({"record": record.to_dict()}, sort_keys=True, indent=1))


def format_trial_log(log: list[TrialRecord]) -> str:
    def b(v):
        return "-" if v is None else str(v)

    lines = [f"guess={r.guess} outcome={r.outcome.name} lower={b(r.lower)} upper={b(r.upper)}" for r in log]
    return "\n".join(lines) + ("\n" if lines else "")


# -- arena search and deployment ---------------------------------------------------------


_TRIAL = {
    Status.OK: TrialOutcome.CORRECT,
    Status.RUNTIME_ALLOC_FAIL: TrialOutcome.TOO_LOW,
    Status.DEVICE_MEMORY_OVERFLOW: TrialOutcome.TOO_HIGH,
    Status.UNSUPPORTED_MODEL: TrialOutcome.TOO_HIGH,
}


@dataclass
class ArenaSearchResult:
    estimate: int
    resolution: int
    minimum: int | None
    log: list[TrialRecord]
    failure: Status | None = None
    reason: str = ""


def search_arena(deployer: Deployer, resolution: int | None = None) -> ArenaSearchResult:
    """Run the minimum-arena search using the deployer's accounting as the oracle."""
    overhead = deployer.backend.interpreter_arena_overhead
    raw = raw_arena_estimate(deployer.graph) + overhead
    res = resolution or select_resolution(raw)
    estimate = estimate_arena(deployer.graph, overhead, res)
    log: list[TrialRecord] = []

    def trial(size: int) -> TrialOutcome:
        return _TRIAL[deployer.accounting(size).status]

    try:
        minimum = find_min_arena(trial, estimate, ArenaSearchParams(resolution=res), log=log)
    except Infeasible:
        probe = deployer.accounting(deployer.device.ram_capacity)
        status = probe.status if not probe.ok else Status.DEVICE_MEMORY_OVERFLOW
        reason = probe.reason if not probe.ok else "ram"
        if probe.status is Status.RUNTIME_ALLOC_FAIL:
            status, reason = Status.DEVICE_MEMORY_OVERFLOW, "arena exceeds ram"
        return ArenaSearchResult(estimate, res, None, log, status, reason)
    return ArenaSearchResult(estimate, res, minimum, log)


@dataclass
class ModelContext:
    """Per-model state shared by all of the model's jobs (owned by one worker)."""

    name: str
    spec: ModelSpec
    graph: Graph
    calibration: SampleSet
    evaluation: SampleSet
    _reference: list[np.ndarray] | None = None
    _variants: dict[str, Graph] = field(default_factory=dict)
    _outputs: dict[str, list[np.ndarray]] = field(default_factory=dict)

    @classmethod
    def create(cls, name: str, spec: ModelSpec) -> ModelContext:
        graph = build_graph(spec, name)
        cal = generate_samples(spec.dataset, CALIBRATION_SAMPLES, spec.random_seed, graph)
        ev = generate_samples(spec.dataset, EVAL_SAMPLES, spec.random_seed + 1, graph)
        return cls(name, spec, graph, cal, ev)

    @property
    def reference(self) -> list[np.ndarray]:
        if self._reference is None:
            self._reference = [run_reference(self.graph, x) for x in self.evaluation.inputs]
        return self._reference

    def variant(self, name: str) -> Graph:
        if name not in self._variants:
            self._variants[name] = make_variant(self.graph, VariantDescriptor.parse(name), self.calibration)
        return self._variants[name]

    def outputs(self, name: str) -> list[np.ndarray]:
        if name not in self._outputs:
            self._outputs[name] = run_variant(self.variant(name), self.evaluation)
        return self._outputs[name]


def run_job(
    ctx: ModelContext,
    job: BenchmarkJob,
    backend: BackendProfile,
    device: DeviceProfile,
    store: ArtifactStore | None = None,
    key: str = "",
) -> MetricsRecord:
    base = dict(model=job.model, variant=job.variant, backend=job.backend, device=job.device)
    variant = VariantDescriptor.parse(job.variant)
    graph = ctx.variant(job.variant)
    deployer = Deployer(graph, variant, backend, device)
    search = search_arena(deployer)
    if store is not None:
        store.write_text("trials", f"{key}.log", format_trial_log(search.log))
    if search.minimum is None:
        return MetricsRecord(**base, status=search.failure.value, reason=search.reason, arena_estimate_kb=kb(search.estimate))
    result = deployer.deploy(search.minimum, ctx.evaluation, outputs=ctx.outputs(job.variant))
    if not result.ok:
        return MetricsRecord(**base, status=result.status.value, reason=result.reason)
    mean_ms, std_ms = exe_time(result, device)
    return MetricsRecord(
        **base,
        status=result.status.value,
        error=deployment_error(result.outputs, ctx.reference),
        exe_time_ms=mean_ms,
        exe_time_std_ms=std_ms,
        flash_model_kb=kb(result.flash_model),
        flash_total_kb=kb(result.flash_total),
        ram_model_kb=kb(result.ram_model),
        ram_total_kb=kb(result.ram_total),
        arena_kb=kb(result.arena_used),
        arena_estimate_kb=kb(search.estimate),
        cycles=result.cycles_per_run[0],
    )


# -- the run ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    jobs: list[BenchmarkJob]
    records: list[MetricsRecord]
    diagnostics: list[tuple[str, str]]
    report_paths: dict[str, Path]
    cache_hits: int = 0

    @property
    def failed(self) -> list[BenchmarkJob]:
        return [j for j in self.jobs if j.status == "failed"]

    @property
    def exit_code(self) -> int:
        return 1 if self.failed or self.diagnostics else 0


def _prepare_model(store: ArtifactStore, ctx: ModelContext, selection: PipelineSelection) -> None:
    """Generate/optimize/convert artifacts for one model."""
    store.save_graph("graphs", ctx.graph, ctx.name)
    if "optimize" not in selection.stages:
        return
    for vname in selection.variants:
        graph = ctx.variant(vname)
        path = store.save_graph("variants", graph, f"{ctx.name}@{vname}")
        if "convert" in selection.stages:
            plan = plan_arena(graph)
            doc = {
                "graph": path.name,
                "peak": plan.peak,
                "entries": [[e.tensor_id, e.offset, e.size, e.first, e.last] for e in plan.entries],
            }
            store.write_text("plans", f"{ctx.name}@{vname}-{graph.digest()}.json", json.dumps(doc, indent=1) + "\n")


def run_pipeline(
    selection: PipelineSelection,
    on_job_done: Callable[[BenchmarkJob, MetricsRecord], None] | None = None,
    resume: bool = True,
) -> RunSummary:
    """Run the selected stages over every config and write the reports.

    Job failures become records; only I/O problems raise. Results cached under
    ``output_dir/cache`` are reused when ``resume`` is set and the cache key
    (spec, variant, backend profile, device profile, code version) matches.
    """
    devices, backends, dev_names, bk_names = _resolve(selection)
    scan = scan_config_dir(selection.config_dir)
    if not scan.models:
        raise EmptySelection(f"no valid model configs in {selection.config_dir}")
    store = ArtifactStore(selection.output_dir)
    deploying = "deploy" in selection.stages
    jobs = plan_jobs(selection, scan.models) if deploying else []
    by_model: dict[str, list[BenchmarkJob]] = {}
    for job in jobs:
        by_model.setdefault(job.model, []).append(job)

    lock = threading.Lock()
    hits = [0]

    def work(item: tuple[str, ModelSpec]) -> list[MetricsRecord]:
        name, spec = item
        ctx = ModelContext.create(name, spec)
        _prepare_model(store, ctx, selection)
        records = []
        for job in by_model.get(name, []):
            if job.status == "skipped":
                record = MetricsRecord(job.model, job.variant, job.backend, job.device, SKIPPED, job.reason)
            else:
                backend, device = backends[job.backend], devices[job.device]
                key = cache_key(job, backend, device)
                record = store.load_cached(key) if resume else None
                if record is not None:
                    with lock:
                        hits[0] += 1
                else:
                    try:
                        record = run_job(ctx, job, backend, device, store, key)
                    except TinymarkError as exc:
                        record = MetricsRecord(job.model, job.variant, job.backend, job.device, FAILED, f"{type(exc).__name__}: {exc}")
                    store.store_cached(key, record)
                job.status = "done" if record.ok else "failed"
                job.reason = record.reason
            records.append(record)
            if on_job_done is not None:
                with lock:
                    on_job_done(job, record)
        return records

    if selection.workers > 1:
        with ThreadPoolExecutor(max_workers=selection.workers) as pool:
            chunks = list(pool.map(work, scan.models))
    else:
        chunks = [work(item) for item in scan.models]
    records = sort_records(r for chunk in chunks for r in chunk)

    metadata = {
        "code_version": __version__,
        "stages": list(selection.stages),
        "variants": list(selection.variants),
        "backends": {name: backends[name].digest() for name in bk_names},
        "devices": {name: devices[name].digest() for name in dev_names},
        "models": {name: spec.digest() for name, spec in scan.models},
        "diagnostics": [list(d) for d in scan.diagnostics],
    }
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    paths = write_reports(records, selection.output_dir, metadata, stamp)
    return RunSummary(jobs, records, scan.diagnostics, paths, hits[0])


# -- interactive menu ----------------------------------------------------------------------


def interactive_menu(
    defaults: PipelineSelection,
    stdin: TextIO,
    stdout: TextIO,
    yes: bool = False,
    interactive: bool | None = None,
) -> PipelineSelection | None:
    """Checklist over stages, variants, backends and devices.

    Returns the confirmed selection, or None when the user quits. ``yes``
    accepts ``defaults`` without prompting. Without a terminal (and without
    ``yes``) a SelectionError is raised.
    """
    if yes:
        return defaults
    if interactive is None:
        interactive = stdin.isatty()
    if not interactive:
        raise SelectionError("no interactive terminal; pass --yes to accept the default selection")

    groups = [
        ("Stages", "stages", list(STAGES)),
        ("Variants", "variants", list(DEFAULT_VARIANTS)),
        ("Backends", "backends", list(defaults.backends)),
        ("Devices", "devices", list(defaults.devices)),
    ]
    items: list[tuple[str, str]] = [(attr, value) for _, attr, values in groups for value in values]
    chosen = {(attr, v) for attr, v in items if v in getattr(defaults, attr)}

    while True:
        n = 0
        for title, attr, values in groups:
            stdout.write(f"{title}:\n")
            for v in values:
                n += 1
                mark = "x" if (attr, v) in chosen else " "
                stdout.write(f"  [{mark}] {n:2d} {v}\n")
        stdout.write("Toggle items by number, Enter to run, q to quit: ")
        stdout.flush()
        line = stdin.readline()
        if not line or line.strip().lower() in ("q", "quit"):
            stdout.write("\naborted\n")
            return None
        line = line.strip()
        if not line:
            picked = {attr: tuple(v for a, v in items if a == attr and (a, v) in chosen) for _, attr, _ in groups}
            selection = replace(defaults, **picked)
            try:
                selection.validate()
                if "deploy" in selection.stages and not (selection.variants and selection.backends and selection.devices):
                    raise EmptySelection("deploy needs at least one variant, backend and device")
            except SelectionError as exc:
                stdout.write(f"invalid selection: {exc}\n")
                continue
            return selection
        for token in line.replace(",", " ").split():
            if not token.isdigit() or not 1 <= int(token) <= len(items):
                stdout.write(f"ignored {token!r}\n")
                continue
            item = items[int(token) - 1]
            chosen ^= {item}
