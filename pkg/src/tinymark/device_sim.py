"""Simulated microcontroller targets and toolchain backends.

A deployment is judged in a fixed order: backend capabilities, flash and RAM
capacity, then whether the static plan fits in the requested arena. Only then
are the variant's kernels executed. Cycle counts come from a linear per-element
cost model; they do not depend on the input data, so the ten timed runs of one
deployment are always identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .datasets import SampleSet
from .errors import ConfigSyntaxError, ValidationError
from .graph import RECURRENT_KINDS, GATES, Graph, OpNode
from .kernels import dequantize_values, execute, quantize_values
from .mem_plan import plan_arena
from .optimize import SCHEME_NAMES, VariantDescriptor

TIMED_RUNS = 10
FPU_BAND = (1.85, 9.5)
OPT_LEVELS = ("Os", "O3", "Ofast")
ALL_OPS = frozenset(
    {
        "dense",
        "conv2d",
        "maxpool2d",
        "global_avg_pool2d",
        "activation",
        "batch_norm_frozen",
        "softmax",
        "embedding_lookup",
        "quantize",
        "dequantize",
        "requantize",
        *RECURRENT_KINDS,
    }
)
_FLOAT_DTYPES = ("f32", "f16")


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    clock_hz: int
    fpu_present: bool
    simd_int8: bool
    flash_capacity: int
    ram_capacity: int
    cycle_table: dict[tuple[str, str, str], float]
    per_op_overhead_cycles: dict[str, float]  # keys: fpu, soft, int
    opt_level: str = "Os"
    opt_levels: dict[str, tuple[float, float]] = field(default_factory=lambda: {"Os": (1.0, 1.0)})
    ram_param_speedup: float = 1.0

    @property
    def speed_multiplier(self) -> float:
        return self.opt_levels[self.opt_level][0]

    @property
    def flash_multiplier(self) -> float:
        return self.opt_levels[self.opt_level][1]

    def with_fpu(self, present: bool) -> DeviceProfile:
        return dataclasses.replace(self, fpu_present=present)

    def with_opt_level(self, level: str) -> DeviceProfile:
        if level not in self.opt_levels:
            raise ValueError(f"{self.name}: unknown optimization level {level!r}")
        return dataclasses.replace(self, opt_level=level)

    def cost(self, op_class: str, dtype: str, accel: str) -> float:
        try:
            return self.cycle_table[(op_class, dtype, accel)]
        except KeyError:
            if accel == "simd":
                return self.cycle_table[(op_class, dtype, "scalar")]
            raise

    def digest(self) -> str:
        return _digest(self)


@dataclass(frozen=True)
class BackendProfile:
    name: str
    style: str  # interpreter | direct
    base_flash: int
    base_ram: int
    interpreter_arena_overhead: int
    supported_schemes: frozenset[str]
    supported_ops: frozenset[str]
    supports_rnn: bool
    regression_only: bool
    param_placement: str = "rom"
    accel_int8_on: frozenset[str] = frozenset()
    invoke_overhead_cycles: float = 0.0
    op_code_bytes: int = 400
    int_kernel_code: int = 0

    def with_placement(self, placement: str) -> BackendProfile:
        if placement not in ("rom", "ram"):
            raise ValueError("param_placement must be rom or ram")
        return dataclasses.replace(self, param_placement=placement)

    def digest(self) -> str:
        return _digest(self)


def _jsonable(value: Any) -> Any:
    if isinstance(value, (frozenset, set)):
        return sorted(value)
    if isinstance(value, dict):
        return {"|".join(k) if isinstance(k, tuple) else k: _jsonable(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _digest(profile: Any) -> str:
    doc = {f.name: _jsonable(getattr(profile, f.name)) for f in dataclasses.fields(profile)}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# -- loading ------------------------------------------------------------------------


def _positive(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ValidationError(path, f"must be a positive number, got {value!r}")
    return value


def _flag(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ValidationError(path, f"must be true or false, got {value!r}")
    return value


def _check_fpu_band(soft: float, fpu: float, path: str) -> None:
    ratio = soft / fpu
    if not FPU_BAND[0] <= ratio <= FPU_BAND[1]:
        raise ValidationError(path, f"soft-float/FPU cost ratio {ratio:.3g} outside [{FPU_BAND[0]}, {FPU_BAND[1]}]")


def _parse_device(name: str, raw: dict[str, Any]) -> DeviceProfile:
    p = f"devices.{name}"
    if not isinstance(raw, dict):
        raise ValidationError(p, "must be a mapping")
    table: dict[tuple[str, str, str], float] = {}
    for op_class, by_dtype in (raw.get("cycle_table") or {}).items():
        for dtype, by_accel in by_dtype.items():
            for accel, cost in by_accel.items():
                table[(op_class, dtype, accel)] = float(_positive(cost, f"{p}.cycle_table.{op_class}.{dtype}.{accel}"))
            if dtype == "f32":
                if set(by_accel) != {"fpu", "soft"}:
                    raise ValidationError(f"{p}.cycle_table.{op_class}.f32", "needs both fpu and soft costs")
                _check_fpu_band(by_accel["soft"], by_accel["fpu"], f"{p}.cycle_table.{op_class}.f32")
    if ("mac", "f32", "fpu") not in table:
        raise ValidationError(f"{p}.cycle_table", "missing mac.f32 costs")

    overhead = raw.get("per_op_overhead_cycles") or {}
    try:
        per_op = {
            "fpu": float(_positive(overhead["f32"]["fpu"], f"{p}.per_op_overhead_cycles.f32.fpu")),
            "soft": float(_positive(overhead["f32"]["soft"], f"{p}.per_op_overhead_cycles.f32.soft")),
            "int": float(_positive(overhead["int"], f"{p}.per_op_overhead_cycles.int")),
        }
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{p}.per_op_overhead_cycles", "needs f32.fpu, f32.soft and int") from exc
    _check_fpu_band(per_op["soft"], per_op["fpu"], f"{p}.per_op_overhead_cycles.f32")

    levels = {}
    for level, mult in (raw.get("opt_levels") or {"Os": {"speed": 1.0, "flash": 1.0}}).items():
        if level not in OPT_LEVELS:
            raise ValidationError(f"{p}.opt_levels", f"unknown level {level!r}")
        levels[level] = (
            float(_positive(mult.get("speed"), f"{p}.opt_levels.{level}.speed")),
            float(_positive(mult.get("flash"), f"{p}.opt_levels.{level}.flash")),
        )
    opt_level = raw.get("opt_level", "Os")
    if opt_level not in levels:
        raise ValidationError(f"{p}.opt_level", f"{opt_level!r} is not among the defined levels")

    return DeviceProfile(
        name=name,
        clock_hz=int(_positive(raw.get("clock_hz"), f"{p}.clock_hz")),
        fpu_present=_flag(raw.get("fpu_present"), f"{p}.fpu_present"),
        simd_int8=_flag(raw.get("simd_int8"), f"{p}.simd_int8"),
        flash_capacity=int(_positive(raw.get("flash_capacity"), f"{p}.flash_capacity")),
        ram_capacity=int(_positive(raw.get("ram_capacity"), f"{p}.ram_capacity")),
        cycle_table=table,
        per_op_overhead_cycles=per_op,
        opt_level=opt_level,
        opt_levels=levels,
        ram_param_speedup=float(_positive(raw.get("ram_param_speedup", 1.0), f"{p}.ram_param_speedup")),
    )


def _parse_backend(name: str, raw: dict[str, Any]) -> BackendProfile:
    p = f"backends.{name}"
    if not isinstance(raw, dict):
        raise ValidationError(p, "must be a mapping")
    style = raw.get("style")
    if style not in ("interpreter", "direct"):
        raise ValidationError(f"{p}.style", "must be interpreter or direct")
    schemes = frozenset(raw.get("supported_schemes") or ())
    unknown = schemes - set(SCHEME_NAMES.values())
    if unknown:
        raise ValidationError(f"{p}.supported_schemes", f"unknown schemes {sorted(unknown)}")
    ops_raw = raw.get("supported_ops", "all")
    ops = ALL_OPS if ops_raw == "all" else frozenset(ops_raw)
    if ops - ALL_OPS:
        raise ValidationError(f"{p}.supported_ops", f"unknown ops {sorted(ops - ALL_OPS)}")
    overhead = int(raw.get("interpreter_arena_overhead", 0))
    if overhead < 0:
        raise ValidationError(f"{p}.interpreter_arena_overhead", "must be >= 0")
    if style == "direct" and overhead != 0:
        raise ValidationError(f"{p}.interpreter_arena_overhead", "direct backends have no interpreter overhead")
    regression_only = _flag(raw.get("regression_only", False), f"{p}.regression_only")
    if regression_only and not ops <= {"dense", "activation"}:
        raise ValidationError(f"{p}.supported_ops", "regression-only backends support only dense and activation")
    placement = raw.get("param_placement", "rom")
    if placement not in ("rom", "ram"):
        raise ValidationError(f"{p}.param_placement", "must be rom or ram")
    return BackendProfile(
        name=name,
        style=style,
        base_flash=int(_positive(raw.get("base_flash"), f"{p}.base_flash")),
        base_ram=int(_positive(raw.get("base_ram"), f"{p}.base_ram")),
        interpreter_arena_overhead=overhead,
        supported_schemes=schemes,
        supported_ops=ops,
        supports_rnn=_flag(raw.get("supports_rnn", False), f"{p}.supports_rnn"),
        regression_only=regression_only,
        param_placement=placement,
        accel_int8_on=frozenset(raw.get("accel_int8_on") or ()),
        invoke_overhead_cycles=float(raw.get("invoke_overhead_cycles", 0)),
        op_code_bytes=int(raw.get("op_code_bytes", 400 if style == "interpreter" else 220)),
        int_kernel_code=int(raw.get("int_kernel_code", 0)),
    )


def default_profile_path() -> Path:
    return Path(str(resources.files("tinymark") / "profiles" / "default.yaml"))


def parse_profiles(text: str) -> tuple[dict[str, DeviceProfile], dict[str, BackendProfile]]:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigSyntaxError(f"malformed profile document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigSyntaxError("profile document must be a mapping")
    devices = {name: _parse_device(name, raw) for name, raw in (doc.get("devices") or {}).items()}
    backends = {name: _parse_backend(name, raw) for name, raw in (doc.get("backends") or {}).items()}
    return devices, backends


def load_profiles(path: str | Path | None = None) -> tuple[dict[str, DeviceProfile], dict[str, BackendProfile]]:
    """Load device and backend profiles (the shipped defaults when ``path`` is None)."""
    path = Path(path) if path is not None else default_profile_path()
    return parse_profiles(path.read_text(encoding="utf-8"))


# -- capabilities --------------------------------------------------------------------


@dataclass(frozen=True)
class Capability:
    ok: bool
    reason: str = ""
    detail: str = ""


def variant_op_kinds(graph: Graph, variant: VariantDescriptor) -> set[str]:
    """Op kinds the deployed variant contains (float graphs gain boundary ops)."""
    kinds = {n.kind for n in graph.nodes}
    if variant.scheme in ("int8", "a16w8"):
        kinds |= {"quantize", "dequantize"}
    return kinds


def check_capabilities(graph: Graph, variant: VariantDescriptor, backend: BackendProfile) -> Capability:
    """Accepts either the float graph or the variant graph."""
    if backend.regression_only and graph.task != "regression":
        return Capability(False, "regression_only", f"{backend.name} only runs regression models")
    if graph.is_recurrent() and not backend.supports_rnn:
        return Capability(False, "rnn unsupported", f"{backend.name} has no recurrent kernels")
    scheme = SCHEME_NAMES[variant.scheme]
    if scheme not in backend.supported_schemes:
        return Capability(False, "scheme unsupported", f"{backend.name} cannot deploy {scheme}")
    for node in graph.nodes:
        if node.kind not in backend.supported_ops:
            return Capability(False, "op unsupported", f"{backend.name} lacks {node.kind} ({node.name})")
    for kind in sorted(variant_op_kinds(graph, variant) - backend.supported_ops):
        return Capability(False, "op unsupported", f"{backend.name} lacks {kind}")
    return Capability(True)


# -- cost model ----------------------------------------------------------------------


class Status(str, Enum):
    OK = "Ok"
    RUNTIME_ALLOC_FAIL = "RuntimeAllocFail"
    DEVICE_MEMORY_OVERFLOW = "DeviceMemoryOverflow"
    UNSUPPORTED_MODEL = "UnsupportedModel"


def _int_dtype(graph: Graph, tid: str) -> str:
    return "i16" if graph.tensors[tid].dtype == "i16" else "i8"


def _is_float_node(graph: Graph, node: OpNode) -> bool:
    if node.kind == "quantize":
        return True
    return graph.tensors[node.outputs[0]].dtype in _FLOAT_DTYPES


def node_cycles(graph: Graph, node: OpNode, device: DeviceProfile, int_accel: bool) -> float:
    ts = graph.tensors
    fa = "fpu" if device.fpu_present else "soft"
    ia = "simd" if int_accel else "scalar"

    def f32(op_class: str, n: float) -> float:
        return device.cost(op_class, "f32", fa) * n

    def integer(op_class: str, n: float, dtype: str = "int") -> float:
        return device.cost(op_class, dtype, ia) * n

    x = ts[node.inputs[0]]
    y = ts[node.outputs[0]]
    n_in, n_out = x.size, y.size
    floating = _is_float_node(graph, node)
    kind = node.kind

    if kind in ("dense", "conv2d") or kind in RECURRENT_KINDS:
        w = ts[node.inputs[1]]
        if kind == "dense":
            fan_in, fan_out = w.shape
            macs = fan_in * fan_out * (n_in // fan_in if node.attrs.get("per_step") else 1)
        elif kind == "conv2d":
            k, _, cin, _ = w.shape
            macs = n_out * k * k * cin
        else:
            steps, units = y.shape
            macs = steps * w.shape[1] * (w.shape[0] + units)
            gate_elems = steps * units * (GATES[kind] + 1)
        if w.quant is None:
            cost = f32("mac", macs) + f32("elementwise", n_out)
            if kind in RECURRENT_KINDS:
                cost += f32("transcendental", gate_elems)
            return cost
        if floating:
            # dynamic range: quantize the input, int8 products, float rescale
            cost = f32("convert", n_in) + integer("mac", macs, "i8") + f32("convert", n_out)
            if kind in RECURRENT_KINDS:
                cost += f32("convert", steps * units) + f32("transcendental", gate_elems)
            return cost
        dt = _int_dtype(graph, node.inputs[0])
        cost = integer("mac", macs, dt) + integer("requantize", n_out)
        if kind in RECURRENT_KINDS:
            cost += integer("lookup", gate_elems) + integer("requantize", steps * w.shape[1])
        return cost

    if kind == "activation":
        transcendental = node.attrs["fn"] in ("tanh", "sigmoid")
        if floating:
            return f32("transcendental" if transcendental else "elementwise", n_out)
        return integer("lookup", n_out)
    if kind == "softmax":
        if floating:
            return f32("transcendental", n_out) + f32("elementwise", 2 * n_out)
        return integer("lookup", n_out) + integer("requantize", n_out)
    if kind in ("maxpool2d", "global_avg_pool2d"):
        if floating:
            return f32("elementwise", n_in)
        cost = integer("elementwise", n_in)
        return cost + (integer("requantize", n_out) if kind == "global_avg_pool2d" else 0.0)
    if kind == "batch_norm_frozen":
        if floating:
            return f32("elementwise", 2 * n_out)
        return integer("mac", n_out, _int_dtype(graph, node.inputs[0])) + integer("requantize", n_out)
    if kind == "embedding_lookup":
        return f32("elementwise", n_out) if floating else integer("elementwise", n_out)
    if kind in ("quantize", "dequantize"):
        return f32("convert", n_in)
    if kind == "requantize":
        return integer("requantize", n_in)
    raise ValueError(f"no cost entry for {kind}")


def inference_cycles(graph: Graph, device: DeviceProfile, backend: BackendProfile) -> float:
    int_accel = device.simd_int8 and device.name in backend.accel_int8_on
    fa = "fpu" if device.fpu_present else "soft"
    total = backend.invoke_overhead_cycles
    for node in graph.nodes:
        total += node_cycles(graph, node, device, int_accel)
        total += device.per_op_overhead_cycles[fa if _is_float_node(graph, node) else "int"]
    total /= device.speed_multiplier
    if backend.param_placement == "ram":
        total /= device.ram_param_speedup
    return total


def weight_bytes(graph: Graph) -> int:
    return sum(t.nbytes for _, t in graph.constants())


def op_code_pairs(graph: Graph) -> set[tuple[str, str]]:
    return {(n.kind, graph.tensors[n.outputs[0]].dtype) for n in graph.nodes}


def flash_model_bytes(graph: Graph, variant: VariantDescriptor, backend: BackendProfile) -> int:
    code = backend.op_code_bytes * len(op_code_pairs(graph))
    kernels = backend.int_kernel_code if variant.scheme not in ("basic", "float16") else 0
    return weight_bytes(graph) + code + kernels


def io_buffer_bytes(graph: Graph, variant: VariantDescriptor) -> int:
    """Application-side I/O buffers; float-I/O variants keep them inside the arena."""
    if not variant.int_only:
        return 0
    return graph.input.nbytes + graph.output.nbytes


# -- deployment ------------------------------------------------------------------------


@dataclass
class DeploymentResult:
    status: Status
    outputs: list[np.ndarray] = field(default_factory=list)
    cycles_per_run: list[int] = field(default_factory=list)
    flash_total: int = 0
    flash_model: int = 0
    ram_total: int = 0
    ram_model: int = 0
    arena_used: int = 0
    plan_peak: int = 0
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


class Deployer:
    """Accounting for one (variant graph, backend, device) triple.

    The arena plan and footprint are computed once, so the arena search can
    probe many sizes cheaply.
    """

    def __init__(self, graph: Graph, variant: VariantDescriptor, backend: BackendProfile, device: DeviceProfile):
        self.graph = graph
        self.variant = variant
        self.backend = backend
        self.device = device
        self.capability = check_capabilities(graph, variant, backend)
        self.plan_peak = plan_arena(graph).peak if self.capability.ok else 0
        self.required_arena = self.plan_peak + backend.interpreter_arena_overhead
        self.flash_model = flash_model_bytes(graph, variant, backend)
        self.flash_total = math.ceil(backend.base_flash * device.flash_multiplier) + self.flash_model
        self.fixed_ram = io_buffer_bytes(graph, variant)
        if backend.param_placement == "ram":
            self.fixed_ram += weight_bytes(graph)

    def accounting(self, arena_bytes: int) -> DeploymentResult:
        ram_model = arena_bytes + self.fixed_ram
        res = DeploymentResult(
            status=Status.OK,
            flash_total=self.flash_total,
            flash_model=self.flash_model,
            ram_total=self.backend.base_ram + ram_model,
            ram_model=ram_model,
            arena_used=arena_bytes,
            plan_peak=self.plan_peak,
        )
        if not self.capability.ok:
            res.status, res.reason = Status.UNSUPPORTED_MODEL, self.capability.reason
        elif res.flash_total > self.device.flash_capacity:
            res.status, res.reason = Status.DEVICE_MEMORY_OVERFLOW, "flash"
        elif res.ram_total > self.device.ram_capacity:
            res.status, res.reason = Status.DEVICE_MEMORY_OVERFLOW, "ram"
        elif self.required_arena > arena_bytes:
            res.status, res.reason = Status.RUNTIME_ALLOC_FAIL, f"arena needs {self.required_arena} B"
        return res

    def cycles(self) -> int:
        """Cycles of one inference (identical for every run and input)."""
        return int(round(inference_cycles(self.graph, self.device, self.backend)))

    def deploy(self, arena_bytes: int, inputs: SampleSet, outputs: list[np.ndarray] | None = None) -> DeploymentResult:
        res = self.accounting(arena_bytes)
        if not res.ok:
            return res
        if outputs is None:
            outputs = run_variant(self.graph, inputs)
        res.outputs = [np.array(o, copy=True) for o in outputs]
        res.cycles_per_run = [self.cycles()] * TIMED_RUNS
        return res


def run_variant(graph: Graph, inputs: SampleSet) -> list[np.ndarray]:
    """Execute the variant on every input, casting float inputs to the graph's input type."""
    inp = graph.input
    outs = []
    for x in inputs.inputs:
        if inp.quant is not None and np.issubdtype(np.asarray(x).dtype, np.floating):
            x = quantize_values(x, inp.quant)
        y = execute(graph, x)
        out = graph.output
        if out.quant is not None:
            y = dequantize_values(y, out.quant)
        outs.append(np.asarray(y, dtype=np.float32))
    return outs


def deploy(
    graph: Graph,
    variant: VariantDescriptor,
    backend: BackendProfile,
    device: DeviceProfile,
    arena_bytes: int,
    inputs: SampleSet,
) -> DeploymentResult:
    return Deployer(graph, variant, backend, device).deploy(arena_bytes, inputs)
