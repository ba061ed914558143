"""Static arena planning and the minimum-arena search.

The planner assigns every activation and scratch buffer an offset in a single
arena. The search then probes a (simulated) device to find the smallest arena
that runs without an allocation failure, growing or shrinking the guess
geometrically until both bounds are known and bisecting in between. All search
arithmetic happens in units of the chosen resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .graph import GATES, RECURRENT_KINDS, Graph
from .errors import Infeasible, NonMonotoneOracle

ALIGNMENT = 16
KIB = 1024


@dataclass(frozen=True)
class BufferRequest:
    tensor_id: str
    size: int
    first: int
    last: int


@dataclass(frozen=True)
class PlanEntry:
    tensor_id: str
    offset: int
    size: int
    first: int
    last: int


@dataclass
class AllocationPlan:
    entries: list[PlanEntry]
    peak: int

    def entry(self, tensor_id: str) -> PlanEntry:
        for e in self.entries:
            if e.tensor_id == tensor_id:
                return e
        raise KeyError(tensor_id)


def _align(n: int, alignment: int = ALIGNMENT) -> int:
    return -(-n // alignment) * alignment


def _overlaps(a_first: int, a_last: int, b_first: int, b_last: int) -> bool:
    return a_first <= b_last and b_first <= a_last


def plan_buffers(requests: list[BufferRequest], alignment: int = ALIGNMENT) -> AllocationPlan:
    """Greedy first-fit placement, largest buffers first.

    Ties on size go to the buffer first used earlier, then to request order.
    Each buffer takes the lowest aligned offset that clears every placed buffer
    whose lifetime overlaps its own.
    """
    order = sorted(range(len(requests)), key=lambda i: (-requests[i].size, requests[i].first, i))
    placed: list[PlanEntry] = []
    for i in order:
        req = requests[i]
        conflicts = sorted(
            (p for p in placed if _overlaps(p.first, p.last, req.first, req.last)),
            key=lambda p: p.offset,
        )
        offset = 0
        for p in conflicts:
            if offset + req.size <= p.offset:
                break
            offset = max(offset, _align(p.offset + p.size, alignment))
        placed.append(PlanEntry(req.tensor_id, offset, req.size, req.first, req.last))
    entries = sorted(placed, key=lambda e: (e.offset, e.first, e.tensor_id))
    peak = max((e.offset + e.size for e in entries), default=0)
    return AllocationPlan(entries, peak)


def scratch_bytes(graph: Graph, index: int) -> int:
    """Per-node temporary buffer requirement (lives only while the node runs)."""
    node = graph.nodes[index]
    ts = graph.tensors
    if node.kind in RECURRENT_KINDS:
        units = ts[node.inputs[2]].shape[0]
        size = units * GATES[node.kind] * 4
        if node.kind == "lstm_cell":
            size += units * 4
        return size
    if node.kind in ("dense", "conv2d") and ts[node.inputs[1]].quant is not None and ts[node.inputs[0]].quant is None:
        # dynamic range: int8 copy of the float input
        return ts[node.inputs[0]].size
    return 0


def buffer_requests(graph: Graph) -> list[BufferRequest]:
    last_use: dict[str, int] = {}
    for i, node in enumerate(graph.nodes):
        for tid in node.inputs:
            last_use[tid] = i
    final = len(graph.nodes) - 1
    requests = []
    in_id = graph.input_ids[0]
    requests.append(BufferRequest(in_id, graph.tensors[in_id].nbytes, 0, last_use.get(in_id, 0)))
    for i, node in enumerate(graph.nodes):
        for tid in node.outputs:
            requests.append(BufferRequest(tid, graph.tensors[tid].nbytes, i, last_use.get(tid, final)))
        extra = scratch_bytes(graph, i)
        if extra:
            requests.append(BufferRequest(f"{node.name}.scratch", extra, i, i))
    return requests


def plan_arena(graph: Graph) -> AllocationPlan:
    """Place activation and scratch buffers; constants stay out of the arena."""
    return plan_buffers(buffer_requests(graph))


def select_resolution(estimate: int) -> int:
    if estimate < 32 * KIB:
        return 512
    if estimate <= 128 * KIB:
        return 1024
    return 2048


def raw_arena_estimate(graph: Graph) -> int:
    """Largest sum of two consecutive layer outputs (the input counts as layer 0)."""
    sizes = [graph.input.nbytes] + [graph.tensors[n.outputs[0]].nbytes for n in graph.nodes]
    return max(a + b for a, b in zip(sizes, sizes[1:]))


def estimate_arena(graph: Graph, overhead: int = 0, resolution: int | None = None) -> int:
    raw = raw_arena_estimate(graph) + overhead
    res = resolution or select_resolution(raw)
    return -(-raw // res) * res


# -- search ----------------------------------------------------------------------


class TrialOutcome(Enum):
    TOO_LOW = "too_low"
    TOO_HIGH = "too_high"
    CORRECT = "correct"


@dataclass(frozen=True)
class ArenaSearchParams:
    growth_rate: float = 1.25
    shrink_rate: float = 0.8
    growth_steps: int = 4
    shrink_steps: int = 4
    resolution: int = 1024

    def __post_init__(self):
        if not self.growth_rate > 1:
            raise ValueError("growth_rate must be > 1")
        if not 0 < self.shrink_rate < 1:
            raise ValueError("shrink_rate must be in (0, 1)")
        if self.resolution not in (512, 1024, 2048):
            raise ValueError("resolution must be 512, 1024 or 2048 bytes")


@dataclass(frozen=True)
class TrialRecord:
    guess: int  # bytes
    outcome: TrialOutcome
    lower: int | None  # bytes
    upper: int | None
    best: int | None


@dataclass
class ArenaSearchState:
    lower_bound: int | None = None
    upper_bound: int | None = None
    best_guess: int | None = None
    log: list[TrialRecord] = field(default_factory=list)


def find_min_arena(
    trial: Callable[[int], TrialOutcome],
    estimate: int,
    params: ArenaSearchParams | None = None,
    log: list[TrialRecord] | None = None,
    limit: int | None = None,
) -> int:
    """Return the smallest arena size (bytes) for which ``trial`` reports CORRECT.

    ``trial`` receives a size in bytes. ``estimate`` seeds the first guess and
    is rounded up to whole resolution units. ``limit`` (bytes) caps the growth
    phase for oracles that never report TOO_HIGH.
    """
    params = params or ArenaSearchParams()
    res = params.resolution
    state = ArenaSearchState()
    limit_units = None if limit is None else max(1, limit // res)

    def to_bytes(units: int | None) -> int | None:
        return None if units is None else units * res

    def update_bounds(guess: int) -> None:
        outcome = trial(guess * res)
        if outcome is TrialOutcome.TOO_LOW:
            if state.best_guess is not None and guess >= state.best_guess:
                raise NonMonotoneOracle(f"{guess * res} B too low but {state.best_guess * res} B succeeded")
            state.lower_bound = guess
        elif outcome is TrialOutcome.TOO_HIGH:
            if state.best_guess is not None and guess <= state.best_guess:
                raise NonMonotoneOracle(f"{guess * res} B too high but {state.best_guess * res} B succeeded")
            state.upper_bound = guess
        else:
            if state.lower_bound is not None and guess <= state.lower_bound:
                raise NonMonotoneOracle(f"{guess * res} B succeeded below failing {state.lower_bound * res} B")
            state.best_guess = guess
            state.upper_bound = guess
        record = TrialRecord(guess * res, outcome, to_bytes(state.lower_bound), to_bytes(state.upper_bound), to_bytes(state.best_guess))
        state.log.append(record)
        if log is not None:
            log.append(record)

    update_bounds(max(1, -(-estimate // res)))
    while True:
        lower, upper = state.lower_bound, state.upper_bound
        if lower is not None and upper is not None and upper - lower == 1:
            break
        if upper is None:
            guess = max(math.ceil(lower * params.growth_rate), lower + params.growth_steps)
            if limit_units is not None and guess > limit_units:
                if lower >= limit_units:
                    break
                guess = limit_units
        elif lower is None:
            if upper <= 1:
                # a working 1-unit arena: zero is the implicit failing bound
                state.lower_bound = 0
                break
            guess = max(1, min(math.floor(upper * params.shrink_rate), upper - params.shrink_steps))
        else:
            guess = (lower + upper) // 2
        update_bounds(guess)

    if state.best_guess is None:
        raise Infeasible("no arena size between the bounds runs on the device")
    return state.best_guess * res
