"""Dangling-tensor aware static memory planning.

Temporary tensors (batch-shaped activations and backward scratch) get
lifetime intervals over a linear step order; a greedy first-fit interval
assignment shares blocks between tensors whose lifetimes never overlap.
The arena is sized once, before training, from the worst shape the
batcher can produce, and never grows afterwards.

The planner counts elements, not bytes; the dtype width is applied when
the backing buffer is allocated. Transient numpy expression scratch (the
register analog inside a fused kernel) is outside the plan by design:
the plan covers every tensor that survives between operators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, UntaggedTensor

PERMANENT = "permanent"
TEMPORARY = "temporary"

_PERMANENT_KINDS = {"parameter", "gradient", "moment"}
_TEMPORARY_KINDS = {"intermediate", "activation", "scratch"}


@dataclass
class Lifetime:
    id: int | str
    size: int
    first: int
    last: int

    def __post_init__(self):
        if self.size < 1:
            raise ShapeMismatch(f"lifetime {self.id}: size must be >= 1")
        if self.first > self.last:
            raise ShapeMismatch(f"lifetime {self.id}: first {self.first} > last {self.last}")


@dataclass
class MemoryPlan:
    blocks: list[int]                   # block sizes, in creation order
    assignment: dict                    # tensor id -> block index
    lifetimes: list[Lifetime]

    @property
    def peak(self) -> int:
        return int(sum(self.blocks))


@dataclass
class TensorTag:
    id: int | str
    kind: str  # parameter | gradient | moment | intermediate | activation | scratch


def classify(tags) -> dict:
    """Split tensors into permanent (params/grads/moments) vs temporary."""
    out = {}
    for t in tags:
        if t.kind in _PERMANENT_KINDS:
            out[t.id] = PERMANENT
        elif t.kind in _TEMPORARY_KINDS:
            out[t.id] = TEMPORARY
        else:
            raise UntaggedTensor(f"tensor {t.id!r} has unknown kind {t.kind!r}")
    return out


def plan(lifetimes) -> MemoryPlan:
    """Greedy first-fit interval assignment.

    Sort by first step ascending (ties: larger size first, then lower
    id); each tensor goes to the lowest-indexed block whose occupants all
    ended before it starts, else a new block. Block size is the max over
    assigned tensors. Deterministic, and insensitive to the input
    permutation (the sort canonicalizes it).
    """
    lifetimes = list(lifetimes)
    if not lifetimes:
        return MemoryPlan(blocks=[], assignment={}, lifetimes=[])
    order = sorted(lifetimes, key=lambda t: (t.first, -t.size, t.id))
    block_sizes: list[int] = []
    block_last: list[int] = []
    assignment = {}
    for t in order:
        for bi in range(len(block_sizes)):
            if block_last[bi] < t.first:
                block_sizes[bi] = max(block_sizes[bi], t.size)
                block_last[bi] = max(block_last[bi], t.last)
                assignment[t.id] = bi
                break
        else:
            block_sizes.append(t.size)
            block_last.append(t.last)
            assignment[t.id] = len(block_sizes) - 1
    return MemoryPlan(blocks=block_sizes, assignment=assignment, lifetimes=order)


def naive_peak(lifetimes) -> int:
    return int(sum(t.size for t in lifetimes))


@dataclass
class PlanShape:
    """Batch/hidden/length/heads sizes of the self-attention backward figure."""

    b: int
    h: int
    l: int
    n: int

    def __post_init__(self):
        if min(self.b, self.h, self.l, self.n) < 1:
            raise ShapeMismatch("all plan shape dims must be >= 1")


def attention_backward_lifetimes(shape: PlanShape) -> list[Lifetime]:
    """Canonical lifetime table for the self-attention backward steps.

    Six BHL-sized tensors, one 3BHL concatenated-QKV gradient and one
    BL2N attention-probability gradient, staged so that first-fit packs
    them into four reuse columns: three of size BHL plus one of size
    max(3BHL, BL2N). The naive sum is 9*BHL + BL2N.
    """
    bhl = shape.b * shape.h * shape.l
    bl2n = shape.b * shape.l * shape.l * shape.n
    return [
        Lifetime("ctx_grad", bhl, 0, 2),
        Lifetime("value_grad", bhl, 0, 3),
        Lifetime("key_grad", bhl, 1, 4),
        Lifetime("prob_grad", bl2n, 0, 2),
        Lifetime("qkv_concat_grad", 3 * bhl, 3, 5),
        Lifetime("query_grad", bhl, 3, 5),
        Lifetime("attn_in_grad", bhl, 4, 6),
        Lifetime("input_grad", bhl, 5, 6),
    ]


def naive_attention_backward_peak(shape: PlanShape) -> int:
    return 9 * shape.b * shape.h * shape.l + shape.b * shape.l * shape.l * shape.n


def estimate_capacity(lifetime_sets) -> int:
    """Arena element count: the worst planner peak over the shapes seen."""
    peaks = [plan(ls).peak for ls in lifetime_sets]
    return max(peaks, default=0)


# ---------------------------------------------------------------------------
# Safety simulator: replay with unique fill patterns
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    step: int
    tensor: int | str
    block: int


@dataclass
class SafetyReport:
    ok: bool
    violations: list[Violation] = field(default_factory=list)


def simulate_plan_safety(p: MemoryPlan, lifetimes=None) -> SafetyReport:
    """Replay the plan writing a unique pattern per tensor.

    Each tensor fills its block region at its first step; at every live
    step the region must still read back its own pattern. Two live
    tensors sharing a block clobber each other and are reported, never
    raised.
    """
    lifetimes = list(lifetimes if lifetimes is not None else p.lifetimes)
    if not lifetimes:
        return SafetyReport(ok=True)
    buffers = [np.full(size, -1, dtype=np.int64) for size in p.blocks]
    patterns = {t.id: i for i, t in enumerate(lifetimes)}
    last_step = max(t.last for t in lifetimes)
    violations = []
    for step in range(last_step + 1):
        for t in lifetimes:
            if t.first == step:
                buffers[p.assignment[t.id]][:t.size] = patterns[t.id]
        for t in lifetimes:
            if t.first <= step <= t.last:
                bi = p.assignment[t.id]
                if not (buffers[bi][:t.size] == patterns[t.id]).all():
                    violations.append(Violation(step=step, tensor=t.id, block=bi))
    return SafetyReport(ok=not violations, violations=violations)


def render_plan_diagram(p: MemoryPlan) -> str:
    """ASCII column diagram: one row per step, one column per block."""
    if not p.lifetimes:
        return "(empty plan)"
    last_step = max(t.last for t in p.lifetimes)
    width = max(len(str(t.id)) for t in p.lifetimes)
    width = max(width, *(len(str(s)) for s in p.blocks))
    header = "step | " + " | ".join(f"b{i}:{s}".ljust(width + 4) for i, s in enumerate(p.blocks))
    lines = [header, "-" * len(header)]
    for step in range(last_step + 1):
        cells = []
        for bi in range(len(p.blocks)):
            occupant = ""
            for t in p.lifetimes:
                if p.assignment[t.id] == bi and t.first <= step <= t.last:
                    occupant = str(t.id)
                    break
            cells.append(occupant.ljust(width + 4))
        lines.append(f"{step:4d} | " + " | ".join(cells))
    return "\n".join(lines)


def lifetimes_from_json(items) -> list[Lifetime]:
    out = []
    for it in items:
        try:
            out.append(Lifetime(id=it["id"], size=int(it["size"]),
                                first=int(it["first"]), last=int(it["last"])))
        except KeyError as exc:
            raise ShapeMismatch(f"lifetime entry missing field {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Arenas
# ---------------------------------------------------------------------------

class NullArena:
    """Plain allocator with live accounting; used outside training runs."""

    def __init__(self):
        self.live = 0

    def alloc(self, shape, dtype=np.float32) -> np.ndarray:
        self.live += 1
        return np.empty(shape, dtype=dtype)

    def free(self, arr) -> None:
        self.live -= 1


class RecordingArena:
    """Allocates normally while recording one Lifetime per allocation.

    Alloc and free events share one linear counter, so the recorded
    intervals replay the exact dependency order of the model code.
    """

    def __init__(self):
        self.events = 0
        self.records: list[Lifetime] = []
        self._open: dict[int, tuple] = {}

    def alloc(self, shape, dtype=np.float32) -> np.ndarray:
        arr = np.empty(shape, dtype=dtype)
        seq = len(self.records)
        self.records.append(Lifetime(id=seq, size=int(arr.size), first=self.events, last=self.events))
        self._open[id(arr)] = (arr, seq)
        self.events += 1
        return arr

    def free(self, arr) -> None:
        key = id(arr)
        if key not in self._open:
            raise ShapeMismatch("free of an array this arena did not allocate")
        _, seq = self._open.pop(key)
        self.records[seq].last = self.events
        self.events += 1

    def finish(self) -> list[Lifetime]:
        if self._open:
            raise ShapeMismatch(f"{len(self._open)} recorded tensors never freed")
        return list(self.records)


class PlannedArena:
    """One preallocated float32 buffer serving planned views.

    Plans are registered per batch-shape key before training; at run
    time the i-th allocation of a step lands in its planned block. The
    buffer is allocated exactly once; realloc_count stays 0 for the life
    of the arena and the high-water mark is tracked in elements.
    """

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.buf = np.empty(self.capacity, dtype=np.float32)
        self.realloc_count = 0
        self.high_water = 0
        self.live_elements = 0
        self._plans: dict = {}
        self._key = None
        self._counter = 0
        self._live: dict[int, tuple] = {}

    def register_plan(self, key, lifetimes) -> MemoryPlan:
        p = plan(lifetimes)
        if p.peak > self.capacity:
            raise ShapeMismatch(f"plan peak {p.peak} exceeds arena capacity {self.capacity}")
        bases = np.concatenate([[0], np.cumsum(p.blocks)]).astype(np.int64)
        # Allocation order = order of first steps (each event has a unique step).
        ordered = sorted(p.lifetimes, key=lambda t: t.first)
        self._plans[key] = (p, bases, ordered)
        return p

    def has_plan(self, key) -> bool:
        return key in self._plans

    def begin(self, key) -> None:
        if key not in self._plans:
            raise ShapeMismatch(f"no plan registered for batch shape {key!r}")
        if self._live:
            raise ShapeMismatch("previous step left live arena tensors")
        self._key = key
        self._counter = 0

    def alloc(self, shape, dtype=np.float32) -> np.ndarray:
        if dtype != np.float32:
            raise ShapeMismatch("planned arena serves float32 tensors only")
        p, bases, ordered = self._plans[self._key]
        if self._counter >= len(ordered):
            raise ShapeMismatch("more allocations than the registered plan recorded")
        rec = ordered[self._counter]
        self._counter += 1
        n = int(np.prod(shape))
        if n != rec.size:
            raise ShapeMismatch(f"allocation {rec.id} size {n} != planned {rec.size}")
        base = int(bases[p.assignment[rec.id]])
        view = self.buf[base:base + n].reshape(shape)
        self._live[id(view)] = (view, n)
        self.live_elements += n
        self.high_water = max(self.high_water, self.live_elements)
        return view

    def free(self, arr) -> None:
        key = id(arr)
        if key not in self._live:
            raise ShapeMismatch("free of an array this arena did not allocate")
        _, n = self._live.pop(key)
        self.live_elements -= n

    def end(self) -> None:
        if self._live:
            raise ShapeMismatch(f"step leaked {len(self._live)} arena tensors")
