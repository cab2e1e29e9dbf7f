"""Host/device memory tiers, transfer timeline, and footprint accounting.

The host pool holds offloaded K/V for sparsity-friendly layers together
with a running per-channel ``max |K|`` so channel scoring never touches
the full key matrix. Device-side state per layer is a double-buffered
critical-key slice, a Top-K staging buffer, and the resident local
window.

The timeline model is a DAG of compute and transfer events scheduled on
two exclusive resources (one compute device, one host-device link) with
earliest-start list scheduling and FIFO tie-breaking. Per decode step
and sparsity-friendly layer, the layer's query is estimated one layer
ahead, the critical-key prefetch overlaps earlier compute whenever the
link is free, and the Top-K fetch is pinned strictly between the layer's
approximate scoring and its sparse attention — that fetch is the one
transfer that cannot be hidden, because it depends on the current
layer's own query.

Footprint accounting evaluates the closed-form per-method element counts
(times ``element_bytes``); the resident local window is reported as its
own row rather than folded into the sparse-layer buffer figure.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from hybridkv.errors import ParameterError, SchedulingError, ShapeError
from hybridkv.identifier import LayerKind
from hybridkv.kv_model import LayerKV

# ---------------------------------------------------------------------------
# Link model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkModel:
    """First-order host-device link: ``duration = base_latency + bytes/bandwidth``."""

    bandwidth: float  # bytes per second
    base_latency: float = 0.0  # seconds per transfer issue

    def __post_init__(self) -> None:
        if self.bandwidth <= 0:
            raise ParameterError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.base_latency < 0:
            raise ParameterError(f"base_latency must be >= 0, got {self.base_latency}")

    def transfer_seconds(self, nbytes: int) -> float:
        """Duration of one transfer; an empty transfer takes no time."""
        if nbytes < 0:
            raise ParameterError("transfer size must be >= 0")
        if nbytes == 0:
            return 0.0
        return self.base_latency + nbytes / self.bandwidth


#: 4 GB/s and 32 GB/s link presets (PCIe 1.0 x16 / PCIe 4.0 x16 class).
PCIE_GEN1_X16 = LinkModel(bandwidth=4e9)
PCIE_GEN4_X16 = LinkModel(bandwidth=32e9)


# ---------------------------------------------------------------------------
# Host pool
# ---------------------------------------------------------------------------


class HostPool:
    """Offloaded per-layer K/V storage plus running per-channel key maxima.

    Rows gathered back are bit-identical to what was offloaded; the pool
    is append-only during decode and the channel maxima update
    incrementally on each append, keeping stage-1 scoring O(head_dim).
    """

    def __init__(self) -> None:
        self._layers: dict[int, LayerKV] = {}
        self._channel_max: dict[int, np.ndarray] = {}

    def offload_layer(self, layer: int, cache: LayerKV) -> None:
        if layer in self._layers:
            raise SchedulingError(f"layer {layer} already offloaded")
        copy = LayerKV.from_arrays(cache.keys, cache.values)
        self._layers[layer] = copy
        self._channel_max[layer] = np.abs(copy.keys).max(axis=1)  # [heads, head_dim]

    def has_layer(self, layer: int) -> bool:
        return layer in self._layers

    def _require(self, layer: int) -> LayerKV:
        if layer not in self._layers:
            raise ParameterError(f"layer {layer} is not offloaded")
        return self._layers[layer]

    def seq_len(self, layer: int) -> int:
        return self._require(layer).seq_len

    def append(self, layer: int, new_key: np.ndarray, new_value: np.ndarray) -> None:
        cache = self._require(layer)
        cache.append(new_key, new_value)
        self._channel_max[layer] = np.maximum(
            self._channel_max[layer], np.abs(np.asarray(new_key, dtype=np.float64))
        )

    def channel_abs_max(self, layer: int) -> np.ndarray:
        """Running ``max_j |K[j, i]|`` per head, shape ``[heads, head_dim]``."""
        self._require(layer)
        return self._channel_max[layer]

    def gather(self, layer: int, head: int, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Key and value rows for one head, in the requested index order."""
        cache = self._require(layer)
        indices = np.asarray(indices, dtype=np.intp).reshape(-1)
        if indices.size == 0:
            empty = np.empty((0, cache.head_dim), dtype=np.float64)
            return empty, empty.copy()
        if indices.min() < 0 or indices.max() >= cache.seq_len:
            raise ParameterError("gather index out of range")
        return cache.keys[head][indices].copy(), cache.values[head][indices].copy()

    def gather_key_columns(self, layer: int, head: int, channels: np.ndarray) -> np.ndarray:
        """Key columns (all tokens, selected channels) for one head."""
        cache = self._require(layer)
        channels = np.asarray(channels, dtype=np.intp).reshape(-1)
        if channels.size and (channels.min() < 0 or channels.max() >= cache.head_dim):
            raise ParameterError("channel index out of range")
        return cache.keys[head][:, channels].copy()


# ---------------------------------------------------------------------------
# Device buffers
# ---------------------------------------------------------------------------


class DeviceBuffers:
    """Device-resident state for one sparsity-friendly layer.

    Two critical-key slots alternate between decode steps so the slot
    being written by a prefetch is never the slot a scoring pass reads.
    The local window is served from an append-only device mirror of the
    most recent rows; fetched Top-K rows land in a staging buffer.
    """

    def __init__(self, num_heads: int, head_dim: int) -> None:
        self.num_heads = num_heads
        self.head_dim = head_dim
        self._slots: list[dict | None] = [None, None]
        self._writing: list[bool] = [False, False]
        self.local = LayerKV(num_heads, head_dim)
        self.staged_topk: dict | None = None

    @staticmethod
    def slot_for_step(step: int) -> int:
        return step % 2

    def begin_prefetch(self, step: int) -> int:
        slot = self.slot_for_step(step)
        if self._writing[slot]:
            raise SchedulingError(f"critical-key slot {slot} already has a prefetch in flight")
        self._writing[slot] = True
        return slot

    def complete_prefetch(
        self, slot: int, per_head: list[tuple[np.ndarray, np.ndarray]], step: int
    ) -> None:
        """Seal a slot with ``(channels, key_columns)`` pairs per head."""
        if not self._writing[slot]:
            raise SchedulingError(f"slot {slot} has no prefetch in flight")
        self._slots[slot] = {"step": step, "per_head": per_head}
        self._writing[slot] = False

    def read_slot(self, step: int) -> list[tuple[np.ndarray, np.ndarray]]:
        slot = self.slot_for_step(step)
        if self._writing[slot]:
            raise SchedulingError(f"slot {slot} is being written")
        content = self._slots[slot]
        if content is None or content["step"] != step:
            raise SchedulingError(f"slot {slot} does not hold step {step}")
        return content["per_head"]


# ---------------------------------------------------------------------------
# Transfer helpers (data movement + size accounting)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransferRequest:
    """Size and labeling of one host-device transfer."""

    label: str
    layer: int
    step: int
    nbytes: int


def prefetch_critical_keys(
    pool: HostPool,
    layer: int,
    channel_sets: Sequence[np.ndarray],
    buffers: DeviceBuffers,
    step: int,
    element_bytes: int = 2,
) -> TransferRequest:
    """Stage the selected key columns into the step's write slot.

    The transfer moves ``n * d_s`` stored elements per head.
    """
    slot = buffers.begin_prefetch(step)
    per_head = []
    nbytes = 0
    for head, channels in enumerate(channel_sets):
        cols = pool.gather_key_columns(layer, head, channels)
        per_head.append((np.asarray(channels, dtype=np.intp).copy(), cols))
        nbytes += cols.size * element_bytes
    buffers.complete_prefetch(slot, per_head, step)
    return TransferRequest(label="prefetch", layer=layer, step=step, nbytes=nbytes)


def fetch_topk(
    pool: HostPool,
    layer: int,
    indices_per_head: Sequence[np.ndarray],
    buffers: DeviceBuffers | None,
    step: int,
    element_bytes: int = 2,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], TransferRequest]:
    """Fetch the selected tokens' full K and V rows from the host.

    The transfer moves ``2 * rows * head_dim`` stored elements (keys and
    values) summed over heads.
    """
    rows = []
    total_rows = 0
    head_dim = None
    for head, indices in enumerate(indices_per_head):
        k_rows, v_rows = pool.gather(layer, head, indices)
        rows.append((k_rows, v_rows))
        total_rows += k_rows.shape[0]
        head_dim = k_rows.shape[1]
    nbytes = 2 * total_rows * (head_dim or 0) * element_bytes
    if buffers is not None:
        buffers.staged_topk = {"step": step, "rows": rows}
    return rows, TransferRequest(label="topk_fetch", layer=layer, step=step, nbytes=nbytes)


# ---------------------------------------------------------------------------
# Timeline
# ---------------------------------------------------------------------------


class EventKind(str, enum.Enum):
    COMPUTE = "compute"
    TRANSFER = "transfer"


@dataclass
class TimelineEvent:
    """One scheduled unit of work.

    ``start`` is filled by :func:`simulate`; ``depends_on`` lists event
    ids that must end before this event may begin. Slot annotations drive
    the double-buffer exclusion check.
    """

    id: int
    kind: EventKind
    layer: int
    step: int
    label: str
    duration: float
    depends_on: list[int] = field(default_factory=list)
    start: float | None = None
    writes_slot: tuple[int, int] | None = None  # (layer, slot)
    reads_slot: tuple[int, int] | None = None

    @property
    def end(self) -> float:
        if self.start is None:
            raise SchedulingError("event has not been scheduled")
        return self.start + self.duration

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "layer": self.layer,
            "step": self.step,
            "label": self.label,
            "start": self.start,
            "duration": self.duration,
            "depends_on": list(self.depends_on),
        }


@dataclass
class TransferTimeline:
    """Ordered event list over one or more decode steps."""

    events: list[TimelineEvent]
    link: LinkModel

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.events], indent=2)


@dataclass(frozen=True)
class LayerCosts:
    """Synthetic per-layer compute costs feeding the timeline.

    Attributes:
        compute: seconds of attention + FFN compute per layer.
        estimate: seconds for one query-estimation + channel-selection pass.
        score: seconds for one approximate-scoring + Top-K selection pass.
    """

    compute: tuple[float, ...]
    estimate: float = 0.0
    score: float = 0.0

    def __post_init__(self) -> None:
        if any(c < 0 for c in self.compute) or self.estimate < 0 or self.score < 0:
            raise ParameterError("costs must be non-negative")


def _is_sparse(label: LayerKind | str) -> bool:
    value = label.value if isinstance(label, LayerKind) else str(label)
    return value == LayerKind.SPARSITY_FRIENDLY.value


def build_timeline(
    labels: Sequence[LayerKind | str],
    costs: LayerCosts,
    link: LinkModel,
    prefetch_bytes: Sequence[Sequence[int]],
    fetch_bytes: Sequence[Sequence[int]],
) -> TransferTimeline:
    """Construct the event DAG for a run of decode steps.

    For each sparsity-friendly layer ``l`` the estimation event becomes
    ready the moment layer ``l-1``'s input hidden state exists, so the
    critical-key prefetch can overlap layer ``l-1`` compute; the Top-K
    fetch depends on the layer's own scoring; the layer's compute depends
    on the fetch. Quantization-friendly layers contribute compute only.
    A prefetch reuses the slot last read two steps earlier, and carries
    that read as a dependency (write-after-read).

    Args:
        labels: per-layer kinds.
        costs: per-layer compute plus estimation/scoring costs.
        link: transfer model.
        prefetch_bytes: ``[num_steps][num_layers]`` critical-key sizes.
        fetch_bytes: ``[num_steps][num_layers]`` Top-K fetch sizes.

    Returns:
        Unscheduled :class:`TransferTimeline`.
    """
    num_layers = len(labels)
    if len(costs.compute) != num_layers:
        raise ShapeError(f"{len(costs.compute)} compute costs for {num_layers} layers")
    num_steps = len(prefetch_bytes)
    if len(fetch_bytes) != num_steps:
        raise ShapeError("prefetch_bytes and fetch_bytes must cover the same steps")

    events: list[TimelineEvent] = []
    main_ids: dict[tuple[int, int], int] = {}
    score_ids: dict[tuple[int, int], int] = {}

    def add(kind, layer, step, label, duration, deps, writes=None, reads=None) -> int:
        event = TimelineEvent(
            id=len(events),
            kind=kind,
            layer=layer,
            step=step,
            label=label,
            duration=duration,
            depends_on=[d for d in deps if d is not None],
            writes_slot=writes,
            reads_slot=reads,
        )
        events.append(event)
        return event.id

    def hidden_dep(step: int, layer: int) -> int | None:
        # event whose end publishes the input hidden state of `layer`
        if layer >= 1:
            return main_ids.get((step, layer - 1))
        if step >= 1:
            return main_ids.get((step - 1, num_layers - 1))
        return None

    for t in range(num_steps):
        est_ids: dict[int, int] = {}

        def add_estimate(layer: int) -> None:
            if layer < num_layers and _is_sparse(labels[layer]):
                est_ids[layer] = add(
                    EventKind.COMPUTE,
                    layer,
                    t,
                    "estimate",
                    costs.estimate,
                    [hidden_dep(t, max(layer - 1, 0))],
                )

        # hidden states for layers 0 and 1 both exist at step start
        add_estimate(0)
        add_estimate(1)
        for l in range(num_layers):
            if _is_sparse(labels[l]):
                slot = t % 2
                prefetch_deps = [est_ids[l]]
                if (t - 2, l) in score_ids:
                    prefetch_deps.append(score_ids[(t - 2, l)])
                prefetch = add(
                    EventKind.TRANSFER,
                    l,
                    t,
                    "prefetch",
                    link.transfer_seconds(int(prefetch_bytes[t][l])),
                    prefetch_deps,
                    writes=(l, slot),
                )
                score = add(
                    EventKind.COMPUTE,
                    l,
                    t,
                    "score",
                    costs.score,
                    [prefetch, hidden_dep(t, l)],
                    reads=(l, slot),
                )
                score_ids[(t, l)] = score
                fetch = add(
                    EventKind.TRANSFER,
                    l,
                    t,
                    "topk_fetch",
                    link.transfer_seconds(int(fetch_bytes[t][l])),
                    [score],
                )
                main_ids[(t, l)] = add(
                    EventKind.COMPUTE, l, t, "compute", costs.compute[l], [fetch, hidden_dep(t, l)]
                )
            else:
                main_ids[(t, l)] = add(
                    EventKind.COMPUTE, l, t, "compute", costs.compute[l], [hidden_dep(t, l)]
                )
            add_estimate(l + 2)

    return TransferTimeline(events=events, link=link)


@dataclass
class SimulationResult:
    """Schedule statistics returned by :func:`simulate`."""

    timeline: TransferTimeline
    total_seconds: float
    per_layer: dict[int, dict[str, float]]
    overlap_fraction: float
    stall_seconds: float

    def to_dict(self) -> dict:
        return {
            "total_seconds": self.total_seconds,
            "per_layer": {
                str(layer): dict(parts) for layer, parts in sorted(self.per_layer.items())
            },
            "overlap_fraction": self.overlap_fraction,
            "stall_seconds": self.stall_seconds,
        }


def _busy_intervals(events: Iterable[TimelineEvent]) -> list[tuple[float, float]]:
    spans = sorted((e.start, e.end) for e in events if e.duration > 0)
    merged: list[tuple[float, float]] = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def _intersection_seconds(a: list[tuple[float, float]], b: list[tuple[float, float]]) -> float:
    total = 0.0
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return total


def simulate(timeline: TransferTimeline) -> SimulationResult:
    """Schedule a timeline with earliest-start list scheduling.

    Events become ready when all dependencies end and are admitted to
    their resource (compute or link, each exclusive) in FIFO order of
    readiness, ties broken by event id. The function fills event start
    times in place and verifies the double-buffer exclusion: no interval
    writing a critical-key slot may overlap any interval reading it.
    """
    events = timeline.events
    indegree = {e.id: len(e.depends_on) for e in events}
    children: dict[int, list[int]] = {e.id: [] for e in events}
    for e in events:
        for dep in e.depends_on:
            if dep not in children:
                raise SchedulingError(f"event {e.id} depends on unknown event {dep}")
            children[dep].append(e.id)

    by_id = {e.id: e for e in events}
    ready_time = {e.id: 0.0 for e in events}
    heap = [(0.0, e.id) for e in events if indegree[e.id] == 0]
    heapq.heapify(heap)
    free = {EventKind.COMPUTE: 0.0, EventKind.TRANSFER: 0.0}
    scheduled = 0

    while heap:
        ready, eid = heapq.heappop(heap)
        event = by_id[eid]
        event.start = max(ready, free[event.kind])
        free[event.kind] = event.end
        scheduled += 1
        for child in children[eid]:
            ready_time[child] = max(ready_time[child], event.end)
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(heap, (ready_time[child], child))

    if scheduled != len(events):
        raise SchedulingError("cyclic dependency in timeline")

    for e in events:
        for dep in e.depends_on:
            if e.start < by_id[dep].end - 1e-12:
                raise SchedulingError("dependency violated by scheduler")

    # double-buffer exclusion: writes of a slot never overlap reads of it
    writes: dict[tuple[int, int], list[TimelineEvent]] = {}
    reads: dict[tuple[int, int], list[TimelineEvent]] = {}
    for e in events:
        if e.writes_slot is not None:
            writes.setdefault(e.writes_slot, []).append(e)
        if e.reads_slot is not None:
            reads.setdefault(e.reads_slot, []).append(e)
    for slot, writers in writes.items():
        for w in writers:
            for r in reads.get(slot, []):
                if w.start < r.end and r.start < w.end and w.duration > 0 and r.duration > 0:
                    raise SchedulingError(
                        f"slot {slot} written by event {w.id} while read by event {r.id}"
                    )

    total = max((e.end for e in events), default=0.0)
    per_layer: dict[int, dict[str, float]] = {}
    for e in events:
        bucket = per_layer.setdefault(e.layer, {"compute": 0.0, "transfer": 0.0})
        bucket["compute" if e.kind is EventKind.COMPUTE else "transfer"] += e.duration

    compute_busy = _busy_intervals(e for e in events if e.kind is EventKind.COMPUTE)
    transfer_busy = _busy_intervals(e for e in events if e.kind is EventKind.TRANSFER)
    transfer_total = sum(hi - lo for lo, hi in transfer_busy)
    overlap = _intersection_seconds(compute_busy, transfer_busy)
    overlap_fraction = overlap / transfer_total if transfer_total > 0 else 0.0

    stall = 0.0
    for e in events:
        if e.label != "score":
            continue
        prefetch_end = 0.0
        other_ready = 0.0
        for dep in e.depends_on:
            d = by_id[dep]
            if d.label == "prefetch":
                prefetch_end = d.end
            else:
                other_ready = max(other_ready, d.end)
        stall += max(0.0, prefetch_end - other_ready)

    return SimulationResult(
        timeline=timeline,
        total_seconds=total,
        per_layer=per_layer,
        overlap_fraction=overlap_fraction,
        stall_seconds=stall,
    )


# ---------------------------------------------------------------------------
# Memory footprint
# ---------------------------------------------------------------------------


class FootprintMethod(str, enum.Enum):
    """Methods covered by the closed-form memory comparison."""

    ORIGINAL = "original"
    SNAPKV = "snapkv"
    QUEST = "quest"
    HYBRID_QUANT = "hybridkv_q"   # per quantization-friendly layer
    HYBRID_SPARSE = "hybridkv_s"  # per sparsity-friendly layer (critical-key double buffer)


def _fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(str(x))


def compression_factor(bits: int, group_size: int) -> Fraction:
    """Per-layer cache shrinkage of the quantized method vs full storage.

    ``1 / (bits/16 + 2/group_size)``: the codes keep ``bits`` of each
    16-bit element and every group stores a 16-bit zero-point and scale.
    """
    if bits not in (1, 2):
        raise ParameterError(f"bits must be 1 or 2, got {bits}")
    if group_size < 1:
        raise ParameterError("group_size must be >= 1")
    return 1 / (Fraction(bits, 16) + Fraction(2, group_size))


def memory_footprint(
    method: FootprintMethod | str,
    *,
    seq_len: int,
    num_kv_heads: int,
    head_dim: int,
    element_bytes: int = 2,
    num_layers: int | None = None,
    alpha: float | None = None,
    beta: float | None = None,
    num_quant_layers: int | None = None,
    bits: int = 1,
    group_size: int | None = None,
    num_critical_channels: int | None = None,
) -> int | float:
    """Closed-form cache bytes for one method.

    Element counts::

        original       2 L n h d_h
        snapkv         2 alpha L n h d_h          (token budget alpha)
        quest          2 L n h d_h (1 + 1/beta)   (page size beta)
        hybridkv_q     2 l_q n h d_h (b/16 + 2/g) (per-group 16-bit zero/scale)
        hybridkv_s     2 n h d_s                  (double-buffered key slice)

    multiplied by ``element_bytes``. Evaluation is exact rational
    arithmetic; an integral result is returned as ``int``.

    Raises:
        ParameterError: if a parameter the method needs is missing.
    """
    method = FootprintMethod(method)
    n, h, d_h = seq_len, num_kv_heads, head_dim

    def need(value, name):
        if value is None:
            raise ParameterError(f"{method.value} footprint requires {name}")
        return value

    if method is FootprintMethod.ORIGINAL:
        count = 2 * need(num_layers, "num_layers") * n * h * d_h
        count = Fraction(count)
    elif method is FootprintMethod.SNAPKV:
        count = 2 * _fraction(need(alpha, "alpha")) * need(num_layers, "num_layers") * n * h * d_h
    elif method is FootprintMethod.QUEST:
        count = (
            2 * need(num_layers, "num_layers") * n * h * d_h
            * (1 + 1 / _fraction(need(beta, "beta")))
        )
    elif method is FootprintMethod.HYBRID_QUANT:
        factor = Fraction(bits, 16) + Fraction(2, need(group_size, "group_size"))
        count = 2 * need(num_quant_layers, "num_quant_layers") * n * h * d_h * factor
    else:
        count = Fraction(2 * n * h * need(num_critical_channels, "num_critical_channels"))
    total = count * element_bytes
    return int(total) if total.denominator == 1 else float(total)


def local_window_bytes(
    n_local: int, num_kv_heads: int, head_dim: int, element_bytes: int = 2
) -> int:
    """Device bytes of one layer's resident K and V window rows."""
    return n_local * 2 * num_kv_heads * head_dim * element_bytes


def hybrid_footprint_rows(
    labels: Sequence[LayerKind | str],
    *,
    seq_len: int,
    num_kv_heads: int,
    head_dim: int,
    bits: int,
    group_size: int,
    num_critical_channels: int,
    n_local: int,
    element_bytes: int = 2,
) -> list[dict]:
    """Per-layer footprint rows for the hybrid scheme plus the baseline.

    Each layer yields an ``original`` row and the row of its assigned
    method; sparsity-friendly layers additionally report their resident
    local window.
    """
    rows = []
    for layer, label in enumerate(labels):
        original = memory_footprint(
            FootprintMethod.ORIGINAL,
            seq_len=seq_len,
            num_kv_heads=num_kv_heads,
            head_dim=head_dim,
            num_layers=1,
            element_bytes=element_bytes,
        )
        rows.append({"method": "original", "layer": layer, "bytes": original})
        if _is_sparse(label):
            rows.append(
                {
                    "method": FootprintMethod.HYBRID_SPARSE.value,
                    "layer": layer,
                    "bytes": memory_footprint(
                        FootprintMethod.HYBRID_SPARSE,
                        seq_len=seq_len,
                        num_kv_heads=num_kv_heads,
                        head_dim=head_dim,
                        num_critical_channels=num_critical_channels,
                        element_bytes=element_bytes,
                    ),
                }
            )
            rows.append(
                {
                    "method": "local_window",
                    "layer": layer,
                    "bytes": local_window_bytes(
                        min(n_local, seq_len), num_kv_heads, head_dim, element_bytes
                    ),
                }
            )
        else:
            rows.append(
                {
                    "method": FootprintMethod.HYBRID_QUANT.value,
                    "layer": layer,
                    "bytes": memory_footprint(
                        FootprintMethod.HYBRID_QUANT,
                        seq_len=seq_len,
                        num_kv_heads=num_kv_heads,
                        head_dim=head_dim,
                        num_quant_layers=1,
                        bits=bits,
                        group_size=group_size,
                        element_bytes=element_bytes,
                    ),
                }
            )
    return rows
