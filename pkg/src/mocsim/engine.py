"""Two-level checkpoint engine.

Three host-side buffers rotate through snapshot, persist, and recovery roles:
a snapshot lands in a free buffer, is promoted to persisting when no other
persist is in flight (persists run strictly one at a time, in version order),
and after its version is durably published the buffer becomes the recovery
buffer, freeing the previous one.  Buffer contents double as in-memory
recovery sources on nodes that survive a fault.

Recovery resolution picks, per state unit, the source with the greatest
restored iteration among surviving nodes' completed snapshots and the newest
complete store versions covering that unit.  Units on failed nodes can only
come from storage; experts absent everywhere fall back to their initial
state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .planner import PhaseAssignment, RangeAssignment
from .store import StoreEntry
from .topology import EXPERT_KINDS, RankLayout

FREE = "free"
SNAPSHOTTING = "snapshotting"
SNAPSHOTTED = "snapshotted"
PERSISTING = "persisting"
RECOVERY = "recovery"

_COMPLETED = (SNAPSHOTTED, PERSISTING, RECOVERY)


class NoFreeBufferError(RuntimeError):
    """All buffers are busy; the caller must stall until a persist finishes."""


class MissingUnitError(RuntimeError):
    """A non-expert unit exists in no recovery source."""


class UnrecoverableStateError(RuntimeError):
    """No complete version exists to recover from."""


@dataclass
class Buffer:
    buffer_id: int
    status: str = FREE
    version: int | None = None
    iteration: int | None = None
    checkpoint_index: int | None = None
    content: PhaseAssignment | None = None
    # Nodes whose share of the content is still intact in CPU memory.
    valid_nodes: set[int] = field(default_factory=set)

    @property
    def snapshot_completed(self) -> bool:
        return self.status in _COMPLETED

    def clear(self) -> None:
        self.status = FREE
        self.version = None
        self.iteration = None
        self.checkpoint_index = None
        self.content = None
        self.valid_nodes = set()


class TripleBufferSet:
    """The buffer state machine, independent of timing and storage."""

    def __init__(self, n_buffers: int = 3):
        self.buffers = [Buffer(i) for i in range(n_buffers)]

    def _single(self, status: str) -> Buffer | None:
        found = [b for b in self.buffers if b.status == status]
        assert len(found) <= 1, f"multiple buffers in {status}"
        return found[0] if found else None

    @property
    def persisting(self) -> Buffer | None:
        return self._single(PERSISTING)

    @property
    def recovery(self) -> Buffer | None:
        return self._single(RECOVERY)

    @property
    def snapshotting(self) -> Buffer | None:
        return self._single(SNAPSHOTTING)

    def oldest_snapshotted(self) -> Buffer | None:
        waiting = [b for b in self.buffers if b.status == SNAPSHOTTED]
        return min(waiting, key=lambda b: b.version) if waiting else None

    def begin_snapshot(self, version: int, iteration: int, checkpoint_index: int,
                       content: PhaseAssignment | None, nodes: Iterable[int]) -> Buffer:
        if self.snapshotting is not None:
            raise RuntimeError("previous snapshot has not completed")
        free = [b for b in self.buffers if b.status == FREE]
        if not free:
            raise NoFreeBufferError(
                "no free buffer; training must stall until a persist completes")
        buf = min(free, key=lambda b: b.buffer_id)
        buf.status = SNAPSHOTTING
        buf.version = version
        buf.iteration = iteration
        buf.checkpoint_index = checkpoint_index
        buf.content = content
        buf.valid_nodes = set(nodes)
        return buf

    def complete_snapshot(self, buf: Buffer) -> Buffer | None:
        """Mark a snapshot finished; returns the buffer now persisting (this
        one, unless another persist is still in flight)."""
        assert buf.status == SNAPSHOTTING, f"buffer {buf.buffer_id} is {buf.status}"
        buf.status = SNAPSHOTTED
        return self.promote_if_idle()

    def promote_if_idle(self) -> Buffer | None:
        """Start persisting the oldest waiting snapshot if nothing persists."""
        if self.persisting is not None:
            return None
        nxt = self.oldest_snapshotted()
        if nxt is not None:
            nxt.status = PERSISTING
        return nxt

    def complete_persist(self, buf: Buffer) -> Buffer | None:
        """Publish a persisted version: the buffer becomes the recovery
        buffer and the previous recovery buffer is freed.  Returns the next
        buffer promoted to persisting, if any."""
        assert buf.status == PERSISTING, f"buffer {buf.buffer_id} is {buf.status}"
        old = self.recovery
        buf.status = RECOVERY
        if old is not None:
            old.clear()
        return self.promote_if_idle()


class RecoveryDecision(NamedTuple):
    source: str  # "memory" | "storage" | "initial"
    node: int | None
    version: int | None
    restored_iteration: int


@dataclass(frozen=True)
class RecoveryPlan:
    decisions: dict[str, RecoveryDecision]
    restart_iteration: int  # consistent rewind point: the laggard non-expert unit
    version_skew: int       # max - min restored iteration across non-expert units


class CheckpointEngine:
    """Binds the buffer set to a layout and a store."""

    def __init__(self, layout: RankLayout, store):
        self.layout = layout
        self.store = store
        self.buffers = TripleBufferSet()
        self.next_version = 1
        self._unit_sizes = {u.key: u.size_bytes for u in layout.units}
        self._node_ranks = {n: layout.ranks_of_node(n) for n in layout.nodes}

    def begin_snapshot(self, iteration: int, checkpoint_index: int,
                       assignment: PhaseAssignment) -> Buffer:
        buf = self.buffers.begin_snapshot(
            self.next_version, iteration, checkpoint_index, assignment,
            nodes=self.layout.nodes)
        self.next_version += 1
        return buf

    def complete_snapshot(self, buf: Buffer) -> Buffer | None:
        return self.buffers.complete_snapshot(buf)

    def persist_entries(self, buf: Buffer,
                        keep_expert: dict[int, frozenset[int]]) -> list[StoreEntry]:
        """The subset of a buffer's content that persist writes: all
        non-expert entries plus experts selected per layer."""
        entries: list[StoreEntry] = []
        for rank, ranges in sorted(buf.content.items()):
            if self.layout.node_of_rank(rank) not in buf.valid_nodes:
                continue
            for a in ranges:
                unit = self.layout.by_key[a.key]
                if unit.kind in EXPERT_KINDS:
                    if unit.expert not in keep_expert.get(unit.layer, frozenset()):
                        continue
                entries.append(StoreEntry(a.store_key, rank, a.key, a.start, a.stop))
        return entries

    def complete_persist(self, buf: Buffer, entries: list[StoreEntry]) -> Buffer | None:
        self.store.write_version(buf.version, buf.iteration, buf.checkpoint_index,
                                 entries)
        return self.buffers.complete_persist(buf)

    def on_fault(self, failed_nodes: Iterable[int]) -> None:
        """Invalidate failed nodes' buffer contents and unwind in-flight work.

        An unfinished snapshot is discarded; an unfinished persist leaves no
        version behind but its completed snapshot stays available in memory.
        """
        failed = set(failed_nodes)
        for buf in self.buffers.buffers:
            buf.valid_nodes -= failed
            if buf.status == SNAPSHOTTING:
                buf.clear()
            elif buf.status == PERSISTING:
                buf.status = SNAPSHOTTED

    def memory_sources(self, failed_nodes: Iterable[int]
                       ) -> list[tuple[int, int, int, dict[str, list[tuple[int, int]]]]]:
        """(node, version, iteration, unit -> ranges) for every surviving
        node's completed snapshot buffers."""
        failed = set(failed_nodes)
        out = []
        for buf in self.buffers.buffers:
            if not buf.snapshot_completed or buf.content is None:
                continue
            for node in sorted(buf.valid_nodes - failed):
                spans: dict[str, list[tuple[int, int]]] = {}
                for rank in self._node_ranks[node]:
                    for a in buf.content.get(rank, ()):
                        spans.setdefault(a.key, []).append((a.start, a.stop))
                out.append((node, buf.version, buf.iteration, spans))
        return out

    def resolve_recovery(self, failed_nodes: Iterable[int],
                         max_iteration: int | None = None) -> RecoveryPlan:
        """Most-recent-available source per unit after a fault.

        ``max_iteration`` caps usable sources at the fault iteration, so a
        fault during replay never "recovers" past itself.
        """
        failed = set(failed_nodes)
        if self.store.newest_complete() is None:
            raise UnrecoverableStateError("no COMPLETE version in the store")

        # restored iteration per unit from storage: newest complete version
        # whose entries cover the unit's full byte span.
        storage_best: dict[str, tuple[int, int]] = {}  # unit -> (iteration, version)
        for version in reversed(self.store.complete_versions()):
            meta = self.store.meta(version)
            if max_iteration is not None and meta.iteration > max_iteration:
                continue
            for unit in meta.units_covered(self._unit_sizes):
                if unit not in storage_best:
                    storage_best[unit] = (meta.iteration, version)

        memory_best: dict[str, tuple[int, int, int]] = {}  # unit -> (iter, node, version)
        for node, version, iteration, spans in self.memory_sources(failed):
            if max_iteration is not None and iteration > max_iteration:
                continue
            for unit, ranges in spans.items():
                if not _covers(ranges, self._unit_sizes[unit]):
                    continue
                prev = memory_best.get(unit)
                cand = (iteration, node, version)
                if prev is None or (cand[0], -cand[1]) > (prev[0], -prev[1]):
                    memory_best[unit] = cand

        decisions: dict[str, RecoveryDecision] = {}
        for unit in self.layout.units:
            mem = memory_best.get(unit.key)
            sto = storage_best.get(unit.key)
            if mem is not None and (sto is None or mem[0] >= sto[0]):
                decisions[unit.key] = RecoveryDecision("memory", mem[1], mem[2], mem[0])
            elif sto is not None:
                decisions[unit.key] = RecoveryDecision("storage", None, sto[1], sto[0])
            elif unit.kind in EXPERT_KINDS:
                decisions[unit.key] = RecoveryDecision("initial", None, None, 0)
            else:
                raise MissingUnitError(f"unit {unit.key} exists in no source")

        non_expert_iters = [d.restored_iteration
                            for u, d in decisions.items()
                            if self.layout.by_key[u].kind not in EXPERT_KINDS]
        restart = min(non_expert_iters)
        skew = max(non_expert_iters) - restart
        return RecoveryPlan(decisions=decisions, restart_iteration=restart,
                            version_skew=skew)


def _covers(ranges: list[tuple[int, int]], size: int) -> bool:
    pos = 0
    for start, stop in sorted(ranges):
        if start > pos:
            return False
        pos = max(pos, stop)
    return pos >= size
