"""Deterministic discrete-event simulation of training with checkpointing.

Time is integer microseconds and every duration is rounded up, so identical
scenarios and seeds replay to byte-identical reports.  An iteration runs
F&B, then the weight update; an in-flight snapshot overlaps F&B and stalls
training by whatever remains at update time.  Checkpoints fire every
``i_ckpt`` iterations, photographing the state of the triggering iteration.
Faults charge a restart, resolve recovery sources, rewind the iteration
counter to the restored non-expert state, and account lost expert tokens
between each expert's restored iteration and the fault.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .engine import CheckpointEngine, NoFreeBufferError
from .planner import (
    ADAPTIVE_PEC,
    BASELINE,
    EQUAL_FULL,
    EQUAL_PEC,
    LOAD_AWARE,
    PecConfig,
    ShardPlan,
    bottleneck_workload,
    build_phase_assignment,
    full_due_map,
    pec_imbalance,
    plan_adaptive,
    plan_baseline,
    plan_equal,
)
from .scenario import POISSON, SCRIPTED, UNIFORM, ZIPF, Scenario
from .selector import (
    DynamicKState,
    LoadCounters,
    dynamic_k_step,
    select_load_aware,
    select_window,
)
from .store import MemoryStore
from .topology import RankLayout, SpecValidationError, build_layout

US = 1_000_000


def seconds_to_us(seconds: float) -> int:
    return math.ceil(seconds * US)


def transfer_us(nbytes: int, bandwidth: float) -> int:
    """Duration of moving nbytes at bandwidth bytes/second, rounded up."""
    if nbytes <= 0:
        return 0
    return math.ceil(nbytes * US / bandwidth)


def route_tokens(iteration: int, scenario: Scenario) -> np.ndarray:
    """Delivered token counts per (layer, expert) for one iteration.

    Routing distributes tokens_per_iteration * top_k assignments per layer,
    then applies the per-expert capacity cap (ceil of the fair share scaled
    by the capacity factor), dropping the excess.  Deterministic in
    (rng_seed, iteration, layer).
    """
    model = scenario.model
    n, layers = model.experts_per_layer, model.num_moe_layers
    out = np.zeros((layers, n), dtype=np.int64)
    for m in range(layers):
        total = scenario.tokens_per_iteration[m] * model.top_k
        if scenario.routing.kind == UNIFORM:
            base, rem = divmod(total, n)
            counts = np.full(n, base, dtype=np.int64)
            counts[:rem] += 1
        elif scenario.routing.kind == ZIPF:
            weights = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64),
                                     scenario.routing.zipf_s)
            cdf = np.cumsum(weights / weights.sum())
            cdf[-1] = 1.0
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([scenario.rng_seed, iteration, m])))
            draws = np.searchsorted(cdf, rng.random(total), side="right")
            counts = np.bincount(np.minimum(draws, n - 1), minlength=n).astype(np.int64)
        else:  # scripted
            counts = np.array(scenario.routing.matrix[m], dtype=np.int64)
        if scenario.capacity_factor is not None:
            cap = math.ceil(scenario.capacity_factor * total / n)
            counts = np.minimum(counts, cap)
        out[m] = counts
    return out


@dataclass
class PltLedger:
    """Token-delivery and loss accounting per expert (and per tier)."""

    n_layers: int
    n_experts: int
    denominators: tuple[int, ...]
    delivered_total: dict[tuple[int, int], int] = field(default_factory=dict)
    last_snapshot_iter: dict[tuple[int, int], int] = field(default_factory=dict)
    last_persist_iter: dict[tuple[int, int], int] = field(default_factory=dict)
    lost_tokens: list[int] = field(default_factory=list)

    def __post_init__(self):
        for m in range(self.n_layers):
            for e in range(self.n_experts):
                self.delivered_total.setdefault((m, e), 0)
                self.last_snapshot_iter.setdefault((m, e), 0)
                self.last_persist_iter.setdefault((m, e), 0)
        if not self.lost_tokens:
            self.lost_tokens = [0] * self.n_layers

    def plt_per_layer(self) -> list[float]:
        return [lost / den for lost, den in zip(self.lost_tokens, self.denominators)]

    def plt_average(self) -> float:
        per = self.plt_per_layer()
        return sum(per) / len(per)


@dataclass
class TimelineEvent:
    time_us: int
    rank: int
    event: str
    detail: str


@dataclass
class FaultRecord:
    iteration: int
    failed_nodes: tuple[int, ...]
    restart_iteration: int
    lost_iterations: int
    plt_added: float
    version_skew: int
    k_after: int | None


@dataclass
class SimReport:
    """Aggregated outputs of one simulation run."""

    strategy: str
    i_total: int
    i_ckpt: int
    iterations_executed: int
    end_time_us: int
    o_save_total_us: int
    o_restart_total_us: int
    o_lost_total_us: int
    o_lost_iterations: int
    o_ckpt_total_us: int
    plt_per_layer: list[float]
    plt_average: float
    checkpoints_triggered: int
    versions_persisted: int
    per_checkpoint_o_save_us: list[tuple[int, int]]
    stall_events: list[dict]
    bottleneck_per_phase: list[tuple[int, int]] | None
    min_feasible_i_ckpt: int | None
    version_skew_per_fault: list[int]
    faults: list[FaultRecord]
    k_trace: list[tuple[int, int]] | None
    timeline: list[TimelineEvent]

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "i_total": self.i_total,
            "i_ckpt": self.i_ckpt,
            "iterations_executed": self.iterations_executed,
            "end_time_us": self.end_time_us,
            "o_save_total_us": self.o_save_total_us,
            "o_restart_total_us": self.o_restart_total_us,
            "o_lost_total_us": self.o_lost_total_us,
            "o_lost_iterations": self.o_lost_iterations,
            "o_ckpt_total_us": self.o_ckpt_total_us,
            "plt": {"per_layer": self.plt_per_layer, "average": self.plt_average},
            "checkpoints_triggered": self.checkpoints_triggered,
            "versions_persisted": self.versions_persisted,
            "per_checkpoint_o_save_us": [[c, v] for c, v in self.per_checkpoint_o_save_us],
            "stall_events": self.stall_events,
            "bottleneck_per_phase": ([[r, b] for r, b in self.bottleneck_per_phase]
                                     if self.bottleneck_per_phase is not None else None),
            "min_feasible_i_ckpt": self.min_feasible_i_ckpt,
            "version_skew": {"per_fault": self.version_skew_per_fault,
                             "max": (max(self.version_skew_per_fault)
                                     if self.version_skew_per_fault else 0)},
            "faults": [{
                "iteration": f.iteration,
                "failed_nodes": list(f.failed_nodes),
                "restart_iteration": f.restart_iteration,
                "lost_iterations": f.lost_iterations,
                "plt_added": f.plt_added,
                "version_skew": f.version_skew,
                "k_after": f.k_after,
            } for f in self.faults],
            "k_trace": ([[it, k] for it, k in self.k_trace]
                        if self.k_trace is not None else None),
        }


def write_timeline_csv(report: SimReport, path) -> None:
    with open(path, "w") as f:
        f.write("time,rank,event,detail\n")
        for ev in report.timeline:
            f.write(f"{ev.time_us},{ev.rank},{ev.event},{ev.detail}\n")


class Simulation:
    """One scenario's mutable simulation state; drive with step()/run()."""

    def __init__(self, scenario: Scenario, store=None, keep_timeline: bool = True):
        self.scenario = scenario
        self.layout: RankLayout = build_layout(scenario.model, scenario.parallel,
                                               scenario.cluster)
        self.store = store if store is not None else MemoryStore()
        self.engine = CheckpointEngine(self.layout, self.store)
        self.keep_timeline = keep_timeline

        cluster = scenario.cluster
        self.fb_us = seconds_to_us(cluster.fb_time)
        self.update_us = seconds_to_us(cluster.update_time)
        self.restart_us = seconds_to_us(cluster.restart_time)
        self.iter_us = self.fb_us + self.update_us

        model = scenario.model
        self.ledger = PltLedger(
            n_layers=model.num_moe_layers, n_experts=model.experts_per_layer,
            denominators=tuple(t * model.top_k * scenario.i_total
                               for t in scenario.tokens_per_iteration))
        self.snap_counters = LoadCounters(model.num_moe_layers, model.experts_per_layer)
        self.persist_counters = LoadCounters(model.num_moe_layers, model.experts_per_layer)
        self.dynamic = (DynamicKState(n_experts=model.experts_per_layer,
                                      current_k=scenario.dynamic_k.initial_k,
                                      initial_k=scenario.dynamic_k.initial_k,
                                      threshold=scenario.dynamic_k.threshold)
                        if scenario.dynamic_k is not None else None)

        self.t = 0
        self.next_iteration = 1
        self.events: list[tuple[int, int, str, object]] = []
        self._seq = 0
        self.inflight_snapshot = None  # (buffer, end_us, ckpt_index)
        self.persist_sel: dict[int, dict[int, frozenset[int]]] = {}
        self.persist_inflight: dict[int, list] = {}
        self._route_cache: dict[int, np.ndarray] = {}
        self._plan_cache: dict[tuple, ShardPlan] = {}
        self.fault_rng = random.Random(f"{scenario.rng_seed}/faults")
        self._scripted_ptr = 0

        self.o_save_us = 0
        self.o_restart_us = 0
        self.o_lost_us = 0
        self.o_lost_iters = 0
        self.ckpt_stall_us: dict[int, int] = {}
        self.stall_events: list[dict] = []
        self.checkpoints_triggered = 0
        self.versions_persisted = 0
        self.persist_durations: list[int] = []
        self.skews: list[int] = []
        self.fault_records: list[FaultRecord] = []
        self.k_trace: list[tuple[int, int]] = []
        self.timeline: list[TimelineEvent] = []
        self.iterations_executed = 0

    # -- helpers -----------------------------------------------------------

    def _emit(self, event: str, detail: str, rank: int = -1) -> None:
        if self.keep_timeline:
            self.timeline.append(TimelineEvent(self.t, rank, event, detail))

    def _push(self, time_us: int, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self.events, (time_us, self._seq, kind, payload))

    def _pop_until(self, target_us: int) -> None:
        """Process pending completions up to target time, then advance."""
        while self.events and self.events[0][0] <= target_us:
            time_us, _, kind, payload = heapq.heappop(self.events)
            self.t = time_us
            if kind == "snap_done":
                self._on_snapshot_done(payload)
            else:
                self._on_persist_done(payload)
        self.t = max(self.t, target_us)

    def _delivered(self, iteration: int) -> np.ndarray:
        arr = self._route_cache.get(iteration)
        if arr is None:
            arr = route_tokens(iteration, self.scenario)
            self._route_cache[iteration] = arr
        return arr

    def _delivered_between(self, m: int, e: int, start_excl: int, stop_incl: int) -> int:
        return sum(int(self._delivered(i)[m, e])
                   for i in range(start_excl + 1, stop_incl + 1))

    # -- selection and planning -------------------------------------------

    def _tiers(self) -> tuple[int, int, str] | None:
        """(k_snapshot, k_persist, selection) or None for full saves."""
        scenario = self.scenario
        if scenario.strategy not in (EQUAL_PEC, ADAPTIVE_PEC):
            return None
        if self.dynamic is not None:
            k = self.dynamic.current_k
            sel = scenario.pec.selection if scenario.pec else "sequential"
            return k, k, sel
        pec = scenario.pec
        return pec.k_snapshot, pec.k_persist, pec.selection

    def _plan(self, tiers) -> ShardPlan:
        key = tiers
        plan = self._plan_cache.get(key)
        if plan is not None:
            return plan
        strategy = self.scenario.strategy
        if tiers is None:
            plan = plan_baseline(self.layout) if strategy == BASELINE else \
                plan_equal(self.layout)
        else:
            k_s, k_p, _ = tiers
            pec = PecConfig(k_pec=k_s, selection="sequential",
                            k_snapshot=k_s, k_persist=k_p)
            plan = (plan_adaptive(self.layout, pec) if strategy == ADAPTIVE_PEC
                    else plan_equal(self.layout, pec))
        self._plan_cache[key] = plan
        return plan

    def _selections(self, c: int, tiers):
        """(snapshot set, persist set) per layer for checkpoint index c."""
        n = self.scenario.model.experts_per_layer
        layers = range(self.scenario.model.num_moe_layers)
        if tiers is None:
            full = frozenset(range(n))
            return {m: full for m in layers}, {m: full for m in layers}
        k_s, k_p, selection = tiers
        if selection == LOAD_AWARE:
            snap = {m: select_load_aware(self.snap_counters, m, k_s) for m in layers}
            persist = {m: select_load_aware(self.persist_counters, m, k_p,
                                            restrict_to=snap[m]) for m in layers}
            return snap, persist
        snap = {m: select_window(c, m, n, width=k_s, stride=k_p) for m in layers}
        persist = {m: select_window(c, m, n, width=k_p, stride=k_p) for m in layers}
        return snap, persist

    # -- pipeline events ---------------------------------------------------

    def _on_snapshot_done(self, buf) -> None:
        self.inflight_snapshot = None
        self._emit("snapshot_complete", f"v{buf.version}")
        promoted = self.engine.complete_snapshot(buf)
        if promoted is not None:
            self._start_persist(promoted)

    def _start_persist(self, buf) -> None:
        entries = self.engine.persist_entries(buf, self.persist_sel[buf.version])
        per_rank: dict[int, int] = {}
        for e in entries:
            per_rank[e.rank] = per_rank.get(e.rank, 0) + (e.stop - e.start)
        dur = max((transfer_us(b, self.scenario.cluster.persist_bandwidth)
                   for b in per_rank.values()), default=0)
        self.persist_inflight[buf.version] = entries
        self.persist_durations.append(dur)
        self._emit("persist_begin", f"v{buf.version}")
        self._push(self.t + dur, "persist_done", buf)

    def _on_persist_done(self, buf) -> None:
        entries = self.persist_inflight.pop(buf.version)
        nxt = self.engine.complete_persist(buf, entries)
        self.versions_persisted += 1
        self._emit("persist_complete", f"v{buf.version}")
        if nxt is not None:
            self._start_persist(nxt)

    # -- per-iteration phases ----------------------------------------------

    def _charge_stall(self, c: int, duration: int, kind: str) -> None:
        if duration <= 0:
            return
        self.o_save_us += duration
        self.ckpt_stall_us[c] = self.ckpt_stall_us.get(c, 0) + duration
        self.stall_events.append({"time_us": self.t, "kind": kind,
                                  "duration_us": duration, "checkpoint_index": c})
        self._emit("stall", f"{kind}:{duration}us:c{c}")

    def _trigger_checkpoint(self, iteration: int) -> None:
        c = iteration // self.scenario.i_ckpt - 1
        self.checkpoints_triggered += 1
        tiers = self._tiers()
        snap_sel, persist_sel = self._selections(c, tiers)

        if tiers is not None and tiers[2] == LOAD_AWARE:
            assignment = build_phase_assignment(self.layout, snap_sel,
                                                self.scenario.strategy)
            snap_bytes = max((sum(a.nbytes for a in ranges)
                              for ranges in assignment.values()), default=0)
        else:
            plan = self._plan(tiers)
            phase = plan.phase_of(c)
            assignment = plan.assignments[phase]
            _, snap_bytes = bottleneck_workload(plan, phase)

        while True:
            try:
                buf = self.engine.begin_snapshot(iteration, c, assignment)
                break
            except NoFreeBufferError:
                if not self.events:
                    raise RuntimeError("no free buffer and no pending persist")
                wait_to = self.events[0][0]
                self._charge_stall(c, wait_to - self.t, "buffer_wait")
                self._pop_until(wait_to)
        self.persist_sel[buf.version] = persist_sel

        for m, experts in snap_sel.items():
            self.snap_counters.mark_saved(m, experts)
            for e in experts:
                self.ledger.last_snapshot_iter[(m, e)] = iteration
        for m, experts in persist_sel.items():
            self.persist_counters.mark_saved(m, experts)
            for e in experts:
                self.ledger.last_persist_iter[(m, e)] = iteration

        snap_dur = transfer_us(snap_bytes, self.scenario.cluster.snapshot_bandwidth)
        self._emit("snapshot_begin", f"v{buf.version}:c{c}:{snap_bytes}B")
        if self.scenario.async_checkpointing:
            self.inflight_snapshot = (buf, self.t + snap_dur, c)
            self._push(self.t + snap_dur, "snap_done", buf)
        else:
            # blocking mode: training halts for the full snapshot + persist
            self.t += snap_dur
            self._charge_stall(c, snap_dur, "blocking_snapshot")
            self._emit("snapshot_complete", f"v{buf.version}")
            promoted = self.engine.complete_snapshot(buf)
            assert promoted is buf
            entries = self.engine.persist_entries(buf, persist_sel)
            per_rank: dict[int, int] = {}
            for e in entries:
                per_rank[e.rank] = per_rank.get(e.rank, 0) + (e.stop - e.start)
            pdur = max((transfer_us(b, self.scenario.cluster.persist_bandwidth)
                        for b in per_rank.values()), default=0)
            self.persist_durations.append(pdur)
            self.t += pdur
            self._charge_stall(c, pdur, "blocking_persist")
            self.engine.complete_persist(buf, entries)
            self.versions_persisted += 1
            self._emit("persist_complete", f"v{buf.version}")

    def _fault_at(self, iteration: int) -> frozenset[int] | None:
        fs = self.scenario.faults
        if fs.kind == SCRIPTED:
            if (self._scripted_ptr < len(fs.events)
                    and fs.events[self._scripted_ptr][0] == iteration):
                nodes = frozenset(fs.events[self._scripted_ptr][1])
                self._scripted_ptr += 1
                return nodes
            return None
        rate = self.scenario.cluster.failure_rate
        if rate > 0 and self.fault_rng.random() < rate:
            return frozenset({self.fault_rng.randrange(self.scenario.cluster.num_nodes)})
        return None

    def _handle_fault(self, iteration: int, failed: frozenset[int]) -> None:
        model = self.scenario.model
        self._emit("fault", "nodes=" + "|".join(map(str, sorted(failed))))

        if self.store.newest_complete() is None:
            restart, skew = 0, 0
            expert_restore = {(m, e): 0 for m in range(model.num_moe_layers)
                              for e in range(model.experts_per_layer)}
            # A restart from scratch reinitializes everything; stale buffer
            # contents must not serve later recoveries.
            for b in self.engine.buffers.buffers:
                b.clear()
        else:
            plan = self.engine.resolve_recovery(failed, max_iteration=iteration)
            restart, skew = plan.restart_iteration, plan.version_skew
            expert_restore = {}
            for m in range(model.num_moe_layers):
                for e in range(model.experts_per_layer):
                    wd = plan.decisions.get(f"ew.L{m}.E{e}")
                    od = plan.decisions.get(f"eo.L{m}.E{e}")
                    if wd is None or od is None:
                        # dense degenerate case: the expert has no own state
                        expert_restore[(m, e)] = restart
                    else:
                        expert_restore[(m, e)] = min(wd.restored_iteration,
                                                     od.restored_iteration)

        fault_lost = [0] * model.num_moe_layers
        for (m, e), r in expert_restore.items():
            fault_lost[m] += self._delivered_between(m, e, r, iteration)
        for m, lost in enumerate(fault_lost):
            self.ledger.lost_tokens[m] += lost
        plt_added = sum(lost / den for lost, den
                        in zip(fault_lost, self.ledger.denominators)) / model.num_moe_layers

        self.engine.on_fault(failed)
        self.events.clear()
        self.inflight_snapshot = None
        self.persist_inflight.clear()

        self.o_restart_us += self.restart_us
        lost_iters = iteration - restart
        self.o_lost_iters += lost_iters
        self.o_lost_us += lost_iters * self.iter_us
        self.t += self.restart_us
        self.skews.append(skew)
        self._emit("recovery", f"restart_iteration={restart}")

        # The pipeline resumes: a snapshot whose persist was cut off is
        # re-persisted from surviving nodes' memory.
        resumed = self.engine.buffers.promote_if_idle()
        if resumed is not None:
            self._start_persist(resumed)

        # Load-aware counters reflect tokens applied beyond each expert's
        # restored state up to the resume point.
        for (m, e), r in expert_restore.items():
            unsaved = self._delivered_between(m, e, r, restart) if r < restart else 0
            self.snap_counters.unsaved_tokens[(m, e)] = unsaved
            self.persist_counters.unsaved_tokens[(m, e)] = unsaved

        k_after = None
        if self.dynamic is not None:
            self.dynamic = dynamic_k_step(self.dynamic, plt_added)
            k_after = self.dynamic.current_k
            self.k_trace.append((iteration, k_after))

        self.fault_records.append(FaultRecord(
            iteration=iteration, failed_nodes=tuple(sorted(failed)),
            restart_iteration=restart, lost_iterations=lost_iters,
            plt_added=plt_added, version_skew=skew, k_after=k_after))
        self.next_iteration = restart + 1

    def step(self) -> None:
        """Advance one training iteration (possibly rewinding on a fault)."""
        i = self.next_iteration
        self.iterations_executed += 1

        fb_end = self.t + self.fb_us
        if self.inflight_snapshot is not None:
            _, snap_end, c = self.inflight_snapshot
            if snap_end > fb_end:
                self._charge_stall(c, snap_end - fb_end, "snapshot_overrun")
                fb_end = snap_end
        self._pop_until(fb_end)
        self._pop_until(self.t + self.update_us)

        delivered = self._delivered(i)
        for m in range(delivered.shape[0]):
            for e in range(delivered.shape[1]):
                tokens = int(delivered[m, e])
                if tokens:
                    self.ledger.delivered_total[(m, e)] += tokens
                    self.snap_counters.add(m, e, tokens)
                    self.persist_counters.add(m, e, tokens)

        if i % self.scenario.i_ckpt == 0:
            self._trigger_checkpoint(i)

        failed = self._fault_at(i)
        if failed is not None:
            self._handle_fault(i, failed)
        else:
            self.next_iteration = i + 1

    def finish(self) -> SimReport:
        """Drain in-flight checkpoint work and assemble the report."""
        while self.events:
            self._pop_until(self.events[0][0])

        tiers0 = self._tiers()
        bottlenecks = None
        if tiers0 is None or tiers0[2] != LOAD_AWARE:
            plan = self._plan(tiers0)
            bottlenecks = [bottleneck_workload(plan, p) for p in range(plan.period)]

        min_ickpt = None
        if self.persist_durations:
            min_ickpt = max(1, math.ceil(max(self.persist_durations) / self.iter_us))

        o_ckpt = self.o_save_us + self.o_restart_us + self.o_lost_us
        return SimReport(
            strategy=self.scenario.strategy,
            i_total=self.scenario.i_total,
            i_ckpt=self.scenario.i_ckpt,
            iterations_executed=self.iterations_executed,
            end_time_us=self.t,
            o_save_total_us=self.o_save_us,
            o_restart_total_us=self.o_restart_us,
            o_lost_total_us=self.o_lost_us,
            o_lost_iterations=self.o_lost_iters,
            o_ckpt_total_us=o_ckpt,
            plt_per_layer=self.ledger.plt_per_layer(),
            plt_average=self.ledger.plt_average(),
            checkpoints_triggered=self.checkpoints_triggered,
            versions_persisted=self.versions_persisted,
            per_checkpoint_o_save_us=sorted(self.ckpt_stall_us.items()),
            stall_events=self.stall_events,
            bottleneck_per_phase=bottlenecks,
            min_feasible_i_ckpt=min_ickpt,
            version_skew_per_fault=self.skews,
            faults=self.fault_records,
            k_trace=self.k_trace if self.dynamic is not None else None,
            timeline=self.timeline,
        )


def run(scenario: Scenario, store=None, keep_timeline: bool = True) -> SimReport:
    """Execute a scenario end to end; deterministic given the seed."""
    sim = Simulation(scenario, store=store, keep_timeline=keep_timeline)
    while sim.next_iteration <= scenario.i_total:
        sim.step()
    return sim.finish()


@dataclass(frozen=True)
class AnalyticOverhead:
    o_ckpt_full_us: float
    o_ckpt_moc_us: float
    moc_wins: bool


def analytic_overhead(*, o_save_full_us: float, i_ckpt_full: int,
                      o_save_moc_us: float, i_ckpt_moc: int,
                      iter_time_us: float, failure_rate: float,
                      o_restart_us: float, i_total: int) -> AnalyticOverhead:
    """Expected total fault-tolerance overhead of the full and reduced
    checkpointing configurations, and whether the reduced one wins.

    Uses the closed form: per-checkpoint overhead amortized over the run
    plus failure_rate * i_total faults, each costing the restart plus half a
    checkpoint interval of lost progress.
    """
    for name, val in (("i_ckpt_full", i_ckpt_full), ("i_ckpt_moc", i_ckpt_moc),
                      ("i_total", i_total), ("iter_time_us", iter_time_us)):
        if val <= 0:
            raise SpecValidationError(f"analytic.{name} > 0", f"got {val}")

    def total(o_save: float, i_ckpt: int) -> float:
        n_faults = failure_rate * i_total
        return (o_save * (i_total / i_ckpt)
                + n_faults * (o_restart_us + i_ckpt * iter_time_us / 2))

    o_full = total(o_save_full_us, i_ckpt_full)
    o_moc = total(o_save_moc_us, i_ckpt_moc)
    lhs = o_save_moc_us / i_ckpt_moc + failure_rate * i_ckpt_moc * iter_time_us / 2
    rhs = o_save_full_us / i_ckpt_full + failure_rate * i_ckpt_full * iter_time_us / 2
    return AnalyticOverhead(o_ckpt_full_us=o_full, o_ckpt_moc_us=o_moc,
                            moc_wins=lhs < rhs)


@dataclass(frozen=True)
class AdaptiveConfig:
    pec: PecConfig
    i_ckpt: int
    snapshot_overlapped: bool  # False when even K_snapshot=1 cannot overlap
    persist_target_met: bool


def adaptive_configure(scenario: Scenario,
                       persist_target_s: float | None = None) -> AdaptiveConfig:
    """Pick the largest K_snapshot whose snapshot hides under F&B, the
    smallest K_persist meeting the persist-time target (1 when no target is
    given), and the checkpoint interval floor set by the persist duration.

    When the chosen K leaves ranks idle (the imbalance predicate holds), K is
    raised to the largest value with the same bottleneck workload.
    """
    layout = build_layout(scenario.model, scenario.parallel, scenario.cluster)
    cluster = scenario.cluster
    fb_us = seconds_to_us(cluster.fb_time)
    iter_us = fb_us + seconds_to_us(cluster.update_time)
    n = scenario.model.experts_per_layer
    strategy = EQUAL_PEC if scenario.strategy == EQUAL_PEC else ADAPTIVE_PEC

    def plan_for(k: int) -> ShardPlan:
        pec = PecConfig(k_pec=k, selection="sequential", k_snapshot=k, k_persist=k)
        return (plan_equal(layout, pec) if strategy == EQUAL_PEC
                else plan_adaptive(layout, pec))

    def bottleneck_bytes(k: int) -> int:
        plan = plan_for(k)
        return max(bottleneck_workload(plan, p)[1] for p in range(plan.period))

    def snap_time(k: int) -> int:
        return transfer_us(bottleneck_bytes(k), cluster.snapshot_bandwidth)

    k_snap, overlapped = 1, False
    for k in range(n, 0, -1):
        if snap_time(k) <= fb_us:
            k_snap, overlapped = k, True
            break

    if overlapped and pec_imbalance(scenario.model, scenario.parallel, k_snap):
        base = bottleneck_bytes(k_snap)
        for k in range(n, k_snap, -1):
            if bottleneck_bytes(k) == base:
                k_snap = k
                break

    def persist_time(k: int) -> int:
        return transfer_us(bottleneck_bytes(k), cluster.persist_bandwidth)

    target_met = True
    if persist_target_s is None:
        k_persist = 1
    else:
        target_us = seconds_to_us(persist_target_s)
        k_persist = 1
        for k in range(1, k_snap + 1):
            if persist_time(k) <= target_us:
                k_persist = k
                break
        else:
            target_met = False
        # the largest K still inside the target, preferring more coverage
        if target_met:
            for k in range(k_snap, 0, -1):
                if persist_time(k) <= target_us:
                    k_persist = k
                    break

    i_ckpt = max(1, math.ceil(persist_time(k_persist) / iter_us))
    pec = PecConfig(k_pec=k_snap, selection="sequential",
                    k_snapshot=k_snap, k_persist=min(k_persist, k_snap))
    return AdaptiveConfig(pec=pec, i_ckpt=i_ckpt,
                          snapshot_overlapped=overlapped,
                          persist_target_met=target_met)
