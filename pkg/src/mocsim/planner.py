"""Checkpoint size accounting and per-rank shard planning.

Three strategies are supported:

* ``baseline``      - rank 0 saves all non-expert weights and only the first
                      EP group saves expert state (the stock framework
                      behaviour).
* ``equal_*``       - expert weights are split into equal contiguous byte
                      ranges across EP-group replicas, and non-expert weight
                      modules go round-robin (descending size) over all ranks.
* ``adaptive_pec``  - expert assignments follow the selection schedule and
                      non-expert modules are placed greedily, largest first,
                      on the rank with the least accumulated workload.

Plans are periodic: assignments are precomputed per schedule phase and reused
for the whole run.  Optimizer shards and other-states always stay with their
owning rank (they are already partitioned by ZeRO-2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

from .selector import SelectionSchedule, schedule_period, select_window
from .topology import (
    EXPERT_WEIGHT,
    ModelSpec,
    ParallelSpec,
    RankLayout,
    SpecValidationError,
    StateUnit,
    expert_optim_key,
    expert_weight_key,
)

BASELINE = "baseline"
EQUAL_FULL = "equal_full"
EQUAL_PEC = "equal_pec"
ADAPTIVE_PEC = "adaptive_pec"
STRATEGIES = (BASELINE, EQUAL_FULL, EQUAL_PEC, ADAPTIVE_PEC)

SEQUENTIAL = "sequential"
LOAD_AWARE = "load_aware"


@dataclass(frozen=True)
class PecConfig:
    """Partial-expert checkpointing knobs.

    ``k_snapshot`` and ``k_persist`` default to ``k_pec`` (single-level
    behaviour); two-level configurations persist a subset of each snapshot.
    """

    k_pec: int
    selection: str = SEQUENTIAL
    k_snapshot: int | None = None
    k_persist: int | None = None

    def __post_init__(self):
        if self.k_snapshot is None:
            object.__setattr__(self, "k_snapshot", self.k_pec)
        if self.k_persist is None:
            object.__setattr__(self, "k_persist", min(self.k_pec, self.k_snapshot))
        if self.k_pec < 1:
            raise SpecValidationError("pec.k_pec >= 1", f"got {self.k_pec}")
        if not (1 <= self.k_persist <= self.k_snapshot):
            raise SpecValidationError(
                "1 <= pec.k_persist <= pec.k_snapshot",
                f"k_persist={self.k_persist}, k_snapshot={self.k_snapshot}")
        if self.selection not in (SEQUENTIAL, LOAD_AWARE):
            raise SpecValidationError(
                "pec.selection in {sequential, load_aware}", f"got {self.selection!r}")

    def validate_against(self, model: ModelSpec) -> None:
        if self.k_snapshot > model.experts_per_layer:
            raise SpecValidationError(
                "pec.k_snapshot <= model.experts_per_layer",
                f"k_snapshot={self.k_snapshot}, N={model.experts_per_layer}")

    def snapshot_schedule(self, n_experts: int) -> SelectionSchedule:
        return SelectionSchedule(n_experts=n_experts, k=min(self.k_snapshot, n_experts),
                                 stride=self.k_persist)

    def persist_window(self, c: int, m: int, n_experts: int) -> frozenset[int]:
        return select_window(c, m, n_experts, width=self.k_persist,
                             stride=self.k_persist)


class RangeAssignment(NamedTuple):
    """One rank's slice of a unit at one checkpoint phase.

    ``part`` is the slice's index within the unit's split (None for a whole
    unit); it disambiguates store keys when a unit is saved in pieces.
    """

    key: str
    start: int
    stop: int
    part: int | None = None

    @property
    def nbytes(self) -> int:
        return self.stop - self.start

    @property
    def store_key(self) -> str:
        return self.key if self.part is None else f"{self.key}.part{self.part}"


PhaseAssignment = dict[int, tuple[RangeAssignment, ...]]


@dataclass(frozen=True)
class ShardPlan:
    """Per-rank, per-phase assignment of unit byte ranges."""

    strategy: str
    period: int
    assignments: tuple[PhaseAssignment, ...]
    workload_bytes: tuple[dict[int, int], ...]

    def phase_of(self, checkpoint_index: int) -> int:
        return checkpoint_index % self.period

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "period": self.period,
            "phases": [
                {
                    "phase": c,
                    "ranks": {
                        str(r): [
                            {"unit": a.key, "start": a.start, "stop": a.stop,
                             "part": a.part}
                            for a in entries
                        ]
                        for r, entries in sorted(phase.items())
                    },
                    "workload_bytes": {str(r): w for r, w
                                       in sorted(self.workload_bytes[c].items())},
                }
                for c, phase in enumerate(self.assignments)
            ],
        }


def full_checkpoint_size(model: ModelSpec) -> int:
    """Bytes of a conventional checkpoint: every parameter's weight and
    optimizer state plus the other-states blob."""
    return ((model.non_expert_params + model.expert_params_total)
            * (model.bytes_weight + model.bytes_optim)
            + model.other_states_bytes)


def pec_checkpoint_size(model: ModelSpec, k: int) -> int:
    """Bytes of a partial checkpoint saving k of N experts per MoE layer."""
    n = model.experts_per_layer
    if not (1 <= k <= n):
        raise SpecValidationError("1 <= k <= model.experts_per_layer",
                                  f"k={k}, N={n}")
    expert_bytes = (model.expert_params_per_expert * model.num_moe_layers * k
                    * (model.bytes_weight + model.bytes_optim))
    return (model.non_expert_params * (model.bytes_weight + model.bytes_optim)
            + expert_bytes + model.other_states_bytes)


def ideal_rank_workload(model: ModelSpec, parallel: ParallelSpec) -> float:
    """Idealized per-rank checkpoint workload for a full save."""
    p_ne, p_e = model.non_expert_params, model.expert_params_total
    return ((p_ne + p_e) * model.bytes_optim / parallel.ep_degree
            + p_ne * model.bytes_weight / parallel.dp_degree
            + p_e * model.bytes_weight / parallel.ep_degree)


def pec_imbalance(model: ModelSpec, parallel: ParallelSpec, k: int) -> bool:
    """True when saving k experts per layer cannot spread evenly over the EP
    ranks, or evenly over the EP groups after an even rank split."""
    saves = k * model.num_moe_layers
    if saves % parallel.ep_degree != 0:
        return True
    per_rank = saves // parallel.ep_degree
    return per_rank % parallel.num_ep_groups != 0


def split_ranges(size: int, parts: int) -> list[tuple[int, int]]:
    """Equal contiguous byte ranges; the last range absorbs the remainder."""
    if parts == 1:
        return [(0, size)]
    q = size // parts
    ranges = [(i * q, (i + 1) * q) for i in range(parts - 1)]
    ranges.append(((parts - 1) * q, size))
    return ranges


def full_due_map(layout: RankLayout) -> dict[int, frozenset[int]]:
    all_experts = frozenset(range(layout.model.experts_per_layer))
    return {m: all_experts for m in range(layout.model.num_moe_layers)}


def _owned_entries(layout: RankLayout) -> dict[int, list[RangeAssignment]]:
    """Optimizer shards and other-states, which never move off their rank."""
    out: dict[int, list[RangeAssignment]] = {r: [] for r in range(layout.n_ranks)}
    for unit in layout.units:
        if unit.kind in ("non_expert_optim", "other_states"):
            (owner,) = unit.replica_ranks
            out[owner].append(RangeAssignment(unit.key, 0, unit.size_bytes))
    return out


def _expert_entries(layout: RankLayout, due: Mapping[int, frozenset[int]],
                    split: bool) -> dict[int, list[RangeAssignment]]:
    """Entries for the due experts' weights and optimizer state.

    With ``split`` each weight unit is cut into one contiguous range per
    EP-group replica; otherwise the first EP group's host saves it whole.
    """
    out: dict[int, list[RangeAssignment]] = {r: [] for r in range(layout.n_ranks)}
    n_groups = layout.parallel.num_ep_groups
    for layer in sorted(due):
        for expert in sorted(due[layer]):
            wkey = expert_weight_key(layer, expert)
            if wkey not in layout.by_key:
                continue  # dense degenerate case: experts carry no bytes
            wsize = layout.by_key[wkey].size_bytes
            if split and n_groups > 1:
                for g, (start, stop) in enumerate(split_ranges(wsize, n_groups)):
                    if stop > start:
                        rank = layout.host_rank(g, layer, expert)
                        out[rank].append(RangeAssignment(wkey, start, stop, part=g))
            else:
                out[layout.host_rank(0, layer, expert)].append(
                    RangeAssignment(wkey, 0, wsize))
            okey = expert_optim_key(layer, expert)
            ounit = layout.by_key[okey]
            (owner,) = ounit.replica_ranks
            out[owner].append(RangeAssignment(okey, 0, ounit.size_bytes))
    return out


def _ne_weight_units(layout: RankLayout) -> list[StateUnit]:
    """Non-expert weight modules in descending size order (stable by input
    position for ties)."""
    order = {name: i for i, (name, _) in enumerate(layout.model.non_expert_modules)}
    mods = [u for u in layout.units if u.kind == "non_expert_weight"]
    mods.sort(key=lambda u: (-u.size_bytes, order[u.module]))
    return mods


def _merge(*entry_maps: Mapping[int, list[RangeAssignment]]) -> PhaseAssignment:
    ranks = set()
    for m in entry_maps:
        ranks.update(m)
    return {r: tuple(e for m in entry_maps for e in m.get(r, ())) for r in sorted(ranks)}


def _workload(phase: PhaseAssignment) -> dict[int, int]:
    return {r: sum(a.nbytes for a in entries) for r, entries in phase.items()}


def build_phase_assignment(layout: RankLayout, due: Mapping[int, frozenset[int]],
                           strategy: str) -> PhaseAssignment:
    """Assignment for one checkpoint with the given due experts per layer.

    Used both to precompute periodic plans and, for load-aware selection, to
    build each checkpoint's assignment on the fly.
    """
    owned = _owned_entries(layout)
    if strategy == BASELINE:
        experts = _expert_entries(layout, due, split=False)
        ne = {0: [RangeAssignment(u.key, 0, u.size_bytes)
                  for u in _ne_weight_units(layout)]}
        return _merge(owned, experts, ne)

    experts = _expert_entries(layout, due, split=True)
    if strategy in (EQUAL_FULL, EQUAL_PEC):
        ne: dict[int, list[RangeAssignment]] = {}
        for i, unit in enumerate(_ne_weight_units(layout)):
            rank = i % layout.n_ranks
            ne.setdefault(rank, []).append(RangeAssignment(unit.key, 0, unit.size_bytes))
        return _merge(owned, experts, ne)

    if strategy == ADAPTIVE_PEC:
        loads = {r: sum(a.nbytes for a in owned[r]) + sum(a.nbytes for a in experts[r])
                 for r in range(layout.n_ranks)}
        ne = {}
        for unit in _ne_weight_units(layout):
            rank = min(loads, key=lambda r: (loads[r], r))
            ne.setdefault(rank, []).append(RangeAssignment(unit.key, 0, unit.size_bytes))
            loads[rank] += unit.size_bytes
        return _merge(owned, experts, ne)

    raise SpecValidationError("strategy in STRATEGIES", f"got {strategy!r}")


def _build_plan(layout: RankLayout, strategy: str,
                pec: PecConfig | None) -> ShardPlan:
    n = layout.model.experts_per_layer
    if pec is None:
        period = 1
        due_maps = [full_due_map(layout)]
    else:
        if pec.selection != SEQUENTIAL:
            raise SpecValidationError(
                "periodic plans require sequential selection",
                f"selection={pec.selection!r}; load-aware assignments are "
                "built per checkpoint")
        pec.validate_against(layout.model)
        period = schedule_period(n, pec.k_persist, pec.k_snapshot)
        sched = pec.snapshot_schedule(n)
        due_maps = [
            {m: sched.selected(c, m) for m in range(layout.model.num_moe_layers)}
            for c in range(period)
        ]
    phases = tuple(build_phase_assignment(layout, due, strategy) for due in due_maps)
    return ShardPlan(strategy=strategy, period=period, assignments=phases,
                     workload_bytes=tuple(_workload(p) for p in phases))


def plan_baseline(layout: RankLayout) -> ShardPlan:
    """Stock framework plan: rank 0 saves all non-expert weights, EP group 0
    saves the expert state it hosts, full saves every checkpoint."""
    return _build_plan(layout, BASELINE, pec=None)


def plan_equal(layout: RankLayout, pec: PecConfig | None = None) -> ShardPlan:
    """Fully sharded plan with equal expert splitting and round-robin
    non-expert module placement."""
    strategy = EQUAL_PEC if pec is not None else EQUAL_FULL
    return _build_plan(layout, strategy, pec)


def plan_adaptive(layout: RankLayout, pec: PecConfig,
                  schedule: SelectionSchedule | None = None) -> ShardPlan:
    """Fully sharded plan that packs non-expert modules greedily around the
    schedule's per-phase expert load."""
    if schedule is not None:
        pec = PecConfig(k_pec=pec.k_pec, selection=pec.selection,
                        k_snapshot=schedule.k, k_persist=schedule.stride)
    return _build_plan(layout, ADAPTIVE_PEC, pec)


def bottleneck_workload(plan: ShardPlan, phase: int) -> tuple[int, int]:
    """(rank, bytes) of the heaviest-loaded rank at a phase; ties go to the
    lowest rank id."""
    if not 0 <= phase < plan.period:
        raise SpecValidationError("0 <= phase < plan.period",
                                  f"phase={phase}, period={plan.period}")
    loads = plan.workload_bytes[phase]
    rank = min(loads, key=lambda r: (-loads[r], r))
    return rank, loads[rank]


def coverage_errors(plan: ShardPlan, layout: RankLayout,
                    due_maps: Iterable[Mapping[int, frozenset[int]]] | None = None,
                    ) -> list[str]:
    """Check the no-gap/no-overlap invariant of every phase.

    Returns human-readable problems (empty when the plan is sound); mainly
    used by tests and the plan dump command.
    """
    problems: list[str] = []
    for c, phase in enumerate(plan.assignments):
        ranges: dict[str, list[tuple[int, int]]] = {}
        for entries in phase.values():
            for a in entries:
                ranges.setdefault(a.key, []).append((a.start, a.stop))
        for key, rs in ranges.items():
            size = layout.by_key[key].size_bytes
            rs.sort()
            pos = 0
            for start, stop in rs:
                if start != pos:
                    problems.append(f"phase {c}: {key} gap/overlap at {start} (expected {pos})")
                    break
                pos = stop
            else:
                if pos != size:
                    problems.append(f"phase {c}: {key} covers {pos} of {size} bytes")
    return problems
