"""Model, parallel-deployment, and cluster descriptions, plus the derived
placement of every saveable state unit across ranks.

The deployment model is ZeRO-2 data parallelism combined with expert
parallelism: non-expert weights are replicated on every DP rank, non-expert
optimizer state is sharded one slice per DP rank, and each expert lives on
exactly one rank per EP group.  TP/PP degrees only multiply the GPU count;
they never split state units further.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class SpecValidationError(ValueError):
    """A spec violates one of its invariants.

    ``constraint`` names the failing constraint so callers (and the CLI) can
    report exactly which rule was broken.
    """

    def __init__(self, constraint: str, message: str):
        super().__init__(f"{constraint}: {message}")
        self.constraint = constraint


def _require(ok: bool, constraint: str, message: str) -> None:
    if not ok:
        raise SpecValidationError(constraint, message)


@dataclass(frozen=True)
class ModelSpec:
    """Parameter counts and byte widths of one MoE model."""

    num_moe_layers: int
    experts_per_layer: int
    top_k: int
    non_expert_params: int
    expert_params_per_expert: int
    bytes_weight: int
    bytes_optim: int
    other_states_bytes: int = 0
    # Ordered (module name, parameter count) pairs; counts must sum to
    # non_expert_params exactly.  Module names become store keys, so they are
    # restricted to filename-safe characters.
    non_expert_modules: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not self.non_expert_modules:
            object.__setattr__(
                self, "non_expert_modules", (("dense", self.non_expert_params),)
            )
        else:
            object.__setattr__(
                self, "non_expert_modules", tuple(map(tuple, self.non_expert_modules))
            )
        self.validate()

    def validate(self) -> None:
        for name in (
            "num_moe_layers",
            "experts_per_layer",
            "top_k",
            "non_expert_params",
            "bytes_weight",
            "bytes_optim",
        ):
            _require(getattr(self, name) >= 1, f"model.{name} >= 1",
                     f"got {getattr(self, name)}")
        # 0 expresses the dense degenerate case (no expert bytes to save)
        _require(self.expert_params_per_expert >= 0,
                 "model.expert_params_per_expert >= 0",
                 f"got {self.expert_params_per_expert}")
        _require(self.other_states_bytes >= 0, "model.other_states_bytes >= 0",
                 f"got {self.other_states_bytes}")
        _require(self.top_k <= self.experts_per_layer,
                 "model.top_k <= model.experts_per_layer",
                 f"top_k={self.top_k}, experts_per_layer={self.experts_per_layer}")
        total = sum(count for _, count in self.non_expert_modules)
        _require(total == self.non_expert_params,
                 "sum(model.non_expert_modules) == model.non_expert_params",
                 f"modules sum to {total}, non_expert_params={self.non_expert_params}")
        seen: set[str] = set()
        for name, count in self.non_expert_modules:
            _require(count >= 1, "model.non_expert_modules counts >= 1",
                     f"module {name!r} has count {count}")
            _require(bool(name) and all(c.isalnum() or c in "_-" for c in name),
                     "model.non_expert_modules names are filename-safe",
                     f"bad module name {name!r}")
            _require(name not in seen, "model.non_expert_modules names unique",
                     f"duplicate module name {name!r}")
            seen.add(name)

    @property
    def expert_params_total(self) -> int:
        """P_e: parameters across all experts of all MoE layers."""
        return (self.expert_params_per_expert
                * self.experts_per_layer * self.num_moe_layers)


@dataclass(frozen=True)
class ParallelSpec:
    """DP/EP/TP/PP degrees of the deployment."""

    dp_degree: int
    ep_degree: int
    tp_degree: int = 1
    pp_degree: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("dp_degree", "ep_degree", "tp_degree", "pp_degree"):
            _require(getattr(self, name) >= 1, f"parallel.{name} >= 1",
                     f"got {getattr(self, name)}")
        _require(self.dp_degree % self.ep_degree == 0,
                 "parallel.dp_degree % parallel.ep_degree == 0",
                 f"dp_degree={self.dp_degree}, ep_degree={self.ep_degree}")

    @property
    def num_ep_groups(self) -> int:
        return self.dp_degree // self.ep_degree


@dataclass(frozen=True)
class ClusterSpec:
    """Node counts, bandwidths, and timing constants of the cluster.

    Times are in seconds, bandwidths in bytes/second per rank, and
    failure_rate is the per-iteration fault probability (0 when faults are
    scripted).
    """

    num_nodes: int
    gpus_per_node: int
    snapshot_bandwidth: float
    persist_bandwidth: float
    fb_time: float
    update_time: float
    restart_time: float
    failure_rate: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        _require(self.num_nodes >= 1, "cluster.num_nodes >= 1", f"got {self.num_nodes}")
        _require(self.gpus_per_node >= 1, "cluster.gpus_per_node >= 1",
                 f"got {self.gpus_per_node}")
        for name in ("snapshot_bandwidth", "persist_bandwidth",
                     "fb_time", "update_time", "restart_time"):
            _require(getattr(self, name) > 0, f"cluster.{name} > 0",
                     f"got {getattr(self, name)}")
        _require(0.0 <= self.failure_rate < 1.0, "0 <= cluster.failure_rate < 1",
                 f"got {self.failure_rate}")


# StateUnit kinds.
EXPERT_WEIGHT = "expert_weight"
EXPERT_OPTIM = "expert_optim"
NON_EXPERT_WEIGHT = "non_expert_weight"
NON_EXPERT_OPTIM = "non_expert_optim"
OTHER_STATES = "other_states"

NON_EXPERT_KINDS = frozenset({NON_EXPERT_WEIGHT, NON_EXPERT_OPTIM, OTHER_STATES})
EXPERT_KINDS = frozenset({EXPERT_WEIGHT, EXPERT_OPTIM})


@dataclass(frozen=True)
class StateUnit:
    """One atomic saveable piece of model state.

    ``key`` doubles as the unit id and as the store key prefix:
    ``ew.L<layer>.E<expert>``, ``eo.L<layer>.E<expert>``, ``new.<module>``,
    ``neo.r<rank>``, ``other.r<rank>``.
    """

    key: str
    kind: str
    size_bytes: int
    replica_ranks: frozenset[int]
    layer: int | None = None
    expert: int | None = None
    module: str | None = None
    rank: int | None = None


def expert_weight_key(layer: int, expert: int) -> str:
    return f"ew.L{layer}.E{expert}"


def expert_optim_key(layer: int, expert: int) -> str:
    return f"eo.L{layer}.E{expert}"


def non_expert_weight_key(module: str) -> str:
    return f"new.{module}"


def non_expert_optim_key(rank: int) -> str:
    return f"neo.r{rank}"


def other_states_key(rank: int) -> str:
    return f"other.r{rank}"


def split_with_last_absorbing(total: int, parts: int) -> tuple[int, ...]:
    """Split ``total`` into ``parts`` sizes: all but the last get
    ceil(total/parts) and the last absorbs the remainder so the sum is exact.
    """
    if parts == 1:
        return (total,)
    base = math.ceil(total / parts)
    last = total - base * (parts - 1)
    return (base,) * (parts - 1) + (last,)


def unit_sizes(model: ModelSpec, parallel: ParallelSpec) -> dict:
    """Byte sizes for each unit kind under the given deployment.

    Non-expert optimizer shards and other-states slices depend on the DP
    degree, so the parallel spec is required alongside the model.
    """
    dp = parallel.dp_degree
    neo_shards = split_with_last_absorbing(model.non_expert_params * model.bytes_optim, dp)
    _require(neo_shards[-1] > 0,
             "non_expert_optim shard sizes > 0",
             f"P_ne*B_o={model.non_expert_params * model.bytes_optim} too small "
             f"for dp_degree={dp}")
    other = (split_with_last_absorbing(model.other_states_bytes, dp)
             if model.other_states_bytes > 0 else (0,) * dp)
    return {
        EXPERT_WEIGHT: model.expert_params_per_expert * model.bytes_weight,
        EXPERT_OPTIM: model.expert_params_per_expert * model.bytes_optim,
        NON_EXPERT_WEIGHT: {name: count * model.bytes_weight
                            for name, count in model.non_expert_modules},
        NON_EXPERT_OPTIM: neo_shards,
        OTHER_STATES: other,
    }


@dataclass(frozen=True)
class RankLayout:
    """Placement of every state unit across the DP ranks of the deployment."""

    model: ModelSpec
    parallel: ParallelSpec
    cluster: ClusterSpec
    # rank -> (node id, dp_rank, ep_group index, ep_rank)
    rank_info: dict[int, tuple[int, int, int, int]]
    # rank -> set of (layer, expert) hosted there
    hosted_experts: dict[int, frozenset[tuple[int, int]]]
    units: tuple[StateUnit, ...]
    by_key: dict[str, StateUnit] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.by_key:
            object.__setattr__(self, "by_key", {u.key: u for u in self.units})

    @property
    def n_ranks(self) -> int:
        return self.parallel.dp_degree

    def node_of_rank(self, rank: int) -> int:
        return self.rank_info[rank][0]

    def ranks_of_node(self, node: int) -> list[int]:
        return [r for r in range(self.n_ranks) if self.node_of_rank(r) == node]

    @property
    def nodes(self) -> list[int]:
        return sorted({info[0] for info in self.rank_info.values()})

    def host_rank(self, group: int, layer: int, expert: int) -> int:
        """Rank hosting (layer, expert) within EP group ``group``."""
        experts_per_rank = self.model.experts_per_layer // self.parallel.ep_degree
        ep_rank = expert // experts_per_rank
        return group * self.parallel.ep_degree + ep_rank


def build_layout(model: ModelSpec, parallel: ParallelSpec,
                 cluster: ClusterSpec) -> RankLayout:
    """Derive the full placement of state units for a spec trio.

    Expert (layer L, index e) is hosted at ep_rank = e // (N / D_ep) within
    every EP group (contiguous blocks; equals e mod D_ep when N == D_ep).
    EP groups are contiguous rank blocks: group g covers ranks
    [g*D_ep, (g+1)*D_ep).  A DP rank's node is the node of its first GPU
    under contiguous GPU packing.
    """
    n = model.experts_per_layer
    dp, ep = parallel.dp_degree, parallel.ep_degree
    _require(n % ep == 0,
             "model.experts_per_layer % parallel.ep_degree == 0",
             f"experts_per_layer={n}, ep_degree={ep}")
    world_gpus = dp * parallel.tp_degree * parallel.pp_degree
    _require(cluster.num_nodes * cluster.gpus_per_node == world_gpus,
             "cluster.num_nodes * cluster.gpus_per_node == dp*tp*pp",
             f"{cluster.num_nodes}*{cluster.gpus_per_node} != {world_gpus}")

    sizes = unit_sizes(model, parallel)
    experts_per_rank = n // ep
    gpus_per_rank = parallel.tp_degree * parallel.pp_degree

    rank_info: dict[int, tuple[int, int, int, int]] = {}
    hosted: dict[int, set[tuple[int, int]]] = {r: set() for r in range(dp)}
    for r in range(dp):
        node = (r * gpus_per_rank) // cluster.gpus_per_node
        rank_info[r] = (node, r, r // ep, r % ep)

    units: list[StateUnit] = []
    for layer in range(model.num_moe_layers):
        for expert in range(n):
            ep_rank = expert // experts_per_rank
            replicas = frozenset(g * ep + ep_rank for g in range(parallel.num_ep_groups))
            for r in replicas:
                hosted[r].add((layer, expert))
            if model.expert_params_per_expert == 0:
                continue  # dense degenerate case: no expert bytes to save
            units.append(StateUnit(
                key=expert_weight_key(layer, expert), kind=EXPERT_WEIGHT,
                size_bytes=sizes[EXPERT_WEIGHT], replica_ranks=replicas,
                layer=layer, expert=expert))
            # Optimizer state of an expert is a single ZeRO-2 shard held by
            # the hosting rank of the lowest-index EP group.
            units.append(StateUnit(
                key=expert_optim_key(layer, expert), kind=EXPERT_OPTIM,
                size_bytes=sizes[EXPERT_OPTIM], replica_ranks=frozenset({ep_rank}),
                layer=layer, expert=expert))
    for name, _count in model.non_expert_modules:
        units.append(StateUnit(
            key=non_expert_weight_key(name), kind=NON_EXPERT_WEIGHT,
            size_bytes=sizes[NON_EXPERT_WEIGHT][name],
            replica_ranks=frozenset(range(dp)), module=name))
    for r in range(dp):
        units.append(StateUnit(
            key=non_expert_optim_key(r), kind=NON_EXPERT_OPTIM,
            size_bytes=sizes[NON_EXPERT_OPTIM][r],
            replica_ranks=frozenset({r}), rank=r))
    if model.other_states_bytes > 0:
        for r in range(dp):
            units.append(StateUnit(
                key=other_states_key(r), kind=OTHER_STATES,
                size_bytes=sizes[OTHER_STATES][r],
                replica_ranks=frozenset({r}), rank=r))

    return RankLayout(
        model=model, parallel=parallel, cluster=cluster,
        rank_info=rank_info,
        hosted_experts={r: frozenset(s) for r, s in hosted.items()},
        units=tuple(units))
