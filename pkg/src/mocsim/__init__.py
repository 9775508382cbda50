"""Fault-tolerant checkpointing toolkit for Mixture-of-Experts training:
partial-expert selection, fully sharded checkpoint planning, a two-level
triple-buffered checkpoint engine with a crash-consistent store, and a
deterministic fault-injecting training simulator."""

from .engine import (
    CheckpointEngine,
    MissingUnitError,
    NoFreeBufferError,
    RecoveryPlan,
    TripleBufferSet,
    UnrecoverableStateError,
)
from .planner import (
    ADAPTIVE_PEC,
    BASELINE,
    EQUAL_FULL,
    EQUAL_PEC,
    PecConfig,
    ShardPlan,
    bottleneck_workload,
    full_checkpoint_size,
    ideal_rank_workload,
    pec_checkpoint_size,
    pec_imbalance,
    plan_adaptive,
    plan_baseline,
    plan_equal,
)
from .scenario import (
    DynamicKSpec,
    FaultSpec,
    RoutingSpec,
    Scenario,
    scenario_from_dict,
    scenario_to_dict,
)
from .selector import (
    DynamicKState,
    LoadCounters,
    SelectionSchedule,
    dynamic_k_step,
    select_load_aware,
    select_sequential,
    select_window,
)
from .simulator import (
    AdaptiveConfig,
    AnalyticOverhead,
    SimReport,
    Simulation,
    adaptive_configure,
    analytic_overhead,
    route_tokens,
    run,
    write_timeline_csv,
)
from .store import (
    ChecksumMismatchError,
    CrashPoint,
    DiskStore,
    IncompleteVersionError,
    MemoryStore,
    StoreEntry,
    TruncatingInjector,
    crc32c,
)
from .topology import (
    ClusterSpec,
    ModelSpec,
    ParallelSpec,
    RankLayout,
    SpecValidationError,
    StateUnit,
    build_layout,
    unit_sizes,
)

__version__ = "0.1.0"
