"""Scenario description and strict JSON (de)serialization.

A scenario bundles the model/parallel/cluster specs with the checkpointing
strategy, token routing model, fault schedule, and RNG seed.  Parsing is
strict: unknown keys and malformed fields are rejected with the offending
field named, so a config typo never silently changes an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .planner import ADAPTIVE_PEC, EQUAL_PEC, LOAD_AWARE, STRATEGIES, PecConfig
from .topology import ClusterSpec, ModelSpec, ParallelSpec, SpecValidationError

UNIFORM = "uniform"
ZIPF = "zipf"
SCRIPTED = "scripted"
POISSON = "poisson"


@dataclass(frozen=True)
class RoutingSpec:
    kind: str = UNIFORM
    zipf_s: float | None = None
    # scripted per-iteration delivered tokens: matrix[layer][expert]
    matrix: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in (UNIFORM, ZIPF, SCRIPTED):
            raise SpecValidationError("routing.kind in {uniform, zipf, scripted}",
                                      f"got {self.kind!r}")
        if self.kind == ZIPF and (self.zipf_s is None or self.zipf_s <= 0):
            raise SpecValidationError("routing.zipf_s > 0", f"got {self.zipf_s}")
        if self.kind == SCRIPTED and not self.matrix:
            raise SpecValidationError("routing.matrix required for scripted routing",
                                      "matrix missing or empty")


@dataclass(frozen=True)
class FaultSpec:
    kind: str = POISSON
    # scripted (iteration, failed node ids); iterations strictly increasing
    events: tuple[tuple[int, tuple[int, ...]], ...] = ()

    def __post_init__(self):
        if self.kind not in (POISSON, SCRIPTED):
            raise SpecValidationError("faults.kind in {poisson, scripted}",
                                      f"got {self.kind!r}")


@dataclass(frozen=True)
class DynamicKSpec:
    threshold: float = 0.0375
    initial_k: int = 1

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise SpecValidationError("dynamic_k.threshold in (0, 1)",
                                      f"got {self.threshold}")
        if self.initial_k < 1:
            raise SpecValidationError("dynamic_k.initial_k >= 1",
                                      f"got {self.initial_k}")


@dataclass(frozen=True)
class Scenario:
    model: ModelSpec
    parallel: ParallelSpec
    cluster: ClusterSpec
    strategy: str
    i_ckpt: int
    i_total: int
    rng_seed: int
    tokens_per_iteration: tuple[int, ...] = ()
    pec: PecConfig | None = None
    routing: RoutingSpec = field(default_factory=RoutingSpec)
    capacity_factor: float | None = None
    faults: FaultSpec = field(default_factory=FaultSpec)
    dynamic_k: DynamicKSpec | None = None
    async_checkpointing: bool = True

    def __post_init__(self):
        if isinstance(self.tokens_per_iteration, int):
            object.__setattr__(self, "tokens_per_iteration",
                               (self.tokens_per_iteration,) * self.model.num_moe_layers)
        else:
            object.__setattr__(self, "tokens_per_iteration",
                               tuple(self.tokens_per_iteration))
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise SpecValidationError(f"strategy in {STRATEGIES}",
                                      f"got {self.strategy!r}")
        if self.i_ckpt < 1:
            raise SpecValidationError("i_ckpt >= 1", f"got {self.i_ckpt}")
        if self.i_total < self.i_ckpt:
            raise SpecValidationError("i_total >= i_ckpt",
                                      f"i_total={self.i_total}, i_ckpt={self.i_ckpt}")
        if self.capacity_factor is not None and self.capacity_factor <= 0:
            raise SpecValidationError("capacity_factor > 0",
                                      f"got {self.capacity_factor}")
        if self.rng_seed < 0:
            raise SpecValidationError("rng_seed >= 0", f"got {self.rng_seed}")
        if len(self.tokens_per_iteration) != self.model.num_moe_layers:
            raise SpecValidationError(
                "len(tokens_per_iteration) == model.num_moe_layers",
                f"{len(self.tokens_per_iteration)} != {self.model.num_moe_layers}")
        if any(t < 1 for t in self.tokens_per_iteration):
            raise SpecValidationError("tokens_per_iteration >= 1",
                                      f"got {self.tokens_per_iteration}")
        if self.strategy in (EQUAL_PEC, ADAPTIVE_PEC):
            if self.pec is None:
                raise SpecValidationError(f"pec required for strategy {self.strategy}",
                                          "pec is null")
            self.pec.validate_against(self.model)
            if self.strategy == ADAPTIVE_PEC and self.pec.selection == LOAD_AWARE:
                raise SpecValidationError(
                    "adaptive_pec requires sequential selection",
                    "adaptive shard placement is precomputed from the periodic "
                    "schedule; load-aware selection is not periodic")
        if self.dynamic_k is not None and self.dynamic_k.initial_k > self.model.experts_per_layer:
            raise SpecValidationError("dynamic_k.initial_k <= model.experts_per_layer",
                                      f"got {self.dynamic_k.initial_k}")
        if self.routing.kind == SCRIPTED:
            m = self.routing.matrix
            if len(m) != self.model.num_moe_layers:
                raise SpecValidationError("routing.matrix has num_moe_layers rows",
                                          f"{len(m)} rows")
            for row in m:
                if len(row) != self.model.experts_per_layer:
                    raise SpecValidationError(
                        "routing.matrix rows have experts_per_layer entries",
                        f"row of length {len(row)}")
                if any(v < 0 for v in row):
                    raise SpecValidationError("routing.matrix entries >= 0",
                                              f"got {row}")
        if self.faults.kind == SCRIPTED:
            prev = 0
            for iteration, nodes in self.faults.events:
                if not 1 <= iteration <= self.i_total:
                    raise SpecValidationError("fault iterations within [1, i_total]",
                                              f"got {iteration}")
                if iteration <= prev:
                    raise SpecValidationError("fault iterations strictly increasing",
                                              f"{iteration} after {prev}")
                prev = iteration
                if not nodes:
                    raise SpecValidationError("fault events name >= 1 node",
                                              f"event at {iteration} has none")
                for n in nodes:
                    if not 0 <= n < self.cluster.num_nodes:
                        raise SpecValidationError("fault node ids within cluster",
                                                  f"node {n}")


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise SpecValidationError(f"{where} has only known keys",
                                  f"unknown keys {sorted(unknown)}")


def _get(doc: dict, key: str, kinds, where: str, required: bool = True, default=None):
    if key not in doc or doc[key] is None:
        if required:
            raise SpecValidationError(f"{where}.{key} present", "missing")
        return default
    value = doc[key]
    if kinds is int and isinstance(value, bool):
        raise SpecValidationError(f"{where}.{key} is an integer", f"got {value!r}")
    if not isinstance(value, kinds):
        raise SpecValidationError(f"{where}.{key} has type {kinds}",
                                  f"got {type(value).__name__}")
    return value


def _model_from_dict(doc: dict) -> ModelSpec:
    _check_keys(doc, {"num_moe_layers", "experts_per_layer", "top_k",
                      "non_expert_params", "expert_params_per_expert",
                      "bytes_weight", "bytes_optim", "other_states_bytes",
                      "non_expert_modules"}, "model")
    modules = _get(doc, "non_expert_modules", list, "model", required=False, default=[])
    return ModelSpec(
        num_moe_layers=_get(doc, "num_moe_layers", int, "model"),
        experts_per_layer=_get(doc, "experts_per_layer", int, "model"),
        top_k=_get(doc, "top_k", int, "model"),
        non_expert_params=_get(doc, "non_expert_params", int, "model"),
        expert_params_per_expert=_get(doc, "expert_params_per_expert", int, "model"),
        bytes_weight=_get(doc, "bytes_weight", int, "model"),
        bytes_optim=_get(doc, "bytes_optim", int, "model"),
        other_states_bytes=_get(doc, "other_states_bytes", int, "model",
                                required=False, default=0),
        non_expert_modules=tuple((str(n), int(c)) for n, c in modules),
    )


def scenario_from_dict(doc: dict) -> Scenario:
    _check_keys(doc, {"model", "parallel", "cluster", "pec", "strategy", "i_ckpt",
                      "i_total", "routing", "tokens_per_iteration",
                      "capacity_factor", "faults", "rng_seed", "dynamic_k",
                      "async_checkpointing"}, "scenario")
    model = _model_from_dict(_get(doc, "model", dict, "scenario"))

    pdoc = _get(doc, "parallel", dict, "scenario")
    _check_keys(pdoc, {"dp_degree", "ep_degree", "tp_degree", "pp_degree"}, "parallel")
    parallel = ParallelSpec(
        dp_degree=_get(pdoc, "dp_degree", int, "parallel"),
        ep_degree=_get(pdoc, "ep_degree", int, "parallel"),
        tp_degree=_get(pdoc, "tp_degree", int, "parallel", required=False, default=1),
        pp_degree=_get(pdoc, "pp_degree", int, "parallel", required=False, default=1),
    )

    cdoc = _get(doc, "cluster", dict, "scenario")
    _check_keys(cdoc, {"num_nodes", "gpus_per_node", "snapshot_bandwidth",
                       "persist_bandwidth", "fb_time", "update_time",
                       "restart_time", "failure_rate"}, "cluster")
    cluster = ClusterSpec(
        num_nodes=_get(cdoc, "num_nodes", int, "cluster"),
        gpus_per_node=_get(cdoc, "gpus_per_node", int, "cluster"),
        snapshot_bandwidth=float(_get(cdoc, "snapshot_bandwidth", (int, float), "cluster")),
        persist_bandwidth=float(_get(cdoc, "persist_bandwidth", (int, float), "cluster")),
        fb_time=float(_get(cdoc, "fb_time", (int, float), "cluster")),
        update_time=float(_get(cdoc, "update_time", (int, float), "cluster")),
        restart_time=float(_get(cdoc, "restart_time", (int, float), "cluster")),
        failure_rate=float(_get(cdoc, "failure_rate", (int, float), "cluster",
                                required=False, default=0.0)),
    )

    pec = None
    if doc.get("pec") is not None:
        pecdoc = _get(doc, "pec", dict, "scenario")
        _check_keys(pecdoc, {"k_pec", "selection", "k_snapshot", "k_persist"}, "pec")
        pec = PecConfig(
            k_pec=_get(pecdoc, "k_pec", int, "pec"),
            selection=_get(pecdoc, "selection", str, "pec",
                           required=False, default="sequential"),
            k_snapshot=_get(pecdoc, "k_snapshot", int, "pec", required=False),
            k_persist=_get(pecdoc, "k_persist", int, "pec", required=False),
        )

    rdoc = _get(doc, "routing", dict, "scenario", required=False,
                default={"kind": UNIFORM})
    _check_keys(rdoc, {"kind", "s", "matrix"}, "routing")
    routing = RoutingSpec(
        kind=_get(rdoc, "kind", str, "routing"),
        zipf_s=_get(rdoc, "s", (int, float), "routing", required=False),
        matrix=tuple(tuple(int(v) for v in row)
                     for row in _get(rdoc, "matrix", list, "routing",
                                     required=False, default=[])) or None,
    )

    fdoc = _get(doc, "faults", dict, "scenario", required=False,
                default={"kind": POISSON})
    _check_keys(fdoc, {"kind", "events"}, "faults")
    faults = FaultSpec(
        kind=_get(fdoc, "kind", str, "faults"),
        events=tuple((int(it), tuple(int(n) for n in nodes))
                     for it, nodes in _get(fdoc, "events", list, "faults",
                                           required=False, default=[])),
    )

    dynamic = None
    if doc.get("dynamic_k") is not None:
        ddoc = _get(doc, "dynamic_k", dict, "scenario")
        _check_keys(ddoc, {"threshold", "initial_k"}, "dynamic_k")
        dynamic = DynamicKSpec(
            threshold=float(_get(ddoc, "threshold", (int, float), "dynamic_k",
                                 required=False, default=0.0375)),
            initial_k=_get(ddoc, "initial_k", int, "dynamic_k",
                           required=False, default=1),
        )

    tokens = doc.get("tokens_per_iteration")
    if tokens is None:
        raise SpecValidationError("scenario.tokens_per_iteration present", "missing")
    if isinstance(tokens, list):
        tokens = tuple(int(t) for t in tokens)
    elif isinstance(tokens, int) and not isinstance(tokens, bool):
        pass
    else:
        raise SpecValidationError("scenario.tokens_per_iteration is int or list",
                                  f"got {type(tokens).__name__}")

    return Scenario(
        model=model, parallel=parallel, cluster=cluster, pec=pec,
        strategy=_get(doc, "strategy", str, "scenario"),
        i_ckpt=_get(doc, "i_ckpt", int, "scenario"),
        i_total=_get(doc, "i_total", int, "scenario"),
        rng_seed=_get(doc, "rng_seed", int, "scenario"),
        tokens_per_iteration=tokens,
        routing=routing,
        capacity_factor=(float(doc["capacity_factor"])
                         if doc.get("capacity_factor") is not None else None),
        faults=faults,
        dynamic_k=dynamic,
        async_checkpointing=_get(doc, "async_checkpointing", bool, "scenario",
                                 required=False, default=True),
    )


def scenario_to_dict(s: Scenario) -> dict:
    doc: dict = {
        "model": {
            "num_moe_layers": s.model.num_moe_layers,
            "experts_per_layer": s.model.experts_per_layer,
            "top_k": s.model.top_k,
            "non_expert_params": s.model.non_expert_params,
            "expert_params_per_expert": s.model.expert_params_per_expert,
            "bytes_weight": s.model.bytes_weight,
            "bytes_optim": s.model.bytes_optim,
            "other_states_bytes": s.model.other_states_bytes,
            "non_expert_modules": [[n, c] for n, c in s.model.non_expert_modules],
        },
        "parallel": {
            "dp_degree": s.parallel.dp_degree,
            "ep_degree": s.parallel.ep_degree,
            "tp_degree": s.parallel.tp_degree,
            "pp_degree": s.parallel.pp_degree,
        },
        "cluster": {
            "num_nodes": s.cluster.num_nodes,
            "gpus_per_node": s.cluster.gpus_per_node,
            "snapshot_bandwidth": s.cluster.snapshot_bandwidth,
            "persist_bandwidth": s.cluster.persist_bandwidth,
            "fb_time": s.cluster.fb_time,
            "update_time": s.cluster.update_time,
            "restart_time": s.cluster.restart_time,
            "failure_rate": s.cluster.failure_rate,
        },
        "pec": None if s.pec is None else {
            "k_pec": s.pec.k_pec,
            "selection": s.pec.selection,
            "k_snapshot": s.pec.k_snapshot,
            "k_persist": s.pec.k_persist,
        },
        "strategy": s.strategy,
        "i_ckpt": s.i_ckpt,
        "i_total": s.i_total,
        "tokens_per_iteration": list(s.tokens_per_iteration),
        "routing": {"kind": s.routing.kind,
                    **({"s": s.routing.zipf_s} if s.routing.kind == ZIPF else {}),
                    **({"matrix": [list(r) for r in s.routing.matrix]}
                       if s.routing.kind == SCRIPTED else {})},
        "capacity_factor": s.capacity_factor,
        "faults": {"kind": s.faults.kind,
                   **({"events": [[it, list(nodes)] for it, nodes in s.faults.events]}
                      if s.faults.kind == SCRIPTED else {})},
        "rng_seed": s.rng_seed,
        "dynamic_k": None if s.dynamic_k is None else {
            "threshold": s.dynamic_k.threshold,
            "initial_k": s.dynamic_k.initial_k,
        },
        "async_checkpointing": s.async_checkpointing,
    }
    return doc
