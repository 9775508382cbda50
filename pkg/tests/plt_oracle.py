"""Independent brute-force token-ledger oracle for PLT.

Replays the full token history iteration by iteration with plain dicts,
tracking which experts each checkpoint snapshot and persist covered, and
recomputes every fault's lost tokens from first principles.  It shares only
``route_tokens`` with the simulator (the token stream is scenario input, not
the accounting under test).

Supported scenarios: a single EP group (dp == ep, so every unit's snapshot
lives whole on its host node), scripted faults with strictly increasing
iterations, and bandwidths high enough that a checkpoint triggered at
iteration i is fully persisted before iteration i+1 ends.  A checkpoint
triggered at the fault iteration itself is treated as in flight and unusable.
"""

from dataclasses import dataclass, field

from mocsim import route_tokens


@dataclass
class _Checkpoint:
    iteration: int
    snap_sel: dict[int, set[int]]
    persist_sel: dict[int, set[int]]
    valid_nodes: set[int] = field(default_factory=set)


def oracle_plt(scenario) -> list[float]:
    model = scenario.model
    n, layers = model.experts_per_layer, model.num_moe_layers
    pec = scenario.pec
    k_s, k_p, selection = pec.k_snapshot, pec.k_persist, pec.selection
    experts_per_rank = n // scenario.parallel.ep_degree
    gpn = scenario.cluster.gpus_per_node
    all_nodes = set(range(scenario.cluster.num_nodes))

    def host_node(expert: int) -> int:
        host_rank = expert // experts_per_rank
        return host_rank // gpn

    delivered_cache: dict[int, object] = {}

    def delivered(i):
        if i not in delivered_cache:
            delivered_cache[i] = route_tokens(i, scenario)
        return delivered_cache[i]

    def delivered_between(m, e, start_excl, stop_incl):
        return sum(int(delivered(i)[m, e])
                   for i in range(start_excl + 1, stop_incl + 1))

    def window(c, m, width, stride):
        if width >= n:
            return set(range(n))
        return {(m + c * stride + j) % n for j in range(width)}

    snap_counters = {(m, e): 0 for m in range(layers) for e in range(n)}
    persist_counters = {(m, e): 0 for m in range(layers) for e in range(n)}

    def pick_load_aware(counters, m, k, pool):
        ranked = sorted(pool, key=lambda e: (-counters[(m, e)], e))
        return set(ranked[:k])

    lost = [0] * layers
    storage_expert: dict[tuple[int, int], int] = {}  # latest-version persist iter
    ne_storage_iter: int | None = None
    memory_latest: _Checkpoint | None = None
    pending: _Checkpoint | None = None

    fault_events = list(scenario.faults.events)
    fault_ptr = 0
    i = 1
    while i <= scenario.i_total:
        # a checkpoint triggered at an earlier iteration has now completed
        # both its snapshot and its persist
        if pending is not None and pending.iteration < i:
            memory_latest = pending
            memory_latest.valid_nodes = set(all_nodes)
            for m, experts in pending.persist_sel.items():
                for e in experts:
                    storage_expert[(m, e)] = pending.iteration
            ne_storage_iter = pending.iteration
            pending = None

        arr = delivered(i)
        for m in range(layers):
            for e in range(n):
                tokens = int(arr[m, e])
                if tokens:
                    snap_counters[(m, e)] += tokens
                    persist_counters[(m, e)] += tokens

        if i % scenario.i_ckpt == 0:
            c = i // scenario.i_ckpt - 1
            if selection == "load_aware":
                snap_sel = {m: pick_load_aware(snap_counters, m, k_s, range(n))
                            for m in range(layers)}
                persist_sel = {m: pick_load_aware(persist_counters, m, k_p,
                                                  sorted(snap_sel[m]))
                               for m in range(layers)}
            else:
                snap_sel = {m: window(c, m, k_s, k_p) for m in range(layers)}
                persist_sel = {m: window(c, m, k_p, k_p) for m in range(layers)}
            pending = _Checkpoint(i, snap_sel, persist_sel)
            for m in range(layers):
                for e in snap_sel[m]:
                    snap_counters[(m, e)] = 0
                for e in persist_sel[m]:
                    persist_counters[(m, e)] = 0

        fault_nodes = None
        if fault_ptr < len(fault_events) and fault_events[fault_ptr][0] == i:
            fault_nodes = set(fault_events[fault_ptr][1])
            fault_ptr += 1

        if fault_nodes is None:
            i += 1
            continue

        # fault at end of iteration i: the pending checkpoint is in flight
        pending = None
        if ne_storage_iter is None:
            restart = 0
            restored = {(m, e): 0 for m in range(layers) for e in range(n)}
            memory_latest = None  # restart from scratch reinitializes agents
        else:
            restart = ne_storage_iter
            if memory_latest is not None:
                memory_latest.valid_nodes -= fault_nodes
            restored = {}
            for m in range(layers):
                for e in range(n):
                    r = storage_expert.get((m, e), 0)
                    if (memory_latest is not None
                            and e in memory_latest.snap_sel[m]
                            and host_node(e) in memory_latest.valid_nodes):
                        r = max(r, memory_latest.iteration)
                    restored[(m, e)] = r

        for (m, e), r in restored.items():
            lost[m] += delivered_between(m, e, r, i)
            unsaved = delivered_between(m, e, r, restart) if r < restart else 0
            snap_counters[(m, e)] = unsaved
            persist_counters[(m, e)] = unsaved

        i = restart + 1

    denominators = [t * model.top_k * scenario.i_total
                    for t in scenario.tokens_per_iteration]
    return [l / d for l, d in zip(lost, denominators)]
