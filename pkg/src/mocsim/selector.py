"""Expert selection for partial checkpointing.

Sequential selection walks the expert ring deterministically; at checkpoint c
and MoE layer m it saves the window {(m + c*K + j) mod N : j in [0, K)}.
With two-level checkpointing the walk advances by K_persist per checkpoint
while the snapshot tier takes a K_snapshot-wide lookahead window, so every
persist set is a prefix of its snapshot set and the persisted coverage of the
expert ring is identical for every snapshot width.

Load-aware selection instead picks the experts with the most unsaved tokens.
The Dynamic-K controller doubles K whenever cumulative token loss crosses the
budget slice allotted to the current K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace


def select_window(c: int, m: int, n_experts: int, width: int, stride: int) -> frozenset[int]:
    """Experts saved at checkpoint ``c`` for layer ``m``: a ``width``-wide
    window at ring offset m + c*stride."""
    if width >= n_experts:
        return frozenset(range(n_experts))
    start = m + c * stride
    return frozenset((start + j) % n_experts for j in range(width))


def select_sequential(c: int, m: int, n_experts: int, k: int) -> frozenset[int]:
    """Single-level sequential selection: {(m + c*K + j) mod N : j < K}."""
    return select_window(c, m, n_experts, width=k, stride=k)


def schedule_period(n_experts: int, stride: int, width: int | None = None) -> int:
    """Number of checkpoints after which the selection pattern repeats
    exactly.  A full-width window repeats every checkpoint."""
    if width is not None and width >= n_experts:
        return 1
    return n_experts // math.gcd(n_experts, stride)


@dataclass(frozen=True)
class SelectionSchedule:
    """A deterministic, periodic selection pattern for all layers."""

    n_experts: int
    k: int                    # experts saved per layer per checkpoint
    stride: int | None = None  # ring advance per checkpoint; defaults to k

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.k)

    @property
    def period(self) -> int:
        """Checkpoints needed to cover all experts of a layer."""
        return math.ceil(self.n_experts / self.k)

    @property
    def exact_period(self) -> int:
        """Checkpoints after which the pattern repeats exactly."""
        return schedule_period(self.n_experts, self.stride, self.k)

    def selected(self, c: int, m: int) -> frozenset[int]:
        return select_window(c, m, self.n_experts, self.k, self.stride)


@dataclass
class LoadCounters:
    """Tokens delivered to each (layer, expert) since its last save at one
    checkpoint tier.  Reset to zero exactly when the expert is saved."""

    n_layers: int
    n_experts: int
    unsaved_tokens: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        for layer in range(self.n_layers):
            for expert in range(self.n_experts):
                self.unsaved_tokens.setdefault((layer, expert), 0)

    def add(self, layer: int, expert: int, tokens: int) -> None:
        self.unsaved_tokens[(layer, expert)] += tokens

    def mark_saved(self, layer: int, experts) -> None:
        for expert in experts:
            self.unsaved_tokens[(layer, expert)] = 0


def select_load_aware(counters: LoadCounters, m: int, k: int,
                      restrict_to=None) -> frozenset[int]:
    """The K experts of layer ``m`` with the most unsaved tokens.

    Ties break toward the lowest expert index.  ``restrict_to`` limits the
    candidate pool (used to pick the persisted subset of a snapshot set).
    """
    pool = range(counters.n_experts) if restrict_to is None else sorted(restrict_to)
    ranked = sorted(pool, key=lambda e: (-counters.unsaved_tokens[(m, e)], e))
    return frozenset(ranked[:k])


@dataclass(frozen=True)
class DynamicKState:
    """Controller state for doubling K as faults accumulate.

    While K = k0 * 2^j, cumulative PLT is allowed up to the budget
    threshold * (1 - 2^-(j+1)); crossing it doubles K (capped at N), so the
    staged budgets sum to strictly less than the threshold.
    """

    n_experts: int
    current_k: int = 1
    initial_k: int = 1
    doublings: int = 0
    cumulative_plt: float = 0.0
    threshold: float = 0.0375

    def budget(self) -> float:
        """Cumulative PLT allowed before the current K must double."""
        return self.threshold * (1.0 - 2.0 ** -(self.doublings + 1))


def dynamic_k_step(state: DynamicKState, plt_added: float) -> DynamicKState:
    """Account a fault's PLT contribution and double K while over budget."""
    if plt_added < 0:
        raise ValueError(f"plt_added must be >= 0, got {plt_added}")
    cum = state.cumulative_plt + plt_added
    k, j = state.current_k, state.doublings
    while k < state.n_experts and cum > state.threshold * (1.0 - 2.0 ** -(j + 1)):
        k = min(2 * k, state.n_experts)
        j += 1
    return replace(state, cumulative_plt=cum, current_k=k, doublings=j)
