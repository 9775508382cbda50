"""Sequential/windowed selection, load-aware selection, Dynamic-K."""

from hypothesis import given, settings
from hypothesis import strategies as st

from mocsim import (
    DynamicKState,
    LoadCounters,
    SelectionSchedule,
    dynamic_k_step,
    select_load_aware,
    select_sequential,
    select_window,
)


def test_sequential_matches_interleaved_walk():
    # 3 experts, K=1, four MoE layers: consecutive checkpoints rotate the
    # selected expert of each layer by one
    assert [sorted(select_sequential(0, m, 3, 1)) for m in range(4)] == \
        [[0], [1], [2], [0]]
    assert [sorted(select_sequential(1, m, 3, 1)) for m in range(4)] == \
        [[1], [2], [0], [1]]


def test_full_width_selects_everything():
    for c in range(5):
        for m in range(3):
            assert select_sequential(c, m, 4, 4) == frozenset(range(4))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 64), data=st.data())
def test_selection_size_and_coverage(n, data):
    k = data.draw(st.integers(1, n))
    m = data.draw(st.integers(0, 7))
    c0 = data.draw(st.integers(0, 50))
    sched = SelectionSchedule(n_experts=n, k=k)
    union = set()
    for c in range(c0, c0 + sched.period):
        sel = sched.selected(c, m)
        assert len(sel) == k
        union |= sel
    assert union == set(range(n))


@settings(max_examples=80, deadline=None)
@given(n=st.integers(2, 32), data=st.data())
def test_persist_window_subset_of_snapshot_window(n, data):
    k_s = data.draw(st.integers(1, n))
    k_p = data.draw(st.integers(1, k_s))
    c = data.draw(st.integers(0, 100))
    m = data.draw(st.integers(0, 5))
    snap = select_window(c, m, n, width=k_s, stride=k_p)
    persist = select_window(c, m, n, width=k_p, stride=k_p)
    assert persist <= snap


def test_exact_period_repeats_pattern():
    sched = SelectionSchedule(n_experts=4, k=3)
    p = sched.exact_period
    for c in range(6):
        for m in range(3):
            assert sched.selected(c, m) == sched.selected(c + p, m)


def test_load_aware_top_k_with_ties():
    counters = LoadCounters(n_layers=1, n_experts=4)
    for e, tokens in enumerate((10, 40, 40, 5)):
        counters.add(0, e, tokens)
    # brute-force top-2 with lowest-index tie-break
    ranked = sorted(range(4), key=lambda e: (-counters.unsaved_tokens[(0, e)], e))
    assert select_load_aware(counters, 0, 2) == frozenset(ranked[:2]) == {1, 2}


def test_load_aware_all_equal_picks_lowest_index():
    counters = LoadCounters(n_layers=1, n_experts=4)
    assert select_load_aware(counters, 0, 1) == {0}


def test_load_aware_never_reselects_saved_expert():
    counters = LoadCounters(n_layers=1, n_experts=3)
    counters.add(0, 0, 100)
    counters.add(0, 1, 50)
    first = select_load_aware(counters, 0, 1)
    assert first == {0}
    counters.mark_saved(0, first)
    counters.add(0, 1, 1)
    # expert 0 has zero unsaved tokens while expert 1 has a positive count
    assert select_load_aware(counters, 0, 1) == {1}


def test_load_aware_restricted_pool():
    counters = LoadCounters(n_layers=1, n_experts=4)
    for e, tokens in enumerate((1, 2, 3, 4)):
        counters.add(0, e, tokens)
    assert select_load_aware(counters, 0, 1, restrict_to={0, 1}) == {1}


def test_dynamic_k_doubles_when_budget_crossed():
    state = DynamicKState(n_experts=16, current_k=1, initial_k=1)
    # budget for k=1 is threshold/2 = 1.875%
    state = dynamic_k_step(state, 0.015)
    assert state.current_k == 1
    state = dynamic_k_step(state, 0.005)  # cumulative 2.0% > 1.875%
    assert state.current_k == 2
    assert state.cumulative_plt == 0.02


def test_dynamic_k_capped_at_n():
    state = DynamicKState(n_experts=4, current_k=4, initial_k=1, doublings=2)
    state = dynamic_k_step(state, 0.5)
    assert state.current_k == 4


def test_dynamic_k_can_double_repeatedly_in_one_step():
    state = DynamicKState(n_experts=16, current_k=1, initial_k=1)
    state = dynamic_k_step(state, 0.036)  # crosses several staged budgets
    assert state.current_k == 16


@given(st.lists(st.floats(min_value=0, max_value=0.01), max_size=20))
def test_dynamic_k_monotone(additions):
    state = DynamicKState(n_experts=8, current_k=1, initial_k=1)
    prev_k, prev_cum = state.current_k, state.cumulative_plt
    for add in additions:
        state = dynamic_k_step(state, add)
        assert state.current_k >= prev_k
        assert state.cumulative_plt >= prev_cum
        assert state.current_k <= 8
        prev_k, prev_cum = state.current_k, state.cumulative_plt
