"""Shared builders for test specs and scenarios."""

import pytest

from mocsim import ClusterSpec, ModelSpec, ParallelSpec, build_layout


def make_model(n_experts=4, n_layers=2, top_k=1, p_ne=1000, epp=500,
               b_w=2, b_o=12, other=0, modules=None):
    if modules is None:
        modules = (("attn0", 400), ("ffn0", 350), ("attn1", 250))
    return ModelSpec(
        num_moe_layers=n_layers, experts_per_layer=n_experts, top_k=top_k,
        non_expert_params=p_ne, expert_params_per_expert=epp,
        bytes_weight=b_w, bytes_optim=b_o, other_states_bytes=other,
        non_expert_modules=modules)


def make_cluster(dp=4, tp=1, pp=1, gpus_per_node=2, snapshot_bw=1e9,
                 persist_bw=1e8, fb=0.01, update=0.002, restart=1.0, rate=0.0):
    world = dp * tp * pp
    assert world % gpus_per_node == 0
    return ClusterSpec(
        num_nodes=world // gpus_per_node, gpus_per_node=gpus_per_node,
        snapshot_bandwidth=snapshot_bw, persist_bandwidth=persist_bw,
        fb_time=fb, update_time=update, restart_time=restart, failure_rate=rate)


def make_layout(n_experts=4, dp=4, ep=2, gpus_per_node=2, **model_kw):
    model = make_model(n_experts=n_experts, **model_kw)
    parallel = ParallelSpec(dp_degree=dp, ep_degree=ep)
    cluster = make_cluster(dp=dp, gpus_per_node=gpus_per_node)
    return build_layout(model, parallel, cluster)


@pytest.fixture
def dp4ep2_layout():
    return make_layout()
