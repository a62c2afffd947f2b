from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobhfl import data as dp
from mobhfl import engine as en
from mobhfl import mobility as mob
from mobhfl.errors import ConfigError, ContractError, EmptyEdgeError, RunError
from mobhfl.model import MEAN_QUADRATIC, SOFTMAX_LINEAR, ModelSpec, forward_loss


def small_task(M=8, N=4, seed=0):
    ds = dp.generate_synthetic(4, 5, 40, 3.0, seed)
    plan = dp.partition_edge_niid(ds, N, M, 1, seed)
    return ds, plan, ModelSpec(SOFTMAX_LINEAR, 5, 4)


@st.composite
def fleets(draw):
    M = draw(st.integers(2, 12))
    N = draw(st.integers(1, M))
    dim = draw(st.integers(1, 5))
    sizes = np.array(draw(st.lists(st.integers(1, 500), min_size=M, max_size=M)))
    assignment = np.array(draw(st.lists(st.integers(0, N - 1), min_size=M, max_size=M)))
    seed = draw(st.integers(0, 2**16))
    params = np.random.default_rng(seed).standard_normal((M, dim))
    return M, N, sizes, assignment, params


@settings(max_examples=200, deadline=None)
@given(fleets())
def test_hierarchy_collapse_and_weights(fleet):
    M, N, sizes, assignment, params = fleet
    theta = en.edge_weights(assignment, sizes, N)
    assert abs(theta.sum() - 1.0) <= 1e-12
    for n in range(N):
        members = assignment == n
        if members.any():
            alpha = sizes[members] / sizes[members].sum()
            assert abs(alpha.sum() - 1.0) <= 1e-12
    previous = np.zeros((N, params.shape[1]))
    edges = en.edge_aggregate(params, assignment, sizes, N, previous=previous)
    cloud = en.cloud_aggregate(edges, theta)
    flat = en.virtual_cloud(params, sizes)
    np.testing.assert_allclose(cloud, flat, atol=1e-12, rtol=0)
    np.testing.assert_allclose(flat, en.data_weights(sizes) @ params, atol=1e-12, rtol=0)
    synced = en.edge_distribute(np.tile(cloud, (N, 1)), assignment)
    assert np.array_equal(synced, np.tile(cloud, (M, 1)))


def test_empty_edge_policies():
    params = np.array([[1.0], [3.0]])
    prev = np.array([[10.0], [20.0], [30.0]])
    out = en.edge_aggregate(params, np.array([0, 0]), np.array([1, 3]), 3, previous=prev)
    np.testing.assert_array_equal(out, [[2.5], [20.0], [30.0]])
    with pytest.raises(EmptyEdgeError):
        en.edge_aggregate(params, np.array([0, 0]), np.array([1, 3]), 3, previous=prev, policy=en.FAIL)


def test_cloud_aggregate_rejects_bad_weights():
    with pytest.raises(ContractError):
        en.cloud_aggregate(np.ones((2, 3)), [0.5, 0.6])


def test_batch_stream_is_without_replacement():
    shard = np.arange(100, 137)
    stream = en.BatchStream(shard, 3, 5)
    first = np.concatenate([stream.next(10) for _ in range(37)])  # 370 = 10 full passes
    for p in range(10):
        assert sorted(first[p * 37:(p + 1) * 37].tolist()) == shard.tolist()
    again = en.BatchStream(shard, 3, 5)
    assert np.array_equal(np.concatenate([again.next(10) for _ in range(37)]), first)


def test_post_cloud_synchronisation_and_virtual_models():
    ds, plan, spec = small_task()
    cfg = en.HFLConfig(M=8, N=4, tau_l=2, tau_e=3, K=3, eta=0.05, batch_size=5,
                       scenario=en.Scenario.markov(mob.ring_transition(mob.RingParams(4, 0.5))))
    seen = []

    def hook(rec, state):
        seen.append((rec, {k: np.copy(v) for k, v in state.items()}))

    result = en.run_mob_hierfavg(cfg, ds, plan, spec, hooks=[hook])
    full = ds.subset(plan.all_indices()).as_batch()
    clouds = [(r, s) for r, s in seen if r.event == en.CLOUD_AGG]
    assert len(clouds) == 3 and len(result.cloud_models) == 4
    for k, (rec, state) in enumerate(clouds, start=1):
        np.testing.assert_array_equal(state["u"], result.cloud_models[k])
        np.testing.assert_array_equal(state["v_tilde"], result.v_tilde_boundaries[k])
        assert rec.cf_difference == en.cf_difference(result.cloud_models[k], result.v_tilde_boundaries[k])
        assert rec.train_loss == forward_loss(spec, result.cloud_models[k], full)
    # first local step after a cloud aggregation starts from the synchronised model
    firsts = [s for r, s in seen if r.event == en.LOCAL and r.tau in (7, 13)]
    for k, state in zip((1, 2), firsts):
        w = result.cloud_models[k]
        assert np.array_equal(state["edge_models"], np.tile(w, (4, 1)))
        expected_v = en.virtual_centralized_step(w, spec, full, cfg.eta)
        np.testing.assert_array_equal(state["v_tilde"], expected_v)
    assert len(result.assignments) == 1 + 3 * 3


def test_records_layout():
    ds, plan, spec = small_task()
    cfg = en.HFLConfig(M=8, N=4, tau_l=2, tau_e=3, K=2, batch_size=5, eta=0.05)
    recs = en.run_mob_hierfavg(cfg, ds, plan, spec, test_set=ds).records
    events = [r.event for r in recs]
    assert events.count(en.LOCAL) == 2 * 2 * 3
    assert events.count(en.EDGE_AGG) == 2 * 3
    assert events.count(en.CLOUD_AGG) == 2
    assert [r.tau for r in recs if r.event == en.CLOUD_AGG] == [6, 12]
    assert all(0.0 <= r.test_accuracy <= 1.0 for r in recs)
    # static edge-niid(1): every edge is one class out of four, L1 gap 1.5
    assert all(r.avg_prob_difference == pytest.approx(1.5) for r in recs)
    no_local = en.run_mob_hierfavg(en.HFLConfig(**{**cfg.__dict__, "log_local": False}), ds, plan, spec).records
    assert [r.event for r in no_local].count(en.LOCAL) == 0


def test_training_reduces_loss():
    ds, plan, spec = small_task()
    cfg = en.HFLConfig(M=8, N=4, tau_l=3, tau_e=2, K=10, eta=0.05, batch_size=5, log_local=False,
                       scenario=en.Scenario.markov(mob.ring_transition(mob.RingParams(4, 0.5))))
    res = en.run_mob_hierfavg(cfg, ds, plan, spec)
    full = ds.subset(plan.all_indices()).as_batch()
    assert forward_loss(spec, res.final_params, full) < forward_loss(spec, res.cloud_models[0], full) - 0.2


def test_quadratic_full_batch_tracks_centralised_model():
    # linear gradients: the weighted average of full-batch local steps is exactly a
    # full-gradient step, so u and v~ coincide up to rounding
    targets = np.random.default_rng(0).standard_normal((8, 3))
    spec = ModelSpec(MEAN_QUADRATIC, targets=targets)
    ds = dp.LabeledDataset(np.zeros((16, 0)), np.repeat(np.arange(8), 2), 8)
    plan = dp.PartitionPlan(tuple(np.array([2 * m, 2 * m + 1]) for m in range(8)), "iid")
    cfg = en.HFLConfig(M=8, N=4, tau_l=3, tau_e=4, K=3, eta=0.1, full_batch=True)
    res = en.run_mob_hierfavg(cfg, ds, plan, spec, initial_assignment=np.arange(8) % 4)
    assert max(r.cf_difference for r in res.records) < 1e-12


def test_trace_scenario_is_followed(tmp_path):
    ds, plan, spec = small_task()
    rng = np.random.default_rng(4)
    states = [rng.integers(0, 4, 8) for _ in range(1 + 2 * 3)]
    path = tmp_path / "trace.csv"
    mob.write_trace(path, states)
    cfg = en.HFLConfig(M=8, N=4, tau_l=1, tau_e=3, K=2, batch_size=5, eta=0.05,
                       scenario=en.Scenario.from_trace(mob.load_trace(path, 4)))
    res = en.run_mob_hierfavg(cfg, ds, plan, spec)
    assert all(np.array_equal(a, b) for a, b in zip(res.assignments, states))


def test_worker_count_does_not_change_results():
    ds, plan, spec = small_task()
    runs = []
    for workers in (1, 4):
        cfg = en.HFLConfig(M=8, N=4, tau_l=2, tau_e=3, K=3, eta=0.05, batch_size=5, workers=workers,
                           scenario=en.Scenario.markov(mob.ring_transition(mob.RingParams(4, 0.5))))
        runs.append(en.run_mob_hierfavg(cfg, ds, plan, spec, test_set=ds))
    assert runs[0].records == runs[1].records
    assert runs[0].final_params.tobytes() == runs[1].final_params.tobytes()


def test_failures_surface_with_partial_records():
    ds, plan, spec = small_task()
    inputs = ds.inputs.copy()
    inputs[plan.shards[5]] = np.inf
    broken = dp.LabeledDataset(inputs, ds.labels, ds.num_classes)
    cfg = en.HFLConfig(M=8, N=4, tau_l=2, tau_e=3, K=2, eta=0.05, batch_size=5)
    with pytest.raises(RunError, match="vehicle 5"):
        en.run_mob_hierfavg(cfg, broken, plan, spec)
    # an edge that empties under the fail policy aborts the run after the records so far
    cfg = en.HFLConfig(M=8, N=4, tau_l=1, tau_e=3, K=2, batch_size=5, eta=0.05,
                       empty_edge_policy=en.FAIL,
                       scenario=en.Scenario.markov(np.tile([1.0, 0, 0, 0], (4, 1))))
    with pytest.raises(RunError) as info:
        en.run_mob_hierfavg(cfg, ds, plan, spec)
    assert [r.event for r in info.value.records] == [en.LOCAL]


def test_config_validation():
    ds, plan, spec = small_task()
    with pytest.raises(ConfigError):
        en.run_mob_hierfavg(en.HFLConfig(M=8, N=4, tau_l=0), ds, plan, spec)
    with pytest.raises(ConfigError):
        en.run_mob_hierfavg(en.HFLConfig(M=6, N=4), ds, plan, spec)
    with pytest.raises(ConfigError):
        en.HFLConfig(empty_edge_policy="drop").validate()
