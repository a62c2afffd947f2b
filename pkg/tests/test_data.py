from __future__ import annotations

import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobhfl import data as dp
from mobhfl.errors import ConfigError, ContractError
from mobhfl.model import SOFTMAX_LINEAR, ModelSpec, evaluate_accuracy, gradient, sgd_step


def blobs(C=8, per_class=50, seed=0, d=16):
    return dp.generate_synthetic(C, d, per_class, 3.0, seed)


def test_generator_counts_and_determinism():
    ds = dp.generate_synthetic(8, 16, 500, 3.0, 4)
    assert len(ds) == 4000
    assert np.all(np.bincount(ds.labels) == 500)
    again = dp.generate_synthetic(8, 16, 500, 3.0, 4)
    assert ds.inputs.tobytes() == again.inputs.tobytes()
    other = dp.generate_synthetic(8, 16, 500, 3.0, 4, split=1)
    assert not np.array_equal(ds.inputs, other.inputs)


@pytest.mark.parametrize("C,d", [(8, 16), (5, 2), (10, 3)])
def test_class_means_are_separated(C, d):
    means = dp.class_means(C, d, 2.5)
    gaps = [np.linalg.norm(a - b) for a, b in itertools.combinations(means, 2)]
    assert min(gaps) >= 2.5 - 1e-12


def test_offset_shifts_every_centre():
    a = dp.generate_synthetic(3, 4, 10, 2.0, 0)
    b = dp.generate_synthetic(3, 4, 10, 2.0, 0, offset=5.0)
    np.testing.assert_allclose(b.inputs - a.inputs, 5.0)


def test_well_separated_blobs_are_learnable():
    ds = dp.generate_synthetic(8, 16, 500, 6.0, 0)
    spec = ModelSpec(SOFTMAX_LINEAR, 16, 8)
    rng = np.random.default_rng(0)
    w = np.zeros(spec.dim)
    for _ in range(2000):
        idx = rng.integers(0, len(ds), 20)
        w = sgd_step(w, gradient(spec, w, ds.subset(idx).as_batch()), 0.1)
    assert evaluate_accuracy(spec, w, ds) >= 0.95


def test_iid_sizes():
    ds = dp.LabeledDataset(np.zeros((10, 2)), np.arange(10) % 2, 2)
    assert sorted(dp.partition_iid(ds, 3, 0).sizes.tolist(), reverse=True) == [4, 3, 3]
    full = dp.partition_iid(ds, 1, 0)
    assert sorted(full.shards[0].tolist()) == list(range(10))
    big = dp.LabeledDataset(np.zeros((40000, 1)), np.arange(40000) % 8, 8)
    assert set(dp.partition_iid(big, 32, 0).sizes.tolist()) == {1250}
    with pytest.raises(ConfigError):
        dp.partition_iid(ds, 11, 0)


def test_iid_shards_approach_global_distribution():
    # with 1250 samples per shard the L1 gap to uniform is small (law of large numbers)
    ds = dp.LabeledDataset(np.zeros((40000, 1)), np.arange(40000) % 8, 8)
    plan = dp.partition_iid(ds, 32, 1)
    gaps = [dp.probability_difference(np.full(8, 1 / 8), dp.label_distribution(ds.labels[s], 8))
            for s in plan.shards]
    assert max(gaps) < 0.15


def test_local_niid_one_class_per_vehicle():
    ds = blobs(per_class=40)
    plan = dp.partition_local_niid(ds, 32, 1, 0)
    classes = [np.unique(ds.labels[s]) for s in plan.shards]
    assert all(len(c) == 1 for c in classes)
    assert np.all(np.bincount(np.concatenate(classes), minlength=8) == 4)
    assert set(plan.sizes.tolist()) == {10}


def test_local_niid_two_classes_and_coverage():
    ds = blobs(per_class=80)
    plan = dp.partition_local_niid(ds, 32, 2, 3)
    assert all(len(np.unique(ds.labels[s])) == 2 for s in plan.shards)
    # M*l/C = 8 chunks per class, each held by a distinct vehicle
    per_class = np.zeros(8, dtype=int)
    for s in plan.shards:
        for c in np.unique(ds.labels[s]):
            per_class[c] += 1
    assert np.all(per_class == 8)
    assert sorted(plan.all_indices().tolist()) == list(range(len(ds)))


def test_local_niid_with_l_equal_c_is_stratified():
    ds = blobs(per_class=32)
    plan = dp.partition_local_niid(ds, 8, 8, 0)
    for s in plan.shards:
        assert np.all(np.bincount(ds.labels[s], minlength=8) == 4)


def test_local_niid_divisibility():
    with pytest.raises(ConfigError, match="divisible"):
        dp.partition_local_niid(blobs(), 5, 1, 0)


def test_edge_niid_layout():
    ds = blobs(per_class=40)
    plan = dp.partition_edge_niid(ds, 4, 32, 2, 0)
    assert np.array_equal(plan.edge_assignment, np.repeat(np.arange(4), 8))
    for n in range(4):
        members = np.flatnonzero(plan.edge_assignment == n)
        pooled = np.concatenate([plan.shards[m] for m in members])
        assert set(np.unique(ds.labels[pooled]).tolist()) == {2 * n, 2 * n + 1}
        assert len(pooled) == 80
    assert plan.covered == len(ds)


def test_edge_niid_single_edge_is_iid_over_pool():
    ds = blobs(per_class=16)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        plan = dp.partition_edge_niid(ds, 1, 4, 8, 0)
    assert sorted(plan.all_indices().tolist()) == list(range(len(ds)))


def test_edge_niid_unused_classes_warn():
    ds = blobs(per_class=16)
    with pytest.warns(UserWarning, match="4 of 8"):
        plan = dp.partition_edge_niid(ds, 4, 32, 1, 0)
    assert plan.classes_used == (0, 1, 2, 3)
    assert set(np.unique(ds.labels[plan.all_indices()]).tolist()) == {0, 1, 2, 3}


@pytest.mark.parametrize("N,M,l", [(4, 30, 1), (3, 9, 2), (4, 32, 3)])
def test_edge_niid_divisibility(N, M, l):
    with pytest.raises(ConfigError):
        dp.partition_edge_niid(blobs(), N, M, l, 0)


def test_label_distribution_examples():
    np.testing.assert_array_equal(dp.label_distribution(np.array([3, 3, 3]), 5), [0, 0, 0, 1, 0])
    np.testing.assert_array_equal(dp.label_distribution(np.arange(16) % 8, 8), np.full(8, 0.125))
    np.testing.assert_array_equal(dp.label_distribution(np.array([1, 2, 1, 2]), 4), [0, 0.5, 0.5, 0])
    with pytest.raises(ContractError):
        dp.label_distribution(np.array([], dtype=int), 3)


def test_probability_difference_examples():
    u = np.full(8, 0.125)
    assert dp.probability_difference(u, u) == 0.0
    assert dp.probability_difference(u, np.eye(8)[0]) == pytest.approx(1.75, abs=1e-15)
    assert dp.probability_difference(u, np.r_[0.5, 0.5, np.zeros(6)]) == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(ContractError):
        dp.probability_difference(u, u[:4])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_probability_difference_bounded(a, b):
    a, b = np.array(a) + 1e-9, np.array(b) + 1e-9
    d = dp.probability_difference(a / a.sum(), b / b.sum())
    assert 0.0 <= d <= 2.0 + 1e-12


def test_edge_label_distributions_marks_empty_edges():
    ds = blobs(per_class=8)
    plan = dp.partition_iid(ds, 4, 0)
    dists, theta = dp.edge_label_distributions(ds.labels, plan, np.array([0, 0, 2, 2]), 3, 8)
    assert np.isnan(dists[1]).all() and theta[1] == 0
    assert theta.sum() == pytest.approx(1.0, abs=1e-15)


def test_csv_round_trip_and_errors(tmp_path):
    ds = blobs(C=3, per_class=4, d=3)
    path = tmp_path / "ds.csv"
    dp.write_dataset_csv(ds, path)
    back = dp.read_dataset_csv(path, 3)
    assert back.inputs.tobytes() == ds.inputs.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,x1,label\n1.0,2.0,0\n1.0,oops,1\n")
    with pytest.raises(ConfigError, match="line 3"):
        dp.read_dataset_csv(bad)
