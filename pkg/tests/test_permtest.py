import itertools
from collections import Counter

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from app.errors import EmptyInputError, InputError
from app.services.kernel_distance import ClientSample, client_statistic, empirical_itd2
from app.services.permtest import (
    PermutationBatch,
    PermutedITDSample,
    aggregate_permuted_itd,
    aggregation_seed,
    client_level_tests,
    client_seed,
    critical_value,
    decide,
    global_decision,
    itd_permutation_test,
    local_permuted_stats,
    p_value,
)
from app.services.seeding import derive_seed
from app.services.synth import ModelConfig, ModelKind, sample_model
from app.services.transport import wasserstein_power


def test_single_point_per_side_has_one_split():
    client = ClientSample.from_arrays("c0", [[0.0, 0.0]], [[3.0, 4.0]])
    batch = local_permuted_stats(client, 20, 0)
    assert_array_equal(batch.stats, np.full(20, 25.0))
    assert batch.seed == 0


def test_identical_pooled_points_give_zero_stats():
    client = ClientSample.from_arrays("c0", np.ones((4, 2)), np.ones((3, 2)))
    assert np.all(local_permuted_stats(client, 10, 1).stats == 0.0)


def test_split_frequencies_match_enumeration():
    pooled = np.array([[0.0], [1.0], [3.0], [7.0]])
    client = ClientSample.from_arrays("c0", pooled[:2], pooled[2:])
    # Each unordered first-half choice is one of C(4, 2) = 6 splits with probability 1/6.
    split_value = {}
    for first in itertools.combinations(range(4), 2):
        rest = [i for i in range(4) if i not in first]
        split_value[first] = wasserstein_power(pooled[list(first)], pooled[rest])
    expected = Counter()
    for v in split_value.values():
        expected[round(v, 12)] += 1 / 6
    batch = local_permuted_stats(client, 6000, 7)
    observed = Counter(round(v, 12) for v in batch.stats)
    for value, prob in expected.items():
        assert abs(observed[value] / 6000 - prob) <= 0.03


def test_local_stats_are_deterministic_per_seed(small_clients):
    a = local_permuted_stats(small_clients[0], 15, 99)
    b = local_permuted_stats(small_clients[0], 15, 99)
    c = local_permuted_stats(small_clients[0], 15, 100)
    assert_array_equal(a.stats, b.stats)
    assert not np.array_equal(a.stats, c.stats)


def test_local_stats_reject_empty_batch(small_clients):
    with pytest.raises(InputError):
        local_permuted_stats(small_clients[0], 0, 1)


def test_batch_validation():
    with pytest.raises(EmptyInputError):
        PermutationBatch("c0", [])
    with pytest.raises(InputError):
        PermutationBatch("c0", [1.0, -0.5])
    assert PermutationBatch("c0", [1.0, 2.0]).B_k == 2
    with pytest.raises(InputError):
        PermutedITDSample([0.5, -1e-3])
    with pytest.raises(InputError):
        PermutedITDSample([0.5, np.inf])


def test_sinkhorn_batches_match_the_client_statistic(small_clients):
    client = small_clients[0]
    batch = local_permuted_stats(client, 3, 8, solver="sinkhorn", epsilon=0.5)
    rng = np.random.default_rng(8)
    pooled = client.pooled()
    for stat in batch.stats:
        perm = rng.permutation(pooled.shape[0])
        split = ClientSample.from_arrays(client.client_id, pooled[perm[:client.m]], pooled[perm[client.m:]])
        assert stat == client_statistic(split, solver="sinkhorn", epsilon=0.5)


def test_constant_batches_aggregate_to_weighted_sum():
    batches = [PermutationBatch("a", [2.0] * 5), PermutationBatch("b", [4.0] * 3)]
    sample = aggregate_permuted_itd(batches, [0.25, 0.75], 50, 0)
    assert np.allclose(sample.values, 0.25 * 2.0 + 0.75 * 4.0)


def test_single_batch_draws_are_uniform():
    sample = aggregate_permuted_itd([PermutationBatch("a", [1.0, 2.0])], [1.0], 4000, 3)
    share = np.mean(sample.values == 1.0)
    assert abs(share - 0.5) <= 0.03
    assert set(np.unique(sample.values)) == {1.0, 2.0}


def test_zero_weight_clients_do_not_contribute():
    batches = [PermutationBatch("a", [1.0, 2.0, 3.0]), PermutationBatch("b", [100.0, 200.0])]
    sample = aggregate_permuted_itd(batches, [1.0, 0.0], 200, 4)
    assert set(np.unique(sample.values)) <= {1.0, 2.0, 3.0}


def test_aggregate_rejects_bad_arguments():
    with pytest.raises(InputError):
        aggregate_permuted_itd([PermutationBatch("a", [1.0])], [1.0], 0, 0)
    with pytest.raises(EmptyInputError):
        aggregate_permuted_itd([], [], 10, 0)


@pytest.mark.parametrize("values, alpha, expected", [
    ([1.0, 2.0, 3.0, 4.0], 0.25, 4.0),
    (list(range(1, 101)), 0.05, 96.0),
    ([5.0] * 10, 0.05, 5.0),
])
def test_critical_value(values, alpha, expected):
    assert critical_value(PermutedITDSample(values), alpha) == expected


def test_critical_value_is_nondecreasing_in_confidence():
    values = np.random.default_rng(0).exponential(size=300)
    levels = [critical_value(values, a) for a in (0.5, 0.2, 0.1, 0.05, 0.01)]
    assert levels == sorted(levels)


def test_critical_value_rejects_bad_alpha():
    with pytest.raises(InputError):
        critical_value([1.0, 2.0], 0.0)
    with pytest.raises(InputError):
        critical_value([1.0, 2.0], 1.0)


def test_p_value():
    sample = PermutedITDSample([1.0, 2.0, 3.0, 4.0])
    assert p_value(sample, 2.5) == pytest.approx(3 / 5)
    assert p_value(sample, 10.0) == pytest.approx(1 / 5)
    assert p_value(sample, 0.0) == 1.0


def test_decide():
    sample = PermutedITDSample(np.arange(1.0, 101.0))
    assert not decide(0.0, sample, 0.05).reject
    report = decide(1000.0, sample, 0.05)
    assert report.reject
    assert report.p_value == pytest.approx(1 / 101)
    assert decide(96.0, sample, 0.05).reject
    assert not decide(95.5, sample, 0.05).reject


def test_tied_zero_sample_does_not_reject():
    report = decide(0.0, PermutedITDSample(np.zeros(20)), 0.05)
    assert not report.reject
    assert report.p_value == 1.0
    assert decide(1e-9, PermutedITDSample(np.zeros(20)), 0.05).reject


def test_full_test_is_deterministic(small_clients):
    a = itd_permutation_test(small_clients, B_k=10, B=60, seed=5)
    b = itd_permutation_test(small_clients, B_k=10, B=60, seed=5)
    assert a.model_dump_json() == b.model_dump_json()
    assert a.config.K == 3 and a.config.m == [12, 12, 12]
    assert a.observed.value == empirical_itd2(small_clients).value


def test_full_test_uses_derived_seeds(small_clients):
    report, batches = itd_permutation_test(small_clients, B_k=10, B=60, seed=5, keep_batches=True)
    for client, batch in zip(small_clients, batches):
        assert batch.seed == client_seed(5, client.client_id)
        assert_array_equal(batch.stats, local_permuted_stats(client, 10, batch.seed).stats)
    again = global_decision(report.observed, batches, report.observed.weights, 0.05, 60, 5, config=report.config)
    assert again == report
    assert aggregation_seed(5) == derive_seed(5, "aggregate")


def test_shifted_clients_are_rejected(shifted_clients):
    report = itd_permutation_test(shifted_clients, B_k=20, B=200, seed=1)
    assert report.reject
    assert report.p_value < 0.05


def test_single_client_level_test_matches_itd_test(small_clients):
    report, batches = itd_permutation_test(small_clients[:1], B_k=10, B=50, seed=2, keep_batches=True)
    (single,) = client_level_tests(report, batches, 0.05, 50, 2)
    assert single == report


def test_client_level_tests_cover_every_client(small_clients):
    report, batches = itd_permutation_test(small_clients, B_k=10, B=50, seed=2, keep_batches=True)
    results = client_level_tests(report, batches, 0.05, 50, 2)
    assert [r.observed.per_client[0].client_id for r in results] == ["c0", "c1", "c2"]
    assert all(r.config.K == 1 for r in results)


@pytest.mark.slow
def test_type1_error_under_model_a():
    rejects = []
    for r in range(200):
        seed = derive_seed(11, "rep", r)
        clients = sample_model(ModelConfig(model=ModelKind.A, K=5, d=2, m=100, n=100, seed=seed))
        rejects.append(itd_permutation_test(clients, B_k=50, B=500, seed=seed).reject)
    assert 0.005 <= np.mean(rejects) <= 0.105


@pytest.mark.slow
def test_null_distribution_shrinks_with_sample_size():
    means = []
    for size in (25, 50, 100):
        clients = sample_model(ModelConfig(K=3, d=2, m=size, n=size, seed=4))
        _, batches = itd_permutation_test(clients, B_k=40, B=10, seed=4, keep_batches=True)
        means.append(np.mean([b.stats.mean() for b in batches]))
    assert means[0] > means[1] > means[2]
