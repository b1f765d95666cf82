import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterfl import nn
from clusterfl.data import DeviceDataset
from clusterfl.errors import StructuralError
from clusterfl.federation import DeviceState
from clusterfl.metrics import mean_test_accuracy, per_cluster_train_loss, purity


def purity_by_sets(assigned, truth, K):
    """Evaluate the purity formula by explicit set intersection."""
    total = 0
    for k in range(K):
        members = {i for i, a in enumerate(assigned) if a == k}
        total += max(len(members & {i for i, t in enumerate(truth) if t == j}) for j in range(K))
    return total / len(assigned)


def best_bijection_score(assigned, truth, K):
    best = 0
    for perm in itertools.permutations(range(K)):
        best = max(best, sum(1 for a, t in zip(assigned, truth) if perm[a] == t))
    return best / len(assigned)


def test_examples():
    assert purity([0, 0, 0, 1], [0, 0, 1, 1]) == 0.75
    assert purity([0] * 80, np.repeat(np.arange(4), 20), 4) == 0.25
    assert purity([2, 2, 0, 0, 1, 1], [0, 0, 1, 1, 2, 2]) == 1.0


def test_errors():
    with pytest.raises(StructuralError):
        purity([0, 1], [0])
    with pytest.raises(StructuralError):
        purity([], [])
    with pytest.raises(StructuralError):
        purity([0, 3], [0, 1], 2)


cases = st.integers(1, 4).flatmap(lambda K: st.integers(1, 12).flatmap(lambda M: st.tuples(
    st.just(K), st.lists(st.integers(0, K - 1), min_size=M, max_size=M),
    st.lists(st.integers(0, K - 1), min_size=M, max_size=M))))


@settings(max_examples=300, deadline=None)
@given(cases)
def test_matches_set_enumeration(case):
    K, assigned, truth = case
    assert purity(assigned, truth, K) == purity_by_sets(assigned, truth, K)


@settings(max_examples=300, deadline=None)
@given(cases)
def test_against_bijection_oracle(case):
    K, assigned, truth = case
    p = purity(assigned, truth, K)
    oracle = best_bijection_score(assigned, truth, K)
    counts = np.zeros((K, K), dtype=int)
    for a, t in zip(assigned, truth):
        counts[a, t] += 1
    nonempty = all(counts[k].sum() > 0 for k in range(K))
    argmaxes = [int(np.argmax(counts[k])) for k in range(K)]
    if nonempty and len(set(argmaxes)) == K:
        assert p == oracle
    else:
        assert p >= oracle


@settings(max_examples=200, deadline=None)
@given(cases, st.randoms(use_true_random=False))
def test_invariant_under_relabeling_and_reordering(case, rnd):
    K, assigned, truth = case
    relabel = list(range(K))
    rnd.shuffle(relabel)
    order = list(range(len(assigned)))
    rnd.shuffle(order)
    base = purity(assigned, truth, K)
    assert purity([relabel[a] for a in assigned], truth, K) == base
    assert purity([assigned[i] for i in order], [truth[i] for i in order], K) == base


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.randoms(use_true_random=False))
def test_bounds_for_balanced_truth(K, per, rnd):
    truth = [k for k in range(K) for _ in range(per)]
    assigned = [rnd.randrange(K) for _ in truth]
    p = purity(assigned, truth, K)
    assert 1 / K <= p <= 1
    assert (p == 1) == (purity_by_sets(assigned, truth, K) == 1)


def constant_model(mlp, cls):
    """Zero weights with a bias favouring ``cls``."""
    params = np.zeros(mlp.num_params)
    params[-mlp.num_classes + cls] = 1.0
    return params


def device(i, identity, test_y):
    test_y = np.asarray(test_y)
    x = np.zeros((test_y.size, 2))
    return DeviceState(i, DeviceDataset(x, test_y, x, test_y, 0), np.random.default_rng(i), identity)


def test_majority_class_model_scores_half():
    mlp = nn.MlpConfig(2, (3, 3), 2)
    models = np.stack([constant_model(mlp, 0)])
    assert mean_test_accuracy([device(0, 0, [0, 1] * 5)], models, mlp) == 0.5


def test_mean_is_unweighted_over_devices():
    mlp = nn.MlpConfig(2, (3, 3), 2)
    models = np.stack([constant_model(mlp, 0), constant_model(mlp, 1)])
    devices = [device(0, 0, [0, 0, 0, 1, 1]), device(1, 1, [1] * 20)]
    assert mean_test_accuracy(devices, models, mlp) == pytest.approx(0.8)
    assert mean_test_accuracy([device(0, 1, [1, 1]), device(1, 0, [0])], models, mlp) == 1.0


def test_grouped_scoring_matches_per_device():
    mlp = nn.MlpConfig(3, (4, 4), 3)
    rng = np.random.default_rng(0)
    models = rng.standard_normal((2, mlp.num_params))
    devices = []
    for i in range(6):
        x = rng.standard_normal((7 + i % 2, 3))
        y = rng.integers(0, 3, 7 + i % 2)
        devices.append(DeviceState(i, DeviceDataset(x, y, x, y, 0), rng, i % 2))
    expected = np.mean([np.mean(nn.predict(models[d.identity], mlp, d.dataset.test_x) == d.dataset.test_y)
                        for d in devices])
    assert mean_test_accuracy(devices, models, mlp) == pytest.approx(expected, abs=1e-15)


def test_missing_identity():
    mlp = nn.MlpConfig(2, (3, 3), 2)
    with pytest.raises(StructuralError, match="device 0"):
        mean_test_accuracy([device(0, None, [0])], np.zeros((1, mlp.num_params)), mlp)


def test_per_cluster_loss_examples():
    assert per_cluster_train_loss([0], [3.2], [32], 1) == [pytest.approx(0.1)]
    out = per_cluster_train_loss([1, 1], [0.2 * 10, 0.4 * 10], [10, 10], 3)
    assert out[0] is None and out[2] is None
    assert out[1] == pytest.approx(0.3)


def test_per_cluster_loss_raw():
    assert per_cluster_train_loss([0, 0], [3.0, 5.0], [32, 16], 1, normalized=False) == [4.0]
