"""Clustering purity, averaged test accuracy and per-cluster training loss."""
from __future__ import annotations

import numpy as np

from . import nn
from .errors import StructuralError


def purity(assigned, truth, num_clusters: int | None = None) -> float:
    """(1/M) * sum over assigned clusters k of max_j |truth==j and assigned==k|.

    The max is taken independently per assigned cluster, so two assigned
    clusters may both claim the same ground-truth group.
    """
    assigned = np.asarray(assigned, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if assigned.shape != truth.shape or assigned.ndim != 1:
        raise StructuralError(f"assigned {assigned.shape} and truth {truth.shape} must be equal-length 1-D")
    if assigned.size == 0:
        raise StructuralError("purity of an empty assignment is undefined")
    if min(assigned.min(), truth.min()) < 0:
        raise StructuralError("cluster labels must be non-negative")
    k_assigned = int(assigned.max()) + 1
    k_truth = int(truth.max()) + 1
    if num_clusters is not None:
        if max(k_assigned, k_truth) > num_clusters:
            raise StructuralError(f"cluster labels must lie in [0, {num_clusters})")
        k_assigned = k_truth = num_clusters
    contingency = np.zeros((k_assigned, k_truth), dtype=np.int64)
    np.add.at(contingency, (assigned, truth), 1)
    return float(contingency.max(axis=1).sum()) / assigned.size


def device_accuracy(params: np.ndarray, mlp: nn.MlpConfig, features, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise StructuralError("empty test split")
    return float(np.mean(nn.predict(params, mlp, features) == labels))


def mean_test_accuracy(devices, models: np.ndarray, mlp: nn.MlpConfig) -> float:
    """Each device scores the model of its own cluster on its own test split; unweighted mean."""
    groups: dict[tuple[int, int], list] = {}
    for d in devices:
        if d.identity is None:
            raise StructuralError(f"device {d.device_id} has no cluster identity yet")
        if len(d.dataset.test_y) == 0:
            raise StructuralError(f"device {d.device_id} has an empty test split")
        groups.setdefault((d.identity, len(d.dataset.test_y)), []).append(d)
    accs = {}
    # devices sharing a model and a test size are scored in one batched pass
    for (k, _), members in groups.items():
        preds = nn.predict(models[k], mlp, np.stack([d.dataset.test_x for d in members]))
        for d, p in zip(members, preds):
            accs[d.device_id] = float(np.mean(p == d.dataset.test_y))
    return float(np.mean([accs[d.device_id] for d in devices]))


def per_cluster_train_loss(identities, decision_losses, batch_sizes, num_clusters: int,
                           normalized: bool = True) -> list[float | None]:
    """Mean member loss per cluster; ``None`` marks an empty cluster.

    With ``normalized`` each device's summed batch loss is divided by its batch size first.
    """
    identities = np.asarray(identities, dtype=np.int64)
    losses = np.asarray(decision_losses, dtype=np.float64)
    if normalized:
        losses = losses / np.asarray(batch_sizes, dtype=np.float64)
    if losses.shape != identities.shape:
        raise StructuralError("one loss per device is required")
    out: list[float | None] = []
    for k in range(num_clusters):
        members = losses[identities == k]
        out.append(float(members.mean()) if members.size else None)
    return out
