"""Round engine: broadcast, per-device identity and local update, per-cluster aggregation."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .clustering import ScoreBreakdown, SimilarityKind, model_delta, select_cluster, similarities
from .data import DeviceDataset, sample_minibatch
from .errors import NumericError, StructuralError

WORKERS_ENV = "CLUSTERFL_WORKERS"

POLICY_NONE = "none"
POLICY_PINNED = "pinned"
POLICY_RESCUE = "rescue"


@dataclass
class ServerState:
    """Global models for the current and previous round, each ``[K, num_params]``.

    At round 0 ``models_prev`` equals ``models_now`` so every delta is zero.
    """
    models_now: np.ndarray
    models_prev: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, models) -> "ServerState":
        models = np.array(models, dtype=np.float64)
        if models.ndim != 2 or models.shape[0] < 1:
            raise StructuralError(f"expected K stacked parameter vectors, got shape {models.shape}")
        return cls(models, models.copy(), 0)

    @property
    def num_clusters(self) -> int:
        return self.models_now.shape[0]


@dataclass
class DeviceState:
    device_id: int
    dataset: DeviceDataset
    rng: np.random.Generator
    identity: int | None = None


PIN_WHEN_EMPTY = "when_empty"
PIN_ALWAYS = "always"


@dataclass(frozen=True)
class EmptyClusterPolicy:
    """``pin_mode`` only matters for the pinned policy: ``always`` overrides
    the pinned devices' own choices every round, ``when_empty`` moves a pinned
    device only in rounds where its cluster would otherwise have no members.
    """
    kind: str = POLICY_NONE
    pinned: tuple[int, ...] = ()
    pin_mode: str = PIN_WHEN_EMPTY

    def validate(self, num_devices: int, num_clusters: int):
        if self.kind not in (POLICY_NONE, POLICY_PINNED, POLICY_RESCUE):
            raise StructuralError(f"unknown empty-cluster policy {self.kind!r}")
        if self.pin_mode not in (PIN_WHEN_EMPTY, PIN_ALWAYS):
            raise StructuralError(f"unknown pin mode {self.pin_mode!r}")
        if self.kind == POLICY_PINNED:
            pins = list(self.pinned)
            if len(pins) != num_clusters or len(set(pins)) != len(pins):
                raise StructuralError(f"pinned policy needs {num_clusters} distinct device ids, got {pins}")
            bad = [p for p in pins if not 0 <= p < num_devices]
            if bad:
                raise StructuralError(f"pinned device ids {bad} outside [0, {num_devices})")


@dataclass(frozen=True)
class RoundConfig:
    lam: float = 0.2
    learning_rate: float = 0.05
    batch_size: int = 32
    similarity_kind: SimilarityKind = SimilarityKind.COSINE
    literal_eq3: bool = False
    normalize_losses: bool = False
    policy: EmptyClusterPolicy = field(default_factory=EmptyClusterPolicy)
    local_steps: int = 1
    workers: int | None = None


@dataclass
class RoundOutcome:
    identities: np.ndarray
    chosen: np.ndarray
    cluster_sizes: np.ndarray
    per_device_scores: list[ScoreBreakdown]
    new_models: np.ndarray
    decision_losses: np.ndarray
    batch_sizes: np.ndarray


@dataclass
class _Decision:
    batch: nn.Batch
    breakdown: ScoreBreakdown
    grad: np.ndarray


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, int(workers))


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Ordered map; results never depend on the worker count."""
    workers = resolve_workers(workers)
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _annotate(exc: Exception, device_id: int, k: int | None) -> Exception:
    where = f"device {device_id}" + (f", cluster {k}" if k is not None else "")
    return type(exc)(f"{where}: {exc}")


def _gradient(model, params: np.ndarray, batch: nn.Batch) -> np.ndarray:
    return model.loss_and_gradients(params[None], batch.features[None], batch.labels[None])[1][0, 0]


def _decide_chunk(chunk: list[DeviceState], server: ServerState, deltas: np.ndarray, model,
                  cfg: RoundConfig) -> list[_Decision]:
    """Identity decisions for a contiguous run of devices, evaluated in one vectorized pass."""
    batches = [sample_minibatch(d.dataset, cfg.batch_size, d.rng) for d in chunk]
    try:
        losses, grads = model.loss_and_gradients(
            server.models_now, np.stack([b.features for b in batches]), np.stack([b.labels for b in batches]))
    except (StructuralError, NumericError) as exc:
        # redo device by device to name the culprit
        for d, b in zip(chunk, batches):
            for k in range(server.num_clusters):
                try:
                    model.loss_and_gradients(server.models_now[k][None], b.features[None], b.labels[None])
                except (StructuralError, NumericError) as inner:
                    raise _annotate(inner, d.device_id, k) from exc
        raise
    sims = similarities(grads, deltas, cfg.similarity_kind, literal=cfg.literal_eq3)
    decisions = []
    for j, batch in enumerate(batches):
        chosen, breakdown = select_cluster(sims[j], losses[j], cfg.lam, normalize=cfg.normalize_losses)
        decisions.append(_Decision(batch, breakdown, grads[j, chosen]))
    return decisions


def _chunks(items: list, workers: int, max_size: int = 16) -> list[list]:
    size = min(max_size, -(-len(items) // workers))
    return [items[i:i + size] for i in range(0, len(items), size)]


def _local_update(device: DeviceState, decision: _Decision, identity: int, server: ServerState,
                  model, cfg: RoundConfig) -> np.ndarray:
    k = identity
    try:
        if identity == decision.breakdown.chosen:
            grad = decision.grad
        else:
            # overridden by the empty-cluster policy: same batch, forced cluster's model
            grad = _gradient(model, server.models_now[k], decision.batch)
        w = nn.sgd_step(server.models_now[k], grad, cfg.learning_rate)
        for _ in range(cfg.local_steps - 1):
            batch = sample_minibatch(device.dataset, cfg.batch_size, device.rng)
            w = nn.sgd_step(w, _gradient(model, w, batch), cfg.learning_rate)
    except (StructuralError, NumericError) as exc:
        raise _annotate(exc, device.device_id, k) from exc
    if not np.all(np.isfinite(w)):
        raise _annotate(NumericError("local model diverged to non-finite values"), device.device_id, k)
    return w


def apply_empty_cluster_policy(identities, policy: EmptyClusterPolicy, num_clusters: int) -> np.ndarray:
    """Return post-policy identities (a new array).

    ``pinned`` forces ``policy.pinned[k]`` into cluster ``k`` (every round, or
    only while cluster ``k`` is empty, per ``pin_mode``). ``rescue`` fills
    each empty cluster, lowest index first, with the lowest-id device of the
    currently largest cluster, while some cluster has at least two members.
    """
    ids = np.array(identities, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_clusters):
        raise StructuralError(f"identities must lie in [0, {num_clusters})")
    policy.validate(ids.size, num_clusters)
    if policy.kind == POLICY_PINNED and policy.pin_mode == PIN_ALWAYS:
        for k, device_id in enumerate(policy.pinned):
            ids[device_id] = k
    elif policy.kind == POLICY_PINNED:
        # a placed pin keeps its cluster non-empty, so this ends within K moves
        while True:
            empty = np.flatnonzero(np.bincount(ids, minlength=num_clusters) == 0)
            if empty.size == 0:
                break
            ids[policy.pinned[int(empty[0])]] = int(empty[0])
    elif policy.kind == POLICY_RESCUE:
        while True:
            sizes = np.bincount(ids, minlength=num_clusters)
            empty = np.flatnonzero(sizes == 0)
            donor = int(np.argmax(sizes))
            if empty.size == 0 or sizes[donor] < 2:
                break
            ids[np.flatnonzero(ids == donor)[0]] = int(empty[0])
    return ids


def choose_pinned_devices(num_devices: int, num_clusters: int, rng: np.random.Generator) -> tuple[int, ...]:
    if num_devices < num_clusters:
        raise StructuralError(f"cannot pin {num_clusters} clusters with only {num_devices} devices")
    return tuple(int(i) for i in rng.choice(num_devices, size=num_clusters, replace=False))


def aggregate(models, num_clusters: int, carry) -> np.ndarray:
    """Unweighted per-cluster mean of uploaded models; empty clusters keep ``carry[k]``.

    ``models`` is a sequence of ``(identity, params)`` in device-id order and
    is summed in that order.
    """
    carry = np.asarray(carry, dtype=np.float64)
    if carry.ndim != 2 or carry.shape[0] != num_clusters:
        raise StructuralError(f"carry must have shape [{num_clusters}, P], got {carry.shape}")
    # the mean is taken as first member + mean offset from it, so equal members average to themselves exactly
    first: dict[int, np.ndarray] = {}
    offsets = np.zeros_like(carry)
    counts = np.zeros(num_clusters, dtype=np.int64)
    for identity, params in models:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != carry.shape[1:]:
            raise StructuralError(f"uploaded model length {params.size} != {carry.shape[1]}")
        if not 0 <= identity < num_clusters:
            raise StructuralError(f"identity {identity} outside [0, {num_clusters})")
        if identity in first:
            offsets[identity] += params - first[identity]
        else:
            first[identity] = params
        counts[identity] += 1
    out = carry.copy()
    for k, base in first.items():
        out[k] = base + offsets[k] / counts[k]
    return out


def run_round(server: ServerState, devices: list[DeviceState], model,
              cfg: RoundConfig) -> tuple[ServerState, RoundOutcome]:
    """One broadcast / decide / update / aggregate cycle.

    ``model`` is anything with ``num_params`` and
    ``loss_and_gradients(models[K, P], features[M, B, d], labels[M, B])``
    returning losses ``[M, K]`` and gradients ``[M, K, P]``; an
    :class:`~clusterfl.nn.MlpConfig` qualifies.

    Devices' ``identity`` fields are updated in place and their random
    streams advance; ``server`` itself is not modified.
    """
    if not devices:
        raise StructuralError("need at least one device")
    K = server.num_clusters
    if server.models_now.shape[1] != model.num_params:
        raise StructuralError(f"server models have {server.models_now.shape[1]} params, model needs {model.num_params}")

    deltas = np.stack([model_delta(server.models_now[k], server.models_prev[k], k).values for k in range(K)])
    workers = resolve_workers(cfg.workers)
    decisions = [dec for part in parallel_map(lambda c: _decide_chunk(c, server, deltas, model, cfg),
                                              _chunks(list(devices), workers), workers)
                 for dec in part]
    chosen = np.array([dec.breakdown.chosen for dec in decisions], dtype=np.int64)
    identities = apply_empty_cluster_policy(chosen, cfg.policy, K)

    uploads = parallel_map(
        lambda i: _local_update(devices[i], decisions[i], int(identities[i]), server, model, cfg),
        list(range(len(devices))), workers)
    new_models = aggregate(zip(identities.tolist(), uploads), K, server.models_now)

    for device, identity in zip(devices, identities.tolist()):
        device.identity = identity
    outcome = RoundOutcome(
        identities=identities,
        chosen=chosen,
        cluster_sizes=np.bincount(identities, minlength=K),
        per_device_scores=[dec.breakdown for dec in decisions],
        new_models=new_models,
        decision_losses=np.array([dec.breakdown.loss[s] for dec, s in zip(decisions, identities.tolist())]),
        batch_sizes=np.array([len(dec.batch) for dec in decisions], dtype=np.int64),
    )
    return ServerState(new_models, server.models_now.copy(), server.round + 1), outcome
