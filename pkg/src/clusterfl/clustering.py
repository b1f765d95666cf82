"""Cluster-identity decision: model deltas, gradient similarity and the joint score.

By default the similarity compares the device's *descent* direction ``-grad``
with the cluster's last movement ``w_now - w_prev``, so a device whose data
pulls the model the same way the cluster just moved scores close to +1.
``literal=True`` compares the raw gradient instead (the ascent direction),
which is kept for ablation only.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import StructuralError

NORM_EPS = 1e-12


class SimilarityKind(str, Enum):
    COSINE = "cosine"
    NEGATIVE_EUCLIDEAN = "negative_euclidean"


@dataclass(frozen=True)
class ClusterDelta:
    values: np.ndarray
    cluster_index: int = 0


@dataclass(frozen=True)
class ScoreBreakdown:
    similarity: np.ndarray
    loss: np.ndarray
    combined: np.ndarray
    chosen: int


def model_delta(w_now: np.ndarray, w_prev: np.ndarray, cluster_index: int = 0) -> ClusterDelta:
    w_now = np.asarray(w_now, dtype=np.float64)
    w_prev = np.asarray(w_prev, dtype=np.float64)
    if w_now.shape != w_prev.shape:
        raise StructuralError(f"model lengths differ: {w_now.size} vs {w_prev.size}")
    return ClusterDelta(w_now - w_prev, cluster_index)


def similarity(grad: np.ndarray, delta, kind: SimilarityKind | str = SimilarityKind.COSINE,
               literal: bool = False) -> float:
    """Similarity between a device gradient and a cluster delta.

    Degenerate vectors (norm below 1e-12) give 0 for cosine and ``-||other||``
    for the euclidean variant, never NaN.
    """
    kind = SimilarityKind(kind)
    g = np.asarray(grad, dtype=np.float64)
    d = np.asarray(delta.values if isinstance(delta, ClusterDelta) else delta, dtype=np.float64)
    if g.shape != d.shape:
        raise StructuralError(f"gradient length {g.size} != delta length {d.size}")
    direction = g if literal else -g
    norm_dir = float(np.linalg.norm(direction))
    norm_d = float(np.linalg.norm(d))

    if kind is SimilarityKind.COSINE:
        if norm_dir < NORM_EPS or norm_d < NORM_EPS:
            return 0.0
        cos = float(direction @ d) / (norm_dir * norm_d)
        return min(1.0, max(-1.0, cos))

    if norm_dir < NORM_EPS:
        return -norm_d
    if norm_d < NORM_EPS:
        return -norm_dir
    return -float(np.linalg.norm(direction - d))


def similarities(grads: np.ndarray, deltas: np.ndarray, kind: SimilarityKind | str = SimilarityKind.COSINE,
                 literal: bool = False) -> np.ndarray:
    """Vectorized :func:`similarity`: gradients ``[..., K, P]`` against deltas ``[K, P]``."""
    kind = SimilarityKind(kind)
    g = np.asarray(grads, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    if d.ndim != 2 or g.shape[-2:] != d.shape:
        raise StructuralError(f"gradient stack {g.shape} does not match delta stack {d.shape}")
    sign = 1.0 if literal else -1.0
    norm_dir = np.sqrt(np.einsum("...kp,...kp->...k", g, g))
    norm_d = np.sqrt(np.einsum("kp,kp->k", d, d))
    small_dir = norm_dir < NORM_EPS
    small_d = norm_d < NORM_EPS
    if kind is SimilarityKind.COSINE:
        degenerate = small_dir | small_d
        denom = np.where(degenerate, 1.0, norm_dir * norm_d)
        cos = sign * np.einsum("...kp,kp->...k", g, d) / denom
        return np.where(degenerate, 0.0, np.clip(cos, -1.0, 1.0))
    diff = sign * g - d
    dist = np.sqrt(np.einsum("...kp,...kp->...k", diff, diff))
    return np.where(small_dir, -norm_d, np.where(small_d, -norm_dir, -dist))


def normalize_losses(losses: np.ndarray) -> np.ndarray:
    """Min-max rescale one device's K candidate losses onto [0, 1]."""
    losses = np.asarray(losses, dtype=np.float64)
    lo, hi = losses.min(), losses.max()
    if hi - lo <= 0:
        return np.zeros_like(losses)
    return (losses - lo) / (hi - lo)


def select_cluster(similarities, losses, lam: float,
                   normalize: bool = False) -> tuple[int, ScoreBreakdown]:
    """argmax_k  lam * S_k + (1 - lam) * (-L_k), ties going to the lowest index.

    With ``normalize`` the losses are min-max rescaled before mixing; the
    breakdown always reports the raw losses.
    """
    sims = np.asarray(similarities, dtype=np.float64)
    raw = np.asarray(losses, dtype=np.float64)
    if sims.ndim != 1 or sims.size == 0:
        raise StructuralError("similarities must be a non-empty 1-D array")
    if raw.shape != sims.shape:
        raise StructuralError(f"{sims.size} similarities but {raw.size} losses")
    if not (np.all(np.isfinite(sims)) and np.all(np.isfinite(raw))):
        raise StructuralError("similarities and losses must be finite")
    if not 0.0 <= lam <= 1.0:
        raise StructuralError(f"lambda must lie in [0, 1], got {lam}")

    mixed = normalize_losses(raw) if normalize else raw
    combined = lam * sims + (1.0 - lam) * (-mixed)
    # np.argmax returns the first maximum, which is the lowest-index tie-break
    chosen = int(np.argmax(combined))
    return chosen, ScoreBreakdown(sims, raw, combined, chosen)
