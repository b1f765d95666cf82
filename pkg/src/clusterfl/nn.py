"""Three-layer ReLU MLP on flat parameter vectors, with hand-written backprop.

Parameter layout (frozen, shared by every module that does vector arithmetic
on models): layer-major, weights before biases, weight matrices stored
row-major with shape ``(fan_in, fan_out)`` so that ``z = x @ W + b``::

    [W1 (in*h1), b1 (h1), W2 (h1*h2), b2 (h2), W3 (h2*C), b3 (C)]

The training loss is the *sum* of per-sample cross-entropies over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, StructuralError

LOSS_NAME = "softmax_cross_entropy_sum"


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, int] = (64, 64)
    num_classes: int = 2

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden_dims)
        object.__setattr__(self, "hidden_dims", hidden)
        if len(hidden) != 2:
            raise StructuralError(f"hidden_dims must have 2 entries, got {len(hidden)}")
        for name, value in (("input_dim", self.input_dim), ("hidden_dims[0]", hidden[0]),
                            ("hidden_dims[1]", hidden[1]), ("num_classes", self.num_classes)):
            if int(value) < 1:
                raise StructuralError(f"{name} must be >= 1, got {value}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        h1, h2 = self.hidden_dims
        return [(self.input_dim, h1), (h1, h2), (h2, self.num_classes)]

    @property
    def num_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims)

    def loss_and_gradients(self, models, features, labels):
        """Model interface used by the round engine; see :func:`multi_loss_and_gradient`."""
        return multi_loss_and_gradient(models, self, features, labels)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise StructuralError(f"batch features must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise StructuralError(f"batch labels shape {y.shape} does not match {x.shape[0]} rows")
        if x.shape[0] < 1:
            raise StructuralError("batch size must be >= 1")
        if not np.all(np.isfinite(x)):
            raise NumericError("batch features contain non-finite values")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.features.shape[0]


def unpack(params: np.ndarray, cfg: MlpConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split parameters into ``[(W, b), ...]`` views, one pair per layer.

    Accepts one flat vector or a stack such as ``[K, num_params]``, in which
    case the views keep the leading axes.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.ndim < 1 or params.shape[-1] != cfg.num_params:
        raise StructuralError(
            f"parameter vector length {params.shape[-1] if params.ndim else 0} "
            f"does not match num_params={cfg.num_params}")
    lead = params.shape[:-1]
    layers = []
    offset = 0
    for fan_in, fan_out in cfg.layer_dims:
        w = params[..., offset:offset + fan_in * fan_out].reshape(*lead, fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[..., offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def pack(layers) -> np.ndarray:
    lead = layers[0][1].shape[:-1]
    return np.concatenate([part.reshape(*lead, -1) for w, b in layers for part in (w, b)], axis=-1)


def init_params(cfg: MlpConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases of each layer."""
    layers = []
    for fan_in, fan_out in cfg.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((w, b))
    return pack(layers)


def _as_stack(params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    return params[None, :] if params.ndim == 1 else params


def _check_labels(cfg: MlpConfig, labels: np.ndarray):
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise StructuralError(f"labels must lie in [0, num_classes={cfg.num_classes})")


def _forward(stack, cfg, x):
    """``stack`` is ``[K, P]``, ``x`` is ``[M, B, input_dim]``; activations come out ``[K, M, B, .]``.

    Every (model, batch) pair is its own matmul slice, so a slice's result does
    not depend on how many other models or batches share the call.
    """
    if x.shape[-1] != cfg.input_dim:
        raise StructuralError(
            f"batch feature width {x.shape[-1]} does not match input_dim={cfg.input_dim}")
    (w1, b1), (w2, b2), (w3, b3) = unpack(stack, cfg)
    # overflow surfaces as NumericError from the loss/gradient checks
    with np.errstate(over="ignore", invalid="ignore"):
        z1 = x[None] @ w1[:, None] + b1[:, None, None, :]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ w2[:, None] + b2[:, None, None, :]
        a2 = np.maximum(z2, 0.0)
        logits = a2 @ w3[:, None] + b3[:, None, None, :]
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits overflowed to non-finite values")
    return logits, (z1, a1, z2, a2)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _pick(logp: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``logp[k, m, b, labels[m, b]]`` as a ``[K, M, B]`` array."""
    return np.take_along_axis(logp, np.broadcast_to(labels[None, :, :, None], logp.shape[:-1] + (1,)),
                              axis=-1)[..., 0]


def _sum_cross_entropy(logp: np.ndarray, labels: np.ndarray) -> np.ndarray:
    losses = -_pick(logp, labels).sum(axis=-1)
    if not np.all(np.isfinite(losses)):
        raise NumericError(f"non-finite loss {losses}")
    return losses


def forward(params: np.ndarray, cfg: MlpConfig, batch: Batch) -> np.ndarray:
    """Class-probability matrix of shape ``[B, num_classes]``."""
    _check_labels(cfg, batch.labels)
    logits, _ = _forward(_as_stack(params), cfg, batch.features[None])
    return np.exp(_log_softmax(logits))[0, 0]


def predict(params: np.ndarray, cfg: MlpConfig, features: np.ndarray) -> np.ndarray:
    """Predicted classes for ``[N, d]`` features, or ``[M, N]`` for an ``[M, N, d]`` stack."""
    x = np.asarray(features, dtype=np.float64)
    logits, _ = _forward(_as_stack(params), cfg, x if x.ndim == 3 else x[None])
    preds = logits[0].argmax(axis=-1)
    return preds if x.ndim == 3 else preds[0]


def batch_loss(params: np.ndarray, cfg: MlpConfig, batch: Batch) -> float:
    _check_labels(cfg, batch.labels)
    logits, _ = _forward(_as_stack(params), cfg, batch.features[None])
    return float(_sum_cross_entropy(_log_softmax(logits), batch.labels[None])[0, 0])


def multi_loss_and_gradient(models: np.ndarray, cfg: MlpConfig, features: np.ndarray,
                            labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Summed cross-entropy of ``M`` equal-size batches under each of ``K`` models.

    ``features`` is ``[M, B, input_dim]`` and ``labels`` ``[M, B]``. Returns
    losses ``[M, K]`` and exact gradients ``[M, K, num_params]``.
    """
    stack = _as_stack(models)
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 3 or y.shape != x.shape[:2]:
        raise StructuralError(f"features {x.shape} and labels {y.shape} must be [M, B, d] and [M, B]")
    _check_labels(cfg, y)
    logits, (z1, a1, z2, a2) = _forward(stack, cfg, x)
    logp = _log_softmax(logits)
    losses = _sum_cross_entropy(logp, y)

    (_, _), (w2, _), (w3, _) = unpack(stack, cfg)
    dlogits = np.exp(logp)
    onehot = np.arange(cfg.num_classes) == y[None, :, :, None]
    dlogits -= onehot

    # written straight into a [K, M, P] buffer through per-layer views; returned as an [M, K, P] view
    grads = np.empty((stack.shape[0], x.shape[0], cfg.num_params))
    (gw1, gb1), (gw2, gb2), (gw3, gb3) = unpack(grads, cfg)
    np.matmul(a2.swapaxes(-1, -2), dlogits, out=gw3)
    dlogits.sum(axis=2, out=gb3)
    dz2 = (dlogits @ w3[:, None].swapaxes(-1, -2)) * (z2 > 0)
    np.matmul(a1.swapaxes(-1, -2), dz2, out=gw2)
    dz2.sum(axis=2, out=gb2)
    dz1 = (dz2 @ w2[:, None].swapaxes(-1, -2)) * (z1 > 0)
    np.matmul(x[None].swapaxes(-1, -2), dz1, out=gw1)
    dz1.sum(axis=2, out=gb1)

    if not np.all(np.isfinite(grads)):
        raise NumericError("gradient contains non-finite values")
    return losses.T, grads.transpose(1, 0, 2)


def stacked_loss_and_gradient(models: np.ndarray, cfg: MlpConfig, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """One batch under each of ``K`` models: losses ``[K]``, gradients ``[K, num_params]``."""
    losses, grads = multi_loss_and_gradient(models, cfg, batch.features[None], batch.labels[None])
    return losses[0], grads[0]


def loss_and_gradient(params: np.ndarray, cfg: MlpConfig, batch: Batch) -> tuple[float, np.ndarray]:
    losses, grads = stacked_loss_and_gradient(_as_stack(params), cfg, batch)
    return float(losses[0]), grads[0]


def batch_gradient(params: np.ndarray, cfg: MlpConfig, batch: Batch) -> np.ndarray:
    return loss_and_gradient(params, cfg, batch)[1]


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise StructuralError(f"params length {params.size} != grad length {grad.size}")
    if not (np.isfinite(lr) and lr > 0):
        raise StructuralError(f"learning rate must be positive and finite, got {lr}")
    return params - lr * grad
