"""Non-IID device datasets: rotated Gaussian tasks, class-subset splits, IDX files."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, StructuralError
from .nn import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class DeviceDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    ground_truth_cluster: int

    @property
    def num_train(self) -> int:
        return self.train_y.shape[0]


@dataclass(frozen=True)
class GaussianTaskSpec:
    """Cluster ``k`` places class ``c`` at angle ``2*pi*(c/C + k/K)`` in the
    first two coordinates, at distance ``separation * noise_std / 2`` from the
    origin. Remaining coordinates carry a per-class offset of size
    ``shared_scale * noise_std`` that is the same in every cluster, so tasks
    agree on part of the feature space and conflict on the rest.
    """
    num_clusters: int
    devices_per_cluster: int
    samples_per_device: int = 200
    test_samples_per_device: int = 50
    num_classes: int = 2
    dim: int = 2
    separation: float = 6.0
    noise_std: float = 1.0
    shared_scale: float = 0.0

    @property
    def num_devices(self) -> int:
        return self.num_clusters * self.devices_per_cluster

    def validate(self):
        for name in ("num_clusters", "devices_per_cluster", "samples_per_device",
                     "test_samples_per_device"):
            if getattr(self, name) < 1:
                raise StructuralError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise StructuralError("num_classes must be >= 2")
        if self.dim < 2:
            raise StructuralError("dim must be >= 2 (rotation acts on the first two coordinates)")
        if not (self.noise_std > 0 and self.separation >= 0 and self.shared_scale >= 0):
            raise StructuralError("noise_std must be > 0; separation and shared_scale >= 0")


@dataclass(frozen=True)
class ClusterTaskSpec:
    num_clusters: int
    devices_per_cluster: int
    classes_per_cluster: int = 8
    total_classes: int = 10
    min_overlap: int = 6
    samples_per_device: int = 0  # 0 keeps every sample the split yields
    test_fraction: float = 0.2

    @property
    def num_devices(self) -> int:
        return self.num_clusters * self.devices_per_cluster

    def validate(self):
        if self.num_clusters < 1 or self.devices_per_cluster < 1:
            raise StructuralError("num_clusters and devices_per_cluster must be >= 1")
        if not 1 <= self.classes_per_cluster <= self.total_classes:
            raise StructuralError(
                f"classes_per_cluster={self.classes_per_cluster} must lie in [1, total_classes={self.total_classes}]")
        if self.samples_per_device < 0:
            raise StructuralError("samples_per_device must be >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise StructuralError("test_fraction must lie in (0, 1)")


def _stratified_split(x, y, test_fraction, rng):
    test_idx = []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(members.size)]
        n_test = int(round(test_fraction * members.size))
        if members.size > 1:
            n_test = min(max(n_test, 1), members.size - 1)
        test_idx.append(members[:n_test])
    test_idx = np.sort(np.concatenate(test_idx)) if test_idx else np.empty(0, dtype=np.int64)
    mask = np.zeros(y.shape[0], dtype=bool)
    mask[test_idx] = True
    return x[~mask], y[~mask], x[mask], y[mask]


def gaussian_class_means(spec: GaussianTaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Means of shape ``[K, C, dim]``."""
    radius = spec.separation * spec.noise_std / 2.0
    shared = rng.standard_normal((spec.num_classes, spec.dim - 2))
    norms = np.linalg.norm(shared, axis=1, keepdims=True)
    shared = np.divide(shared, norms, out=np.zeros_like(shared), where=norms > 0)
    shared *= spec.shared_scale * spec.noise_std
    means = np.zeros((spec.num_clusters, spec.num_classes, spec.dim))
    for k in range(spec.num_clusters):
        for c in range(spec.num_classes):
            angle = 2 * np.pi * (c / spec.num_classes + k / spec.num_clusters)
            means[k, c, 0] = radius * np.cos(angle)
            means[k, c, 1] = radius * np.sin(angle)
            means[k, c, 2:] = shared[c]
    return means


def _draw_gaussian(means_k, n, noise_std, rng):
    num_classes, dim = means_k.shape
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    x = means_k[labels] + noise_std * rng.standard_normal((n, dim))
    return x, labels.astype(np.int64)


def synth_gaussian_tasks(spec: GaussianTaskSpec, rng: np.random.Generator) -> list[DeviceDataset]:
    """Devices ordered cluster-major: device ``i`` belongs to cluster ``i // devices_per_cluster``."""
    spec.validate()
    means = gaussian_class_means(spec, rng)
    devices = []
    for k in range(spec.num_clusters):
        for _ in range(spec.devices_per_cluster):
            tx, ty = _draw_gaussian(means[k], spec.samples_per_device, spec.noise_std, rng)
            vx, vy = _draw_gaussian(means[k], spec.test_samples_per_device, spec.noise_std, rng)
            devices.append(DeviceDataset(tx, ty, vx, vy, k))
    return devices


def _window_overlap(offset: int, width: int, total: int) -> int:
    offset %= total
    return max(0, width - offset) + max(0, width - (total - offset))


def sliding_window_class_sets(spec: ClusterTaskSpec, rng: np.random.Generator) -> list[list[int]]:
    """Cluster ``k`` takes ``classes_per_cluster`` consecutive entries of a
    seeded class permutation, starting at ``k * stride`` (cyclically).

    Among strides that give every cluster a distinct window and keep every
    pair at or above ``min_overlap`` shared classes, the one with the smallest
    largest pairwise overlap wins (lowest stride on ties).
    """
    spec.validate()
    K, C, w = spec.num_clusters, spec.total_classes, spec.classes_per_cluster
    lower = max(0, 2 * w - C)
    if spec.min_overlap > w:
        raise StructuralError(
            f"min_overlap={spec.min_overlap} exceeds classes_per_cluster={w}")

    best = None
    for stride in range(C):
        if len({(k * stride) % C for k in range(K)}) != K:
            continue
        overlaps = [_window_overlap((b - a) * stride, w, C) for a in range(K) for b in range(a + 1, K)]
        if overlaps and min(overlaps) < spec.min_overlap:
            continue
        key = max(overlaps, default=0)
        if best is None or key < best[0]:
            best = (key, stride)
    if best is None:
        raise StructuralError(
            f"cannot give {K} clusters distinct {w}-of-{C} class windows with every pair sharing "
            f">= {spec.min_overlap} classes (two {w}-subsets of {C} classes always share >= {lower}, "
            f"and at most {C} distinct windows exist)")
    stride = best[1]
    order = rng.permutation(C)
    return [sorted(int(order[(k * stride + j) % C]) for j in range(w)) for k in range(K)]


def class_subset_split(labels: np.ndarray, spec: ClusterTaskSpec, rng: np.random.Generator,
                       class_sets: list[list[int]] | None = None) -> tuple[list[np.ndarray], list[list[int]]]:
    """Partition sample indices among ``K * devices_per_cluster`` devices.

    Samples of each class are divided evenly at random among the clusters
    whose class-set contains it; each cluster's pool is then shuffled and
    dealt equally to its devices, dropping the remainder. Devices are ordered
    cluster-major.
    """
    spec.validate()
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < spec.total_classes:
        raise StructuralError(
            f"expected {spec.total_classes} distinct labels, found {present.size}")
    if class_sets is None:
        class_sets = sliding_window_class_sets(spec, rng)
    else:
        class_sets = [sorted(int(c) for c in s) for s in class_sets]
        if len(class_sets) != spec.num_clusters:
            raise StructuralError(f"{len(class_sets)} class sets given for {spec.num_clusters} clusters")
        for s in class_sets:
            if len(set(s)) != len(s) or not set(s) <= set(present.tolist()):
                raise StructuralError(f"invalid class set {s}")

    pools: list[list[np.ndarray]] = [[] for _ in range(spec.num_clusters)]
    for c in sorted({c for s in class_sets for c in s}):
        owners = [k for k, s in enumerate(class_sets) if c in s]
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        for k, part in zip(owners, np.array_split(members, len(owners))):
            pools[k].append(part)

    device_indices = []
    for k in range(spec.num_clusters):
        pool = np.concatenate(pools[k])
        pool = pool[rng.permutation(pool.size)]
        per_device = pool.size // spec.devices_per_cluster
        if spec.samples_per_device:
            per_device = min(per_device, spec.samples_per_device)
        if per_device < 1:
            raise StructuralError(f"cluster {k} has too few samples for {spec.devices_per_cluster} devices")
        for d in range(spec.devices_per_cluster):
            device_indices.append(np.sort(pool[d * per_device:(d + 1) * per_device]))
    return device_indices, class_sets


def build_split_datasets(features: np.ndarray, labels: np.ndarray, spec: ClusterTaskSpec,
                         rng: np.random.Generator,
                         class_sets: list[list[int]] | None = None) -> tuple[list[DeviceDataset], list[list[int]]]:
    device_indices, class_sets = class_subset_split(labels, spec, rng, class_sets)
    devices = []
    for i, idx in enumerate(device_indices):
        tx, ty, vx, vy = _stratified_split(features[idx], labels[idx], spec.test_fraction, rng)
        if ty.size == 0 or vy.size == 0:
            raise StructuralError(f"device {i} ends up with an empty train or test split")
        devices.append(DeviceDataset(tx, ty, vx, vy, i // spec.devices_per_cluster))
    return devices, class_sets


def sample_minibatch(ds: DeviceDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform sample without replacement from the training split."""
    n = ds.num_train
    if not 1 <= batch_size <= n:
        raise StructuralError(f"batch_size={batch_size} must lie in [1, train size {n}]")
    idx = rng.permutation(n)[:batch_size]
    return Batch(ds.train_x[idx], ds.train_y[idx], idx)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(buf: bytes, n_ints: int, what: str) -> tuple[int, ...]:
    if len(buf) < 4 * n_ints:
        raise FormatError(f"{what}: header needs {4 * n_ints} bytes, file has {len(buf)}", len(buf))
    return struct.unpack(f">{n_ints}I", buf[:4 * n_ints])


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label file pair (optionally gzipped).

    Returns features of shape ``[N, rows*cols]`` scaled to [0, 1] and int64 labels.
    """
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)

    (magic,) = _header(img, 1, "images")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"images: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", 0)
    _, n_images, rows, cols = _header(img, 4, "images")
    expected = 16 + n_images * rows * cols
    if len(img) != expected:
        raise FormatError(
            f"images: expected {expected} bytes for {n_images}x{rows}x{cols}, file has {len(img)}",
            min(len(img), expected))

    (magic,) = _header(lab, 1, "labels")
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"labels: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", 0)
    _, n_labels = _header(lab, 2, "labels")
    if len(lab) != 8 + n_labels:
        raise FormatError(f"labels: expected {8 + n_labels} bytes, file has {len(lab)}",
                          min(len(lab), 8 + n_labels))
    if n_labels != n_images:
        raise FormatError(f"label count {n_labels} does not match image count {n_images}", 4)

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16)
    features = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return features, labels


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images ``[N, rows, cols]`` and labels ``[N]`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
