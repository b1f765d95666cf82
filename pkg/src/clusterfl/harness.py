"""Experiment configuration, seeded orchestration, lambda sweeps and CSV output."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import __version__, nn
from .clustering import SimilarityKind
from .data import (ClusterTaskSpec, DeviceDataset, GaussianTaskSpec, build_split_datasets,
                   load_idx, synth_gaussian_tasks)
from .errors import ConfigError, DataError, FormatError, StructuralError
from .federation import (PIN_ALWAYS, PIN_WHEN_EMPTY, POLICY_NONE, POLICY_PINNED, POLICY_RESCUE, DeviceState, EmptyClusterPolicy,
                         RoundConfig, ServerState, choose_pinned_devices, parallel_map, resolve_workers,
                         run_round)
from .metrics import mean_test_accuracy, per_cluster_train_loss, purity

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PURITY_TARGET = 0.9
NOT_REACHED = "not_reached"

# SeedSequence spawn-key namespaces; lambda never enters any of them.
_SEED_DATA, _SEED_INIT, _SEED_DEVICE, _SEED_PINS = range(4)


@dataclass
class ExperimentConfig:
    task: str = "synthetic"
    num_clusters: int = 4
    num_devices: int = 80
    lam: float = 0.2
    learning_rate: float = 0.05
    batch_size: int = 32
    rounds: int = 100
    similarity: str = "cosine"
    literal_eq3: bool = False
    normalize_losses: bool = False
    empty_cluster_policy: str = "pinned"
    pinned_devices: list[int] = field(default_factory=list)
    pin_mode: str = "when_empty"
    local_steps: int = 1
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    master_seed: int = 0
    identical_init: bool = False
    eval_every: int = 1
    record_timing: bool = False
    # synthetic task
    dim: int = 2
    num_classes: int = 2
    samples_per_device: int = 200
    test_samples_per_device: int = 50
    separation: float = 6.0
    noise_std: float = 1.0
    shared_scale: float = 0.0
    # idx_split task
    images_path: str = ""
    labels_path: str = ""
    total_classes: int = 10
    classes_per_cluster: int = 8
    min_overlap: int = 6
    class_sets: list[list[int]] = field(default_factory=list)
    test_fraction: float = 0.2

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.task in ("synthetic", "idx_split"), f"task must be synthetic or idx_split, got {self.task!r}")
        need(self.num_clusters >= 1, "num_clusters must be >= 1")
        need(self.num_devices >= 1, "num_devices must be >= 1")
        need(self.num_devices % self.num_clusters == 0,
             f"num_devices={self.num_devices} must be a multiple of num_clusters={self.num_clusters}")
        need(0.0 <= self.lam <= 1.0, f"lam must lie in [0, 1], got {self.lam}")
        need(math.isfinite(self.learning_rate) and self.learning_rate > 0, "learning_rate must be > 0")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.rounds >= 0, "rounds must be >= 0")
        need(self.similarity in [k.value for k in SimilarityKind], f"unknown similarity {self.similarity!r}")
        need(self.empty_cluster_policy in (POLICY_NONE, POLICY_PINNED, POLICY_RESCUE),
             f"unknown empty_cluster_policy {self.empty_cluster_policy!r}")
        need(self.pin_mode in (PIN_WHEN_EMPTY, PIN_ALWAYS), f"unknown pin_mode {self.pin_mode!r}")
        if self.pinned_devices:
            need(self.empty_cluster_policy == POLICY_PINNED, "pinned_devices given but policy is not pinned")
            need(len(self.pinned_devices) == self.num_clusters and
                 len(set(self.pinned_devices)) == self.num_clusters and
                 all(0 <= p < self.num_devices for p in self.pinned_devices),
                 f"pinned_devices must be {self.num_clusters} distinct ids in [0, {self.num_devices})")
        if self.empty_cluster_policy == POLICY_PINNED:
            need(self.num_devices >= self.num_clusters, "pinned policy needs num_devices >= num_clusters")
        need(self.local_steps >= 1, "local_steps must be >= 1")
        need(len(self.hidden_dims) == 2 and all(h >= 1 for h in self.hidden_dims),
             "hidden_dims must be two positive integers")
        need(self.master_seed >= 0, "master_seed must be >= 0")
        need(self.eval_every >= 1, "eval_every must be >= 1")
        if self.task == "synthetic":
            need(self.dim >= 2, "dim must be >= 2")
            need(self.num_classes >= 2, "num_classes must be >= 2")
            need(self.samples_per_device >= self.batch_size,
                 "samples_per_device must be >= batch_size for the synthetic task")
            need(self.test_samples_per_device >= 1, "test_samples_per_device must be >= 1")
            need(self.noise_std > 0 and self.separation >= 0 and self.shared_scale >= 0,
                 "noise_std must be > 0; separation and shared_scale >= 0")
        else:
            need(bool(self.images_path and self.labels_path), "idx_split needs images_path and labels_path")
            need(1 <= self.classes_per_cluster <= self.total_classes, "classes_per_cluster out of range")
            need(0 < self.test_fraction < 1, "test_fraction must lie in (0, 1)")
            need(self.samples_per_device >= 0, "samples_per_device must be >= 0")
            if self.class_sets:
                need(len(self.class_sets) == self.num_clusters, "class_sets needs one entry per cluster")
        return self

    @property
    def devices_per_cluster(self) -> int:
        return self.num_devices // self.num_clusters

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = cls()
        values = {}
        for name, value in raw.items():
            expected = type(getattr(defaults, name))
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if type(value) is not expected:
                raise ConfigError(f"{name}: expected {expected.__name__}, got {type(value).__name__} ({value!r})")
            if name in ("pinned_devices", "hidden_dims") and not all(
                    isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{name}: expected a list of integers")
            if name == "class_sets" and not all(
                    isinstance(s, list) and all(isinstance(v, int) for v in s) for s in value):
                raise ConfigError("class_sets: expected a list of integer lists")
            values[name] = value
        return cls(**values).validate()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    def mlp(self, input_dim: int) -> nn.MlpConfig:
        num_classes = self.num_classes if self.task == "synthetic" else self.total_classes
        return nn.MlpConfig(input_dim, tuple(self.hidden_dims), num_classes)

    def round_config(self, pinned: tuple[int, ...], workers: int | None = None) -> RoundConfig:
        return RoundConfig(
            lam=self.lam,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            similarity_kind=SimilarityKind(self.similarity),
            literal_eq3=self.literal_eq3,
            normalize_losses=self.normalize_losses,
            policy=EmptyClusterPolicy(self.empty_cluster_policy, pinned, self.pin_mode),
            local_steps=self.local_steps,
            workers=workers,
        )


def _rng(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


@dataclass
class RoundRecord:
    round: int
    purity: float
    accuracy: float | None
    losses: list[float | None]
    raw_losses: list[float | None]
    sizes: list[int]
    ms: float | None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    identities: np.ndarray | None
    models: np.ndarray
    pinned: tuple[int, ...]
    metadata: dict

    def rounds_to_purity(self, target: float = PURITY_TARGET) -> int | None:
        return rounds_to_purity(self.records, target)


def rounds_to_purity(records, target: float = PURITY_TARGET) -> int | None:
    """Number of rounds executed until purity first reaches ``target``; None if never."""
    for rec in records:
        if rec.purity >= target:
            return rec.round + 1
    return None


def build_devices(cfg: ExperimentConfig) -> tuple[list[DeviceDataset], int, dict]:
    """Device datasets, their feature width, and split metadata."""
    rng = _rng(cfg.master_seed, _SEED_DATA)
    if cfg.task == "synthetic":
        spec = GaussianTaskSpec(cfg.num_clusters, cfg.devices_per_cluster, cfg.samples_per_device,
                                cfg.test_samples_per_device, cfg.num_classes, cfg.dim,
                                cfg.separation, cfg.noise_std, cfg.shared_scale)
        return synth_gaussian_tasks(spec, rng), cfg.dim, {}
    try:
        features, labels = load_idx(cfg.images_path, cfg.labels_path)
        spec = ClusterTaskSpec(cfg.num_clusters, cfg.devices_per_cluster, cfg.classes_per_cluster,
                               cfg.total_classes, cfg.min_overlap, cfg.samples_per_device, cfg.test_fraction)
        devices, class_sets = build_split_datasets(features, labels, spec, rng, cfg.class_sets or None)
    except OSError as exc:
        raise DataError(f"cannot read {exc.filename}: {exc.strerror}") from exc
    except (FormatError, StructuralError) as exc:
        raise DataError(str(exc)) from exc
    if any(d.num_train < cfg.batch_size for d in devices):
        raise DataError(f"some device has fewer than batch_size={cfg.batch_size} training samples")
    return devices, features.shape[1], {"class_sets": class_sets}


def initial_models(cfg: ExperimentConfig, mlp: nn.MlpConfig) -> np.ndarray:
    """One independently seeded initialization per cluster, or K copies of one with ``identical_init``."""
    return np.stack([nn.init_params(mlp, _rng(cfg.master_seed, _SEED_INIT, 0 if cfg.identical_init else k))
                     for k in range(cfg.num_clusters)])


def resolve_pins(cfg: ExperimentConfig) -> tuple[int, ...]:
    if cfg.empty_cluster_policy != POLICY_PINNED:
        return ()
    if cfg.pinned_devices:
        return tuple(cfg.pinned_devices)
    return choose_pinned_devices(cfg.num_devices, cfg.num_clusters, _rng(cfg.master_seed, _SEED_PINS))


def metadata(cfg: ExperimentConfig, pinned, extra: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "config": cfg.to_dict(),
        "loss_function": nn.LOSS_NAME,
        "similarity_direction": "gradient (literal)" if cfg.literal_eq3 else "negated gradient (descent)",
        "pinned_devices": list(pinned),
        "pins_persist_all_rounds": True,
        "pin_mode": cfg.pin_mode,
        **extra,
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> ExperimentResult:
    cfg.validate()
    devices_data, input_dim, extra = build_devices(cfg)
    mlp = cfg.mlp(input_dim)
    truth = np.array([d.ground_truth_cluster for d in devices_data])
    pinned = resolve_pins(cfg)
    round_cfg = cfg.round_config(pinned, workers)
    devices = [DeviceState(i, ds, _rng(cfg.master_seed, _SEED_DEVICE, i)) for i, ds in enumerate(devices_data)]
    server = ServerState.initial(initial_models(cfg, mlp))

    records = []
    identities = None
    for t in range(cfg.rounds):
        started = time.perf_counter()
        server, outcome = run_round(server, devices, mlp, round_cfg)
        identities = outcome.identities
        acc = None
        if (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1:
            acc = mean_test_accuracy(devices, server.models_now, mlp)
        elapsed = (time.perf_counter() - started) * 1000.0
        records.append(RoundRecord(
            round=t,
            purity=purity(identities, truth, cfg.num_clusters),
            accuracy=acc,
            losses=per_cluster_train_loss(identities, outcome.decision_losses, outcome.batch_sizes,
                                          cfg.num_clusters),
            raw_losses=per_cluster_train_loss(identities, outcome.decision_losses, outcome.batch_sizes,
                                              cfg.num_clusters, normalized=False),
            sizes=outcome.cluster_sizes.tolist(),
            ms=elapsed if cfg.record_timing else None,
        ))
        log.debug("round %d purity %.3f sizes %s", t, records[-1].purity, records[-1].sizes)

    result = ExperimentResult(cfg, records, identities, server.models_now, pinned,
                              metadata(cfg, pinned, extra))
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _header_line(cfg: ExperimentConfig) -> str:
    return (f"# clusterfl schema={SCHEMA_VERSION} version={__version__} "
            f"config={json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))}\n")


def rounds_csv(result: ExperimentResult) -> str:
    K = result.config.num_clusters
    buf = io.StringIO()
    buf.write(_header_line(result.config))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "purity", "acc"] + [f"loss_c{k}" for k in range(K)]
                    + [f"size_c{k}" for k in range(K)] + ["ms"])
    for r in result.records:
        writer.writerow([_fmt(v) for v in [r.round, r.purity, r.accuracy, *r.losses, *r.sizes, r.ms]])
    return buf.getvalue()


def raw_losses_csv(result: ExperimentResult) -> str:
    K = result.config.num_clusters
    buf = io.StringIO()
    buf.write(_header_line(result.config))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round"] + [f"rawloss_c{k}" for k in range(K)])
    for r in result.records:
        writer.writerow([_fmt(v) for v in [r.round, *r.raw_losses]])
    return buf.getvalue()


def write_outputs(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rounds.csv").write_text(rounds_csv(result))
    (out / "losses_raw.csv").write_text(raw_losses_csv(result))
    (out / "metadata.json").write_text(json.dumps(result.metadata, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class SweepCell:
    lam: float
    seed: int
    rounds_to_target: int | None
    final_accuracy: float | None
    final_purity: float | None


@dataclass
class SweepSummary:
    lam: float
    median_rounds_to_target: float | None
    median_final_accuracy: float | None


def _median_rounds(values) -> float | None:
    med = statistics.median([math.inf if v is None else v for v in values])
    return None if math.isinf(med) else float(med)


def sweep(cfg: ExperimentConfig, lambdas, seeds, out_dir=None, workers: int | None = None,
          target: float = PURITY_TARGET) -> tuple[list[SweepCell], list[SweepSummary]]:
    """Run every (lambda, seed) pair; seeds replace ``master_seed``."""
    lambdas, seeds = list(lambdas), list(seeds)
    if not lambdas or not seeds:
        raise ConfigError("sweep needs at least one lambda and one seed")
    cells_cfg = [cfg.replace(lam=float(lam), master_seed=int(seed)) for lam in lambdas for seed in seeds]
    workers = resolve_workers(workers)

    def one(c: ExperimentConfig) -> SweepCell:
        res = run_experiment(c, workers=1 if workers > 1 else None)
        last = res.records[-1] if res.records else None
        return SweepCell(c.lam, c.master_seed, res.rounds_to_purity(target),
                         last.accuracy if last else None, last.purity if last else None)

    cells = parallel_map(one, cells_cfg, workers)
    summaries = []
    for lam in lambdas:
        mine = [c for c in cells if c.lam == float(lam)]
        accs = [c.final_accuracy for c in mine if c.final_accuracy is not None]
        summaries.append(SweepSummary(float(lam), _median_rounds([c.rounds_to_target for c in mine]),
                                      statistics.median(accs) if accs else None))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(sweep_csv(cfg, cells, summaries))
    return cells, summaries


def sweep_csv(cfg: ExperimentConfig, cells: list[SweepCell], summaries: list[SweepSummary]) -> str:
    def rounds(v):
        return NOT_REACHED if v is None else _fmt(v)

    buf = io.StringIO()
    buf.write(_header_line(cfg))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lambda", "seed", "rounds_to_purity_0.9", "final_acc", "final_purity"])
    for c in cells:
        writer.writerow([_fmt(c.lam), c.seed, rounds(c.rounds_to_target), _fmt(c.final_accuracy),
                         _fmt(c.final_purity)])
    for s in summaries:
        writer.writerow([_fmt(s.lam), "median", rounds(s.median_rounds_to_target),
                         _fmt(s.median_final_accuracy), ""])
    return buf.getvalue()
