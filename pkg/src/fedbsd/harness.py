"""Experiment orchestration: configuration, end-to-end runs, evaluation,
and metrics logging.

A whole experiment is a pure function of (config, seed): the metrics CSV
is byte-identical across repeat runs and across worker thread counts.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .data import (ALLOC_LOGNORMAL, ALLOC_UNIFORM, Dataset, PartitionSpec,
                   gen_synthetic_blobs, load_idx, partition_by_classes)
from .losses import DISTILL_MSE, DISTILL_SOFTMAX_KL, KL_FORWARD, KL_REVERSE
from .protocol import (BACKBONE_INIT_GLOBAL, BACKBONE_INIT_LOCAL,
                       HEAD_FEATURES_GLOBAL, HEAD_FEATURES_LOCAL, STRATEGIES,
                       ClientState, ServerState, local_finetune_head,
                       run_round, stream)

METRICS_SCHEMA = "fedbsd-metrics v1"

DATA_SYNTHETIC = "synthetic"
DATA_IDX = "idx"


class ConfigError(ValueError):
    """Invalid configuration file or values."""


@dataclass
class TrainConfig:
    """All scalars of one experiment; defaults follow the reference protocol
    (tau=2, lambda=1, lr=0.01, momentum=0.5, participation=0.1)."""

    rounds: int = 40
    participation: float = 0.1
    head_epochs: int = 10
    backbone_epochs: int = 5  # also the local-epoch count for fedavg/local
    lr: float = 0.01
    momentum: float = 0.5
    tau: float = 2.0
    lam: float = 1.0
    batch_size: int = 50
    strategy: str = "fedbsd"
    seed: int = 0
    finetune_epochs: int = 0
    # ablation switches
    kl_direction: str = KL_FORWARD
    tau2_rescale: bool = False
    feature_distill_mode: str = DISTILL_SOFTMAX_KL
    backbone_init_mode: str = BACKBONE_INIT_LOCAL
    head_feature_source: str = HEAD_FEATURES_GLOBAL
    size_weighted_agg: bool = False
    # model
    hidden_dims: tuple[int, ...] = (64, 64)
    # data source
    data_source: str = DATA_SYNTHETIC
    idx_images: str = ""
    idx_labels: str = ""
    synth_classes: int = 10
    synth_dim: int = 32
    synth_samples_per_class: int = 100
    synth_spread: float = 0.3
    # partitioning
    num_clients: int = 20
    classes_per_client: int = 2
    allocation: str = ALLOC_UNIFORM
    lognormal_sigma: float = 1.0

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not 0 < self.participation <= 1:
            raise ConfigError(f"participation must be in (0, 1], got {self.participation}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.momentum < 0:
            raise ConfigError(f"momentum must be >= 0, got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.head_epochs < 0 or self.backbone_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.kl_direction not in (KL_FORWARD, KL_REVERSE):
            raise ConfigError(f"kl_direction must be forward or reverse, got {self.kl_direction!r}")
        if self.feature_distill_mode not in (DISTILL_SOFTMAX_KL, DISTILL_MSE):
            raise ConfigError(f"feature_distill_mode must be {DISTILL_SOFTMAX_KL} or "
                              f"{DISTILL_MSE}, got {self.feature_distill_mode!r}")
        if self.backbone_init_mode not in (BACKBONE_INIT_LOCAL, BACKBONE_INIT_GLOBAL):
            raise ConfigError(f"backbone_init_mode must be local or global, "
                              f"got {self.backbone_init_mode!r}")
        if self.head_feature_source not in (HEAD_FEATURES_GLOBAL, HEAD_FEATURES_LOCAL):
            raise ConfigError(f"head_feature_source must be global or local, "
                              f"got {self.head_feature_source!r}")
        if not self.hidden_dims or any(d < 1 for d in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.data_source not in (DATA_SYNTHETIC, DATA_IDX):
            raise ConfigError(f"data_source must be synthetic or idx, got {self.data_source!r}")
        if self.data_source == DATA_IDX and not (self.idx_images and self.idx_labels):
            raise ConfigError("idx data source needs idx_images and idx_labels paths")
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.classes_per_client < 1:
            raise ConfigError(f"classes_per_client must be >= 1, got {self.classes_per_client}")
        if self.allocation not in (ALLOC_UNIFORM, ALLOC_LOGNORMAL):
            raise ConfigError(f"allocation must be uniform or lognormal, got {self.allocation!r}")
        if self.lognormal_sigma < 0:
            raise ConfigError(f"lognormal_sigma must be >= 0, got {self.lognormal_sigma}")

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(num_clients=self.num_clients,
                             classes_per_client=self.classes_per_client,
                             allocation=self.allocation,
                             lognormal_sigma=self.lognormal_sigma,
                             seed=self.seed)


# config-file key -> dataclass field ("lambda" is a Python keyword)
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


def _config_keys() -> list[str]:
    return [_FIELD_TO_KEY.get(f.name, f.name) for f in fields(TrainConfig)]


def _parse_value(key: str, raw: str, kind) -> object:
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    # tuple[int, ...] (hidden_dims)
    return tuple(int(part) for part in raw.split(",") if part.strip())


def load_config(path: str | None) -> tuple[TrainConfig, PartitionSpec]:
    """Parse a flat key=value file; missing keys keep their defaults.

    Unknown keys and malformed values raise ConfigError (with the valid
    key list / the offending line number).
    """
    cfg = TrainConfig()
    if path is not None:
        types = {f.name: type(getattr(cfg, f.name)) for f in fields(TrainConfig)}
        try:
            with open(path) as f:
                lines = f.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for lineno, line in enumerate(lines, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, raw = text.split("=", 1)
            key = key.strip()
            name = _KEY_TO_FIELD.get(key, key)
            if name not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                                  + ", ".join(sorted(_config_keys())))
            try:
                value = _parse_value(key, raw, types[name])
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
            setattr(cfg, name, value)
    try:
        cfg.validate()
    except ConfigError as e:
        raise ConfigError(f"{path or '<defaults>'}: {e}") from e
    return cfg, cfg.partition_spec()


def config_snapshot(cfg: TrainConfig) -> dict[str, str]:
    """Canonical string form of every config key, for echoing into logs."""
    snap = {}
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        key = _FIELD_TO_KEY.get(f.name, f.name)
        if isinstance(value, bool):
            snap[key] = "true" if value else "false"
        elif isinstance(value, tuple):
            snap[key] = ",".join(str(v) for v in value)
        else:
            snap[key] = repr(value) if isinstance(value, float) else str(value)
    return snap


def write_config(cfg: TrainConfig, path: str) -> None:
    snap = config_snapshot(cfg)
    with open(path, "w") as f:
        for key in sorted(snap):
            f.write(f"{key}={snap[key]}\n")


@dataclass
class MetricsLog:
    """Per-round, per-client test accuracy plus the config that produced it."""

    accuracy: np.ndarray  # (rounds, clients)
    config: dict[str, str] = field(default_factory=dict)
    ft_accuracy: np.ndarray | None = None  # set when post-run fine-tuning ran

    @property
    def num_rounds(self) -> int:
        return self.accuracy.shape[0]

    def round_means(self) -> np.ndarray:
        return self.accuracy.mean(axis=1)


def average_last_k(log: MetricsLog, k: int = 10) -> float:
    """Mean of the per-round mean accuracy over the last k rounds."""
    if log.num_rounds < k:
        raise ValueError(f"log has {log.num_rounds} rounds, need >= {k}")
    return float(log.round_means()[-k:].mean())


def evaluate_client(model: nn.SplitModel, test: Dataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    feats, _ = nn.forward_backbone(model.backbone, test.features)
    logits = nn.forward_head(model.head, feats)
    pred = np.argmax(logits, axis=1)  # first maximum -> lowest class index
    return float(np.mean(pred == test.labels))


def build_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.data_source == DATA_IDX:
        return load_idx(cfg.idx_images, cfg.idx_labels)
    return gen_synthetic_blobs(cfg.synth_classes, cfg.synth_dim,
                               cfg.synth_samples_per_class, cfg.synth_spread,
                               stream(cfg.seed, "data"))


def _evaluate_all(clients: list[ClientState], threads: int) -> list[float]:
    def one(c: ClientState) -> float:
        return evaluate_client(c.model, c.shard.test)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, clients))
    return [one(c) for c in clients]


def run_experiment(cfg: TrainConfig, pspec: PartitionSpec | None = None,
                   dataset: Dataset | None = None, threads: int = 1,
                   return_state: bool = False):
    """Full run: build data, partition, train for cfg.rounds, evaluating
    every client every round; optional post-run head fine-tuning.

    ``threads`` is an execution knob, not part of the experiment identity;
    results are identical for any value.
    """
    cfg.validate()
    if dataset is None:
        dataset = build_dataset(cfg)
    if pspec is None:
        pspec = cfg.partition_spec()
    shards = partition_by_classes(dataset, pspec, stream(cfg.seed, "partition"))

    global_model = nn.build_model(dataset.dim, list(cfg.hidden_dims), dataset.num_classes)
    nn.init_params(global_model, stream(cfg.seed, "init"))
    clients = [ClientState(k, shard, nn.clone_model(global_model))
               for k, shard in enumerate(shards)]
    server = ServerState(global_model, round=0, master_seed=cfg.seed)

    rows = []
    for _ in range(cfg.rounds):
        run_round(server, clients, cfg, threads=threads)
        rows.append(_evaluate_all(clients, threads))

    ft_row = None
    if cfg.finetune_epochs > 0:
        def finetune(c: ClientState) -> None:
            local_finetune_head(c, cfg.finetune_epochs, cfg,
                                stream(cfg.seed, "finetune", c.client_id))

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(finetune, clients))
        else:
            for c in clients:
                finetune(c)
        ft_row = np.array(_evaluate_all(clients, threads))

    log = MetricsLog(accuracy=np.array(rows), config=config_snapshot(cfg),
                     ft_accuracy=ft_row)
    if return_state:
        return log, server, clients
    return log


def render_metrics(log: MetricsLog) -> str:
    """Metrics CSV: schema header, config echo, one row per (round, client),
    then summary rows."""
    lines = [f"# {METRICS_SCHEMA}"]
    for key in sorted(log.config):
        lines.append(f"# {key}={log.config[key]}")
    lines.append("round,client_id,accuracy")
    for t in range(log.num_rounds):
        for k in range(log.accuracy.shape[1]):
            lines.append(f"{t + 1},{k},{log.accuracy[t, k]:.10f}")
    if log.ft_accuracy is not None:
        for k in range(len(log.ft_accuracy)):
            lines.append(f"ft,{k},{log.ft_accuracy[k]:.10f}")
    k_last = min(10, log.num_rounds)
    lines.append(f"summary,last{k_last}_avg,{average_last_k(log, k_last):.10f}")
    if log.ft_accuracy is not None:
        lines.append(f"summary,post_ft_avg,{log.ft_accuracy.mean():.10f}")
    return "\n".join(lines) + "\n"


def write_metrics(log: MetricsLog, path: str) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(render_metrics(log))
