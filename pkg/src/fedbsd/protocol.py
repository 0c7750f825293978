"""Federated state machines: selection, broadcast, local update strategies,
and server-side aggregation.

Determinism: every stochastic step draws from a stream derived as
``stream(master_seed, tag, round, client_id)``, and uploads are always
aggregated in ascending client-id order, so results are independent of
scheduling and thread count.
"""
from __future__ import annotations

import hashlib
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import nn
from .data import ClientShard
from .losses import bsd_loss, cross_entropy

if TYPE_CHECKING:
    from .harness import TrainConfig

STRATEGY_FEDBSD = "fedbsd"
STRATEGY_FEDREP = "fedrep"
STRATEGY_FEDAVG = "fedavg"
STRATEGY_LOCAL = "local"
STRATEGIES = (STRATEGY_FEDBSD, STRATEGY_FEDREP, STRATEGY_FEDAVG, STRATEGY_LOCAL)

HEAD_FEATURES_GLOBAL = "global"
HEAD_FEATURES_LOCAL = "local"
BACKBONE_INIT_LOCAL = "local"
BACKBONE_INIT_GLOBAL = "global"


class TrainingDiverged(RuntimeError):
    """Raised when a local update produces a non-finite loss or gradient."""


def stream(master_seed: int, *path: int | str) -> np.random.Generator:
    """Independent deterministic generator for a (seed, purpose, ...) path."""
    entropy = [int(master_seed)]
    for p in path:
        entropy.append(zlib.crc32(p.encode()) if isinstance(p, str) else int(p))
    return np.random.default_rng(entropy)


@dataclass
class ServerState:
    global_model: nn.SplitModel
    round: int = 0
    master_seed: int = 0

    @property
    def global_backbone(self) -> nn.BackboneNet:
        return self.global_model.backbone


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    model: nn.SplitModel
    participation: list[int] = field(default_factory=list)


@dataclass
class RoundReport:
    round: int
    selected: list[int]
    losses: dict[int, list[float]]
    wall_time: float
    param_checksum: str | None = None


def select_clients(n: int, rate: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of max(1, round(rate*n)) ids."""
    if not 0 < rate <= 1:
        raise ValueError(f"participation rate must be in (0, 1], got {rate}")
    k = max(1, int(rate * n + 0.5))
    ids = rng.choice(n, size=k, replace=False)
    return sorted(int(i) for i in ids)


def _iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled minibatch index slices; full batch when the shard is smaller."""
    order = rng.permutation(n)
    step = batch_size if n > batch_size else n
    for start in range(0, n, step):
        yield order[start:start + step]


def _check_finite(loss: float) -> float:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")
    return loss


def _train_head(client: ClientState, feature_net: nn.BackboneNet, cfg: "TrainConfig",
                rng: np.random.Generator, epochs: int) -> list[float]:
    """Head-only epochs over frozen features from feature_net."""
    model = client.model
    x, y = client.shard.train.features, client.shard.train.labels
    epoch_losses = []
    for _ in range(epochs):
        batch_losses = []
        for idx in _iter_batches(len(y), cfg.batch_size, rng):
            feats, cache = nn.forward_backbone(feature_net, x[idx])
            logits = nn.forward_head(model.head, feats)
            loss, d_logits = cross_entropy(logits, y[idx])
            batch_losses.append(_check_finite(loss))
            nn.backward(model, cache, d_logits, scope=nn.SCOPE_HEAD)
            nn.sgd_step(model.head.layer, cfg.lr, cfg.momentum)
        epoch_losses.append(float(np.mean(batch_losses)))
    return epoch_losses


def _train_backbone_distill(client: ClientState, teacher: nn.BackboneNet,
                            cfg: "TrainConfig", rng: np.random.Generator,
                            epochs: int) -> list[float]:
    """Backbone-only epochs on the combined CE + distillation objective.

    The teacher backbone and the head are frozen: the head passes the CE
    gradient through to the features but its own parameters do not move.
    """
    model = client.model
    x, y = client.shard.train.features, client.shard.train.labels
    epoch_losses = []
    for _ in range(epochs):
        batch_losses = []
        for idx in _iter_batches(len(y), cfg.batch_size, rng):
            t_feats, _ = nn.forward_backbone(teacher, x[idx])
            s_feats, cache = nn.forward_backbone(model.backbone, x[idx])
            logits = nn.forward_head(model.head, s_feats)
            value, d_feats, d_logits = bsd_loss(
                t_feats, s_feats, logits, y[idx], cfg.tau, cfg.lam,
                mode=cfg.feature_distill_mode, kl_direction=cfg.kl_direction,
                tau2_rescale=cfg.tau2_rescale)
            batch_losses.append(_check_finite(value.total))
            nn.backward(model, cache, d_logits, scope=nn.SCOPE_BACKBONE,
                        d_features=d_feats)
            nn.model_sgd_step(model, cfg.lr, cfg.momentum, scope=nn.SCOPE_BACKBONE)
        epoch_losses.append(float(np.mean(batch_losses)))
    return epoch_losses


def _train_ce(client: ClientState, cfg: "TrainConfig", rng: np.random.Generator,
              epochs: int, scope: str) -> list[float]:
    """Plain cross-entropy epochs over the layers in scope."""
    model = client.model
    x, y = client.shard.train.features, client.shard.train.labels
    epoch_losses = []
    for _ in range(epochs):
        batch_losses = []
        for idx in _iter_batches(len(y), cfg.batch_size, rng):
            feats, cache = nn.forward_backbone(model.backbone, x[idx])
            logits = nn.forward_head(model.head, feats)
            loss, d_logits = cross_entropy(logits, y[idx])
            batch_losses.append(_check_finite(loss))
            nn.backward(model, cache, d_logits, scope=scope)
            nn.model_sgd_step(model, cfg.lr, cfg.momentum, scope=scope)
        epoch_losses.append(float(np.mean(batch_losses)))
    return epoch_losses


def client_update_fedbsd(client: ClientState, global_backbone: nn.BackboneNet,
                         cfg: "TrainConfig",
                         rng: np.random.Generator) -> tuple[nn.BackboneNet, list[float]]:
    """Two-phase local update: head epochs over frozen global features, then
    backbone epochs distilling the global backbone into the local one.

    The received global backbone acts only as the frozen teacher; the
    student backbone starts from the client's own previous parameters
    (configurable via backbone_init_mode).  Returns an upload copy of the
    distilled backbone; the head never leaves the client.
    """
    if cfg.head_feature_source == HEAD_FEATURES_GLOBAL:
        head_features = global_backbone
    else:
        head_features = client.model.backbone
    losses = _train_head(client, head_features, cfg, rng, cfg.head_epochs)
    if cfg.backbone_init_mode == BACKBONE_INIT_GLOBAL:
        nn.copy_backbone(global_backbone, client.model.backbone)
    losses += _train_backbone_distill(client, global_backbone, cfg, rng,
                                      cfg.backbone_epochs)
    return nn.clone_backbone(client.model.backbone), losses


def client_update_fedrep(client: ClientState, global_backbone: nn.BackboneNet,
                         cfg: "TrainConfig",
                         rng: np.random.Generator) -> tuple[nn.BackboneNet, list[float]]:
    """Representation-learning baseline: adopt the global backbone, train the
    head, then train the backbone on cross-entropy only (no distillation)."""
    nn.copy_backbone(global_backbone, client.model.backbone)
    losses = _train_head(client, client.model.backbone, cfg, rng, cfg.head_epochs)
    losses += _train_ce(client, cfg, rng, cfg.backbone_epochs, scope=nn.SCOPE_BACKBONE)
    return nn.clone_backbone(client.model.backbone), losses


def client_update_fedavg(client: ClientState, global_model: nn.SplitModel,
                         cfg: "TrainConfig",
                         rng: np.random.Generator) -> tuple[nn.SplitModel, list[float]]:
    """Classic baseline: replace the local model with the global one and run
    cross-entropy epochs over all parameters.  Momentum buffers start fresh
    because the replacement invalidates the old trajectory."""
    client.model = nn.clone_model(global_model)
    losses = _train_ce(client, cfg, rng, cfg.backbone_epochs, scope=nn.SCOPE_FULL)
    return nn.clone_model(client.model), losses


def client_update_local(client: ClientState, cfg: "TrainConfig",
                        rng: np.random.Generator) -> tuple[None, list[float]]:
    """Isolated training, no communication."""
    losses = _train_ce(client, cfg, rng, cfg.backbone_epochs, scope=nn.SCOPE_FULL)
    return None, losses


def _accumulate_mean(arrays: list[np.ndarray],
                     weights: np.ndarray | None) -> np.ndarray:
    acc = np.zeros_like(arrays[0])
    if weights is None:
        for a in arrays:
            acc += a
        return acc / len(arrays)
    for a, w in zip(arrays, weights):
        acc += w * a
    return acc


def aggregate_backbones(uploads: list[nn.BackboneNet],
                        weights: np.ndarray | None = None) -> nn.BackboneNet:
    """Element-wise mean of backbone parameters, uniform 1/K by default.

    Summation runs in list order; callers pass uploads sorted by client id
    so the result is exactly permutation-invariant at the protocol level.
    """
    if not uploads:
        raise ValueError("cannot aggregate an empty upload list")
    ref = uploads[0]
    for u in uploads[1:]:
        if not nn.same_architecture(ref, u):
            raise ValueError(f"architecture mismatch: {ref.dims} vs {u.dims}")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()
    out = nn.BackboneNet(ref.dims)
    out.relu_flags = list(ref.relu_flags)
    for i, layer in enumerate(out.layers):
        layer.weight[:] = _accumulate_mean([u.layers[i].weight for u in uploads], weights)
        layer.bias[:] = _accumulate_mean([u.layers[i].bias for u in uploads], weights)
    return out


def aggregate_full(uploads: list[nn.SplitModel],
                   weights: np.ndarray | None = None) -> nn.SplitModel:
    """Element-wise mean over backbone and head parameters."""
    if not uploads:
        raise ValueError("cannot aggregate an empty upload list")
    ref = uploads[0]
    for u in uploads[1:]:
        if u.num_classes != ref.num_classes:
            raise ValueError(
                f"head width mismatch: {ref.num_classes} vs {u.num_classes}")
    backbone = aggregate_backbones([u.backbone for u in uploads], weights)
    model = nn.SplitModel(backbone, nn.HeadLayer(ref.num_classes, backbone.feature_dim))
    model.head.layer.weight[:] = _accumulate_mean(
        [u.head.layer.weight for u in uploads], weights)
    model.head.layer.bias[:] = _accumulate_mean(
        [u.head.layer.bias for u in uploads], weights)
    return model


def local_finetune_head(client: ClientState, epochs: int, cfg: "TrainConfig",
                        rng: np.random.Generator) -> None:
    """Post-training head-only adaptation; the backbone is left untouched."""
    _train_head(client, client.model.backbone, cfg, rng, epochs)


def _global_param_checksum(server: ServerState) -> str:
    blob = nn.serialize_backbone(server.global_model.backbone)
    head = server.global_model.head.layer
    blob += head.weight.tobytes() + head.bias.tobytes()
    return hashlib.sha256(blob).hexdigest()


def run_round(server: ServerState, clients: list[ClientState], cfg: "TrainConfig",
              strategy: str | None = None, threads: int = 1,
              checksum: bool = False) -> RoundReport:
    """One communication round: select, broadcast, update, aggregate.

    Selected client updates are independent and may run on a thread pool;
    uploads are aggregated in ascending client-id order regardless of
    completion order.  Under the local strategy no aggregation happens.
    """
    strategy = strategy or cfg.strategy
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy: {strategy!r}")
    t = server.round + 1
    selected = select_clients(len(clients), cfg.participation,
                              stream(server.master_seed, "select", t))
    started = time.perf_counter()

    def update(k: int):
        rng = stream(server.master_seed, "update", t, k)
        client = clients[k]
        try:
            if strategy == STRATEGY_FEDBSD:
                return client_update_fedbsd(client, server.global_model.backbone, cfg, rng)
            if strategy == STRATEGY_FEDREP:
                return client_update_fedrep(client, server.global_model.backbone, cfg, rng)
            if strategy == STRATEGY_FEDAVG:
                return client_update_fedavg(client, server.global_model, cfg, rng)
            return client_update_local(client, cfg, rng)
        except (TrainingDiverged, FloatingPointError) as e:
            raise TrainingDiverged(f"client {k} diverged in round {t}: {e}") from e

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {k: pool.submit(update, k) for k in selected}
            results = {k: f.result() for k, f in futures.items()}
    else:
        results = {k: update(k) for k in selected}

    uploads = [results[k][0] for k in selected]  # selected is sorted
    losses = {k: results[k][1] for k in selected}
    weights = None
    if cfg.size_weighted_agg:
        weights = np.array([len(clients[k].shard.train) for k in selected],
                           dtype=np.float64)
    if strategy in (STRATEGY_FEDBSD, STRATEGY_FEDREP):
        server.global_model.backbone = aggregate_backbones(uploads, weights)
    elif strategy == STRATEGY_FEDAVG:
        server.global_model = aggregate_full(uploads, weights)

    server.round = t
    for k in selected:
        clients[k].participation.append(t)
    return RoundReport(
        round=t, selected=selected, losses=losses,
        wall_time=time.perf_counter() - started,
        param_checksum=_global_param_checksum(server) if checksum else None)
