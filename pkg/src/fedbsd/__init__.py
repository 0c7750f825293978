"""Deterministic federated-learning simulator: shared-backbone aggregation
with backbone self-distillation, private personalized heads, baselines, and
a data-heterogeneity harness."""

from .data import (ClientShard, Dataset, FormatError, PartitionSpec,
                   gen_synthetic_blobs, load_idx, lognormal_allocate,
                   partition_by_classes, write_manifest)
from .harness import (ConfigError, MetricsLog, TrainConfig, average_last_k,
                      evaluate_client, load_config, run_experiment,
                      write_metrics)
from .losses import LossValue, bsd_loss, cross_entropy, kl_divergence, softmax_tau
from .nn import (BackboneNet, HeadLayer, LinearLayer, SplitModel, backward,
                 build_model, clone_model, copy_backbone, forward_backbone,
                 forward_head, init_params, load_model, save_model, sgd_step)
from .protocol import (ClientState, RoundReport, ServerState, TrainingDiverged,
                       aggregate_backbones, aggregate_full,
                       client_update_fedavg, client_update_fedbsd,
                       client_update_fedrep, local_finetune_head, run_round,
                       select_clients, stream)

__version__ = "0.1.0"
