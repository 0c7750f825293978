"""Command-line entry point: a thin shell over the harness.

Exit codes: 0 success, 1 config/usage error (and golden mismatch),
2 runtime divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources

from . import nn
from .data import FormatError, partition_by_classes, write_manifest
from .harness import (ConfigError, TrainConfig, average_last_k, build_dataset,
                      evaluate_client, load_config, render_metrics,
                      run_experiment, write_metrics)
from .protocol import STRATEGIES, TrainingDiverged, stream


class _Parser(argparse.ArgumentParser):
    # usage errors are config errors (exit 1), not divergence (exit 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", default=None, help="output file path")
    common.add_argument("--strategy", choices=STRATEGIES, default=None,
                        help="override config strategy")
    common.add_argument("--quiet", action="store_true", help="suppress summary output")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads (does not affect results)")

    parser = _Parser(prog="fedbsd",
                     description="Deterministic federated-learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common],
                   help="run an experiment and write the metrics CSV")
    sub.add_parser("partition", parents=[common],
                   help="emit the partition manifest without training")
    p_eval = sub.add_parser("evaluate", parents=[common],
                            help="evaluate a model checkpoint on the config's dataset")
    p_eval.add_argument("--model", required=True, help="model checkpoint path")
    p_gold = sub.add_parser("golden", parents=[common],
                            help="run the frozen smoke config and compare checksums")
    p_gold.add_argument("--regen", action="store_true",
                        help="rewrite the golden checksums instead of comparing")
    p_gold.add_argument("--golden-file", default=None,
                        help="golden checksum file (defaults to the packaged one)")
    return parser


def _load(args) -> TrainConfig:
    cfg, _ = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.strategy is not None:
        cfg.strategy = args.strategy
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    log = run_experiment(cfg, threads=args.threads)
    out = args.out or "metrics.csv"
    write_metrics(log, out)
    if not args.quiet:
        k = min(10, log.num_rounds)
        print(f"wrote {out}")
        print(f"last{k}_avg {average_last_k(log, k):.6f}")
        if log.ft_accuracy is not None:
            print(f"post_ft_avg {log.ft_accuracy.mean():.6f}")
    return 0


def cmd_partition(args) -> int:
    cfg = _load(args)
    dataset = build_dataset(cfg)
    shards = partition_by_classes(dataset, cfg.partition_spec(),
                                  stream(cfg.seed, "partition"))
    out = args.out or "partition.csv"
    write_manifest(shards, out)
    if not args.quiet:
        print(f"wrote {out} ({len(shards)} clients)")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    model = nn.load_model(args.model)
    dataset = build_dataset(cfg)
    acc = evaluate_client(model, dataset)
    print(f"accuracy {acc:.6f}")
    return 0


def _golden_config() -> TrainConfig:
    # frozen smoke setup; changing it invalidates the committed checksums
    return TrainConfig(rounds=5, num_clients=10, participation=0.5,
                       head_epochs=3, backbone_epochs=2, hidden_dims=(16, 16),
                       synth_samples_per_class=30, seed=1234)


def _default_golden_path() -> str:
    return str(resources.files("fedbsd").joinpath("goldens", "smoke.json"))


def cmd_golden(args) -> int:
    if args.config is not None:
        cfg, _ = load_config(args.config)
    else:
        cfg = _golden_config()
    if args.seed is not None:
        cfg.seed = args.seed
    log, server, clients = run_experiment(cfg, threads=args.threads,
                                          return_state=True)
    metrics_sha = hashlib.sha256(render_metrics(log).encode()).hexdigest()
    params = hashlib.sha256()
    params.update(nn.serialize_model(server.global_model))
    for c in clients:
        params.update(nn.serialize_model(c.model))
    params_sha = params.hexdigest()

    path = args.golden_file or _default_golden_path()
    if args.regen:
        with open(path, "w") as f:
            json.dump({"metrics_sha256": metrics_sha, "params_sha256": params_sha},
                      f, indent=2)
            f.write("\n")
        if not args.quiet:
            print(f"wrote {path}")
        return 0
    try:
        with open(path) as f:
            golden = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read golden file {path}: {e}") from e
    ok = (golden.get("metrics_sha256") == metrics_sha
          and golden.get("params_sha256") == params_sha)
    if not args.quiet or not ok:
        print(f"metrics {'match' if golden.get('metrics_sha256') == metrics_sha else 'MISMATCH'}")
        print(f"params  {'match' if golden.get('params_sha256') == params_sha else 'MISMATCH'}")
    return 0 if ok else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "partition": cmd_partition,
                "evaluate": cmd_evaluate, "golden": cmd_golden}
    try:
        return handlers[args.command](args)
    except (ConfigError, FormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
