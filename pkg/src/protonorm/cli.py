"""Command-line entry point.

Subcommands: generate, pretrain, finetune, eval, sweep. Every command
resolves one RunConfig (file + env + flags), works inside a run directory
named by the config digest and seed, writes the exact resolved config
next to its outputs, and keeps a status file (running / ok / failed) so
interrupted runs are visibly flagged. Re-running a command with the same
config and seed reproduces its deterministic outputs byte for byte (the
sweep's runtime column is the one timed, hence non-deterministic, field).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
import traceback
from dataclasses import replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import build_run_config, load_run_config
from .data import (
    load_ucr_tsv,
    make_shifted_variant,
    make_synthetic_clusters,
    save_ucr_tsv,
    standardize_dataset,
    train_val_split,
)
from .encoder import Encoder, count_parameters
from .errors import ConfigError, ProtoNormError
from .training import (
    RngStreams,
    TrainState,
    evaluate,
    finetune,
    pretrain,
)

TRACE_HEADER = ("step", "lr", "loss_nt", "loss_orth", "loss_total")


def _derived_rng(seed, *tags):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))


def _run_dir(out, command, cfg):
    path = os.path.join(out, f"{command}-{cfg.digest()[:12]}-seed{cfg.seed}")
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_status(run_dir, status, error=None):
    doc = {"status": status}
    if error is not None:
        doc["error"] = error
    _write_json(os.path.join(run_dir, "status.json"), doc)


def _start_run(out, command, cfg):
    run_dir = _run_dir(out, command, cfg)
    _write_status(run_dir, "running")
    _write_json(os.path.join(run_dir, "resolved_config.json"), cfg.resolved)
    return run_dir


def _finish_run(run_dir, body):
    try:
        body()
    except Exception as e:
        _write_status(run_dir, "failed", error=f"{type(e).__name__}: {e}")
        raise
    _write_status(run_dir, "ok")
    return run_dir


def _write_trace(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for step, lr, nt, orth, total in rows:
            writer.writerow([step, repr(lr), repr(nt), repr(orth), repr(total)])


def _assignment_histograms(encoder):
    return {
        f"layer{i}": layer.assignment_counts.tolist()
        for i, layer in enumerate(encoder.protonorm_layers())
    }


def _build_encoder(cfg):
    streams = RngStreams.from_seed(cfg.seed)
    encoder = Encoder(cfg.encoder, streams.params, streams.protos)
    if cfg.freeze_prototypes:
        encoder.set_banks_frozen(True)
    return encoder, streams


def _load_pretrain_pool(cfg):
    if not cfg.data.pretrain_paths:
        raise ConfigError("data.pretrain_paths is empty; nothing to pretrain on")
    std_rng = _derived_rng(cfg.seed, 1)
    split_rng = _derived_rng(cfg.seed, 2)
    train_pool, val_pool = [], []
    for i, path in enumerate(cfg.data.pretrain_paths):
        ds = load_ucr_tsv(path, dataset_id=i)
        ds = standardize_dataset(ds, cfg.standardize, std_rng)
        tr, va = train_val_split(ds, cfg.data.val_fraction, split_rng)
        train_pool.append(tr)
        if len(va):
            val_pool.append(va)
    return train_pool, (val_pool or None)


def _load_finetune_splits(cfg):
    if cfg.data.finetune_train_path is None:
        raise ConfigError("data.finetune_train_path is required for this command")
    std_rng = _derived_rng(cfg.seed, 3)
    split_rng = _derived_rng(cfg.seed, 4)
    train = load_ucr_tsv(cfg.data.finetune_train_path)
    train = standardize_dataset(train, cfg.standardize, std_rng)
    if cfg.data.finetune_test_path is not None:
        test = load_ucr_tsv(cfg.data.finetune_test_path, split="test")
        test = standardize_dataset(test, cfg.standardize, std_rng)
    else:
        train, test = train_val_split(train, cfg.data.test_fraction, split_rng)
        test = replace(test, split="test")
    train, val = train_val_split(train, cfg.data.val_fraction, split_rng)
    return train, val, test


# -- commands ---------------------------------------------------------------


def cmd_generate(cfg, out):
    run_dir = _start_run(out, "generate", cfg)

    def body():
        entries = []
        next_id = 0
        if cfg.data.synthetic is not None:
            syn = cfg.data.synthetic
            rng = _derived_rng(cfg.seed, 10)
            clusters = make_synthetic_clusters(
                syn["k_datasets"],
                syn["n_per"],
                syn["length"],
                rng,
                offsets=syn["offsets"],
                noise_std=syn["noise_std"],
                freq_band=(syn["freq_lo"], syn["freq_hi"]),
            )
            for i, ds in enumerate(clusters):
                fname = f"{ds.name}.tsv"
                save_ucr_tsv(ds, os.path.join(run_dir, fname))
                entries.append(
                    {"name": ds.name, "file": fname, "dataset_id": next_id, "sigma": None}
                )
                next_id += 1
        if cfg.data.source_path is not None:
            source = load_ucr_tsv(cfg.data.source_path, name="source")
            fname = "source.tsv"
            save_ucr_tsv(source, os.path.join(run_dir, fname))
            entries.append(
                {"name": "source", "file": fname, "dataset_id": next_id, "sigma": 0.0}
            )
            next_id += 1
            for j, sigma in enumerate(cfg.data.sigmas):
                rng = _derived_rng(cfg.seed, 11, j)
                variant = make_shifted_variant(
                    source, sigma, rng, name=f"source-n{j + 1}", dataset_id=next_id
                )
                fname = f"{variant.name}.tsv"
                save_ucr_tsv(variant, os.path.join(run_dir, fname))
                entries.append(
                    {
                        "name": variant.name,
                        "file": fname,
                        "dataset_id": next_id,
                        "sigma": sigma,
                    }
                )
                next_id += 1
        if not entries:
            raise ConfigError(
                "generate needs data.synthetic and/or data.source_path in the config"
            )
        _write_json(
            os.path.join(run_dir, "manifest.json"),
            {"seed": cfg.seed, "datasets": entries},
        )

    return _finish_run(run_dir, body)


def cmd_pretrain(cfg, out):
    run_dir = _start_run(out, "pretrain", cfg)

    def body():
        train_pool, val_pool = _load_pretrain_pool(cfg)
        encoder, streams = _build_encoder(cfg)
        result = pretrain(
            train_pool,
            encoder,
            cfg.augment,
            cfg.ntxent,
            cfg.optim,
            epochs=cfg.pretrain.epochs,
            batch_size=cfg.pretrain.batch_size,
            seed=cfg.seed,
            state=TrainState(streams=streams),
            val_pool=val_pool,
            out_dir=run_dir,
            config_dict=cfg.resolved,
        )
        _write_trace(os.path.join(run_dir, "trace.csv"), result.rows)
        _write_json(
            os.path.join(run_dir, "pretrain_summary.json"),
            {
                "steps": result.state.step,
                "final_loss": result.rows[-1][4] if result.rows else None,
                "assignment_histograms": _assignment_histograms(encoder),
                "best_checkpoint": result.best_checkpoint,
                "final_checkpoint": result.final_checkpoint,
            },
        )

    return _finish_run(run_dir, body)


def cmd_finetune(cfg, checkpoint_path, out):
    run_dir = _start_run(out, "finetune", cfg)

    def body():
        encoder, _, _, _ = load_checkpoint(checkpoint_path)
        splits = _load_finetune_splits(cfg)
        result = finetune(
            splits,
            encoder,
            cfg.optim,
            epochs=cfg.finetune.epochs,
            batch_size=cfg.finetune.batch_size,
            n_labeled=cfg.finetune.n_labeled,
            seed=cfg.seed,
        )
        model_path = os.path.join(run_dir, "model.ckpt")
        save_checkpoint(
            model_path,
            result.encoder,
            TrainState(streams=RngStreams.from_seed(cfg.seed)),
            cfg.resolved,
        )
        doc = result.metrics.to_dict()
        doc["assignment_histograms"] = _assignment_histograms(result.encoder)
        doc["best_epoch"] = result.best_epoch
        _write_json(os.path.join(run_dir, "metrics.json"), doc)

    return _finish_run(run_dir, body)


def cmd_eval(cfg, model_path, out):
    run_dir = _start_run(out, "eval", cfg)

    def body():
        encoder, _, _, _ = load_checkpoint(model_path)
        _, _, test = _load_finetune_splits(cfg)
        metrics = evaluate(encoder, test, cfg.finetune.batch_size)
        doc = metrics.to_dict()
        doc["assignment_histograms"] = _assignment_histograms(encoder)
        _write_json(os.path.join(run_dir, "metrics.json"), doc)

    return _finish_run(run_dir, body)


def _leg_config(cfg, axis, value):
    resolved = copy.deepcopy(cfg.resolved)
    if axis == "n_prototypes":
        resolved["encoder"]["n_prototypes"] = int(value)
    elif axis == "lambda":
        resolved["ntxent"]["lambda_orth"] = float(value)
    elif axis != "sigma":  # sigma only changes the pool, not the config
        raise ConfigError(f"unknown sweep axis {axis!r}")
    return build_run_config(resolved)


def _run_leg(leg_cfg, axis, value):
    """One pretrain -> finetune -> eval pipeline, in memory."""
    if axis == "sigma":
        if leg_cfg.data.source_path is None:
            raise ConfigError("sigma sweep needs data.source_path")
        std_rng = _derived_rng(leg_cfg.seed, 1)
        source = load_ucr_tsv(leg_cfg.data.source_path, name="source", dataset_id=0)
        source = standardize_dataset(source, leg_cfg.standardize, std_rng)
        variant = make_shifted_variant(
            source, float(value), _derived_rng(leg_cfg.seed, 12), dataset_id=1
        )
        split_rng = _derived_rng(leg_cfg.seed, 2)
        src_train, src_test = train_val_split(
            source, leg_cfg.data.test_fraction, split_rng
        )
        train_pool = [src_train, variant]
        val_pool = None
        ft_train, ft_val = train_val_split(
            src_train, leg_cfg.data.val_fraction, split_rng
        )
        splits = (ft_train, ft_val, replace(src_test, split="test"))
    else:
        train_pool, val_pool = _load_pretrain_pool(leg_cfg)
        splits = _load_finetune_splits(leg_cfg)
    encoder, streams = _build_encoder(leg_cfg)
    pretrain(
        train_pool,
        encoder,
        leg_cfg.augment,
        leg_cfg.ntxent,
        leg_cfg.optim,
        epochs=leg_cfg.pretrain.epochs,
        batch_size=leg_cfg.pretrain.batch_size,
        seed=leg_cfg.seed,
        state=TrainState(streams=streams),
        val_pool=val_pool,
    )
    result = finetune(
        splits,
        encoder,
        leg_cfg.optim,
        epochs=leg_cfg.finetune.epochs,
        batch_size=leg_cfg.finetune.batch_size,
        n_labeled=leg_cfg.finetune.n_labeled,
        seed=leg_cfg.seed,
    )
    return result.metrics


def cmd_sweep(cfg, axis, out):
    run_dir = _start_run(out, f"sweep-{axis}", cfg)

    def body():
        if axis not in cfg.sweep:
            raise ConfigError(f"sweep axis {axis!r} has no values in the config")
        rows = []
        for value in cfg.sweep[axis]:
            leg_cfg = _leg_config(cfg, axis, value)
            started = time.monotonic()
            try:
                metrics = _run_leg(leg_cfg, axis, value)
                rows.append(
                    [
                        axis,
                        value,
                        repr(metrics.accuracy),
                        repr(metrics.macro_f1),
                        count_parameters(leg_cfg.encoder),
                        f"{time.monotonic() - started:.3f}",
                        "ok",
                    ]
                )
            except Exception as e:  # a failed leg must not kill the sweep
                rows.append(
                    [
                        axis,
                        value,
                        "",
                        "",
                        count_parameters(leg_cfg.encoder),
                        f"{time.monotonic() - started:.3f}",
                        f"failed: {type(e).__name__}: {e}",
                    ]
                )
        with open(os.path.join(run_dir, "sweep.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["axis", "value", "accuracy", "macro_f1", "param_count", "runtime_s", "status"]
            )
            writer.writerows(rows)

    return _finish_run(run_dir, body)


# -- argument parsing ---------------------------------------------------------


def _add_common_flags(parser):
    parser.add_argument("--config", metavar="PATH", help="JSON run configuration")
    parser.add_argument("--seed", type=int, metavar="N")
    parser.add_argument(
        "--out",
        metavar="DIR",
        default=None,
        help="output root (default: $PROTONORM_OUT or ./runs)",
    )
    parser.add_argument(
        "--norm-mode",
        choices=["dataset", "plain", "proto"],
        help="normalization mechanism",
    )
    parser.add_argument("--prototypes", type=int, metavar="N")
    parser.add_argument("--lambda", dest="lambda_orth", type=float, metavar="F")
    parser.add_argument(
        "--freeze-prototypes", metavar="BOOL", help="true/false: freeze banks"
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="protonorm",
        description="Prototype-gated normalization experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit synthetic datasets and noise variants")
    _add_common_flags(p)

    p = sub.add_parser("pretrain", help="contrastive pretraining on a dataset pool")
    _add_common_flags(p)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint")
    p.add_argument("checkpoint", help="pretraining checkpoint path")
    _add_common_flags(p)

    p = sub.add_parser("eval", help="evaluate a fine-tuned model")
    p.add_argument("model", help="fine-tuned model checkpoint path")
    _add_common_flags(p)

    p = sub.add_parser("sweep", help="run a pipeline per axis value")
    p.add_argument("axis", choices=["n_prototypes", "sigma", "lambda"])
    _add_common_flags(p)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    flags = {
        "seed": args.seed,
        "norm_mode": args.norm_mode,
        "prototypes": args.prototypes,
        "lambda_orth": args.lambda_orth,
        "freeze_prototypes": args.freeze_prototypes,
    }
    out = args.out or os.environ.get("PROTONORM_OUT") or "runs"
    try:
        cfg = load_run_config(args.config, flags=flags)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    try:
        if args.command == "generate":
            run_dir = cmd_generate(cfg, out)
        elif args.command == "pretrain":
            run_dir = cmd_pretrain(cfg, out)
        elif args.command == "finetune":
            run_dir = cmd_finetune(cfg, args.checkpoint, out)
        elif args.command == "eval":
            run_dir = cmd_eval(cfg, args.model, out)
        else:
            run_dir = cmd_sweep(cfg, args.axis, out)
        print(run_dir)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ProtoNormError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
