"""``avmult`` command line: synth, pretrain, finetune, eval, inspect.

Exit codes: 0 success, 1 user or configuration error, 2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import traceback

import numpy as np

from . import checkpoint as ck
from .baselines import build_baseline
from .data import (SyntheticSpec, generate_synthetic, load_dataset, pipeline_fingerprint, save_dataset, split,
                   subsample_training)
from .errors import ConfigError, DataError, FormatError, UndefinedMetric
from .experiment import SEED_ENV, ExperimentConfig, load_config
from .mult import build, count_parameters, parameter_count
from .numerics import Adam
from .training import CsvLog, check_task, evaluate, finetune, finetune_model, pretrain

USER_ERRORS = (ConfigError, DataError, FormatError, UndefinedMetric, OSError)
MODELS = ("mult", "ef_gru", "lf_gru", "tfn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2)


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(_dump(obj) + "\n")


def _load_records(data_dir, cfg):
    records, rejected = load_dataset(data_dir, cfg.pipeline)
    if not records:
        raise DataError(f"{data_dir}: no usable records ({len(rejected)} rejected)")
    if rejected:
        print(f"rejected {len(rejected)} utterances during preprocessing", file=sys.stderr)
    return records


def _check_dims(model_cfg, records):
    da, dv = records[0].audio.frames.shape[1], records[0].visual.frames.shape[1]
    problems = []
    if model_cfg.audio_dim != da:
        problems.append(f"model.audio_dim={model_cfg.audio_dim} but the data has {da} audio features")
    if model_cfg.visual_dim != dv:
        problems.append(f"model.visual_dim={model_cfg.visual_dim} but the data has {dv} visual features")
    if problems:
        raise ConfigError("; ".join(problems))


# -- synth --------------------------------------------------------------------------

def cmd_synth(args):
    data = {}
    if args.spec:
        with open(args.spec) as fh:
            data = json.load(fh)
    if args.seed is not None:
        data["seed"] = args.seed
    elif "seed" not in data and os.environ.get(SEED_ENV):
        data["seed"] = int(os.environ[SEED_ENV])
    spec = SyntheticSpec.from_dict(data).validate()
    records = generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(args.out, records)
    with open(os.path.join(args.out, "spec.json"), "w") as fh:
        fh.write(spec.to_json() + "\n")
    lengths = np.array([r.length for r in records])
    labels = np.bincount([r.label for r in records], minlength=spec.n_classes)
    print(_dump({
        "records": len(records),
        "speakers": len({r.speaker_id for r in records}),
        "frames": {"min": int(lengths.min()), "max": int(lengths.max()), "mean": float(lengths.mean())},
        "audio_dim": spec.audio_dim,
        "visual_dim": spec.visual_dim,
        "class_counts": labels.tolist(),
        "seed": spec.seed,
    }))


# -- pretrain -----------------------------------------------------------------------

def _truncate_log(path, epoch):
    """Keep the header and rows up to ``epoch`` so a resumed run appends cleanly."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= epoch]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def cmd_pretrain(args):
    cfg = load_config(args.config, args.preset)
    seed = cfg.resolved_seed(args.seed)
    print(f"parameters: {count_parameters(cfg.model):,}")
    print(f"seed: {seed}")
    print("config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    if args.dry_run:
        return
    records = _load_records(args.data, cfg)
    _check_dims(cfg.model, records)
    parts = split(records, seed=cfg.split_seed)
    fingerprint = pipeline_fingerprint(cfg.pipeline, records)
    model = build(cfg.model, seed=seed)
    optimizer = Adam(model.parameters(), lr=cfg.pretrain.peak_lr)
    meta = {"kind": "pretrain", "config": cfg.to_dict(), "seed": seed, "fingerprint": fingerprint,
            "rng": {"scheme": "seed-epoch-batch", "seed": seed}, "epoch": 0, "best_val": None, "best_epoch": None}
    log_path = args.out + ".log.csv"
    start_epoch, best_val = 0, math.inf
    if args.resume:
        state = ck.load(args.resume)
        if state.meta.get("kind") != "pretrain":
            raise ConfigError(f"{args.resume} is not a pretraining checkpoint")
        ck.check_config(cfg.to_dict(), state.meta["config"], "experiment config")
        if state.meta["seed"] != seed:
            raise ConfigError(f"seed: checkpoint was trained with {state.meta['seed']}, asked for {seed}")
        if state.meta["fingerprint"] != fingerprint:
            raise ConfigError("data fingerprint differs from the checkpoint's")
        model.load_state_dict(state.params())
        ck.restore_optimizer(state, model, optimizer)
        start_epoch = state.meta["epoch"]
        if state.meta["best_val"] is not None:
            best_val = state.meta["best_val"]
        meta.update(best_val=state.meta["best_val"], best_epoch=state.meta["best_epoch"])
        _truncate_log(log_path, start_epoch)
    log = CsvLog(log_path, append=bool(args.resume))

    def on_epoch(epoch, model, optimizer, row, improved):
        meta["epoch"] = epoch
        if improved:
            meta.update(best_val=row["loss"], best_epoch=epoch)
        snap = ck.from_training(model, meta, optimizer)
        ck.save(args.out + ".last", snap)
        if improved:
            ck.save(args.out, snap)

    result = pretrain(model, parts["train"], parts["validation"], cfg.pretrain, seed, cfg.mask, optimizer,
                      start_epoch, best_val, log, on_epoch, args.stop_after)
    if result.val_loss:
        print(f"validation masked-L1: first {result.val_loss[0]:.6f} last {result.val_loss[-1]:.6f}")
    print(f"best epoch {meta['best_epoch']} validation {meta['best_val']}")


# -- finetune / eval ----------------------------------------------------------------

def _n_out(task, records):
    if task == "classify":
        return int(max(r.label for r in records)) + 1
    return 2


def _build_task_model(kind, cfg, task, n_out, seed, dims):
    if kind == "mult":
        return finetune_model(build(cfg.model, seed=seed), task, n_out, seed, cfg.freeze_backbone)
    return build_baseline(cfg.baseline_config(kind, dims[0], dims[1], n_out), seed)


def cmd_finetune(args):
    cfg = load_config(args.config)
    seed = cfg.resolved_seed(args.seed)
    records = _load_records(args.data, cfg)
    check_task(args.task, records)
    dims = (records[0].audio.frames.shape[1], records[0].visual.frames.shape[1])
    if args.model == "mult":
        _check_dims(cfg.model, records)
    parts = split(records, seed=cfg.split_seed)
    train = subsample_training(parts["train"], args.train_fraction, seed=seed)
    n_out = _n_out(args.task, records)
    model = _build_task_model(args.model, cfg, args.task, n_out, seed, dims)
    init = {"kind": "scratch"}
    if args.init != "scratch":
        if args.model != "mult":
            raise ConfigError(f"--init from a checkpoint needs --model mult, got {args.model}")
        state = ck.load(args.init)
        if state.meta.get("kind") != "pretrain":
            raise ConfigError(f"{args.init} is not a pretraining checkpoint")
        ck.check_config(cfg.model.to_dict(), state.meta["config"]["model"], "model config")
        model.backbone.load_state_dict(state.params())
        init = {"kind": "checkpoint", "fingerprint": state.meta["fingerprint"], "epoch": state.meta["epoch"]}
    log = CsvLog(args.out + ".log.csv") if args.out else None
    result = finetune(model, train, parts["validation"], args.task, cfg.finetune, seed, cfg.regression_loss, log)
    report = evaluate(model, parts["test"], args.task).to_dict()
    out = {"task": args.task, "model": args.model, "init": init, "train_fraction": args.train_fraction,
           "n_train": len(train), "seed": seed, "best_epoch": result.best_epoch,
           "validation_metric": result.best_metric, "test": report, "config": cfg.to_dict()}
    if args.out:
        _write_json(args.out, out)
    if args.save:
        meta = {"kind": "finetune", "task": args.task, "model": args.model, "n_out": n_out, "seed": seed,
                "config": cfg.to_dict(), "fingerprint": pipeline_fingerprint(cfg.pipeline, records),
                "epoch": result.best_epoch, "dims": list(dims)}
        ck.save(args.save, ck.from_training(model, meta))
    print(_dump(out))


def _restore_task_model(state):
    meta = state.meta
    if meta.get("kind") != "finetune":
        raise ConfigError("eval needs a fine-tuned checkpoint")
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = _build_task_model(meta["model"], cfg, meta["task"], meta["n_out"], 0, meta["dims"])
    try:
        model.load_state_dict(state.params())
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint tensors do not fit the stored model config: {exc}") from None
    return cfg, model


def cmd_eval(args):
    state = ck.load(args.ckpt)
    cfg, model = _restore_task_model(state)
    task = state.meta["task"]
    records = _load_records(args.data, cfg)
    parts = split(records, seed=cfg.split_seed)
    if args.split not in parts:
        raise DataError(f"unknown split {args.split!r}; choose from {sorted(parts)}")
    chosen = parts[args.split]
    if not chosen:
        raise DataError(f"split {args.split!r} is empty")
    check_task(task, chosen)
    out = {"split": args.split, "task": task, "model": state.meta["model"], "seed": state.meta["seed"],
           "metrics": evaluate(model, chosen, task).to_dict()}
    if args.out:
        _write_json(args.out, out)
    print(_dump(out))


# -- inspect ------------------------------------------------------------------------

def _component(name):
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "backbone" and len(parts) > 1 else parts[0]


def _expected_total(meta):
    cfg = ExperimentConfig.from_dict(meta["config"])
    if meta["kind"] == "pretrain":
        return count_parameters(cfg.model)
    kind = meta["model"]
    if kind == "mult":
        return parameter_count(build(cfg.model, seed=None)) + _head_count(cfg.model.self_stack_dim, meta["n_out"])
    return build_baseline(cfg.baseline_config(kind, *meta["dims"], meta["n_out"]), seed=None).num_parameters()


def _head_count(dim, n_out):
    return 2 * (dim * dim + dim) + dim * n_out + n_out


def cmd_inspect(args):
    state = ck.load(args.ckpt)
    by_component = {}
    for name, value in state.params().items():
        key = _component(name)
        by_component[key] = by_component.get(key, 0) + int(value.size)
    total = sum(by_component.values())
    expected = _expected_total(state.meta)
    if total != expected:
        raise FormatError(f"checkpoint holds {total} parameters but its config implies {expected}")
    print(_dump({
        "kind": state.meta.get("kind"),
        "config": state.meta.get("config"),
        "epoch": state.meta.get("epoch"),
        "seed": state.meta.get("seed"),
        "fingerprint": state.meta.get("fingerprint"),
        "parameters": {"total": total, "by_component": by_component},
        "optimizer_state": any(k.startswith("optim/") for k in state.tensors),
    }))


# -- entry point --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="avmult", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic two-modality dataset")
    s.add_argument("--spec", help="SyntheticSpec JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="masked-frame pretraining")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="best checkpoint; '.last' and '.log.csv' are written next to it")
    s.add_argument("--preset", choices=("tiny", "base", "large"))
    s.add_argument("--resume", help="continue from a '.last' checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--stop-after", type=int, help="stop after this epoch without changing the schedule")
    s.add_argument("--dry-run", action="store_true", help="print the resolved config and parameter count only")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="train a task head with early stopping")
    s.add_argument("--task", required=True, choices=("classify", "regress"))
    s.add_argument("--init", default="scratch", help="pretraining checkpoint or 'scratch'")
    s.add_argument("--data", required=True)
    s.add_argument("--train-fraction", type=float, default=100.0, help="percent of the training split to keep")
    s.add_argument("--model", default="mult", choices=MODELS)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="metrics JSON")
    s.add_argument("--save", help="write the fine-tuned checkpoint here")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", help="also write the metrics JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="describe a checkpoint without modifying it")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
