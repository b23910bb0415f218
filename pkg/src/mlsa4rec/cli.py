"""Command-line entry point.

Subcommands:
    prep        parse, filter, split, report stats, optionally cache
    train       fit a model, save best checkpoint and metric history
    eval        score a checkpoint on the test (and validation) split
    gridsearch  exhaustive hyperparameter sweep with early stopping
    bench       runtime-scaling benchmark or backend comparison
    gradcheck   finite-difference validation of analytic gradients
    ablate      train every architecture variant, emit a comparison CSV

Every command takes `--config FILE` plus `--key=value` (or `--key value`)
overrides; keys are listed by `mlsa4rec help`.  Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from . import kernels
from .bench import (bench_scaling, compare_backends, write_bench_csv,
                    write_scaling_svg)
from .config import (ConfigError, RunConfig, SCHEMA, build_config,
                     describe_keys, parse_config_file)
from .data import (Dataset, Split, build_split, dataset_stats, kcore_filter,
                   load_dataset_cache, pad_truncate, parse_amazon,
                   parse_movielens, save_dataset_cache, split_dataset,
                   synthetic_successor_dataset)
from .model import VARIANTS, ModelConfig, build_variant
from .tensor import load_checkpoint, save_checkpoint
from .train_eval import (TrainConfig, evaluate, grid_search, model_grad_check,
                         train, train_multi_seed, write_metrics_csv)

USAGE = """usage: mlsa4rec <command> [--config FILE] [--key=value ...]

commands:
  prep        parse + filter + split a dataset, print its statistics
  train       train a model, write checkpoint/metrics
  eval        evaluate a checkpoint on validation and test splits
  gridsearch  sweep grid_* keys, report the best cell
  bench       measure runtime scaling (bench_mode=scaling|backends)
  gradcheck   compare analytic gradients against finite differences
  ablate      train all variants and tabulate test metrics
  help        show all config keys

run `mlsa4rec help` for the key reference."""

COMMANDS = ("prep", "train", "eval", "gridsearch", "bench", "gradcheck",
            "ablate", "help")


class UsageError(Exception):
    pass


def _parse_args(argv: list[str]) -> RunConfig:
    file_values: dict[str, str] = {}
    overrides: dict[str, str] = {}
    i = 0
    while i < len(argv):
        token = argv[i]
        if not token.startswith("--"):
            raise UsageError(f"unexpected argument: {token}")
        body = token[2:]
        if "=" in body:
            key, _, value = body.partition("=")
            key = key.replace("-", "_")
        else:
            key = body.replace("-", "_")
            if key in SCHEMA and SCHEMA[key][1] is bool:
                value = "true"
            else:
                i += 1
                if i >= len(argv):
                    raise UsageError(f"--{key} needs a value")
                value = argv[i]
        if key == "config":
            file_values.update(parse_config_file(value))
        else:
            overrides[key] = value
        i += 1
    return build_config(file_values, overrides)


def _resolve_path(path: str) -> str:
    if not path:
        raise FileNotFoundError("no input path configured (set path=...)")
    if os.path.exists(path):
        return path
    root = os.environ.get("MLSA_DATA_DIR", "")
    if root:
        candidate = os.path.join(root, path)
        if os.path.exists(candidate):
            return candidate
    raise FileNotFoundError(f"dataset file not found: {path}")


def _load_records(cfg: RunConfig):
    path = _resolve_path(cfg.path)
    if cfg.dataset == "movielens":
        return parse_movielens(path)
    if cfg.dataset == "amazon":
        return parse_amazon(path)
    raise ValueError(f"dataset {cfg.dataset!r} has no raw parser")


def _load_data(cfg: RunConfig) -> tuple[Dataset, Split]:
    if cfg.dataset == "synthetic":
        return synthetic_successor_dataset(cfg.syn_items, cfg.syn_users,
                                           cfg.syn_len, cfg.seed)
    if cfg.cache and os.path.exists(cfg.cache):
        ds = load_dataset_cache(cfg.cache)
        return ds, split_dataset(ds)
    records = kcore_filter(_load_records(cfg), cfg.kcore, cfg.filter_mode)
    ds, split = build_split(records)
    if cfg.cache:
        save_dataset_cache(ds, cfg.cache)
    return ds, split


def _stats_line(ds: Dataset) -> str:
    users, items, inter, avg = dataset_stats(ds)
    return f"{users} users, {items} items, {inter} interactions, avg {avg:.1f}"


def cmd_prep(cfg: RunConfig) -> int:
    if cfg.dataset == "synthetic":
        ds, _ = synthetic_successor_dataset(cfg.syn_items, cfg.syn_users,
                                            cfg.syn_len, cfg.seed)
    else:
        records = kcore_filter(_load_records(cfg), cfg.kcore, cfg.filter_mode)
        ds, _ = build_split(records)
        if cfg.cache:
            save_dataset_cache(ds, cfg.cache)
            print(f"cache written: {cfg.cache}")
    print(_stats_line(ds))
    return 0


def cmd_train(cfg: RunConfig) -> int:
    ds, split = _load_data(cfg)
    model_cfg = cfg.to_model_config(ds.vocab_size)
    train_cfg = cfg.to_train_config()
    if train_cfg.n_seeds > 1:
        mean, reports, rows = train_multi_seed(model_cfg, ds, split, train_cfg,
                                               log=print)
        print(f"test over {train_cfg.n_seeds} seeds: "
              f"hr@{mean.k} {mean.hr_at_k:.4f} ndcg@{mean.k} {mean.ndcg_at_k:.4f} "
              f"mrr@{mean.k} {mean.mrr_at_k:.4f}")
    else:
        model = build_variant(model_cfg, seed=train_cfg.seed)
        result = train(model, ds, split, train_cfg, log=print)
        rows = result.history
        rep = evaluate(model, split, "test", k=train_cfg.k,
                       mask_history=train_cfg.mask_history)
        rows.append({"phase": "test", "epoch": result.best_epoch,
                     "hr": rep.hr_at_k, "ndcg": rep.ndcg_at_k,
                     "mrr": rep.mrr_at_k, "loss": float("nan"),
                     "seed": train_cfg.seed})
        print(f"test: hr@{rep.k} {rep.hr_at_k:.4f} ndcg@{rep.k} "
              f"{rep.ndcg_at_k:.4f} mrr@{rep.k} {rep.mrr_at_k:.4f}")
        if cfg.checkpoint:
            save_checkpoint(model.params, cfg.checkpoint)
            print(f"checkpoint written: {cfg.checkpoint}")
    if cfg.metrics_csv:
        write_metrics_csv(cfg.metrics_csv, rows, k=train_cfg.k)
        print(f"metrics written: {cfg.metrics_csv}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ValueError("eval needs checkpoint=...")
    ds, split = _load_data(cfg)
    model = build_variant(cfg.to_model_config(ds.vocab_size), seed=cfg.seed)
    store = load_checkpoint(cfg.checkpoint)
    model.params.load_values(store.snapshot())
    for phase in ("valid", "test"):
        rep = evaluate(model, split, phase, k=cfg.k,
                       mask_history=cfg.mask_history)
        print(f"{phase}: hr@{rep.k} {rep.hr_at_k:.4f} ndcg@{rep.k} "
              f"{rep.ndcg_at_k:.4f} mrr@{rep.k} {rep.mrr_at_k:.4f} "
              f"({rep.population} users)")
    return 0


def cmd_gridsearch(cfg: RunConfig) -> int:
    grid: dict[str, list] = {}
    for key, parse in (("batch_size", cfg.int_list), ("n_layers", cfg.int_list),
                       ("n_heads", cfg.int_list), ("n_interests", cfg.int_list),
                       ("dropout", cfg.float_list)):
        values = parse(f"grid_{key}")
        if values:
            grid[key] = values
    if not grid:
        raise ValueError("no grid_* keys set; nothing to search")
    ds, split = _load_data(cfg)
    model_cfg = cfg.to_model_config(ds.vocab_size)
    best_mc, best_tc, rows = grid_search(ds, split, model_cfg,
                                         cfg.to_train_config(), grid, log=print)
    if cfg.out:
        write_bench_csv(cfg.out, rows)
        print(f"grid report written: {cfg.out}")
    chosen = {k: getattr(best_mc if hasattr(best_mc, k) else best_tc, k)
              for k in grid}
    print(f"best cell: {chosen}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    if cfg.backend:
        kernels.set_backend(cfg.backend)
    lengths = cfg.int_list("bench_lengths")
    if cfg.bench_mode == "backends":
        rows = compare_backends(lengths, reps=cfg.bench_reps, seed=cfg.seed,
                                log=print)
    else:
        result = bench_scaling(cfg.str_list("components"), lengths,
                               reps=cfg.bench_reps, seed=cfg.seed,
                               d_model=cfg.d_model, d_state=cfg.d_state,
                               n_interests=cfg.n_interests,
                               n_heads=cfg.n_heads, log=print)
        rows = result.rows
        for component, slope in result.slopes.items():
            print(f"slope {component}: {slope:.4f}")
    if cfg.out:
        write_bench_csv(cfg.out, rows)
        print(f"bench rows written: {cfg.out}")
    if cfg.plot:
        write_scaling_svg(cfg.plot, rows)
        print(f"chart written: {cfg.plot}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    if cfg.toy:
        model_cfg = ModelConfig(vocab_size=20, max_len=8, d_model=8, d_state=4,
                                n_interests=2, n_heads=2, n_layers=1)
        rng = np.random.default_rng(cfg.seed)
        ids = rng.integers(1, 20, size=(2, 8))
        targets = rng.integers(1, 20, size=2)
    else:
        ds, split = _load_data(cfg)
        model_cfg = cfg.to_model_config(ds.vocab_size)
        ids = np.stack([pad_truncate(split.train[u], cfg.max_len)
                        for u in range(min(2, len(split.train)))])
        targets = np.asarray(split.valid[:ids.shape[0]], dtype=np.int64)
    err = model_grad_check(model_cfg, ids, targets, seed=cfg.seed)
    print(f"max relative gradient error: {err:.3e}")
    if err < 1e-3:
        print("gradcheck passed")
        return 0
    print("gradcheck FAILED (threshold 1e-3)")
    return 1


def cmd_ablate(cfg: RunConfig) -> int:
    from dataclasses import replace

    ds, split = _load_data(cfg)
    train_cfg = cfg.to_train_config()
    if cfg.full and train_cfg.n_seeds == 1:
        # extended run: average each variant over 4 independent seeds
        train_cfg = replace(train_cfg, n_seeds=4)
    rows = []
    for variant in VARIANTS:
        model_cfg = cfg.to_model_config(ds.vocab_size)
        model_cfg.variant = variant
        if train_cfg.n_seeds > 1:
            mean, _, _ = train_multi_seed(model_cfg, ds, split, train_cfg)
            rep = mean
        else:
            model = build_variant(model_cfg, seed=train_cfg.seed)
            train(model, ds, split, train_cfg)
            rep = evaluate(model, split, "test", k=train_cfg.k,
                           mask_history=train_cfg.mask_history)
        rows.append({"variant": variant, f"hr@{rep.k}": rep.hr_at_k,
                     f"ndcg@{rep.k}": rep.ndcg_at_k, f"mrr@{rep.k}": rep.mrr_at_k})
        print(f"{variant}: hr@{rep.k} {rep.hr_at_k:.4f} "
              f"ndcg@{rep.k} {rep.ndcg_at_k:.4f} mrr@{rep.k} {rep.mrr_at_k:.4f}")
    if cfg.out:
        write_bench_csv(cfg.out, rows)
        print(f"ablation table written: {cfg.out}")
    return 0


def cmd_help(_cfg: RunConfig) -> int:
    print(USAGE)
    print("\nconfig keys:")
    print(describe_keys())
    return 0


HANDLERS = {"prep": cmd_prep, "train": cmd_train, "eval": cmd_eval,
            "gridsearch": cmd_gridsearch, "bench": cmd_bench,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "help": cmd_help}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        print(USAGE, file=sys.stderr)
        return 2
    command, rest = argv[0], argv[1:]
    if command in ("-h", "--help"):
        command = "help"
    if command not in COMMANDS:
        print(f"unknown command: {command}\n{USAGE}", file=sys.stderr)
        return 2
    try:
        cfg = _parse_args(rest)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}\n{USAGE}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[command](cfg)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
