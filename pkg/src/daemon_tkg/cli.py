"""``daemon-tkg`` command line: prepare, train, eval, migrate, synth, ablate.

Exit codes: 0 success, 1 runtime failure, 2 input error, 3 validation error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import CheckpointError, IncompatibleCheckpoint, load_checkpoint, save_checkpoint
from .data import (
    DEFAULT_HISTORY, DataError, ParseError, SynthSpec, TkgDataset, ValidationError, add_inverse_quadruples,
    build_filter_index, build_snapshots, dataset_statistics, generate_synthetic, load_dataset, save_dataset,
)
from .evaluation import (
    MetricReport, config_digest, evaluate, migration_ratios, model_scorer, write_query_csv, write_report,
)
from .model import MPS_VARIANTS, MSG_VARIANTS, ConfigError
from .training import TrainConfig, TrainingError, fit

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_VALIDATION = 0, 1, 2, 3

log = logging.getLogger("daemon_tkg")

# flag dest -> TrainConfig field
FLAG_TO_FIELD = {
    "seed": "seed", "history_length": "history_length", "dim": "dim", "layers": "layers",
    "negatives": "negatives", "alpha": "alpha", "lr": "learning_rate", "epochs": "max_epochs",
    "batch_size": "batch_size", "msg_variant": "msg_variant", "mps_variant": "mps_variant",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config handling

def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys may use dashes or underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(field_type, raw: str):
    kind = field_type if isinstance(field_type, str) else field_type.__name__
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def resolve_train_config(args, dataset_name: str = "") -> TrainConfig:
    """Defaults < config file < flags. History length falls back to the benchmark default."""
    values: dict = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, raw in file_values.items():
        name = FLAG_TO_FIELD.get(key, key)
        if name in types:
            try:
                values[name] = _coerce(types[name], raw)
            except ValueError:
                raise ParseError(f"{args.config}: bad value {raw!r} for {key}") from None
    for flag, name in FLAG_TO_FIELD.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    if "history_length" not in values and dataset_name.upper() in DEFAULT_HISTORY:
        values["history_length"] = DEFAULT_HISTORY[dataset_name.upper()]
    cfg = TrainConfig(**values)
    if cfg.msg_variant not in MSG_VARIANTS or cfg.mps_variant not in MPS_VARIANTS:
        raise UsageError(_variant_help())
    cfg.validate()
    return cfg


def _variant_help() -> str:
    return f"valid variants: mps {{{','.join(MPS_VARIANTS)}}} x msg {{{','.join(MSG_VARIANTS)}}}"


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_augmented(path) -> TkgDataset:
    if path is None:
        raise UsageError("--data is required")
    return add_inverse_quadruples(load_dataset(path))


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _format_reports(reports: dict[str, MetricReport]) -> str:
    lines = []
    for mode, r in reports.items():
        lines.append(f"{r.split:>6} {mode:<14} MRR {100 * r.mrr:6.2f}  H@1 {100 * r.hits1:6.2f}  "
                     f"H@3 {100 * r.hits3:6.2f}  H@10 {100 * r.hits10:6.2f}  (n={r.num_queries})")
    return "\n".join(lines)


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    if args.data is None:
        raise UsageError("--data is required")
    ds = load_dataset(args.data)
    aug = add_inverse_quadruples(ds)
    snaps = build_snapshots(aug)
    filters = build_filter_index(aug)
    stats = dataset_statistics(ds)
    stats.update(num_snapshots=len(snaps), filter_keys=len(filters))
    print(f"dataset      {stats['name']}")
    print(f"|E|          {stats['num_entities']}")
    print(f"|R|          {stats['num_relations']}")
    print(f"N_train      {stats['num_train']}")
    print(f"N_valid      {stats['num_valid']}")
    print(f"N_test       {stats['num_test']}")
    print(f"timestamps   {stats['num_timestamps']}  (granularity {stats['time_granularity']})")
    print(f"|E_avg|      {stats['avg_entities_per_timestamp']:.2f}")
    print(f"|E|/|E_avg|  {stats['entities_over_avg']:.2f}")
    if args.out is not None:
        _dump_json(stats, _out_dir(args) / "stats.json")
    return EXIT_OK


def _train(ds: TkgDataset, cfg: TrainConfig, out: Path, deterministic: bool, quiet: bool = False):
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        def on_epoch(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            if not quiet:
                print(f"epoch {entry['epoch']:3d}  loss {entry['train_loss']:.4f}  "
                      f"valid MRR {100 * entry['valid_mrr']:.2f}")
        result = fit(ds, cfg, on_epoch=on_epoch, deterministic=deterministic)
    save_checkpoint(result.checkpoint, out / "best.ckpt")
    return result


def cmd_train(args) -> int:
    ds = _load_augmented(args.data)
    cfg = resolve_train_config(args, ds.name)
    out = _out_dir(args)
    _dump_json(cfg.to_dict(), out / "config.json")
    result = _train(ds, cfg, out, args.deterministic)
    best = result.log[result.best_epoch - 1] if result.log else {}
    summary = {"best_epoch": result.best_epoch, "best_valid_mrr": best.get("valid_mrr", 0.0),
               "config": cfg.to_dict(), "config_digest": config_digest(cfg.to_dict())}
    _dump_json(summary, out / "train_summary.json")
    print(f"best epoch {result.best_epoch}, valid MRR {100 * summary['best_valid_mrr']:.2f}; "
          f"checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def _eval_with_checkpoint(args, ds: TkgDataset, split: str):
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    ckpt.check_compatible(ds.num_base_relations)
    cfg = TrainConfig.from_dict(ckpt.config)
    if args.history_length is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "history_length": args.history_length})
    if args.batch_size is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "batch_size": args.batch_size})
    mcfg = cfg.model_config(ds.num_relations)
    digest = config_digest({**cfg.to_dict(), "directions": "both"})
    return evaluate(ds, model_scorer(ckpt.params, mcfg), split, cfg.history_length, cfg.batch_size,
                    digest=digest, workers=args.workers)


def cmd_eval(args) -> int:
    ds = _load_augmented(args.data)
    out = _out_dir(args)
    reports, records = _eval_with_checkpoint(args, ds, args.split)
    write_report(reports, out / f"report_{args.split}.json")
    if args.per_query:
        write_query_csv(records, out / f"queries_{args.split}.csv")
    print(_format_reports(reports))
    return EXIT_OK


def cmd_migrate(args) -> int:
    ds = _load_augmented(args.data)
    out = _out_dir(args)
    reports, records = _eval_with_checkpoint(args, ds, "test")
    payload = {"dataset": ds.name, "checkpoint": str(args.checkpoint),
               "reports": {m: r.to_dict() for m, r in reports.items()}}
    if args.direct_report:
        direct = json.loads(Path(args.direct_report).read_text())
        payload["ratios"] = {}
        for mode, rep in reports.items():
            if mode in direct:
                d = MetricReport(**direct[mode])
                payload["ratios"][mode] = migration_ratios(rep, d)
    _dump_json(payload, out / "migration.json")
    if args.per_query:
        write_query_csv(records, out / "queries_migrated.csv")
    print(_format_reports(reports))
    for mode, ratios in payload.get("ratios", {}).items():
        print(f"{mode:<14} ratio  " + "  ".join(f"{k} {v:.2f}%" for k, v in ratios.items()))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = _out_dir(args)
    synth = SynthSpec(num_entities=args.entities, num_base_relations=args.relations,
                     num_timestamps=args.timestamps, facts_per_step=args.facts_per_step)
    ds = generate_synthetic(synth, args.seed if args.seed is not None else 0)
    save_dataset(ds, out)
    st = dataset_statistics(ds)
    print(f"wrote {out}: {st['num_train']} train / {st['num_valid']} valid / {st['num_test']} test facts, "
          f"{len(ds.background)} background")
    return EXIT_OK


def _variant_list(raw: str | None, valid: tuple[str, ...], default: list[str]) -> list[str]:
    if raw is None:
        return default
    names = [v.strip() for v in raw.split(",") if v.strip()]
    bad = [v for v in names if v not in valid]
    if bad or not names:
        raise UsageError(f"unknown variant(s) {bad}; " + _variant_help())
    return names


def cmd_ablate(args) -> int:
    ds = _load_augmented(args.data)
    out = _out_dir(args)
    mps_list = _variant_list(args.mps_variant, MPS_VARIANTS, list(MPS_VARIANTS))
    msg_list = _variant_list(args.msg_variant, MSG_VARIANTS, ["multiply"])
    # variant flags are lists here; resolve the rest of the config without them
    args.mps_variant = args.msg_variant = None
    base = resolve_train_config(args, ds.name)
    rows = []
    for mps, msg in itertools.product(mps_list, msg_list):
        cfg = TrainConfig.from_dict({**base.to_dict(), "mps_variant": mps, "msg_variant": msg})
        run_dir = out / f"{mps}-{msg}"
        run_dir.mkdir(exist_ok=True)
        result = _train(ds, cfg, run_dir, args.deterministic, quiet=True)
        mcfg = cfg.model_config(ds.num_relations)
        digest = config_digest(cfg.to_dict())
        reports, _ = evaluate(ds, model_scorer(result.checkpoint.params, mcfg), "test", cfg.history_length,
                              cfg.batch_size, digest=digest, workers=args.workers)
        write_report(reports, run_dir / "report_test.json")
        best = result.log[result.best_epoch - 1] if result.log else {"valid_mrr": 0.0}
        f = reports["time-filtered"]
        rows.append({"mps_variant": mps, "msg_variant": msg, "best_epoch": result.best_epoch,
                     "valid_mrr": best["valid_mrr"], "test_mrr": f.mrr, "test_hits1": f.hits1,
                     "test_hits3": f.hits3, "test_hits10": f.hits10})
        print(f"{mps:>6} x {msg:<9} valid MRR {100 * best['valid_mrr']:6.2f}  test MRR {100 * f.mrr:6.2f}")
    _dump_json({"base_config": base.to_dict(), "rows": rows}, out / "ablation.json")
    header = "| mps | msg | valid MRR | test MRR | H@1 | H@3 | H@10 |\n|---|---|---|---|---|---|---|\n"
    body = "".join(f"| {r['mps_variant']} | {r['msg_variant']} | {100 * r['valid_mrr']:.2f} | "
                   f"{100 * r['test_mrr']:.2f} | {100 * r['test_hits1']:.2f} | {100 * r['test_hits3']:.2f} | "
                   f"{100 * r['test_hits10']:.2f} |\n" for r in rows)
    (out / "ablation.md").write_text(header + body)
    return EXIT_OK


# ---------------------------------------------------------------- parser

COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "migrate": cmd_migrate,
            "synth": cmd_synth, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="key=value config file; flags take precedence")
    common.add_argument("--seed", type=int)
    common.add_argument("--history-length", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--layers", type=int)
    common.add_argument("--negatives", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--lr", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--msg-variant", help="multiply, translate or rotate (comma list for ablate)")
    common.add_argument("--mps-variant", help="gated, pmmp, mmp or ipmm (comma list for ablate)")
    common.add_argument("--checkpoint")
    common.add_argument("--direct-report", help="JSON report of direct training, for migration ratios")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--deterministic", action="store_true", help="zero wall-clock fields in outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="daemon-tkg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="validate a dataset and print statistics")
    sub.add_parser("train", parents=[common], help="train and write best.ckpt + metrics.jsonl")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--per-query", action="store_true", help="also write a per-query CSV")
    p = sub.add_parser("migrate", parents=[common], help="evaluate a checkpoint on another dataset")
    p.add_argument("--per-query", action="store_true")
    p = sub.add_parser("synth", parents=[common], help="generate the synthetic rule dataset")
    p.add_argument("--entities", type=int, default=20)
    p.add_argument("--relations", type=int, default=2)
    p.add_argument("--timestamps", type=int, default=30)
    p.add_argument("--facts-per-step", type=int, default=4)
    sub.add_parser("ablate", parents=[common], help="train every requested MPS x message variant")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"daemon-tkg: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, ParseError, IsADirectoryError) as e:
        print(f"daemon-tkg: input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ValidationError, IncompatibleCheckpoint, ConfigError, CheckpointError, DataError, ValueError) as e:
        print(f"daemon-tkg: validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, RuntimeError, OSError) as e:
        print(f"daemon-tkg: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
