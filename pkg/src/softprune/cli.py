"""Command-line interface: ``softprune {train,prune,compact,flops,bench,reproduce}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, analyzer
from .compactor import compact, derive_keep_plan, equivalence_check
from .config import load_config
from .errors import ConfigurationError, InputError, SoftPruneError
from .experiment import PRESETS, deterministic_threads, desk_config, run_experiment, run_preset, run_repeats
from .serialize import load_model, save_model
from .sfp import PruneRecord, prune_step

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", type=Path, help="TOML experiment config")
    g.add_argument("--seed", type=int, help="random seed (overrides the config)")
    g.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")
    g.add_argument("--out-dir", type=Path, help="directory for artifacts")
    g.add_argument("--arch", help="plain-chain | resnet8 | resnet20 | ... (flops also: resnet18/34/50/101)")
    g.add_argument("--pruning-rate", type=float, help="pruning rate P in [0, 1)")
    g.add_argument("--norm-order", type=float, help="p of the lp-norm filter criterion")
    g.add_argument("--interval", type=int, help="prune every this many epochs")
    g.add_argument("--epochs", type=int, help="number of training epochs")
    g.add_argument("--pretrained", type=Path, help="start from this model file (learning rates / 10)")
    g.add_argument("--subset", type=int, help="use only the first N training samples")
    g.add_argument("--data-dir", type=Path, help="directory with the MNIST IDX files (desk defaults)")
    g.add_argument("--json", action="store_true", help="machine-readable output")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="softprune", description="Soft filter pruning engine.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train", parents=[common], help="train with soft pruning and save the pruned model")

    p = sub.add_parser("prune", parents=[common], help="apply one pruning step to a saved model")
    p.add_argument("--model", type=Path, required=True)

    p = sub.add_parser("compact", parents=[common], help="build the compact model of a pruned model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--record", type=Path, help="PruneRecord CSV (default: selection stored in the model)")
    p.add_argument("--threshold", type=float, help="keep filters with l2-norm above this instead")
    p.add_argument("--check", type=int, default=0, metavar="N", help="equivalence check on N random inputs")

    p = sub.add_parser("flops", parents=[common], help="count convolution MACs / FLOPs")
    p.add_argument("--model", type=Path, help="count a saved model's actual shapes")
    p.add_argument("--input", type=int, help="square input size for named architectures")
    p.add_argument("--convention", choices=analyzer.CONVENTIONS, default="alignment-aware")
    p.add_argument("--skip", default="", help="comma-separated layer ids (or 'stem','shortcut') left unpruned")

    p = sub.add_parser("bench", parents=[common], help="wall-clock a model against its compact form")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--compact", type=Path, help="compact model file (default: derived from --model)")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)

    p = sub.add_parser("reproduce", parents=[common], help="full pipeline for a config or preset")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--repeats", type=int, help="number of seeds (3 gives mean +- std)")
    return parser


# -- helpers ------------------------------------------------------------------------

def _arch_overrides(name):
    name = name.lower()
    if name in ("plain-chain", "chain"):
        return {"architecture": "plain-chain"}
    if name in analyzer.CIFAR_RESNETS:
        return {"architecture": "resnet-basic", "depth": analyzer.CIFAR_RESNETS[name]}
    raise InputError(f"--arch {name!r} is not trainable; use plain-chain or one of {sorted(analyzer.CIFAR_RESNETS)}")


def experiment_config(args):
    """Config from ``--config`` (or the desk defaults) with command-line overrides applied.

    ``--out-dir`` only chooses where artifacts go; it is kept out of the
    config so the same experiment hashes the same wherever it is written.
    """
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = desk_config(args.data_dir)
    if args.arch:
        cfg = cfg.replace("model", **_arch_overrides(args.arch))
    sfp = {k: v for k, v in {
        "pruning_rate": args.pruning_rate, "norm_order": args.norm_order,
        "interval": args.interval, "epoch_max": args.epochs,
    }.items() if v is not None}
    if args.pretrained is not None:
        sfp["pretrained_mode"] = True
    if sfp:
        cfg = cfg.replace("sfp", **sfp)
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.deterministic:
        run["deterministic"] = True
    if getattr(args, "repeats", None) is not None:
        run["repeats"] = args.repeats
    if run:
        cfg = cfg.replace("run", **run)
    if args.subset is not None:
        cfg = cfg.replace("data", subset=args.subset)
    return cfg


def _emit(args, payload, text):
    print(json.dumps(payload, indent=2, sort_keys=True, default=float) if args.json else text)


def _out_dir(args, default="."):
    path = Path(args.out_dir if args.out_dir is not None else default)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- commands -------------------------------------------------------------------------

def cmd_train(args):
    cfg = experiment_config(args).replace("run", bench=False, repeats=1)
    run_dir = _out_dir(args, Path(cfg.run.out_dir) / cfg.run.name)
    result = run_experiment(cfg, run_dir, pretrained=args.pretrained)
    _emit(args, {"run_dir": str(run_dir), "log_hash": result.log.hash(), **result.summary},
          f"run directory {run_dir}\n"
          f"test accuracy {result.summary['test_acc']:.4f}, compact {result.summary['compact_test_acc']:.4f}\n"
          f"log hash {result.log.hash()}")
    return EXIT_OK


def cmd_prune(args):
    model = load_model(args.model)
    rate = args.pruning_rate if args.pruning_rate is not None else 0.3
    p = args.norm_order if args.norm_order is not None else 2.0
    event = prune_step(model, rate, p)
    out = _out_dir(args)
    meta = {"final_epoch": 0, "selections": {k: list(v) for k, v in event.selections.items()},
            "pruning_rate": rate, "norm_order": p}
    save_model(model, out / "pruned.sfp", prune_meta=meta)
    PruneRecord([event]).to_csv(out / "prune_record.csv")
    _emit(args, {"selections": meta["selections"], "model": str(out / "pruned.sfp")},
          "\n".join(f"{lid}: pruned {list(sel)}" for lid, sel in event.selections.items())
          + f"\nwrote {out / 'pruned.sfp'}")
    return EXIT_OK


def _plan_for(model, record=None, threshold=None):
    if threshold is not None:
        return derive_keep_plan(model, threshold=threshold)
    if record is not None:
        ids = [layer.layer_id for layer in model.conv_layers() if layer.prunable]
        return derive_keep_plan(model, PruneRecord.from_csv(record, layer_ids=ids))
    meta = getattr(model, "prune_meta", {}) or {}
    if meta.get("selections") is not None and meta.get("final_epoch") is not None:
        from .sfp import PruneEvent
        sel = {k: tuple(v) for k, v in meta["selections"].items()}
        return derive_keep_plan(model, PruneRecord([PruneEvent(meta["final_epoch"], sel, {})]))
    return derive_keep_plan(model, threshold=0.0)


def cmd_compact(args):
    model = load_model(args.model)
    if getattr(model, "index_map", None) is not None:
        raise InputError(f"{args.model} is already a compact model")
    plan = _plan_for(model, args.record, args.threshold)
    small = compact(model, plan)
    out = _out_dir(args, args.model.parent)
    path = out / (args.model.stem + ".compact.sfp")
    save_model(small, path, prune_meta=getattr(model, "prune_meta", None))
    payload = {"compact_model": str(path), "parameters": model.parameter_count(),
               "compact_parameters": small.parameter_count(), "source": plan.source}
    lines = [f"wrote {path} ({small.parameter_count()} of {model.parameter_count()} parameters)"]
    if args.check:
        diff = equivalence_check(model, small, n_inputs=args.check, seed=args.seed or 0)
        payload["max_abs_logit_diff"] = diff
        lines.append(f"max |logit diff| over {args.check} inputs: {diff:.3e}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def _skip_ids(table, skip):
    out = set()
    for token in filter(None, (t.strip() for t in skip.split(","))):
        matched = {e.layer_id for e in table if e.layer_id == token or e.layer_id.endswith("." + token)}
        if not matched:
            raise InputError(f"--skip {token!r} matches no layer")
        out |= matched
    return out


def cmd_flops(args):
    if args.model is not None:
        source = load_model(args.model)
    elif args.arch:
        source = args.arch
    elif args.config is not None:
        source = load_config(args.config).model
    else:
        raise UsageError("flops needs --arch, --model or --config")
    table = analyzer.layer_table(source, args.input)
    rate = args.pruning_rate or 0.0
    skip = _skip_ids(table, args.skip)
    rates = {e.layer_id: (rate if e.prunable and e.layer_id not in skip else 0.0) for e in table}
    report = analyzer.model_flops(source, rates, args.convention, input_size=args.input)
    if args.out_dir is not None:
        out = _out_dir(args)
        report.to_csv(out / "flops.csv")
        (out / "flops.txt").write_text(report.to_text() + "\n")
    _emit(args, report.to_dict(), report.to_text())
    return EXIT_OK


def cmd_bench(args):
    model = load_model(args.model)
    small = load_model(args.compact) if args.compact else compact(model, _plan_for(model))
    report = analyzer.wallclock_bench(model, small, batch=args.batch, reps=args.reps, warmup=args.warmup,
                                      seed=args.seed or 0)
    if args.out_dir is not None:
        report.to_csv(_out_dir(args) / "timing.csv")
    _emit(args, report.to_dict(), report.to_text())
    return EXIT_OK


def cmd_reproduce(args):
    cfg = experiment_config(args)
    out = _out_dir(args, Path(cfg.run.out_dir) / (args.preset or cfg.run.name))
    if args.preset and args.preset != "desk":
        agg = run_preset(args.preset, cfg, out)
        payload = {label: {k: {"mean": m, "std": s} for k, (m, s) in a.items()} for label, a in agg.items()}
        text = "\n".join(f"{label}: compact acc {a['compact_test_acc'][0]:.4f} +- {a['compact_test_acc'][1]:.4f}"
                         for label, a in agg.items())
        _emit(args, payload, text)
        return EXIT_OK
    results, agg = run_repeats(cfg, out, pretrained=args.pretrained)
    payload = {"runs": [{"run_dir": str(r.run_dir), "log_hash": r.log.hash()} for r in results],
               "summary": {k: {"mean": m, "std": s} for k, (m, s) in agg.items()}}
    lines = [f"{r.run_dir}: log hash {r.log.hash()}" for r in results]
    for key in ("test_acc", "compact_test_acc", "theoretical_pruned_ratio"):
        m, s = agg[key]
        lines.append(f"{key}: {m:.4f} +- {s:.4f}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "compact": cmd_compact, "flops": cmd_flops,
            "bench": cmd_bench, "reproduce": cmd_reproduce}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with deterministic_threads(args.deterministic):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, InputError) as exc:
        print(f"softprune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SoftPruneError, OSError, RuntimeError, ValueError) as exc:
        print(f"softprune {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
