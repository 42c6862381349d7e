"""End-to-end runs: train with soft pruning, compact, verify, count and time.

Every run directory holds a config snapshot, the per-epoch log, the
PruneRecord CSV, both model files, the FLOPs and timing reports, the
equivalence result and a ``manifest.json`` listing all of them with hashes.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analyzer, kernels
from .compactor import compact, derive_keep_plan, equivalence_check
from .config import ExperimentConfig, canonical_json, config_from_dict, to_toml
from .data import load_cifar_bin, load_idx, synthetic_pair
from .errors import ConfigurationError, InputError, SoftPruneError
from .network import build_model
from .serialize import load_model, save_model
from .sfp import evaluate, recalibrate_bn, sfp_train

logger = logging.getLogger(__name__)

PRESETS = ("desk", "ablation-norm", "ablation-rate", "ablation-interval", "ablation-layers")
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


# -- data ---------------------------------------------------------------------

def load_datasets(data, spec, seed=0):
    """``(train, test)`` datasets described by a :class:`~softprune.config.DataConfig`."""
    if data.dataset == "synthetic":
        train, test = synthetic_pair(data.synthetic_train, data.synthetic_test, spec.input_shape,
                                     spec.num_classes, seed=seed)
    elif data.dataset == "mnist":
        train = load_idx(data.train_images, data.train_labels, "train", pad=data.pad,
                         num_classes=spec.num_classes)
        test = load_idx(data.test_images, data.test_labels, "test", stats=(train.mean, train.std),
                        pad=data.pad, num_classes=spec.num_classes)
    else:
        train = load_cifar_bin(data.cifar_train, "train")
        test = load_cifar_bin(data.cifar_test, "test", stats=(train.mean, train.std))
        if data.pad:
            from .data import pad_to
            train.images = pad_to(train.images, data.pad)
            test.images = pad_to(test.images, data.pad)
    train = train.subset(data.subset)
    test = test.subset(data.test_subset)
    train.augment = data.augment
    if tuple(train.images.shape[1:]) != spec.input_shape:
        raise ConfigurationError(
            f"data shape {tuple(train.images.shape[1:])} does not match model input_shape {spec.input_shape}"
        )
    return train, test


def find_mnist(data_dir):
    """Map the four MNIST IDX files inside ``data_dir`` (plain or ``.gz``)."""
    out = {}
    for key, stem in MNIST_FILES.items():
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            p = Path(data_dir) / name
            if p.exists():
                out[key] = str(p)
                break
        else:
            raise InputError(f"{data_dir}: no {stem}[.gz] found")
    return out


# -- presets --------------------------------------------------------------------

def desk_config(data_dir=None, **run):
    """The desk-scale setup: 4-conv chain (8/16/16/32) on MNIST padded to 29x29.

    Without ``data_dir`` a synthetic dataset of the same shape stands in.
    """
    data = {"dataset": "synthetic", "synthetic_train": 1000, "synthetic_test": 500}
    if data_dir is not None:
        data = {"dataset": "mnist", "pad": 29, **find_mnist(data_dir)}
    return config_from_dict({
        "model": {"architecture": "plain-chain", "widths": [8, 16, 16, 32], "strides": [1, 2, 1, 2],
                  "input_shape": [1, 29, 29]},
        "sfp": {"pruning_rate": 0.1, "norm_order": 2.0, "interval": 1, "epoch_max": 10, "lr": 0.1,
                "lr_milestones": [6, 9], "batch_size": 32, "max_grad_norm": 2.0},
        "data": data,
        "run": {"name": "desk", "deterministic": True, **run},
    })


def preset_configs(name, base):
    """Labelled configs of a preset, derived from ``base``."""
    if name == "desk":
        return [("desk", base)]
    if name == "ablation-norm":
        return [(f"p{p:g}-P{rate:g}", base.replace("sfp", norm_order=p, pruning_rate=rate))
                for p in (1.0, 2.0) for rate in (0.1, 0.2, 0.3)]
    if name == "ablation-rate":
        return [(f"P{rate:g}", base.replace("sfp", pruning_rate=rate))
                for rate in (round(0.05 * i, 2) for i in range(9))]
    if name == "ablation-interval":
        return [(f"interval{k}", base.replace("sfp", interval=k)) for k in range(1, 11)]
    if name == "ablation-layers":
        d = base.to_dict()
        d["model"].update(architecture="resnet-basic", depth=8, prune_stem=False)
        d["sfp"]["pruning_rate"] = 0.3
        out = []
        for mask in ("first", "second"):
            d["model"]["prune_blocks"] = mask
            out.append((f"blocks-{mask}", config_from_dict(json.loads(json.dumps(d)))))
        return out
    raise InputError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")


# -- logs -------------------------------------------------------------------------

@dataclass
class ExperimentLog:
    """One row per epoch plus run metadata."""

    rows: list
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {"metadata": self.metadata, "rows": self.rows}

    def hash(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def to_csv(self, path):
        layer_ids = sorted({k for r in self.rows for k in r.get("zero_filters", {})})
        base = ["epoch", "lr", "train_loss", "train_acc", "test_acc", "pruned", "reconstruction"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(base + [f"zero:{lid}" for lid in layer_ids])
            for r in self.rows:
                writer.writerow([r[k] if r[k] is not None else "" for k in base]
                                + [r["zero_filters"].get(lid, "") for lid in layer_ids])


@contextlib.contextmanager
def deterministic_threads(enabled):
    """Pin BLAS to one thread while ``enabled``."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunResult:
    run_dir: Path
    log: ExperimentLog
    record: object
    summary: dict


def run_experiment(cfg: ExperimentConfig, out_dir=None, pretrained=None, data=None):
    """Run the full pipeline for one seed.

    Args:
        cfg: validated experiment config.
        out_dir: run directory (default ``cfg.run.out_dir / cfg.run.name``).
        pretrained: optional model file to start from; the config must then
            have ``pretrained_mode`` set or it is switched on here.
        data: optional preloaded ``(train, test)`` pair.

    Returns:
        A :class:`RunResult`. On failure the artifacts written so far stay
        on disk, the manifest records the error and the exception propagates.
    """
    run_dir = Path(out_dir if out_dir is not None else Path(cfg.run.out_dir) / cfg.run.name)
    run_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    manifest = {"status": "running", "config_hash": cfg.config_hash(), "seed": cfg.run.seed}

    def note(name, path):
        artifacts[name] = Path(path).name

    def write_manifest():
        manifest["artifacts"] = {k: {"file": v, "sha256": _sha256(run_dir / v)}
                                 for k, v in sorted(artifacts.items()) if (run_dir / v).exists()}
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    (run_dir / "config.toml").write_text(to_toml(cfg))
    note("config", run_dir / "config.toml")
    try:
        with deterministic_threads(cfg.run.deterministic):
            summary, log, record = _pipeline(cfg, run_dir, pretrained, data, note)
    except BaseException as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        write_manifest()
        raise
    manifest["status"] = "ok"
    manifest["log_hash"] = log.hash()
    manifest["summary"] = summary
    write_manifest()
    return RunResult(run_dir, log, record, summary)


def _pipeline(cfg, run_dir, pretrained, data, note):
    spec, sfp = cfg.model, cfg.sfp
    train, test = data if data is not None else load_datasets(cfg.data, spec, cfg.run.seed)
    sfp = replace(sfp, seed=cfg.run.seed)  # the config itself stays untouched so its hash is stable
    if pretrained is not None:
        model = load_model(pretrained)
        if model.spec.to_dict() != spec.to_dict():
            raise ConfigurationError(f"{pretrained}: model spec does not match the config")
        sfp = replace(sfp, pretrained_mode=True)
    else:
        model = build_model(spec, seed=cfg.run.seed)

    checkpoint_path = run_dir / "checkpoint.sfp"

    def checkpoint(m, epoch):
        save_model(m, checkpoint_path, prune_meta={"epoch": epoch})
        return str(checkpoint_path)

    model, record, rows = sfp_train(model, train, sfp, test_data=test, checkpoint=checkpoint)
    record.to_csv(run_dir / "prune_record.csv")
    note("prune_record", run_dir / "prune_record.csv")
    log = ExperimentLog(rows, {
        "config_hash": cfg.config_hash(),
        "seed": cfg.run.seed,
        "mode": "pretrained" if sfp.pretrained_mode else "scratch",
        "deterministic": cfg.run.deterministic,
        "backend": kernels.BACKEND,
    })
    log.to_csv(run_dir / "log.csv")
    (run_dir / "log.json").write_text(json.dumps(log.to_dict(), indent=1, sort_keys=True) + "\n")
    note("log_csv", run_dir / "log.csv")
    note("log_json", run_dir / "log.json")

    final = record.final
    if cfg.run.recalibrate_bn:
        recalibrate_bn(model, train, keep_zero=final.selections if final else None)
    model.eval()
    meta = {"final_epoch": final.epoch if final else None,
            "selections": {k: list(v) for k, v in final.selections.items()} if final else {},
            "pruning_rate": sfp.pruning_rate, "norm_order": sfp.norm_order}
    save_model(model, run_dir / "model.sfp", prune_meta=meta)
    note("model", run_dir / "model.sfp")

    plan = derive_keep_plan(model, record)
    threshold_plan = derive_keep_plan(model, threshold=cfg.run.threshold)
    small = compact(model, plan)
    save_model(small, run_dir / "compact.sfp", prune_meta=meta)
    note("compact_model", run_dir / "compact.sfp")
    note("index_map", run_dir / "compact.sfp.map.csv")

    diff = equivalence_check(model, small, n_inputs=cfg.run.check_inputs, seed=cfg.run.seed)
    diff64 = equivalence_check(model, small, n_inputs=cfg.run.check_inputs, seed=cfg.run.seed, dtype=np.float64)
    equivalence = {"n_inputs": cfg.run.check_inputs, "max_abs_logit_diff": diff,
                   "max_abs_logit_diff_float64": diff64, "passed": diff < 1e-5 or diff64 < 1e-10,
                   "threshold_plan_agrees": threshold_plan.kept_out == plan.kept_out}
    (run_dir / "equivalence.json").write_text(json.dumps(equivalence, indent=2, sort_keys=True) + "\n")
    note("equivalence", run_dir / "equivalence.json")

    rates = {lid: sfp.pruning_rate for lid in final.selections} if final else 0.0
    theoretical = analyzer.model_flops(spec, rates, cfg.run.flops_convention)
    theoretical.to_csv(run_dir / "flops.csv")
    (run_dir / "flops.txt").write_text(theoretical.to_text() + "\n")
    (run_dir / "flops.json").write_text(theoretical.to_json() + "\n")
    for name in ("flops.csv", "flops.txt", "flops.json"):
        note(name.replace(".", "_"), run_dir / name)

    summary = {
        "test_acc": evaluate(model, test),
        "compact_test_acc": evaluate(small, test),
        "final_train_loss": rows[-1]["train_loss"],
        "min_reconstruction": min((r["reconstruction"] for r in rows if r["reconstruction"] is not None),
                                  default=None),
        "parameters": model.parameter_count(),
        "compact_parameters": small.parameter_count(),
        "equivalence_max_diff": diff,
        "equivalence_max_diff_float64": diff64,
        "theoretical_pruned_ratio": theoretical.pruned_ratio,
        "executed_pruned_ratio": analyzer.executed_speedup(model, small),
        "total_macs": theoretical.total_macs,
    }
    if cfg.run.bench:
        timing = analyzer.wallclock_bench(model, small, batch=cfg.run.bench_batch, reps=cfg.run.bench_reps,
                                          warmup=cfg.run.bench_warmup, seed=cfg.run.seed)
        timing.to_csv(run_dir / "timing.csv")
        (run_dir / "timing.txt").write_text(timing.to_text() + "\n")
        note("timing_csv", run_dir / "timing.csv")
        note("timing_txt", run_dir / "timing.txt")
        summary["realistic_speedup"] = timing.realistic_speedup
    return summary, log, record


def mean_std(values):
    """``(mean, sample std)``; std is 0 for a single value."""
    values = [float(v) for v in values]
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def run_repeats(cfg, out_dir=None, pretrained=None, data=None):
    """Run ``cfg.run.repeats`` seeds (seed, seed+1, ...) and aggregate mean ± std."""
    base = Path(out_dir if out_dir is not None else Path(cfg.run.out_dir) / cfg.run.name)
    if cfg.run.repeats == 1:
        result = run_experiment(cfg, base, pretrained, data)
        return [result], {k: (v, 0.0) for k, v in result.summary.items() if isinstance(v, (int, float))}
    results = []
    for i in range(cfg.run.repeats):
        seeded = cfg.replace("run", seed=cfg.run.seed + i, repeats=1)
        results.append(run_experiment(seeded, base / f"seed{seeded.run.seed}", pretrained, data))
    keys = [k for k, v in results[0].summary.items() if isinstance(v, (int, float))]
    agg = {k: mean_std([r.summary[k] for r in results]) for k in keys}
    (base / "summary.json").write_text(json.dumps(
        {k: {"mean": m, "std": s} for k, (m, s) in agg.items()}, indent=2, sort_keys=True) + "\n")
    return results, agg


def run_preset(name, base, out_dir, data=None):
    """Run every config of a preset under ``out_dir/<label>``; returns ``{label: aggregate}``."""
    out = {}
    for label, cfg in preset_configs(name, base):
        cfg = cfg.replace("run", name=label)
        _, agg = run_repeats(cfg, Path(out_dir) / label, data=data)
        out[label] = agg
        logger.info("%s: %s", label, {k: v[0] for k, v in agg.items()})
    (Path(out_dir) / "preset.json").write_text(json.dumps(
        {label: {k: {"mean": m, "std": s} for k, (m, s) in agg.items()} for label, agg in out.items()},
        indent=2, sort_keys=True) + "\n")
    return out


__all__ = [
    "ExperimentLog", "RunResult", "PRESETS", "desk_config", "preset_configs", "load_datasets",
    "run_experiment", "run_repeats", "run_preset", "mean_std", "find_mnist", "SoftPruneError",
]
