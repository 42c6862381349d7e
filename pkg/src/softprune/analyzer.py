"""Convolution FLOPs accounting, pruned-FLOPs ratios and wall-clock speedup.

Only convolutions are counted (batch norm, pooling and the classifier are
ignored). ``MACs = N_out * N_in * K * K * H_out * W_out`` per layer and
``FLOPs = 2 * MACs``.

Three conventions decide how a layer rate turns into kept channels:

``all-compactable``
    every prunable conv loses ``floor(N * P)`` outputs and every conv loses
    the inputs its sequential predecessor lost, residual streams included.
``alignment-aware``
    every prunable conv loses outputs, but a conv's inputs shrink only when
    they come straight from another conv; residual-stream tensors (sums)
    keep their full width.
``executed``
    only compactable convs lose outputs. This is what a
    :class:`~softprune.compactor.CompactModel` actually runs.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, InputError
from .network import BasicBlock, Model, ModelSpec, forward

CONVENTIONS = ("all-compactable", "alignment-aware", "executed")
CIFAR_RESNETS = {"resnet8": 8, "resnet20": 20, "resnet32": 32, "resnet56": 56, "resnet110": 110}
IMAGENET_RESNETS = {
    "resnet18": ("basic", (2, 2, 2, 2)),
    "resnet34": ("basic", (3, 4, 6, 3)),
    "resnet50": ("bottleneck", (3, 4, 6, 3)),
    "resnet101": ("bottleneck", (3, 4, 23, 3)),
}


@dataclass(frozen=True)
class ConvEntry:
    """Shape metadata of one convolution, enough to count its MACs."""

    layer_id: str
    in_channels: int
    out_channels: int
    kernel: int
    out_h: int
    out_w: int
    prunable: bool = True
    compactable: bool = True
    producer: str | None = None  # conv whose raw output is this conv's input
    predecessor: str | None = None  # previous conv along the main path

    @property
    def macs(self):
        return self.out_channels * self.in_channels * self.kernel ** 2 * self.out_h * self.out_w


@dataclass
class LayerTable:
    name: str
    input_shape: tuple
    entries: list

    def __iter__(self):
        return iter(self.entries)

    def ids(self):
        return [e.layer_id for e in self.entries]


# -- building layer tables --------------------------------------------------

def _table_from_model(model, name):
    entries = []
    c, h, w = model.spec.input_shape
    stream = None  # conv whose output is the current unit input, None when a sum/raw

    def add(layer, h, w, producer, predecessor):
        ho, wo = layer.output_hw(h, w)
        entries.append(ConvEntry(layer.layer_id, layer.in_channels, layer.out_channels, layer.kernel_size,
                                 ho, wo, layer.prunable, layer.compactable, producer, predecessor))
        return ho, wo

    main = None  # last conv on the main path
    for unit in model.units:
        if isinstance(unit, BasicBlock):
            h1, w1 = add(unit.conv1, h, w, stream, main)
            add(unit.conv2, h1, w1, unit.conv1.layer_id, unit.conv1.layer_id)
            if unit.shortcut is not None:
                add(unit.shortcut, h, w, stream, main)
            h, w = h1, w1
            stream, main = None, unit.conv2.layer_id
        else:
            h, w = add(unit, h, w, stream, main)
            stream = main = unit.layer_id
    return LayerTable(name, tuple(model.spec.input_shape), entries)


def _out(size, k, stride, pad):
    # floor semantics, as in common frameworks; counting never executes the conv
    return (size + 2 * pad - k) // stride + 1


def _spec_table(spec, name):
    c, h, _ = spec.input_shape
    k = spec.kernel_size
    entries = []
    if spec.architecture == "plain-chain":
        prev = None
        for i, (width, stride) in enumerate(zip(spec.widths, spec.strides), start=1):
            h = _out(h, k, stride, k // 2)
            lid = f"conv{i}"
            entries.append(ConvEntry(lid, c, width, k, h, h, spec.prune_stem if i == 1 else True,
                                     True, prev, prev))
            c, prev = width, lid
        return LayerTable(name, tuple(spec.input_shape), entries)
    h = _out(h, k, 1, k // 2)
    w0 = spec.stage_widths[0]
    entries.append(ConvEntry("stem", c, w0, k, h, h, spec.prune_stem, False, None, None))
    c, main = w0, "stem"
    for s, width in enumerate(spec.stage_widths, start=1):
        for b in range(1, spec.blocks_per_stage + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            p = f"s{s}.b{b}"
            out = _out(h, k, stride, k // 2)
            stream = "stem" if main == "stem" else None
            entries.append(ConvEntry(f"{p}.conv1", c, width, k, out, out,
                                     spec.prune_blocks in ("all", "first"), True, stream, main))
            entries.append(ConvEntry(f"{p}.conv2", width, width, k, out, out,
                                     spec.prune_blocks in ("all", "second"), False, f"{p}.conv1", f"{p}.conv1"))
            if stride != 1 or c != width:
                entries.append(ConvEntry(f"{p}.shortcut", c, width, 1, _out(h, 1, stride, 0),
                                         _out(h, 1, stride, 0), False, False, stream, main))
            c, h, main = width, out, f"{p}.conv2"
    return LayerTable(name, tuple(spec.input_shape), entries)


def _imagenet_table(name, input_size=224):
    kind, blocks = IMAGENET_RESNETS[name]
    entries = []
    size = _out(input_size, 7, 2, 3)
    entries.append(ConvEntry("stem", 3, 64, 7, size, size, True, False, None, None))
    size = _out(size, 3, 2, 1)  # max pool
    cin, main = 64, "stem"
    expansion = 4 if kind == "bottleneck" else 1
    for s, (n_blocks, width) in enumerate(zip(blocks, (64, 128, 256, 512)), start=1):
        for b in range(1, n_blocks + 1):
            stride = 2 if (s > 1 and b == 1) else 1
            p = f"s{s}.b{b}"
            out = _out(size, 3, stride, 1)
            cout = width * expansion
            stream = "stem" if main == "stem" else None
            if kind == "basic":
                entries.append(ConvEntry(f"{p}.conv1", cin, width, 3, out, out, True, True, stream, main))
                entries.append(ConvEntry(f"{p}.conv2", width, cout, 3, out, out, True, False,
                                         f"{p}.conv1", f"{p}.conv1"))
                last = f"{p}.conv2"
            else:
                entries.append(ConvEntry(f"{p}.conv1", cin, width, 1, size, size, True, True, stream, main))
                entries.append(ConvEntry(f"{p}.conv2", width, width, 3, out, out, True, True,
                                         f"{p}.conv1", f"{p}.conv1"))
                entries.append(ConvEntry(f"{p}.conv3", width, cout, 1, out, out, True, False,
                                         f"{p}.conv2", f"{p}.conv2"))
                last = f"{p}.conv3"
            if stride != 1 or cin != cout:
                entries.append(ConvEntry(f"{p}.shortcut", cin, cout, 1, out, out, False, False, stream, main))
            cin, size, main = cout, out, last
    return LayerTable(name, (3, input_size, input_size), entries)


def known_architectures():
    return sorted(CIFAR_RESNETS) + sorted(IMAGENET_RESNETS)


def layer_table(source, input_size=None):
    """Layer table of a model, a :class:`ModelSpec` or an architecture name.

    Args:
        source: a built :class:`Model` (its actual, possibly compacted,
            shapes are used), a :class:`ModelSpec`, or one of
            :func:`known_architectures`.
        input_size: square spatial input size for named architectures
            (32 for the CIFAR ResNets, 224 for the ImageNet ones by default).
    """
    if isinstance(source, Model):
        return _table_from_model(source, source.spec.architecture)
    if isinstance(source, ModelSpec):
        source.validate()
        return _spec_table(source, source.architecture)
    if isinstance(source, str):
        name = source.lower()
        if name in CIFAR_RESNETS:
            size = input_size or 32
            spec = ModelSpec(architecture="resnet-basic", depth=CIFAR_RESNETS[name], input_shape=(3, size, size))
            return _spec_table(spec, name)
        if name in IMAGENET_RESNETS:
            return _imagenet_table(name, input_size or 224)
        raise InputError(f"unknown architecture {source!r}; known: {', '.join(known_architectures())}")
    raise InputError(f"cannot build a layer table from {type(source).__name__}")


# -- counting -----------------------------------------------------------------

@dataclass
class FlopsReport:
    """Per-layer and total convolution MACs, before and after pruning."""

    name: str
    input_shape: tuple
    convention: str
    rows: list = field(default_factory=list)

    @property
    def total_macs(self):
        return sum(r["macs"] for r in self.rows)

    @property
    def total_flops(self):
        return 2 * self.total_macs

    @property
    def pruned_macs(self):
        return sum(r["pruned_macs"] for r in self.rows)

    @property
    def pruned_ratio(self):
        total = self.total_macs
        return 1.0 - self.pruned_macs / total if total else 0.0

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "convention": self.convention,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "pruned_macs": self.pruned_macs,
            "pruned_ratio": self.pruned_ratio,
            "layers": self.rows,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self, path=None):
        fields = ["layer_id", "in_channels", "out_channels", "kernel", "out_h", "out_w",
                  "kept_in", "kept_out", "macs", "pruned_macs"]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        writer.writerow({"layer_id": "total", "macs": self.total_macs, "pruned_macs": self.pruned_macs})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_text(self):
        lines = [f"{self.name} input {'x'.join(map(str, self.input_shape))} ({self.convention})",
                 f"{'layer':<18}{'out':>6}{'in':>6}{'k':>3}{'HxW':>10}{'MACs':>16}{'pruned MACs':>16}"]
        for r in self.rows:
            lines.append(f"{r['layer_id']:<18}{r['out_channels']:>6}{r['in_channels']:>6}{r['kernel']:>3}"
                         f"{str(r['out_h']) + 'x' + str(r['out_w']):>10}{r['macs']:>16,}{r['pruned_macs']:>16,}")
        lines.append(f"total MACs {self.total_macs:,} (FLOPs {self.total_flops:.3E}); "
                     f"pruned MACs {self.pruned_macs:,}; pruned ratio {100 * self.pruned_ratio:.2f}%")
        return "\n".join(lines)


def _rate_map(table, rates):
    if rates is None:
        rates = 0.0
    if isinstance(rates, dict):
        unknown = set(rates) - set(table.ids())
        if unknown:
            raise InputError(f"rates given for unknown layers: {sorted(unknown)}")
        out = {e.layer_id: rates.get(e.layer_id, 0.0) for e in table}
    else:
        out = {e.layer_id: (rates if e.prunable else 0.0) for e in table}
    for lid, r in out.items():
        if not 0 <= r < 1:
            raise ConfigurationError(f"rate for {lid} must lie in [0, 1), got {r}")
    return out


def _kept_fraction(n, rate, rounding):
    if rounding == "floor":
        return Fraction(n - math.floor(n * rate + 1e-9), n)
    if rounding == "exact":
        return 1 - Fraction(rate).limit_denominator(10 ** 9)
    raise ConfigurationError(f"rounding must be 'floor' or 'exact', got {rounding!r}")


def kept_channels(table, rates=None, convention="alignment-aware", rounding="floor"):
    """Fractions of outputs and inputs each conv keeps.

    Returns:
        ``{layer_id: (kept_out, kept_in)}`` as :class:`fractions.Fraction`.
    """
    if convention not in CONVENTIONS:
        raise ConfigurationError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")
    rmap = _rate_map(table, rates)
    out_frac = {}
    for e in table:
        shrinks = convention != "executed" or e.compactable
        out_frac[e.layer_id] = _kept_fraction(e.out_channels, rmap[e.layer_id], rounding) if shrinks else Fraction(1)
    kept = {}
    for e in table:
        source = e.predecessor if convention == "all-compactable" else e.producer
        if convention == "executed" and source is not None and not next(
                x for x in table if x.layer_id == source).compactable:
            source = None
        kept[e.layer_id] = (out_frac[e.layer_id], out_frac[source] if source is not None else Fraction(1))
    return kept


def model_flops(source, rates=None, convention="alignment-aware", input_size=None, rounding="floor"):
    """Count convolution MACs of ``source`` and, under ``rates``, its pruned MACs.

    Args:
        source: see :func:`layer_table`.
        rates: scalar rate for every prunable conv, or ``{layer_id: rate}``.
        convention: one of :data:`CONVENTIONS`.
        rounding: ``"floor"`` keeps ``N - floor(N * P)`` channels, ``"exact"``
            uses the continuous fraction ``1 - P``.

    Returns:
        A :class:`FlopsReport`.
    """
    table = layer_table(source, input_size)
    kept = kept_channels(table, rates, convention, rounding)
    rows = []
    for e in table:
        ko, ki = kept[e.layer_id]
        pruned = Fraction(e.macs) * ko * ki
        rows.append({
            "layer_id": e.layer_id, "in_channels": e.in_channels, "out_channels": e.out_channels,
            "kernel": e.kernel, "out_h": e.out_h, "out_w": e.out_w,
            "kept_in": float(ki * e.in_channels), "kept_out": float(ko * e.out_channels),
            "macs": e.macs, "pruned_macs": math.floor(pruned) if pruned.denominator != 1 else int(pruned),
        })
    return FlopsReport(table.name, table.input_shape, convention, rows)


def pruned_ratio(source, rates, convention="alignment-aware", input_size=None, rounding="floor", exact=False):
    """``1 - pruned MACs / baseline MACs``.

    With ``exact=True`` the ratio is returned as a :class:`fractions.Fraction`
    computed without any rounding of intermediate MAC counts.
    """
    table = layer_table(source, input_size)
    kept = kept_channels(table, rates, convention, rounding)
    total = sum(e.macs for e in table)
    pruned = sum(Fraction(e.macs) * kept[e.layer_id][0] * kept[e.layer_id][1] for e in table)
    ratio = 1 - pruned / total if total else Fraction(0)
    return ratio if exact else float(ratio)


def layer_reduction(source, rates, layer_id, convention="all-compactable", input_size=None, rounding="exact"):
    """Fractional MAC reduction of a single layer (``Fraction``)."""
    table = layer_table(source, input_size)
    ko, ki = kept_channels(table, rates, convention, rounding)[layer_id]
    return 1 - ko * ki


def executed_speedup(model, compact):
    """Theoretical MAC reduction actually realized by ``compact``."""
    base = sum(e.macs for e in layer_table(model))
    small = sum(e.macs for e in layer_table(compact))
    return 1.0 - small / base if base else 0.0


# -- wall-clock ---------------------------------------------------------------

@dataclass
class TimingReport:
    """Forward-pass wall-clock of a baseline and a compact model."""

    batch: int
    warmup: int
    reps: int
    baseline_mean: float
    baseline_std: float
    compact_mean: float
    compact_std: float
    theoretical_speedup: float
    threads: int
    backend: str

    @property
    def realistic_speedup(self):
        return 1.0 - self.compact_mean / self.baseline_mean

    def to_dict(self):
        d = asdict(self)
        d["realistic_speedup"] = self.realistic_speedup
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self, path=None):
        d = self.to_dict()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=sorted(d), lineterminator="\n")
        writer.writeheader()
        writer.writerow(d)
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(buf.getvalue())
        return buf.getvalue()

    def to_text(self):
        return (f"batch {self.batch}, {self.reps} reps after {self.warmup} warmups, {self.threads} thread(s), "
                f"{self.backend} kernels\n"
                f"baseline {1e3 * self.baseline_mean:.3f} ms (std {1e3 * self.baseline_std:.3f})\n"
                f"compact  {1e3 * self.compact_mean:.3f} ms (std {1e3 * self.compact_std:.3f})\n"
                f"realistic speedup {100 * self.realistic_speedup:.1f}%  "
                f"theoretical speedup {100 * self.theoretical_speedup:.1f}%")


def blas_threads():
    try:
        from threadpoolctl import threadpool_info
    except ImportError:  # pragma: no cover
        return 0
    return max((int(i.get("num_threads", 0)) for i in threadpool_info()), default=0)


def _median_of_means(samples, group=5):
    groups = [samples[i:i + group] for i in range(0, len(samples), group)]
    return statistics.median(statistics.fmean(g) for g in groups if g)


def wallclock_bench(model, compact, batch=32, reps=20, warmup=3, seed=0):
    """Time eval-mode forward passes of both models on the same inputs.

    Calls are interleaved (alternating which model goes first) so drift
    affects both equally; the reported time is the median of the means of
    groups of five repetitions.
    """
    if reps < 10:
        raise ConfigurationError(f"reps must be >= 10, got {reps}")
    if warmup < 3:
        raise ConfigurationError(f"warmup must be >= 3, got {warmup}")
    from . import kernels

    x = np.random.default_rng(seed).standard_normal((batch, *model.spec.input_shape)).astype(model.dtype)
    modes = model.mode, compact.mode
    model.eval()
    compact.eval()
    times = {0: [], 1: []}
    try:
        for _ in range(warmup):
            forward(model, x)
            forward(compact, x)
        for r in range(reps):
            order = (0, 1) if r % 2 == 0 else (1, 0)
            for which in order:
                m = model if which == 0 else compact
                t0 = time.perf_counter()
                forward(m, x)
                times[which].append(time.perf_counter() - t0)
    finally:
        model.mode, compact.mode = modes
    return TimingReport(
        batch=batch, warmup=warmup, reps=reps,
        baseline_mean=_median_of_means(times[0]), baseline_std=statistics.stdev(times[0]),
        compact_mean=_median_of_means(times[1]), compact_std=statistics.stdev(times[1]),
        theoretical_speedup=executed_speedup(model, compact),
        threads=blas_threads(), backend=kernels.BACKEND,
    )
