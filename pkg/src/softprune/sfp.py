"""Soft filter pruning: lp-norm scoring, selection, zeroizing and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError, InputError, TrainingError
from .network import enumerate_prunable, forward

logger = logging.getLogger(__name__)


@dataclass
class SfpConfig:
    """Hyper-parameters of one soft-pruning run.

    ``lr_milestones`` are epoch numbers after which the learning rate is
    multiplied by ``lr_gamma``. ``pretrained_mode`` divides every scheduled
    learning rate by 10.
    """

    pruning_rate: float = 0.3
    norm_order: float = 2.0
    interval: int = 1
    epoch_max: int = 10
    lr: float = 0.1
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_grad_norm: float | None = None
    pretrained_mode: bool = False
    prune_at_init: bool = False
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.validate()

    def validate(self):
        if not 0 <= self.pruning_rate < 1:
            raise ConfigurationError(f"pruning_rate must lie in [0, 1), got {self.pruning_rate}")
        if self.norm_order <= 0:
            raise ConfigurationError(f"norm_order must be positive, got {self.norm_order}")
        if self.interval < 1:
            raise ConfigurationError(f"interval must be >= 1, got {self.interval}")
        if self.epoch_max < 1:
            raise ConfigurationError(f"epoch_max must be >= 1, got {self.epoch_max}")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.batch_size < 1:
            raise ConfigurationError("lr must be >= 0, momentum in [0, 1) and batch_size >= 1")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigurationError(f"max_grad_norm must be positive, got {self.max_grad_norm}")

    def lr_at(self, epoch):
        """Learning rate used during ``epoch`` (1-based)."""
        lr = self.lr * self.lr_gamma ** sum(1 for m in self.lr_milestones if epoch > m)
        return lr / 10 if self.pretrained_mode else lr

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(d["lr_milestones"])
        return d


@dataclass
class PruneEvent:
    epoch: int
    selections: dict  # layer_id -> tuple of filter indices
    norms: dict  # layer_id -> np.ndarray of all filter norms at selection time


@dataclass
class PruneRecord:
    """All pruning events of a run, in order."""

    events: list = field(default_factory=list)

    @property
    def final(self):
        return self.events[-1] if self.events else None

    def event_epochs(self):
        return [e.epoch for e in self.events]

    def rows(self):
        for event in self.events:
            for layer_id, indices in event.selections.items():
                for j in indices:
                    yield event.epoch, layer_id, j, float(event.norms[layer_id][j])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["event_epoch", "layer_id", "filter_index", "norm_value"])
            for epoch, layer_id, j, norm in self.rows():
                writer.writerow([epoch, layer_id, j, repr(norm)])

    @classmethod
    def from_csv(cls, path, layer_ids=None):
        """Read a record back. Layers with no pruned rows only appear when
        ``layer_ids`` is given; their selection is then empty."""
        by_epoch = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["event_epoch", "layer_id", "filter_index", "norm_value"]:
                raise InputError(f"{path}: unexpected PruneRecord header {reader.fieldnames}")
            for row in reader:
                epoch = int(row["event_epoch"])
                sel = by_epoch.setdefault(epoch, {})
                sel.setdefault(row["layer_id"], []).append((int(row["filter_index"]), float(row["norm_value"])))
        events = []
        for epoch in sorted(by_epoch):
            sel = {lid: [] for lid in (layer_ids or [])}
            sel.update(by_epoch[epoch])
            selections = {lid: tuple(j for j, _ in items) for lid, items in sel.items()}
            norms = {}
            for lid, items in sel.items():
                size = max((j for j, _ in items), default=-1) + 1
                vec = np.full(size, np.nan)
                for j, v in items:
                    vec[j] = v
                norms[lid] = vec
            events.append(PruneEvent(epoch, selections, norms))
        return cls(events)


def filter_norms(layer, p=2.0):
    """lp-norm of every output filter, computed in float64."""
    if p <= 0:
        raise ConfigurationError(f"norm order must be positive, got {p}")
    w = np.abs(layer.filters.reshape(layer.out_channels, -1).astype(np.float64))
    if p == 2:
        return np.sqrt((w * w).sum(axis=1))
    if p == 1:
        return w.sum(axis=1)
    return (w ** p).sum(axis=1) ** (1.0 / p)


def num_pruned(n, rate):
    """floor(n * rate), guarded against binary round-off (e.g. 10 * 0.3)."""
    return int(math.floor(n * rate + 1e-9))


def select_filters(norms, rate):
    """Indices of the floor(N * rate) smallest norms, ties to the lower index.

    Returns a sorted tuple.
    """
    if not 0 <= rate < 1:
        raise ConfigurationError(f"pruning rate must lie in [0, 1), got {rate}")
    norms = np.asarray(norms)
    count = num_pruned(norms.size, rate)
    if count == 0:
        return ()
    order = np.argsort(norms, kind="stable")
    return tuple(sorted(int(j) for j in order[:count]))


def zeroize(model, selection, optimizer_state=None):
    """Zero the selected filters in place.

    For each selected filter the weights and BN beta are set to 0 and the BN
    running statistics reset to mean 0 / variance 1, which makes the feature
    map exactly 0 in both train and eval mode. BN gamma is kept so the
    filter still receives gradient and can be reconstructed. Matching
    momentum entries in ``optimizer_state`` are cleared.
    """
    for layer_id, indices in selection.items():
        if not len(indices):
            continue
        layer = model.layer(layer_id)
        idx = np.asarray(indices, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= layer.out_channels:
            raise InputError(f"{layer_id}: filter index out of range [0, {layer.out_channels})")
        layer.filters[idx] = 0
        layer.bn_beta[idx] = 0
        layer.bn_running_mean[idx] = 0
        layer.bn_running_var[idx] = 1
        if optimizer_state:
            for key in (f"{layer_id}.weight", f"{layer_id}.bn_beta"):
                if key in optimizer_state:
                    optimizer_state[key][idx] = 0
    return model


def prune_step(model, rate, p=2.0, optimizer_state=None, epoch=0):
    """Score, select and zeroize every prunable layer at once; returns the event."""
    selections, norms = {}, {}
    for layer_id, _ in enumerate_prunable(model):
        norms[layer_id] = filter_norms(model.layer(layer_id), p)
        selections[layer_id] = select_filters(norms[layer_id], rate)
    zeroize(model, selections, optimizer_state)
    return PruneEvent(epoch, selections, norms)


def recalibrate_bn(model, dataset, batch_size=256, keep_zero=None):
    """Recompute BN running statistics as a cumulative average over ``dataset``.

    Weights are untouched. Channels listed in ``keep_zero`` (a selection
    mapping) get the canonical zeroized statistics back afterwards.
    """
    mode = model.mode
    layers = model.conv_layers()
    for layer in layers:
        layer.bn_running_mean[:] = 0
        layer.bn_running_var[:] = 0
    try:
        for k, start in enumerate(range(0, len(dataset), batch_size)):
            for layer in layers:
                layer.bn_momentum = 1.0 / (k + 1)
            model._run(dataset.images[start:start + batch_size], training=True)
    finally:
        for layer in layers:
            layer.bn_momentum = ops.BN_MOMENTUM
            layer._cache = None
        model._cache = None
        model.mode = mode
    for layer_id, indices in (keep_zero or {}).items():
        idx = np.asarray(indices, dtype=np.int64)
        model.layer(layer_id).bn_running_mean[idx] = 0
        model.layer(layer_id).bn_running_var[idx] = 1
    return model


def reconstruction_stats(event, model):
    """Fraction of the filters pruned at ``event`` whose l2-norm is now > 0."""
    total = revived = 0
    for layer_id, indices in event.selections.items():
        if not len(indices):
            continue
        norms = filter_norms(model.layer(layer_id), 2.0)
        total += len(indices)
        revived += int(np.count_nonzero(norms[list(indices)] > 0))
    return revived / total if total else 0.0


def zero_filter_counts(model):
    return {lid: int(np.count_nonzero(filter_norms(model.layer(lid)) == 0))
            for lid, _ in enumerate_prunable(model)}


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy in eval mode (restores the previous mode)."""
    mode = model.mode
    model.eval()
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits = forward(model, dataset.images[start:start + batch_size])
        correct += int(np.count_nonzero(logits.argmax(axis=1) == dataset.labels[start:start + batch_size]))
    model.mode = mode
    return correct / max(len(dataset), 1)


def train_epoch(model, dataset, cfg, lr, rng, state):
    """One pass of minibatch SGD; returns ``(mean loss, train accuracy)``."""
    model.train()
    order = rng.permutation(len(dataset))
    total_loss = 0.0
    correct = 0
    params = model.params()
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        x, y = dataset.batch(idx)
        loss, grads, logits = model.forward_backward(x, y)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at sample offset {start}")
        if lr > 0:
            if cfg.max_grad_norm is not None:
                ops.clip_grad_norm(grads, cfg.max_grad_norm)
            ops.sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, state)
        total_loss += loss * len(idx)
        correct += int(np.count_nonzero(logits.argmax(axis=1) == y))
    return total_loss / len(order), correct / len(order)


def sfp_train(model, data, cfg, test_data=None, checkpoint=None):
    """Train with soft filter pruning.

    Each epoch trains on the full ``data`` (previously zeroized filters are
    updated like any other), then, when ``epoch % interval == 0``, every
    prunable layer is scored and its lowest-norm filters zeroized. A final
    prune is always applied after the last epoch.

    Args:
        model: model to train in place.
        data: training :class:`~softprune.data.Dataset`.
        cfg: :class:`SfpConfig`.
        test_data: optional dataset evaluated after each epoch.
        checkpoint: optional callable ``checkpoint(model, epoch) -> str``
            invoked after every good epoch; its return value is quoted if
            training later diverges.

    Returns:
        ``(model, record, log)`` where ``log`` is a list of per-epoch dicts.
    """
    cfg.validate()
    state = {}
    record = PruneRecord()
    log = []
    last_good = None
    if cfg.prune_at_init:
        record.events.append(prune_step(model, cfg.pruning_rate, cfg.norm_order, state, epoch=0))
    for epoch in range(1, cfg.epoch_max + 1):
        lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        try:
            loss, train_acc = train_epoch(model, data, cfg, lr, rng, state)
        except TrainingError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}", checkpoint=last_good) from exc
        recon = None
        if record.events and record.events[-1].epoch == epoch - 1:
            recon = reconstruction_stats(record.events[-1], model)
        pruned = False
        if epoch % cfg.interval == 0 or epoch == cfg.epoch_max:
            record.events.append(prune_step(model, cfg.pruning_rate, cfg.norm_order, state, epoch))
            pruned = True
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss,
            "train_acc": train_acc,
            "test_acc": evaluate(model, test_data) if test_data is not None else None,
            "pruned": pruned,
            "reconstruction": recon,
            "zero_filters": zero_filter_counts(model),
        }
        log.append(row)
        logger.info("epoch %d lr=%.4g loss=%.4f train=%.4f test=%s", epoch, lr, loss, train_acc, row["test_acc"])
        if checkpoint is not None:
            last_good = checkpoint(model, epoch)
    model.train()
    return model, record, log
