"""Turn a soft-pruned model into a physically smaller one."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, StructuralError
from .network import BasicBlock, ConvLayer, Model, enumerate_prunable, forward
from .sfp import filter_norms


@dataclass
class KeepPlan:
    """Channels to keep, indexed in the source model's numbering.

    ``kept_out[layer_id]`` are the retained filters of a conv layer,
    ``kept_in[layer_id]`` its retained input channels and ``fc_in`` the
    retained classifier features.
    """

    kept_out: dict
    kept_in: dict
    fc_in: tuple
    source: str = "recorded-selection"


class CompactModel(Model):
    """A :class:`Model` whose layers were sliced by a :class:`KeepPlan`.

    ``index_map[layer_id]`` maps compact output index -> original index.
    """

    def __init__(self, spec, units, fc_weight, fc_bias, dtype=np.float32, index_map=None):
        super().__init__(spec, units, fc_weight, fc_bias, dtype=dtype)
        self.index_map = dict(index_map or {})


def producers(model):
    """Map each conv layer id to the conv whose output it reads directly.

    ``None`` means the input is the raw batch or a residual-stream tensor
    (a sum), which never shrinks. The ``"fc"`` entry is the classifier's
    producer.
    """
    out = {}
    prev = None  # producer of the current unit input, if it is a plain conv output
    for unit in model.units:
        if isinstance(unit, BasicBlock):
            out[unit.conv1.layer_id] = prev
            out[unit.conv2.layer_id] = unit.conv1.layer_id
            if unit.shortcut is not None:
                out[unit.shortcut.layer_id] = prev
            prev = None
        else:
            out[unit.layer_id] = prev
            prev = unit.layer_id
    out["fc"] = prev
    return out


def derive_keep_plan(model, record=None, threshold=None):
    """Build the keep plan of a model in a pruned state.

    By default the complement of the final pruning event in ``record`` is
    kept. With ``threshold`` set, filters with l2-norm > threshold are kept
    instead. Only compactable layers ever lose output channels.
    """
    layers = model.conv_layers()
    prods = producers(model)
    if threshold is None:
        final = record.final if record is not None else None
        prunable_ids = {lid for lid, _ in enumerate_prunable(model)}
        if final is not None:
            unknown = set(final.selections) - {layer.layer_id for layer in layers}
            missing = prunable_ids - set(final.selections)
            if unknown or missing:
                raise InputError(
                    f"record does not match model layers: unknown {sorted(unknown)}, missing {sorted(missing)}"
                )
        source = "recorded-selection"
    else:
        source = "norm-threshold"
    kept_out = {}
    for layer in layers:
        n = layer.out_channels
        if not (layer.compactable and layer.prunable):
            kept_out[layer.layer_id] = tuple(range(n))
        elif threshold is not None:
            kept_out[layer.layer_id] = tuple(int(j) for j in np.flatnonzero(filter_norms(layer, 2.0) > threshold))
        else:
            dropped = set(final.selections.get(layer.layer_id, ())) if final is not None else set()
            if dropped and max(dropped) >= n:
                raise InputError(f"{layer.layer_id}: recorded index {max(dropped)} out of range for {n} filters")
            kept_out[layer.layer_id] = tuple(j for j in range(n) if j not in dropped)
    kept_in = {}
    for layer in layers:
        p = prods[layer.layer_id]
        kept_in[layer.layer_id] = kept_out[p] if p is not None else tuple(range(layer.in_channels))
    p = prods["fc"]
    fc_in = kept_out[p] if p is not None else tuple(range(model.fc_weight.shape[1]))
    return KeepPlan(kept_out, kept_in, fc_in, source)


def identity_plan(model):
    layers = model.conv_layers()
    return KeepPlan(
        {layer.layer_id: tuple(range(layer.out_channels)) for layer in layers},
        {layer.layer_id: tuple(range(layer.in_channels)) for layer in layers},
        tuple(range(model.fc_weight.shape[1])),
        source="identity",
    )


def _check_plan(model, plan):
    prods = producers(model)
    for layer in model.conv_layers():
        lid = layer.layer_id
        if lid not in plan.kept_out or lid not in plan.kept_in:
            raise StructuralError(f"plan has no entry for layer {lid}")
        out, inp = plan.kept_out[lid], plan.kept_in[lid]
        if not layer.compactable and tuple(out) != tuple(range(layer.out_channels)):
            raise StructuralError(f"layer {lid} is not compactable but the plan drops its outputs")
        if any(j < 0 or j >= layer.out_channels for j in out) or any(j < 0 or j >= layer.in_channels for j in inp):
            raise StructuralError(f"plan indices out of range for layer {lid}")
        p = prods[lid]
        expected = plan.kept_out[p] if p is not None else tuple(range(layer.in_channels))
        if tuple(inp) != tuple(expected):
            raise StructuralError(
                f"kept inputs of {lid} do not match kept outputs of {p or 'its residual/raw input'}"
            )
    p = prods["fc"]
    expected = plan.kept_out[p] if p is not None else tuple(range(model.fc_weight.shape[1]))
    if tuple(plan.fc_in) != tuple(expected):
        raise StructuralError(f"classifier inputs do not match kept outputs of {p}")


def _slice_layer(layer, out_idx, in_idx):
    o = np.asarray(out_idx, dtype=np.int64)
    i = np.asarray(in_idx, dtype=np.int64)
    return replace(
        layer,
        filters=np.ascontiguousarray(layer.filters[o][:, i]),
        bn_gamma=layer.bn_gamma[o].copy(),
        bn_beta=layer.bn_beta[o].copy(),
        bn_running_mean=layer.bn_running_mean[o].copy(),
        bn_running_var=layer.bn_running_var[o].copy(),
        _cache=None,
    )


def compact(model, plan):
    """Slice filter banks, BN parameters/statistics and the classifier per ``plan``."""
    _check_plan(model, plan)

    def sl(layer):
        return _slice_layer(layer, plan.kept_out[layer.layer_id], plan.kept_in[layer.layer_id])

    units = []
    for unit in model.units:
        if isinstance(unit, BasicBlock):
            units.append(BasicBlock(sl(unit.conv1), sl(unit.conv2),
                                    sl(unit.shortcut) if unit.shortcut is not None else None))
        else:
            units.append(sl(unit))
    fc_idx = np.asarray(plan.fc_in, dtype=np.int64)
    out = CompactModel(
        model.spec,
        units,
        np.ascontiguousarray(model.fc_weight[:, fc_idx]),
        model.fc_bias.copy(),
        dtype=model.dtype,
        index_map={lid: tuple(idx) for lid, idx in plan.kept_out.items()},
    )
    out.mode = model.mode
    return out


def equivalence_check(original, compacted, n_inputs=100, seed=0, batch_size=50, dtype=None):
    """Largest absolute logit difference over ``n_inputs`` random inputs (eval mode).

    With ``dtype`` set, both models are compared as copies cast to that type
    (e.g. float64 to separate structural mismatch from float32 round-off).
    """
    if dtype is not None:
        original, compacted = original.astype(dtype), compacted.astype(dtype)
    rng = np.random.default_rng(seed)
    modes = original.mode, compacted.mode
    original.eval()
    compacted.eval()
    worst = 0.0
    try:
        for start in range(0, n_inputs, batch_size):
            n = min(batch_size, n_inputs - start)
            x = rng.standard_normal((n, *original.spec.input_shape)).astype(original.dtype)
            diff = np.abs(forward(original, x).astype(np.float64) - forward(compacted, x).astype(np.float64))
            worst = max(worst, float(diff.max()))
    finally:
        original.mode, compacted.mode = modes
    return worst
