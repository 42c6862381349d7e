"""Single-file model format: JSON manifest plus a little-endian float32 blob.

Layout::

    b"SFPMODEL" | uint32 LE manifest length | manifest (UTF-8 JSON) | blob

The manifest carries the format version, the model spec, the unit graph with
per-layer flags, every tensor's name and shape (blob order), optional
pruning metadata and the SHA-256 of the blob. Compact models additionally
get a ``<path>.map.csv`` sidecar with ``layer_id,compact_index,original_index``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .network import BasicBlock, ConvLayer, Model, ModelSpec

MAGIC = b"SFPMODEL"
FORMAT_VERSION = "sfp-v1"
_LAYER_FLAGS = ("stride", "pad", "prunable", "compactable", "relu")
_LAYER_TENSORS = ("weight", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")
_BLOB_DTYPE = np.dtype("<f4")


def sidecar_path(path):
    return Path(f"{path}.map.csv")


def _layer_entry(layer):
    return {"id": layer.layer_id, **{k: getattr(layer, k) for k in _LAYER_FLAGS}}


def _manifest(model):
    units = []
    for unit in model.units:
        if isinstance(unit, BasicBlock):
            units.append({
                "kind": "block",
                "conv1": _layer_entry(unit.conv1),
                "conv2": _layer_entry(unit.conv2),
                "shortcut": _layer_entry(unit.shortcut) if unit.shortcut is not None else None,
            })
        else:
            units.append({"kind": "conv", "conv": _layer_entry(unit)})
    arrays = model.state_arrays()
    tensors = [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()]
    return units, tensors, arrays


def encode_model(model, prune_meta=None):
    """Serialized bytes of ``model`` (see module docstring)."""
    units, tensors, arrays = _manifest(model)
    blob = b"".join(np.ascontiguousarray(a, dtype=_BLOB_DTYPE).tobytes() for a in arrays.values())
    manifest = {
        "format": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "units": units,
        "tensors": tensors,
        "compact": getattr(model, "index_map", None) is not None,
        "prune": prune_meta or {},
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + blob


def save_model(model, path, prune_meta=None):
    """Write ``model`` to ``path``; compact models also get the index-map sidecar.

    Tensors are stored as float32, so a float32 model round-trips bitwise.
    """
    path = Path(path)
    path.write_bytes(encode_model(model, prune_meta))
    index_map = getattr(model, "index_map", None)
    if index_map is not None:
        with open(sidecar_path(path), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["layer_id", "compact_index", "original_index"])
            for layer_id in sorted(index_map):
                for ci, oi in enumerate(index_map[layer_id]):
                    writer.writerow([layer_id, ci, oi])
    return path


def read_manifest(data):
    """Parse the header of serialized bytes; returns ``(manifest, blob_offset)``."""
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a model file: bad magic", offset=0)
    if len(data) < len(MAGIC) + 4:
        raise FormatError("truncated header", offset=len(data))
    (length,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if len(data) < start + length:
        raise FormatError("truncated manifest", offset=len(data))
    try:
        manifest = json.loads(data[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", offset=start) from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest.get('format')!r}, expected {FORMAT_VERSION!r}",
                          offset=start)
    return manifest, start + length


def _read_sidecar(path):
    index_map = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            index_map.setdefault(row["layer_id"], []).append((int(row["compact_index"]), int(row["original_index"])))
    return {lid: tuple(o for _, o in sorted(pairs)) for lid, pairs in index_map.items()}


def decode_model(data, index_map=None):
    """Rebuild a model from serialized bytes."""
    from .compactor import CompactModel

    manifest, offset = read_manifest(data)
    blob = data[offset:]
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise FormatError(f"blob checksum mismatch ({len(blob)} of {manifest['blob_bytes']} bytes present)",
                          offset=offset)
    arrays = {}
    pos = 0
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = np.frombuffer(blob, _BLOB_DTYPE, count, pos).reshape(t["shape"]).astype(np.float32)
        pos += count * _BLOB_DTYPE.itemsize

    def layer(entry):
        lid = entry["id"]
        try:
            w, g, b, m, v = (arrays[f"{lid}.{k}"] for k in _LAYER_TENSORS)
        except KeyError as exc:
            raise FormatError(f"manifest lists layer {lid} without tensor {exc}") from exc
        return ConvLayer(lid, w, g, b, m, v, **{k: entry[k] for k in _LAYER_FLAGS})

    units = []
    for u in manifest["units"]:
        if u["kind"] == "block":
            units.append(BasicBlock(layer(u["conv1"]), layer(u["conv2"]),
                                    layer(u["shortcut"]) if u["shortcut"] else None))
        else:
            units.append(layer(u["conv"]))
    spec = ModelSpec.from_dict(manifest["spec"])
    fc_w, fc_b = arrays["fc.weight"], arrays["fc.bias"]
    if manifest["compact"]:
        if index_map is None:
            index_map = {lay.layer_id: tuple(range(lay.out_channels))
                         for lay in (x for unit in units for x in (unit.layers() if isinstance(unit, BasicBlock) else [unit]))}
        model = CompactModel(spec, units, fc_w, fc_b, dtype=np.float32, index_map=index_map)
    else:
        model = Model(spec, units, fc_w, fc_b, dtype=np.float32)
    model.prune_meta = manifest["prune"]
    return model


def load_model(path):
    """Load a model written by :func:`save_model` (restores the index map sidecar if present)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    side = sidecar_path(path)
    return decode_model(path.read_bytes(), _read_sidecar(side) if side.exists() else None)
