"""Plain CNN chains and CIFAR-style ResNets built from conv + batch-norm units."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError, StateError

ARCHITECTURES = ("plain-chain", "resnet-basic")
BLOCK_MASKS = ("all", "first", "second", "none")


@dataclass
class ModelSpec:
    """Architecture description.

    ``plain-chain`` uses ``widths``/``strides`` (one entry per conv layer);
    ``resnet-basic`` uses ``depth`` = 6n + 2 and ``stage_widths``.
    ``prune_stem`` and ``prune_blocks`` set which convs are prunable:
    ``prune_blocks`` selects the first, second, all or none of the convs in
    each residual block.
    """

    architecture: str = "plain-chain"
    depth: int | None = None
    widths: tuple = (8, 16, 16, 32)
    strides: tuple = (1, 2, 1, 2)
    stage_widths: tuple = (16, 32, 64)
    kernel_size: int = 3
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    prune_stem: bool = True
    prune_blocks: str = "all"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(
                f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}"
            )
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (C, H, W) with positive extents, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.prune_blocks not in BLOCK_MASKS:
            raise ConfigurationError(f"prune_blocks must be one of {BLOCK_MASKS}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be a positive odd integer")
        if self.architecture == "plain-chain":
            if not self.widths:
                raise ConfigurationError("plain-chain needs at least one conv layer")
            if len(self.strides) != len(self.widths):
                raise ConfigurationError("plain-chain widths and strides must have equal length")
            if min(self.widths) < 1 or min(self.strides) < 1:
                raise ConfigurationError("plain-chain widths and strides must be positive")
        else:
            if self.depth is None or self.depth < 8 or (self.depth - 2) % 6:
                raise ConfigurationError(
                    f"resnet-basic depth must satisfy depth = 6n + 2 with n >= 1, got {self.depth}"
                )
            if len(self.stage_widths) != 3 or min(self.stage_widths) < 1:
                raise ConfigurationError("resnet-basic needs three positive stage widths")

    @property
    def blocks_per_stage(self):
        return (self.depth - 2) // 6 if self.architecture == "resnet-basic" else 0

    @property
    def num_layers(self):
        """L: weighted layers (convs outside projection shortcuts) plus the classifier."""
        if self.architecture == "plain-chain":
            return len(self.widths) + 1
        return self.depth

    def to_dict(self):
        d = asdict(self)
        for key in ("widths", "strides", "stage_widths", "input_shape"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ConvLayer:
    """Convolution (no bias) followed by batch norm and an optional ReLU."""

    layer_id: str
    filters: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    stride: int = 1
    pad: int = 1
    prunable: bool = True
    compactable: bool = True
    relu: bool = True
    bn_momentum: float = field(default=ops.BN_MOMENTUM, repr=False, compare=False)
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = self.filters.shape[0]
        for name in ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            if getattr(self, name).shape != (n,):
                raise DimensionError(
                    f"{self.layer_id}: {name} has shape {getattr(self, name).shape}, expected ({n},)"
                )

    @property
    def out_channels(self):
        return self.filters.shape[0]

    @property
    def in_channels(self):
        return self.filters.shape[1]

    @property
    def kernel_size(self):
        return self.filters.shape[2]

    def output_hw(self, h, w):
        k = self.kernel_size
        return (ops.conv_output_size(h, k, self.stride, self.pad),
                ops.conv_output_size(w, k, self.stride, self.pad))

    def params(self):
        return {
            f"{self.layer_id}.weight": self.filters,
            f"{self.layer_id}.bn_gamma": self.bn_gamma,
            f"{self.layer_id}.bn_beta": self.bn_beta,
        }

    def buffers(self):
        return {
            f"{self.layer_id}.bn_running_mean": self.bn_running_mean,
            f"{self.layer_id}.bn_running_var": self.bn_running_var,
        }

    def forward(self, x, training):
        z, cols = ops.conv2d_forward(x, self.filters, self.stride, self.pad)
        y, bn_cache = ops.batch_norm(z, self.bn_gamma, self.bn_beta, self.bn_running_mean,
                                     self.bn_running_var, training=training, momentum=self.bn_momentum)
        out = ops.relu(y) if self.relu else y
        self._cache = (x, cols, bn_cache, y) if training else None
        return out

    def backward(self, dout, grads):
        if self._cache is None:
            raise StateError(f"{self.layer_id}: backward called without a training-mode forward")
        x, cols, bn_cache, y = self._cache
        if self.relu:
            dout = ops.relu_grad(dout, y, zero_slope=1.0)
        dz, dgamma, dbeta = ops.batch_norm_grad(dout, bn_cache)
        dx, dw = ops.conv2d_grad(dz, x, self.filters, self.stride, self.pad, cols=cols)
        grads[f"{self.layer_id}.weight"] = dw
        grads[f"{self.layer_id}.bn_gamma"] = dgamma
        grads[f"{self.layer_id}.bn_beta"] = dbeta
        self._cache = None
        return dx


@dataclass
class BasicBlock:
    """Two 3x3 conv units plus an identity or projection shortcut."""

    conv1: ConvLayer
    conv2: ConvLayer
    shortcut: ConvLayer | None = None
    _cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def layers(self):
        out = [self.conv1, self.conv2]
        if self.shortcut is not None:
            out.append(self.shortcut)
        return out

    def forward(self, x, training):
        branch = self.conv2.forward(self.conv1.forward(x, training), training)
        skip = x if self.shortcut is None else self.shortcut.forward(x, training)
        if branch.shape != skip.shape:
            raise DimensionError(f"residual add of {branch.shape} and {skip.shape}")
        pre = branch + skip
        self._cache = pre if training else None
        return ops.relu(pre)

    def backward(self, dout, grads):
        dpre = ops.relu_grad(dout, self._cache, zero_slope=1.0)
        self._cache = None
        dx = self.conv1.backward(self.conv2.backward(dpre, grads), grads)
        if self.shortcut is None:
            return dx + dpre
        return dx + self.shortcut.backward(dpre, grads)


class Model:
    """An ordered chain of conv units / residual blocks, global pooling and a classifier."""

    def __init__(self, spec, units, fc_weight, fc_bias, dtype=np.float32):
        self.spec = spec
        self.units = list(units)
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias
        self.dtype = np.dtype(dtype)
        self.mode = "train"
        self._cache = None
        self.check_topology()

    # -- structure -----------------------------------------------------
    def conv_layers(self):
        """All conv layers in definition order (projection shortcuts included)."""
        out = []
        for unit in self.units:
            out.extend(unit.layers() if isinstance(unit, BasicBlock) else [unit])
        return out

    def layer(self, layer_id):
        for layer in self.conv_layers():
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(layer_id)

    def params(self):
        out = {}
        for layer in self.conv_layers():
            out.update(layer.params())
        out["fc.weight"] = self.fc_weight
        out["fc.bias"] = self.fc_bias
        return out

    def buffers(self):
        out = {}
        for layer in self.conv_layers():
            out.update(layer.buffers())
        return out

    def state_arrays(self):
        """Every array that defines the model, in serialization order."""
        out = {}
        for layer in self.conv_layers():
            out.update(layer.params())
            out.update(layer.buffers())
        out["fc.weight"] = self.fc_weight
        out["fc.bias"] = self.fc_bias
        return out

    def parameter_count(self):
        return int(sum(p.size for p in self.params().values()))

    def check_topology(self):
        """Propagate shapes through the graph; raises on any mismatch."""
        ids = [layer.layer_id for layer in self.conv_layers()]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("layer ids must be unique within a model")
        c, h, w = self.spec.input_shape
        for unit in self.units:
            if isinstance(unit, BasicBlock):
                c1, h1, w1 = _propagate(unit.conv1, c, h, w)
                c2, h2, w2 = _propagate(unit.conv2, c1, h1, w1)
                skip = (c, h, w) if unit.shortcut is None else _propagate(unit.shortcut, c, h, w)
                if (c2, h2, w2) != skip:
                    raise DimensionError(
                        f"residual add in block {unit.conv1.layer_id} joins {(c2, h2, w2)} and {skip}"
                    )
                c, h, w = c2, h2, w2
            else:
                c, h, w = _propagate(unit, c, h, w)
        if self.fc_weight.shape[1] != c:
            raise DimensionError(f"classifier expects {self.fc_weight.shape[1]} features, network yields {c}")

    # -- modes ---------------------------------------------------------
    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """Deep copy with every array cast to ``dtype``."""
        out = copy.deepcopy(self)
        dtype = np.dtype(dtype)
        for layer in out.conv_layers():
            for name in ("filters", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
                setattr(layer, name, getattr(layer, name).astype(dtype))
        out.fc_weight = out.fc_weight.astype(dtype)
        out.fc_bias = out.fc_bias.astype(dtype)
        out.dtype = dtype
        return out

    # -- execution -----------------------------------------------------
    def _run(self, x, training):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise DimensionError(f"batch shape {x.shape} does not match input shape {self.spec.input_shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        for unit in self.units:
            x = unit.forward(x, training)
        pooled = ops.avg_pool_global(x)
        if training:
            self._cache = (x.shape, pooled)
        return ops.linear(pooled, self.fc_weight, self.fc_bias)

    def _backward(self, dlogits):
        feat_shape, pooled = self._cache
        self._cache = None
        grads = {}
        dpooled, grads["fc.weight"], grads["fc.bias"] = ops.linear_grad(dlogits, pooled, self.fc_weight)
        dx = ops.avg_pool_global_grad(dpooled, feat_shape)
        for unit in reversed(self.units):
            dx = unit.backward(dx, grads)
        return grads

    def forward_backward(self, batch, labels):
        """Training step core: returns ``(loss, grads, logits)``."""
        if self.mode != "train":
            raise StateError("backward requires train mode")
        logits = self._run(batch, training=True)
        loss, dlogits = ops.softmax_cross_entropy(logits, labels)
        return loss, self._backward(dlogits), logits


def _propagate(layer, c, h, w):
    if layer.in_channels != c:
        raise DimensionError(f"{layer.layer_id}: expects {layer.in_channels} input channels, receives {c}")
    return (layer.out_channels, *layer.output_hw(h, w))


def _make_conv(rng, layer_id, cin, cout, k, stride, dtype, relu=True, prunable=True, compactable=True):
    std = np.sqrt(2.0 / (cin * k * k))
    return ConvLayer(
        layer_id=layer_id,
        filters=(rng.standard_normal((cout, cin, k, k)) * std).astype(dtype),
        bn_gamma=np.ones(cout, dtype=dtype),
        bn_beta=np.zeros(cout, dtype=dtype),
        bn_running_mean=np.zeros(cout, dtype=dtype),
        bn_running_var=np.ones(cout, dtype=dtype),
        stride=stride,
        pad=k // 2,
        prunable=prunable,
        compactable=compactable,
        relu=relu,
    )


def build_model(spec, seed=0, dtype=np.float32):
    """Create a freshly initialized model (He-normal filters, gamma=1, beta=0).

    The same ``spec`` and ``seed`` always yield bitwise identical weights.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    k = spec.kernel_size
    cin = spec.input_shape[0]
    units = []
    if spec.architecture == "plain-chain":
        for i, (width, stride) in enumerate(zip(spec.widths, spec.strides), start=1):
            prunable = spec.prune_stem if i == 1 else True
            units.append(_make_conv(rng, f"conv{i}", cin, width, k, stride, dtype, prunable=prunable))
            cin = width
    else:
        # stem output feeds an identity shortcut, so it cannot shrink at compaction
        units.append(_make_conv(rng, "stem", cin, spec.stage_widths[0], k, 1, dtype,
                                prunable=spec.prune_stem, compactable=False))
        cin = spec.stage_widths[0]
        for s, width in enumerate(spec.stage_widths, start=1):
            for b in range(1, spec.blocks_per_stage + 1):
                stride = 2 if (s > 1 and b == 1) else 1
                prefix = f"s{s}.b{b}"
                conv1 = _make_conv(rng, f"{prefix}.conv1", cin, width, k, stride, dtype,
                                   prunable=spec.prune_blocks in ("all", "first"))
                conv2 = _make_conv(rng, f"{prefix}.conv2", width, width, k, 1, dtype, relu=False,
                                   prunable=spec.prune_blocks in ("all", "second"), compactable=False)
                shortcut = None
                if stride != 1 or cin != width:
                    shortcut = _make_conv(rng, f"{prefix}.shortcut", cin, width, 1, stride, dtype,
                                          relu=False, prunable=False, compactable=False)
                    shortcut.pad = 0
                units.append(BasicBlock(conv1, conv2, shortcut))
                cin = width
    bound = 1.0 / np.sqrt(cin)
    fc_weight = rng.uniform(-bound, bound, (spec.num_classes, cin)).astype(dtype)
    fc_bias = np.zeros(spec.num_classes, dtype=dtype)
    return Model(spec, units, fc_weight, fc_bias, dtype=dtype)


def forward(model, batch):
    """Logits (B, classes). Eval mode uses running BN statistics and mutates nothing."""
    return model._run(batch, training=model.mode == "train")


def backward(model, batch, labels):
    """Loss and gradients for every parameter (zero filters included).

    Returns:
        ``(loss, grads)`` with ``grads`` keyed like :meth:`Model.params`.
    """
    loss, grads, _ = model.forward_backward(batch, labels)
    return loss, grads


def enumerate_prunable(model):
    """Ordered ``(layer_id, out_channels)`` for every prunable conv layer."""
    return [(layer.layer_id, layer.out_channels) for layer in model.conv_layers() if layer.prunable]
