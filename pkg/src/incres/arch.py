"""Inception-ResNet-v2 graph assembly, parameter enumeration and freezing.

Topology and filter counts follow the reference Inception-ResNet-v2
definition (the TF-slim / Keras layout), every count scaled by the width
multiplier ``w`` (rounded up, minimum 1)::

    stem:   rescale -> conv 32 3x3/2 V -> conv 32 3x3 V -> conv 64 3x3
            -> maxpool 3/2 V -> conv 80 1x1 -> conv 192 3x3 V -> maxpool 3/2 V
            -> mixed_5b [96 1x1 | 48 1x1, 64 5x5 | 64 1x1, 96 3x3, 96 3x3
                         | avgpool 3/1 S, 64 1x1]
    A (xnA): [32 1x1 | 32 1x1, 32 3x3 | 32 1x1, 48 3x3, 64 3x3] -> 1x1 proj
    red_a:  [384 3x3/2 V | 256 1x1, 256 3x3, 384 3x3/2 V | maxpool 3/2 V]
    B (xnB): [192 1x1 | 128 1x1, 160 1x7, 192 7x1] -> 1x1 proj
    red_b:  [256 1x1, 384 3x3/2 V | 256 1x1, 288 3x3/2 V
             | 256 1x1, 288 3x3, 320 3x3/2 V | maxpool 3/2 V]
    C (xnC): [192 1x1 | 192 1x1, 224 1x3, 256 3x1] -> 1x1 proj
    conv_7b 1536 1x1 -> global average pool -> dropout -> dense

Every conv except the block projections is conv (no bias) + batchnorm +
ReLU; projections are conv with bias, no batchnorm, no activation, and feed
``relu(shortcut + residual_scale * projection)``.

Parameter order is input to output; inside a block, branches left to right,
then the projection; inside a conv unit: kernel, bias, gamma, beta.
"""

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import functional as F
from .nn.layers import (Branches, ConvUnit, Context, Dense, Dropout, GlobalAvgPool,
                        InputShift, Pool, ResidualBlock)


@dataclass
class ModelConfig:
    input_size: int = 299
    input_channels: int = 3
    num_classes: int = 2
    width: float = 1.0
    block_counts: tuple = (5, 10, 5)
    residual_scale: float = 0.2
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.block_counts = tuple(int(n) for n in self.block_counts)
        self.validate()

    def validate(self):
        if self.input_size < 1:
            raise ConfigError("model.input_size must be positive", key="model.input_size")
        if self.input_channels < 1:
            raise ConfigError("model.input_channels must be positive", key="model.input_channels")
        if self.num_classes < 2:
            raise ConfigError("model.num_classes must be >= 2", key="model.num_classes")
        if not 0 < self.width <= 1:
            raise ConfigError("model.width must lie in (0, 1]", key="model.width")
        if len(self.block_counts) != 3 or min(self.block_counts) < 0:
            raise ConfigError("model.block_counts must be three non-negative ints",
                              key="model.block_counts")
        if not 0 < self.residual_scale <= 1:
            raise ConfigError("model.residual_scale must lie in (0, 1]",
                              key="model.residual_scale")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("model.dropout_rate must lie in [0, 1)", key="model.dropout_rate")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("model.seed must be an unsigned 64-bit integer", key="model.seed")

    def to_dict(self):
        d = asdict(self)
        d["block_counts"] = list(self.block_counts)
        return d


def desk_config(**overrides):
    """Reduced configuration used by the verification suite."""
    base = dict(input_size=75, width=1 / 8, block_counts=(1, 2, 1))
    base.update(overrides)
    return ModelConfig(**base)


class Model:
    """Assembled network.

    ``nodes`` is the top-level execution order; ``units`` the parameterized
    layers (ordinal 1 = nearest the input) used by the freeze policy.
    """

    def __init__(self, cfg, nodes):
        self.cfg = cfg
        self.nodes = nodes
        self._index()

    def _index(self):
        self.units = [u for n in self.nodes for u in n.units()]
        self.params = [p for n in self.nodes for p in n.params()]
        self.param_layer_index = {}
        for ordinal, unit in enumerate(self.units, start=1):
            for p in unit.params():
                self.param_layer_index[p.name] = ordinal
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in model")

    @property
    def head(self):
        return self.nodes[-1]

    @property
    def dtype(self):
        return self.params[0].value.dtype

    def buffers(self):
        return [b for n in self.nodes for b in n.buffers()]

    def input_shape(self, batch=1):
        s = self.cfg.input_size
        return (batch, s, s, self.cfg.input_channels)

    def forward(self, x, mode="eval", rng=None):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != self.input_shape()[1:]:
            raise ShapeError(f"model expects input (B, {self.cfg.input_size}, "
                             f"{self.cfg.input_size}, {self.cfg.input_channels}), got {x.shape}",
                             expected=self.input_shape()[1:], got=tuple(x.shape))
        x = x.astype(self.dtype, copy=False)
        ctx = Context(mode, rng)
        for node in self.nodes:
            x = node.forward(x, ctx)
        return x

    def backward(self, dlogits):
        """Backpropagate from the logits into every trainable parameter's grad.

        Nodes below the lowest trainable layer are skipped entirely.
        """
        first = next((i for i, n in enumerate(self.nodes)
                      if any(p.trainable for p in n.params())), None)
        if first is None:
            return
        dy = dlogits
        for node in reversed(self.nodes[first:]):
            dy = node.backward(dy)

    def shape_table(self, batch=1):
        rows, shape = [], self.input_shape(batch)
        rows.append(("input", "input", shape, 0))
        for node in self.nodes:
            r, shape = node.describe(shape)
            rows += r
        return rows

    def astype(self, dtype):
        clone = copy.deepcopy(self)
        for node in clone.nodes:
            node.cast(dtype)
        return clone


def _scaled(filters, width):
    return max(1, math.ceil(filters * width - 1e-9))


class _Builder:
    def __init__(self, cfg):
        self.cfg = cfg

    def f(self, n):
        return _scaled(n, self.cfg.width)

    def conv(self, name, cin, filters, kernel, stride=1, padding="same"):
        return ConvUnit(name, cin, self.f(filters), kernel, stride, padding, seed=self.cfg.seed)

    def chain(self, name, cin, specs):
        """A branch of conv units; returns (layers, out_channels)."""
        layers = []
        for j, (filters, kernel, stride, padding) in enumerate(specs):
            unit = self.conv(f"{name}/conv{j}", cin, filters, kernel, stride, padding)
            layers.append(unit)
            cin = unit.cout
        return layers, cin

    def branches(self, name, cin, specs, pool=None):
        from .nn.layers import Sequential
        out, total = [], 0
        for i, spec in enumerate(specs):
            layers, c = self.chain(f"{name}/branch{i}", cin, spec)
            out.append(Sequential(f"{name}/branch{i}", layers))
            total += c
        if pool is not None:
            i = len(specs)
            kind, window, stride, padding, proj = pool
            layers = [Pool(f"{name}/branch{i}/pool", kind, window, stride, padding)]
            c = cin
            if proj:
                unit = self.conv(f"{name}/branch{i}/conv0", cin, proj, 1)
                layers.append(unit)
                c = unit.cout
            out.append(Sequential(f"{name}/branch{i}", layers))
            total += c
        return out, total

    def residual(self, name, cin, specs):
        branches, mixed = self.branches(name, cin, specs)
        proj = ConvUnit(f"{name}/proj", mixed, cin, 1, batchnorm=False, bias=True,
                        activation=False, seed=self.cfg.seed)
        return ResidualBlock(name, branches, proj, self.cfg.residual_scale)

    def build(self):
        cfg = self.cfg
        nodes = [InputShift()]
        c = cfg.input_channels
        for name, filters, k, s, p in [("stem/conv1a", 32, 3, 2, "valid"),
                                       ("stem/conv2a", 32, 3, 1, "valid"),
                                       ("stem/conv2b", 64, 3, 1, "same")]:
            nodes.append(self.conv(name, c, filters, k, s, p))
            c = nodes[-1].cout
        nodes.append(Pool("stem/pool3a", "max", 3, 2, "valid"))
        for name, filters, k, s, p in [("stem/conv3b", 80, 1, 1, "valid"),
                                       ("stem/conv4a", 192, 3, 1, "valid")]:
            nodes.append(self.conv(name, c, filters, k, s, p))
            c = nodes[-1].cout
        nodes.append(Pool("stem/pool5a", "max", 3, 2, "valid"))

        br, c5 = self.branches("stem/mixed_5b", c, [
            [(96, 1, 1, "same")],
            [(48, 1, 1, "same"), (64, 5, 1, "same")],
            [(64, 1, 1, "same"), (96, 3, 1, "same"), (96, 3, 1, "same")],
        ], pool=("avg", 3, 1, "same", 64))
        nodes.append(Branches("stem/mixed_5b", br))
        c = c5

        n_a, n_b, n_c = cfg.block_counts
        for i in range(1, n_a + 1):
            nodes.append(self.residual(f"block_a{i}", c, [
                [(32, 1, 1, "same")],
                [(32, 1, 1, "same"), (32, 3, 1, "same")],
                [(32, 1, 1, "same"), (48, 3, 1, "same"), (64, 3, 1, "same")],
            ]))

        br, c = self.branches("reduction_a", c, [
            [(384, 3, 2, "valid")],
            [(256, 1, 1, "same"), (256, 3, 1, "same"), (384, 3, 2, "valid")],
        ], pool=("max", 3, 2, "valid", None))
        nodes.append(Branches("reduction_a", br))

        for i in range(1, n_b + 1):
            nodes.append(self.residual(f"block_b{i}", c, [
                [(192, 1, 1, "same")],
                [(128, 1, 1, "same"), (160, (1, 7), 1, "same"), (192, (7, 1), 1, "same")],
            ]))

        br, c = self.branches("reduction_b", c, [
            [(256, 1, 1, "same"), (384, 3, 2, "valid")],
            [(256, 1, 1, "same"), (288, 3, 2, "valid")],
            [(256, 1, 1, "same"), (288, 3, 1, "same"), (320, 3, 2, "valid")],
        ], pool=("max", 3, 2, "valid", None))
        nodes.append(Branches("reduction_b", br))

        for i in range(1, n_c + 1):
            nodes.append(self.residual(f"block_c{i}", c, [
                [(192, 1, 1, "same")],
                [(192, 1, 1, "same"), (224, (1, 3), 1, "same"), (256, (3, 1), 1, "same")],
            ]))

        nodes.append(self.conv("conv_7b", c, 1536, 1))
        c = nodes[-1].cout
        nodes.append(GlobalAvgPool())
        nodes.append(Dropout(cfg.dropout_rate))
        nodes.append(Dense("head/logits", c, cfg.num_classes, seed=cfg.seed))
        return nodes


def stage_of(layer_name):
    return layer_name.split("/")[0]


def build_model(cfg):
    """Assemble and shape-validate the network for ``cfg``."""
    cfg.validate()
    model = Model(cfg, _Builder(cfg).build())
    try:
        model.shape_table()
    except ShapeError as exc:
        layer = exc.dims.get("layer", "?")
        raise ShapeError(f"spatial underflow in stage '{stage_of(layer)}' "
                         f"(input_size={cfg.input_size}): {exc}",
                         stage=stage_of(layer), **exc.dims) from None
    return model


def forward(model, batch, mode="eval", rng=None):
    return model.forward(batch, mode, rng)


def count_params(model):
    return sum(p.size for p in model.params)


def apply_freeze(model, trainable_layers):
    """Mark exactly the last ``trainable_layers`` parameterized layers trainable."""
    total = len(model.units)
    if trainable_layers is None:
        trainable_layers = total
    if not 0 <= trainable_layers <= total:
        raise ConfigError(f"TL={trainable_layers} outside [0, {total}] for this model",
                          key="train.trainable_layers")
    cutoff = total - trainable_layers
    for ordinal, unit in enumerate(model.units, start=1):
        for p in unit.params():
            p.trainable = ordinal > cutoff


def trainable_scalars(model):
    return sum(p.size for p in model.params if p.trainable)


def reset_head(model, num_classes, seed):
    """Replace the classifier with a freshly initialized ``num_classes`` head."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2", key="model.num_classes")
    old = model.head
    head = Dense(old.name, old.din, num_classes, seed=seed, dtype=old.weight.value.dtype)
    for p in head.params():
        p.trainable = old.trainable
    model.nodes[-1] = head
    model.cfg = ModelConfig(**{**model.cfg.to_dict(), "num_classes": num_classes})
    model._index()


def format_shape_table(rows):
    """Plain-text fixture: one line per layer, tab-separated."""
    lines = ["name\ttype\toutput_shape\tparams"]
    for name, kind, shape, n in rows:
        lines.append(f"{name}\t{kind}\t{'x'.join(str(d) for d in shape)}\t{n}")
    return "\n".join(lines) + "\n"
