"""Stateful layer modules built on the functional primitives.

A module caches whatever its last ``forward`` needs so that ``backward`` can
run once, in reverse order, per training step. Parameter gradients land in
``LayerParams.grad``; the input gradient is returned.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import functional as F

INIT_STDDEV = 0.05


@dataclass
class LayerParams:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    trainable: bool = True

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape "
                             f"{self.value.shape}", name=self.name)

    @property
    def size(self):
        return int(self.value.size)


def param_rng(seed, name):
    """Counter-based generator keyed by (seed, parameter name).

    Draws for one parameter never depend on which other parameters exist or
    the order they were built in.
    """
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode("utf-8")).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def truncated_normal(rng, shape, stddev=INIT_STDDEV, dtype=np.float32):
    """Normal draws, re-sampled until all lie within two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * stddev).astype(dtype)


class Context:
    """Per-forward settings: mode plus the dropout generator."""

    def __init__(self, mode="eval", rng=None):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.rng = rng


class Module:
    name = ""

    def params(self):
        return []

    def buffers(self):
        """Non-trainable state saved with checkpoints: list of (name, array)."""
        return []

    def units(self):
        """Parameterized layers in input-to-output order (TL granularity)."""
        return []

    def output_shape(self, shape):
        raise NotImplementedError

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def describe(self, shape):
        """Rows of (name, type, output shape, parameter count) for the shape table."""
        return []

    def children(self):
        return []

    def kinks(self):
        """Arrays that fix this module's piecewise-linear branch (ReLU masks,
        max-pool argmax) after the last forward."""
        return []

    def cast(self, dtype):
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)


class ConvUnit(Module):
    """conv2d, optionally followed by batchnorm and ReLU.

    Counts as one layer for freezing. A frozen unit's batchnorm always uses
    its running statistics and never updates them, so freezing pins the
    unit's whole forward function.
    """

    def __init__(self, name, cin, cout, kernel, stride=1, padding="same", *,
                 batchnorm=True, bias=False, activation=True, seed=0, dtype=np.float32):
        self.name = name
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.kernel_size = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.cin, self.cout = cin, cout
        self.kernel = LayerParams(f"{name}/kernel",
                                  truncated_normal(param_rng(seed, f"{name}/kernel"),
                                                   (kh, kw, cin, cout), dtype=dtype))
        self.bias = LayerParams(f"{name}/bias", np.zeros(cout, dtype)) if bias else None
        self.bn = batchnorm
        if batchnorm:
            self.gamma = LayerParams(f"{name}/gamma", np.ones(cout, dtype))
            self.beta = LayerParams(f"{name}/beta", np.zeros(cout, dtype))
            self.moving_mean = np.zeros(cout, np.float32)
            self.moving_var = np.ones(cout, np.float32)
        self._cache = None

    @property
    def trainable(self):
        return self.kernel.trainable

    def params(self):
        out = [self.kernel]
        if self.bias is not None:
            out.append(self.bias)
        if self.bn:
            out += [self.gamma, self.beta]
        return out

    def buffers(self):
        if not self.bn:
            return []
        return [(f"{self.name}/moving_mean", self.moving_mean),
                (f"{self.name}/moving_var", self.moving_var)]

    def set_buffer(self, key, value):
        if key == "moving_mean":
            self.moving_mean = value
        else:
            self.moving_var = value

    def units(self):
        return [self]

    def output_shape(self, shape):
        B, H, W, C = shape
        if C != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} input channels, got {C}",
                             layer=self.name, expected=self.cin, got=C)
        try:
            oh = F.output_extent(H, self.kernel_size[0], self.stride, self.padding)[0]
            ow = F.output_extent(W, self.kernel_size[1], self.stride, self.padding)[0]
        except ShapeError as exc:
            raise ShapeError(f"{self.name}: {exc}", layer=self.name, **exc.dims) from None
        return (B, oh, ow, self.cout)

    def describe(self, shape):
        out = self.output_shape(shape)
        return [(self.name, "conv", out, sum(p.size for p in self.params()))], out

    def forward(self, x, ctx):
        y, conv_cache = F.conv2d(x, self.kernel.value,
                                 None if self.bias is None else self.bias.value,
                                 self.stride, self.padding)
        bn_cache = None
        if self.bn:
            mode = ctx.mode if self.trainable else "eval"
            y, state, bn_cache = F.batchnorm(y, self.gamma.value, self.beta.value, mode,
                                             self.moving_mean, self.moving_var)
            self.moving_mean, self.moving_var = state
        mask = None
        if self.activation:
            y, mask = F.relu(y)
        self._cache = (conv_cache, bn_cache, mask)
        return y

    def backward(self, dy):
        conv_cache, bn_cache, mask = self._cache
        if mask is not None:
            dy = F.relu_backward(dy, mask)
        if bn_cache is not None:
            dy, self.gamma.grad, self.beta.grad = F.batchnorm_backward(dy, bn_cache)
        dx, self.kernel.grad, db = F.conv2d_backward(dy, conv_cache)
        if self.bias is not None:
            self.bias.grad = db
        self._cache = None
        return dx

    def kinks(self):
        if self._cache is None or self._cache[2] is None:
            return []
        return [self._cache[2]]


class Pool(Module):
    def __init__(self, name, kind, window, stride, padding="valid"):
        if kind not in ("max", "avg"):
            raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
        self.name, self.kind = name, kind
        self.window, self.stride, self.padding = window, stride, padding
        self._cache = None

    def output_shape(self, shape):
        B, H, W, C = shape
        try:
            oh = F.output_extent(H, self.window, self.stride, self.padding)[0]
            ow = F.output_extent(W, self.window, self.stride, self.padding)[0]
        except ShapeError as exc:
            raise ShapeError(f"{self.name}: {exc}", layer=self.name, **exc.dims) from None
        return (B, oh, ow, C)

    def describe(self, shape):
        out = self.output_shape(shape)
        return [(self.name, f"{self.kind}pool", out, 0)], out

    def forward(self, x, ctx):
        fn = F.maxpool2d if self.kind == "max" else F.avgpool2d
        y, self._cache = fn(x, self.window, self.stride, self.padding)
        return y

    def backward(self, dy):
        fn = F.maxpool2d_backward if self.kind == "max" else F.avgpool2d_backward
        dx = fn(dy, self._cache)
        self._cache = None
        return dx

    def kinks(self):
        return [self._cache[0]] if self.kind == "max" and self._cache is not None else []


class InputShift(Module):
    """Fixed affine map from [0, 1] pixels to [-1, 1]."""

    name = "stem/rescale"

    def output_shape(self, shape):
        return shape

    def describe(self, shape):
        return [(self.name, "rescale", shape, 0)], shape

    def forward(self, x, ctx):
        return x * x.dtype.type(2) - x.dtype.type(1)

    def backward(self, dy):
        return dy * dy.dtype.type(2)


class Sequential(Module):
    def __init__(self, name, layers):
        self.name = name
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def units(self):
        return [u for layer in self.layers for u in layer.units()]

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def describe(self, shape):
        rows = []
        for layer in self.layers:
            r, shape = layer.describe(shape)
            rows += r
        return rows, shape

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def children(self):
        return self.layers


class Branches(Module):
    """Parallel branches over the same input, concatenated on channels
    in the order given (left to right)."""

    def __init__(self, name, branches):
        self.name = name
        self.branches = list(branches)
        self._sizes = None

    def params(self):
        return [p for b in self.branches for p in b.params()]

    def buffers(self):
        return [x for b in self.branches for x in b.buffers()]

    def units(self):
        return [u for b in self.branches for u in b.units()]

    def output_shape(self, shape):
        outs = [b.output_shape(shape) for b in self.branches]
        lead = outs[0][:3]
        for b, o in zip(self.branches, outs):
            if o[:3] != lead:
                raise ShapeError(f"{self.name}: branch {b.name} gives spatial shape {o[1:3]}, "
                                 f"expected {lead[1:3]}", layer=self.name)
        return lead + (sum(o[3] for o in outs),)

    def describe(self, shape):
        rows = []
        for b in self.branches:
            r, _ = b.describe(shape)
            rows += r
        out = self.output_shape(shape)
        rows.append((f"{self.name}/concat", "concat", out, 0))
        return rows, out

    def forward(self, x, ctx):
        y, self._sizes = F.concat_channels([b.forward(x, ctx) for b in self.branches])
        return y

    def backward(self, dy):
        parts = F.split_channels(dy, self._sizes)
        dx = None
        for b, g in zip(self.branches, parts):
            d = b.backward(g)
            dx = d if dx is None else dx + d
        return dx

    def children(self):
        return self.branches


class ResidualBlock(Module):
    """relu(x + scale * project(concat(branches(x))))."""

    def __init__(self, name, branches, projection, scale):
        self.name = name
        self.mixed = Branches(f"{name}/mixed", branches)
        self.projection = projection
        self.scale = scale
        self._mask = None

    def params(self):
        return self.mixed.params() + self.projection.params()

    def buffers(self):
        return self.mixed.buffers() + self.projection.buffers()

    def units(self):
        return self.mixed.units() + self.projection.units()

    def output_shape(self, shape):
        out = self.projection.output_shape(self.mixed.output_shape(shape))
        if out != tuple(shape):
            raise ShapeError(f"{self.name}: projection gives {out}, shortcut is {tuple(shape)}",
                             layer=self.name)
        return out

    def describe(self, shape):
        rows, mid = self.mixed.describe(shape)
        r, out = self.projection.describe(mid)
        rows += r
        self.output_shape(shape)
        rows.append((f"{self.name}/add", "residual", out, 0))
        return rows, out

    def forward(self, x, ctx):
        branch = self.projection.forward(self.mixed.forward(x, ctx), ctx)
        y, self._mask = F.relu(F.residual_add_scaled(x, branch, self.scale))
        return y

    def backward(self, dy):
        dy = F.relu_backward(dy, self._mask)
        d_short, d_branch = F.residual_add_scaled_backward(dy, self.scale)
        return d_short + self.mixed.backward(self.projection.backward(d_branch))

    def children(self):
        return [self.mixed, self.projection]

    def kinks(self):
        return [] if self._mask is None else [self._mask]


class GlobalAvgPool(Module):
    name = "head/avg_pool"

    def output_shape(self, shape):
        return (shape[0], shape[3])

    def describe(self, shape):
        out = self.output_shape(shape)
        return [(self.name, "global_avgpool", out, 0)], out

    def forward(self, x, ctx):
        y, self._shape = F.global_avgpool(x)
        return y

    def backward(self, dy):
        return F.global_avgpool_backward(dy, self._shape)


class Dropout(Module):
    name = "head/dropout"

    def __init__(self, rate):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def output_shape(self, shape):
        return shape

    def describe(self, shape):
        return [(self.name, "dropout", shape, 0)], shape

    def forward(self, x, ctx):
        if ctx.mode != "train" or self.rate == 0:
            self._mask = None
            return x
        if ctx.rng is None:
            raise ValueError("train-mode forward with dropout needs a seeded generator")
        y, self._mask = F.dropout(x, self.rate, ctx.rng)
        return y

    def backward(self, dy):
        return F.dropout_backward(dy, self._mask)


class Dense(Module):
    def __init__(self, name, din, dout, seed=0, dtype=np.float32):
        self.name = name
        self.din, self.dout = din, dout
        self.weight = LayerParams(f"{name}/kernel",
                                  truncated_normal(param_rng(seed, f"{name}/kernel"),
                                                   (din, dout), dtype=dtype))
        self.bias = LayerParams(f"{name}/bias", np.zeros(dout, dtype))
        self._cache = None

    @property
    def trainable(self):
        return self.weight.trainable

    def params(self):
        return [self.weight, self.bias]

    def units(self):
        return [self]

    def output_shape(self, shape):
        if shape[1] != self.din:
            raise ShapeError(f"{self.name}: expected {self.din} features, got {shape[1]}",
                             layer=self.name, expected=self.din, got=shape[1])
        return (shape[0], self.dout)

    def describe(self, shape):
        out = self.output_shape(shape)
        return [(self.name, "dense", out, self.weight.size + self.bias.size)], out

    def forward(self, x, ctx):
        y, self._cache = F.dense(x, self.weight.value, self.bias.value)
        return y

    def backward(self, dy):
        dx, self.weight.grad, self.bias.grad = F.dense_backward(dy, self._cache)
        self._cache = None
        return dx
