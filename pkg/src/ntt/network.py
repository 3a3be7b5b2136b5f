"""Feed-forward architectures, parameter layout, initialization and cost accounting.

Parameters live in one flat float64 vector. Each parametric layer owns a
contiguous weight block followed by its bias block; dense weights are stored
``(fan_out, fan_in)`` and conv kernels ``(out_ch, in_ch, kh, kw)``, both
row-major. A mask is a 0/1 vector of the same length whose bias entries are
always 1.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Dense",
    "Conv2D",
    "MaxPool",
    "ReLU",
    "Flatten",
    "Dropout",
    "ParamBlock",
    "LayerRecord",
    "Network",
    "MultiplyAdds",
    "build",
    "preset",
    "mlp",
    "make_rng",
    "round_half_up",
    "init_glorot",
    "init_variance_scaled",
    "forward_logits",
    "count_multiply_adds",
    "speedup",
    "PRESETS",
]


@dataclass(frozen=True)
class Dense:
    fan_in: int
    fan_out: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2D:
    kernel_h: int
    kernel_w: int
    in_ch: int
    out_ch: int
    stride: int = 1
    padding: str = "valid"
    bias: bool = True


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float


LayerSpec = Union[Dense, Conv2D, MaxPool, ReLU, Flatten, Dropout]


@dataclass(frozen=True)
class ParamBlock:
    layer: int
    kind: str  # "weight" or "bias"
    start: int
    stop: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


@dataclass
class LayerRecord:
    """Quantities captured during a traced forward pass of one parametric layer.

    ``inputs`` are the layer's input activations (dense: ``(n, fan_in)``) or
    im2col patches (conv: ``(n, positions, in_ch*kh*kw)``); ``outputs`` are the
    pre-activations (``(n, fan_out)`` or ``(n, positions, out_ch)``).
    """

    layer: int
    kind: str
    inputs: Tensor
    outputs: Tensor


def round_half_up(x: float) -> int:
    # tolerance absorbs float error in products such as 0.15 * 10
    return int(math.floor(x + 0.5 + 1e-9))


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Counter-based generator for ``(seed, stream)``; distinct streams are independent."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode())]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def _conv_index_table(spec: Conv2D, in_shape: tuple[int, int, int]) -> tuple[np.ndarray, tuple]:
    c, h, w = in_shape
    if spec.padding == "same":
        ho, top, _ = _same_padding(h, spec.kernel_h, spec.stride)
        wo, left, _ = _same_padding(w, spec.kernel_w, spec.stride)
    elif spec.padding == "valid":
        ho = (h - spec.kernel_h) // spec.stride + 1
        wo = (w - spec.kernel_w) // spec.stride + 1
        top = left = 0
    else:
        raise ValueError(f"unknown padding {spec.padding!r}")
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv kernel larger than input {in_shape}")
    oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    ch, dh, dw = np.meshgrid(
        np.arange(c), np.arange(spec.kernel_h), np.arange(spec.kernel_w), indexing="ij"
    )
    rows = oh.reshape(-1, 1) * spec.stride + dh.reshape(1, -1) - top
    cols = ow.reshape(-1, 1) * spec.stride + dw.reshape(1, -1) - left
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    table = ch.reshape(1, -1) * h * w + rows * w + cols
    table = np.where(inside, table, -1)
    return table, (spec.out_ch, ho, wo)


def _pool_index_table(spec: MaxPool, in_shape: tuple[int, int, int]) -> tuple[np.ndarray, tuple]:
    c, h, w = in_shape
    ho = (h - spec.window) // spec.stride + 1
    wo = (w - spec.window) // spec.stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"pool window larger than input {in_shape}")
    ch, oh, ow = np.meshgrid(np.arange(c), np.arange(ho), np.arange(wo), indexing="ij")
    dh, dw = np.meshgrid(np.arange(spec.window), np.arange(spec.window), indexing="ij")
    rows = oh.reshape(-1, 1) * spec.stride + dh.reshape(1, -1)
    cols = ow.reshape(-1, 1) * spec.stride + dw.reshape(1, -1)
    table = ch.reshape(-1, 1) * h * w + rows * w + cols
    return table, (c, ho, wo)


@dataclass
class Network:
    """A built architecture: layer specs, shapes and the parameter layout."""

    layers: tuple
    input_shape: tuple[int, ...]
    name: str = "custom"
    shapes: list = field(default_factory=list)
    layout: list = field(default_factory=list)
    n_params: int = 0
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def n_outputs(self) -> int:
        return int(np.prod(self.shapes[-1]))

    @property
    def weight_blocks(self) -> list[ParamBlock]:
        return [b for b in self.layout if b.kind == "weight"]

    @property
    def bias_blocks(self) -> list[ParamBlock]:
        return [b for b in self.layout if b.kind == "bias"]

    @property
    def n_weights(self) -> int:
        return sum(b.size for b in self.weight_blocks)

    def block(self, layer: int, kind: str) -> ParamBlock | None:
        for b in self.layout:
            if b.layer == layer and b.kind == kind:
                return b
        return None

    def weight_indicator(self) -> np.ndarray:
        """Boolean vector marking weight (prunable) entries."""
        out = np.zeros(self.n_params, dtype=bool)
        for b in self.weight_blocks:
            out[b.slice] = True
        return out

    def ones_mask(self) -> np.ndarray:
        return np.ones(self.n_params)

    @property
    def graph(self) -> ad.DiffGraph:
        return ad.DiffGraph(lambda p, x: self.forward(p, x), self.n_params, self.input_shape)

    def masked_graph(self, mask: np.ndarray | None) -> ad.DiffGraph:
        return ad.DiffGraph(lambda p, x: self.forward(p, x, mask), self.n_params, self.input_shape)

    def _coerce_inputs(self, x) -> Tensor:
        x = ad.as_tensor(x)
        want = tuple(self.input_shape)
        if tuple(x.shape[1:]) != want:
            if int(np.prod(x.shape[1:])) != int(np.prod(want)):
                raise ValueError(f"input shape {x.shape[1:]} incompatible with {want}")
            x = ad.reshape(x, (x.shape[0],) + want)
        return x

    def forward(
        self,
        params,
        x,
        mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: list | None = None,
    ) -> Tensor:
        """Logits of ``f(x, mask * params)`` as a tensor of shape ``(n, c)``.

        Dropout is active only with ``training`` set and draws from ``rng``.
        When ``trace`` is a list, a :class:`LayerRecord` is appended for every
        dense and conv layer.
        """
        p = params if isinstance(params, Tensor) else Tensor(params)
        if p.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {p.shape}")
        h = self._coerce_inputs(x)
        n = h.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        for li, spec in enumerate(self.layers):
            if isinstance(spec, (Dense, Conv2D)):
                wb = self.block(li, "weight")
                w = p[wb.slice]
                if mask is not None:
                    w = w * Tensor(mask[wb.slice])
                bb = self.block(li, "bias")
                if isinstance(spec, Dense):
                    w = ad.reshape(w, (spec.fan_out, spec.fan_in))
                    z = ad.matmul(h, ad.transpose(w))
                    if bb is not None:
                        z = z + p[bb.slice]
                    if trace is not None:
                        trace.append(LayerRecord(li, "dense", h, z))
                    h = z
                else:
                    table = self._tables[li]
                    cin, hin, win = self.shapes[li]
                    patches = ad.gather(ad.reshape(h, (n, cin * hin * win)), table)
                    wm = ad.transpose(ad.reshape(w, (spec.out_ch, -1)))
                    z = ad.matmul(patches, wm)
                    if bb is not None:
                        z = z + p[bb.slice]
                    if trace is not None:
                        trace.append(LayerRecord(li, "conv", patches, z))
                    out_shape = self.shapes[li + 1]
                    h = ad.reshape(ad.transpose(z, (0, 2, 1)), (n,) + out_shape)
            elif isinstance(spec, ReLU):
                h = ad.relu(h)
            elif isinstance(spec, MaxPool):
                table = self._tables[li]
                c, hh, ww = self.shapes[li]
                flat = ad.reshape(h, (n, c * hh * ww))
                # the winning position is data-dependent but held constant for differentiation
                winner = flat.data[:, table].argmax(axis=2)
                choice = table[np.arange(table.shape[0])[None, :], winner]
                h =ad.reshape(ad.gather_rows(flat, choice), (n,) + self.shapes[li + 1])
            elif isinstance(spec, Flatten):
                h = ad.reshape(h, (n, -1))
            elif isinstance(spec, Dropout):
                if training and spec.rate > 0:
                    if rng is None:
                        raise ValueError("dropout in training mode needs an rng")
                    keep = rng.random(h.shape) >= spec.rate
                    h = h * Tensor(keep / (1.0 - spec.rate))
            else:  # pragma: no cover - guarded by build()
                raise TypeError(f"unknown layer {spec!r}")
        return h


def build(arch: Sequence, input_shape, name: str = "custom") -> Network:
    """Validate shapes layer by layer and lay out the parameter vector."""
    shape = tuple(int(s) for s in (input_shape if np.ndim(input_shape) else (input_shape,)))
    net = Network(layers=tuple(arch), input_shape=shape, name=name)
    shapes = [shape]
    offset = 0
    for li, spec in enumerate(arch):
        if isinstance(spec, Dense):
            if len(shape) != 1 or shape[0] != spec.fan_in:
                raise ValueError(f"layer {li}: dense expects ({spec.fan_in},), got {shape}")
            w_shape = (spec.fan_out, spec.fan_in)
            net.layout.append(ParamBlock(li, "weight", offset, offset + spec.fan_in * spec.fan_out, w_shape))
            offset += spec.fan_in * spec.fan_out
            if spec.bias:
                net.layout.append(ParamBlock(li, "bias", offset, offset + spec.fan_out, (spec.fan_out,)))
                offset += spec.fan_out
            shape = (spec.fan_out,)
        elif isinstance(spec, Conv2D):
            if len(shape) != 3 or shape[0] != spec.in_ch:
                raise ValueError(f"layer {li}: conv expects {spec.in_ch} input channels, got {shape}")
            table, shape_out = _conv_index_table(spec, shape)
            net._tables[li] = table
            w_shape = (spec.out_ch, spec.in_ch, spec.kernel_h, spec.kernel_w)
            size = int(np.prod(w_shape))
            net.layout.append(ParamBlock(li, "weight", offset, offset + size, w_shape))
            offset += size
            if spec.bias:
                net.layout.append(ParamBlock(li, "bias", offset, offset + spec.out_ch, (spec.out_ch,)))
                offset += spec.out_ch
            shape = shape_out
        elif isinstance(spec, MaxPool):
            if len(shape) != 3:
                raise ValueError(f"layer {li}: maxpool needs (C, H, W) input, got {shape}")
            table, shape = _pool_index_table(spec, shape)
            net._tables[li] = table
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, Dropout):
            if not 0.0 <= spec.rate < 1.0:
                raise ValueError(f"layer {li}: dropout rate must be in [0, 1)")
        elif isinstance(spec, ReLU):
            pass
        else:
            raise TypeError(f"layer {li}: unknown layer spec {spec!r}")
        shapes.append(shape)
    if len(shape) != 1:
        raise ValueError(f"network must end in a vector of logits, got {shape}")
    net.shapes = shapes
    net.n_params = offset
    return net


def mlp(sizes: Sequence[int], bias: bool = True, name: str | None = None) -> Network:
    """Dense ReLU network, e.g. ``mlp([784, 300, 100, 10])``."""
    arch: list = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        arch.append(Dense(a, b, bias=bias))
        if i < len(sizes) - 2:
            arch.append(ReLU())
    return build(arch, (sizes[0],), name=name or "mlp-" + "-".join(map(str, sizes)))


def _lenet_300_100(n_classes: int) -> tuple[list, tuple]:
    return (
        [Dense(784, 300), ReLU(), Dense(300, 100), ReLU(), Dense(100, n_classes)],
        (784,),
    )


def _lenet_5_caffe(n_classes: int) -> tuple[list, tuple]:
    return (
        [
            Conv2D(5, 5, 1, 20), ReLU(), MaxPool(2, 2),
            Conv2D(5, 5, 20, 50), ReLU(), MaxPool(2, 2),
            Flatten(), Dense(800, 500), ReLU(), Dense(500, n_classes),
        ],
        (1, 28, 28),
    )


def _conv_4(n_classes: int) -> tuple[list, tuple]:
    return (
        [
            Conv2D(3, 3, 3, 64, padding="same"), ReLU(),
            Conv2D(3, 3, 64, 64), ReLU(),
            MaxPool(2, 2), Dropout(0.25),
            Conv2D(3, 3, 64, 128, padding="same"), ReLU(),
            Conv2D(3, 3, 128, 128), ReLU(),
            MaxPool(2, 2), Dropout(0.25),
            Flatten(), Dense(128 * 6 * 6, 512), ReLU(), Dropout(0.5),
            Dense(512, n_classes),
        ],
        (3, 32, 32),
    )


PRESETS = {
    "lenet-300-100": _lenet_300_100,
    "lenet-5-caffe": _lenet_5_caffe,
    "conv-4": _conv_4,
}


def preset(name: str, n_classes: int = 10) -> Network:
    """Build a named architecture (``lenet-300-100``, ``lenet-5-caffe``, ``conv-4``)."""
    if name not in PRESETS:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(PRESETS)}")
    arch, shape = PRESETS[name](n_classes)
    return build(arch, shape, name=name)


def _fans(net: Network, block: ParamBlock) -> tuple[int, int]:
    spec = net.layers[block.layer]
    if isinstance(spec, Dense):
        return spec.fan_in, spec.fan_out
    rf = spec.kernel_h * spec.kernel_w
    return spec.in_ch * rf, spec.out_ch * rf


def init_glorot(net: Network, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, ``U(-a, a)`` with ``a = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    params = np.zeros(net.n_params)
    for b in net.weight_blocks:
        fan_in, fan_out = _fans(net, b)
        a = math.sqrt(6.0 / (fan_in + fan_out))
        params[b.slice] = rng.uniform(-a, a, size=b.size)
    return params


def init_variance_scaled(net: Network, rng: np.random.Generator, density: float) -> np.ndarray:
    """Zero-mean normal weights with variance ``2 / (fan_in * density)``; zero biases."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    params = np.zeros(net.n_params)
    for b in net.weight_blocks:
        fan_in, _ = _fans(net, b)
        params[b.slice] = rng.normal(0.0, math.sqrt(2.0 / (fan_in * density)), size=b.size)
    return params


def forward_logits(
    net: Network,
    params: np.ndarray,
    mask: np.ndarray | None,
    batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    with ad.no_grad():
        return net.forward(params, batch, mask, training=training, rng=rng).data


@dataclass(frozen=True)
class MultiplyAdds:
    per_layer: dict
    total: int


def count_multiply_adds(net: Network, mask: np.ndarray | None = None) -> MultiplyAdds:
    """Multiply-adds of one forward pass, counting only kept weights.

    Conv kernels are charged once per output position. Biases, pooling and
    activations are free.
    """
    per_layer = {}
    for b in net.weight_blocks:
        kept = b.size if mask is None else int(np.count_nonzero(mask[b.slice]))
        spec = net.layers[b.layer]
        if isinstance(spec, Conv2D):
            _, ho, wo = net.shapes[b.layer + 1]
            kept *= ho * wo
        per_layer[b.layer] = kept
    return MultiplyAdds(per_layer, sum(per_layer.values()))


def speedup(net: Network, mask: np.ndarray | None) -> float:
    """Dense multiply-adds divided by the masked network's multiply-adds."""
    sparse = count_multiply_adds(net, mask).total
    if sparse == 0:
        return math.inf
    return count_multiply_adds(net).total / sparse
