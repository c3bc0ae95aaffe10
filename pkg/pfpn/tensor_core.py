# -*- coding: utf-8 -*-

"""
tensor_core.py: Deterministic Differentiable Runtime

This module provides the small set of dense operators the FPN top-down pathway and the
semantic segmentation branch are made of, each with a forward kernel and an exact
reverse-mode gradient:

* conv2d (cross-correlation, 1x1 or 3x3, stride / padding / dilation)
* group_norm (population variance, per sample and channel group)
* relu
* bilinear_upsample (half-pixel centers, factor 2 or 4)
* elementwise_sum and channel_concat (the two aggregation choices)
* softmax_channels (per-pixel softmax over the channel axis)

Every operator takes an optional `graph`. When given, the call is recorded on the
`Graph` tape and `Graph.backward` can later propagate a loss gradient to every
parameter and leaf input. Tensors store float32 by default; float64 tensors go through
the same kernels and are used as the reference precision for finite-difference checks.

Parameters are drawn from `Rng`, a splitmix64 stream, so a seed fixes every weight
bit-for-bit on every platform.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pfpn.exceptions import ContractError

__all__ = [
    "Tensor",
    "ConvParams",
    "GroupNormParams",
    "Rng",
    "ConvLayerSpec",
    "NormLayerSpec",
    "Node",
    "Graph",
    "OP_KINDS",
    "conv2d",
    "group_norm",
    "relu",
    "bilinear_upsample",
    "elementwise_sum",
    "channel_concat",
    "softmax_channels",
    "backward",
    "init_params",
    "interpolation_matrix",
]

logger = logging.getLogger(__name__)

OP_KINDS = (
    "conv2d",
    "group_norm",
    "relu",
    "bilinear_upsample",
    "elementwise_sum",
    "channel_concat",
    "softmax_channels",
)

DEFAULT_GN_GROUPS = 32
DEFAULT_GN_EPS = 1e-5
SUPPORTED_KERNELS = (1, 3)
SUPPORTED_FACTORS = (2, 4)

_FLOAT_TYPES = (np.float32, np.float64)


def _float_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype.type not in _FLOAT_TYPES:
        raise ContractError(f"tensors hold float32 or float64 data, got {dtype}")
    return dtype


class Tensor:
    """
    Dense rank-4 activation map of shape (n, c, h, w).

    The data buffer is a private, read-only, C-contiguous copy of whatever was passed
    in. The gradient buffer is filled by `Graph.backward` and is always float64.

    Attributes:
        data (np.ndarray): The values, float32 unless float64 was requested.
        grad (np.ndarray or None): Accumulated gradient, same shape as data.
        name (str): Optional label used in error messages and graph dumps.
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, dtype=np.float32, name: str = "") -> None:
        array = np.array(data, dtype=_float_dtype(dtype), order="C", copy=True)
        if array.ndim != 4:
            raise ContractError(f"tensor '{name}' must be rank 4 (n, c, h, w), got shape {array.shape}")
        if min(array.shape) < 1:
            raise ContractError(f"tensor '{name}' has an empty dimension: {array.shape}")
        array.flags.writeable = False
        self.data = array
        self.grad = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ContractError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def channels(self, start: int, stop: int) -> "Tensor":
        """Return channels [start, stop) as a new tensor (not recorded on any graph)."""
        return Tensor(self.data[:, start:stop], dtype=self.dtype, name=self.name)

    @classmethod
    def zeros(cls, shape, dtype=np.float32, name: str = "") -> "Tensor":
        return cls(np.zeros(shape), dtype=dtype, name=name)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype.name})"


@dataclass
class ConvParams:
    """
    Weights and geometry of a 2-D convolution.

    Attributes:
        weight (np.ndarray): (c_out, c_in, k, k) kernel, k in {1, 3}.
        bias (np.ndarray): (c_out,) per output channel offset.
        stride (int): Output sampling step, >= 1.
        padding (int): Zero padding on every side, >= 0.
        dilation (int): Spacing between kernel taps, >= 1.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    grad_weight: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    grad_bias: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        weight = np.asarray(self.weight)
        dtype = np.float64 if weight.dtype == np.float64 else np.float32
        self.weight = np.ascontiguousarray(weight, dtype=dtype)
        self.bias = np.ascontiguousarray(self.bias, dtype=dtype)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ContractError(f"conv weight must be (c_out, c_in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] not in SUPPORTED_KERNELS:
            raise ContractError(f"kernel size must be one of {SUPPORTED_KERNELS}, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ContractError(f"conv bias must be ({self.weight.shape[0]},), got {self.bias.shape}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ContractError(
                f"invalid conv geometry: stride={self.stride} padding={self.padding} dilation={self.dilation}"
            )

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def span(self) -> int:
        """Receptive span of one output sample along an axis."""
        return (self.kernel - 1) * self.dilation + 1

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def output_extent(self, extent: int) -> int:
        return (extent + 2 * self.padding - self.span) // self.stride + 1

    def zero_grad(self) -> None:
        self.grad_weight = None
        self.grad_bias = None

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [("weight", self.weight), ("bias", self.bias)]

    def grads(self) -> List[Tuple[str, Optional[np.ndarray]]]:
        return [("weight", self.grad_weight), ("bias", self.grad_bias)]

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(
            weight=self.weight.astype(dtype),
            bias=self.bias.astype(dtype),
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
        )


@dataclass
class GroupNormParams:
    """
    Affine parameters of a group normalization layer.

    Attributes:
        groups (int): Number of channel groups; must divide the channel count.
        gamma (np.ndarray): (c,) per channel scale.
        beta (np.ndarray): (c,) per channel shift.
        eps (float): Variance floor, > 0.
    """

    groups: int
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_GN_EPS
    grad_gamma: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    grad_beta: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        gamma = np.asarray(self.gamma)
        dtype = np.float64 if gamma.dtype == np.float64 else np.float32
        self.gamma = np.ascontiguousarray(gamma, dtype=dtype)
        self.beta = np.ascontiguousarray(self.beta, dtype=dtype)
        if self.gamma.ndim != 1 or self.beta.shape != self.gamma.shape:
            raise ContractError(f"gamma/beta must be matching (c,) vectors, got {self.gamma.shape} and {self.beta.shape}")
        if self.groups < 1 or self.channels % self.groups:
            raise ContractError(f"{self.channels} channels are not divisible into {self.groups} groups")
        if not self.eps > 0:
            raise ContractError(f"group norm eps must be positive, got {self.eps}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def size(self) -> int:
        return self.gamma.size + self.beta.size

    def zero_grad(self) -> None:
        self.grad_gamma = None
        self.grad_beta = None

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [("gamma", self.gamma), ("beta", self.beta)]

    def grads(self) -> List[Tuple[str, Optional[np.ndarray]]]:
        return [("gamma", self.grad_gamma), ("beta", self.grad_beta)]

    def astype(self, dtype) -> "GroupNormParams":
        return GroupNormParams(self.groups, self.gamma.astype(dtype), self.beta.astype(dtype), self.eps)


Params = Union[ConvParams, GroupNormParams]


class Rng:
    """
    splitmix64 generator.

    Each draw adds the golden-ratio increment to a 64-bit state and mixes it, so the
    k-th output depends only on (seed, k). `next_u64_array` exploits that to produce
    a block of draws with numpy while staying bit-identical to repeated `next_u64`.
    """

    MASK = (1 << 64) - 1
    GAMMA = 0x9E3779B97F4A7C15
    MIX1 = 0xBF58476D1CE4E5B9
    MIX2 = 0x94D049BB133111EB

    def __init__(self, seed: int = 0) -> None:
        self.state = int(seed) & self.MASK

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * self.MIX1) & self.MASK
        z = ((z ^ (z >> 27)) * self.MIX2) & self.MASK
        return z ^ (z >> 31)

    def next_u64_array(self, count: int) -> np.ndarray:
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(self.GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(self.MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(self.MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * self.GAMMA) & self.MASK
        return z

    def uniform(self, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Draw `count` float64 values in [low, high) from the top 53 bits of each word."""
        unit = (self.next_u64_array(count) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return low + (high - low) * unit

    def integers(self, count: int, high: int) -> np.ndarray:
        """Draw `count` integers in [0, high)."""
        return np.minimum((self.uniform(count) * high).astype(np.int64), high - 1)

    def normal(self, count: int) -> np.ndarray:
        """Box-Muller transform of two uniform blocks."""
        u1 = self.uniform(count)
        u2 = self.uniform(count)
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


@dataclass(frozen=True)
class ConvLayerSpec:
    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None
    dilation: int = 1
    name: str = ""

    @property
    def resolved_padding(self) -> int:
        if self.padding is not None:
            return self.padding
        return (self.kernel - 1) * self.dilation // 2

    @property
    def fan_in(self) -> int:
        return self.c_in * self.kernel * self.kernel


@dataclass(frozen=True)
class NormLayerSpec:
    channels: int
    groups: int = DEFAULT_GN_GROUPS
    eps: float = DEFAULT_GN_EPS
    name: str = ""


LayerSpec = Union[ConvLayerSpec, NormLayerSpec]


def init_params(spec: Union[LayerSpec, Sequence[LayerSpec]], rng: Rng, zero: bool = False) -> List[Params]:
    """
    Initialize parameters for a list of layer descriptions.

    Conv weights are uniform in (-a, a) with a = sqrt(6 / fan_in), fan_in = c_in * k * k;
    biases are 0, gamma 1 and beta 0. Layers consume the stream in list order; a conv
    consumes exactly c_out * c_in * k * k draws in (c_out, c_in, k, k) C order, and
    biases and norm layers consume nothing.

    Args:
        spec: One layer description or a sequence of them.
        rng: The stream to draw from; it is advanced.
        zero: Produce all-zero conv weights without consuming draws.

    Returns:
        A list of ConvParams / GroupNormParams in the order of `spec`.
    """
    layers = [spec] if isinstance(spec, (ConvLayerSpec, NormLayerSpec)) else list(spec)
    params: List[Params] = []
    for layer in layers:
        if isinstance(layer, ConvLayerSpec):
            shape = (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
            if zero:
                weight = np.zeros(shape, dtype=np.float32)
            else:
                bound = math.sqrt(6.0 / layer.fan_in)
                weight = rng.uniform(int(np.prod(shape)), -bound, bound).astype(np.float32).reshape(shape)
            params.append(
                ConvParams(
                    weight=weight,
                    bias=np.zeros(layer.c_out, dtype=np.float32),
                    stride=layer.stride,
                    padding=layer.resolved_padding,
                    dilation=layer.dilation,
                )
            )
        elif isinstance(layer, NormLayerSpec):
            params.append(
                GroupNormParams(
                    groups=layer.groups,
                    gamma=np.ones(layer.channels, dtype=np.float32),
                    beta=np.zeros(layer.channels, dtype=np.float32),
                    eps=layer.eps,
                )
            )
        else:
            raise ContractError(f"unknown layer description: {layer!r}")
    return params


@lru_cache(maxsize=64)
def interpolation_matrix(size: int, factor: int) -> np.ndarray:
    """
    (size * factor, size) matrix of the 1-D half-pixel bilinear resampling.

    Source coordinate of output sample d is (d + 0.5) / factor - 0.5, clamped to
    [0, size - 1]; the two neighbouring source samples are blended linearly.
    """
    out = np.zeros((size * factor, size), dtype=np.float64)
    dst = np.arange(size * factor)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    np.add.at(out, (dst, lo), 1.0 - frac)
    np.add.at(out, (dst, hi), frac)
    out.flags.writeable = False
    return out


@dataclass
class Node:
    """One recorded operator application."""

    kind: str
    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    params: Optional[Params] = None
    ctx: Dict[str, Any] = field(default_factory=dict, repr=False)


class Graph:
    """
    Tape of operator applications.

    Operators append a `Node` when called with `graph=`. `backward` walks the tape in
    reverse, accumulating gradients additively where a tensor fans out, writing
    parameter gradients into the params' grad buffers and leaf gradients into
    `Tensor.grad`.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if node.kind not in OP_KINDS:
            raise ContractError(f"unsupported op kind '{node.kind}'")
        self.nodes.append(node)

    def nodes_of(self, kind: str, prefix: str = "") -> List[Node]:
        return [node for node in self.nodes if node.kind == kind and node.name.startswith(prefix)]

    def parameters(self) -> List[Params]:
        seen, params = set(), []
        for node in self.nodes:
            if node.params is not None and id(node.params) not in seen:
                seen.add(id(node.params))
                params.append(node.params)
        return params

    def zero_grad(self) -> None:
        for params in self.parameters():
            params.zero_grad()

    def backward(self, loss_grad, output: Optional[Tensor] = None, retain_grads: bool = False) -> None:
        """
        Propagate `loss_grad` (dL/d output) back through the tape.

        Args:
            loss_grad: Gradient of the loss with respect to `output`.
            output: The tensor the gradient refers to; defaults to the last recorded output.
            retain_grads: Also store gradients on intermediate tensors.
        """
        if not self.nodes:
            raise ContractError("backward called before any forward op was recorded")
        output = self.nodes[-1].output if output is None else output
        loss_grad = np.asarray(loss_grad, dtype=np.float64)
        if loss_grad.shape != output.shape:
            raise ContractError(f"loss gradient shape {loss_grad.shape} does not match output shape {output.shape}")

        produced = {id(node.output) for node in self.nodes}
        if id(output) not in produced:
            raise ContractError(f"{output!r} was not produced by this graph")

        tensors: Dict[int, Tensor] = {id(output): output}
        grads: Dict[int, np.ndarray] = {id(output): loss_grad.copy()}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            if retain_grads:
                node.output.accumulate_grad(grad)
            for tensor, input_grad in zip(node.inputs, _BACKWARD[node.kind](node, grad)):
                key = id(tensor)
                tensors[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + input_grad
                else:
                    grads[key] = input_grad

        for key, grad in grads.items():
            tensors[key].accumulate_grad(grad)


def _record(graph: Optional[Graph], kind: str, name: str, inputs, output: Tensor, params=None, **ctx) -> Tensor:
    if graph is not None:
        graph.record(Node(kind, name, tuple(inputs), output, params, ctx))
    return output


def _accumulate(params, attribute: str, value: np.ndarray) -> None:
    current = getattr(params, attribute)
    setattr(params, attribute, value.copy() if current is None else current + value)


def _conv_columns(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """im2col: (n * oh * ow, c_in * k * k) matrix of receptive fields."""
    p, k = params.padding, params.kernel
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(x, (params.span, params.span), axis=(2, 3))
    windows = windows[:, :, :: params.stride, :: params.stride, :: params.dilation, :: params.dilation]
    n, c, oh, ow = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k), (oh, ow)


def conv2d(input: Tensor, params: ConvParams, graph: Optional[Graph] = None, name: str = "") -> Tensor:
    """
    Cross-correlate `input` with `params.weight` and add the per-channel bias.

    Output extent per axis is floor((h + 2p - ((k - 1) d + 1)) / s) + 1.
    """
    n, c, h, w = input.shape
    if c != params.c_in:
        raise ContractError(
            f"conv '{name}': input shape {input.shape} does not match weight shape {params.weight.shape}"
        )
    if params.span > h + 2 * params.padding or params.span > w + 2 * params.padding:
        raise ContractError(
            f"conv '{name}': receptive span {params.span} exceeds padded input {input.shape} (padding {params.padding})"
        )
    columns, (oh, ow) = _conv_columns(input.data, params)
    weight = params.weight.astype(input.dtype, copy=False).reshape(params.c_out, -1)
    out = columns @ weight.T
    out = out.reshape(n, oh, ow, params.c_out).transpose(0, 3, 1, 2)
    out = out + params.bias.astype(input.dtype, copy=False)[None, :, None, None]
    return _record(graph, "conv2d", name, (input,), Tensor(out, input.dtype, name), params, columns=columns)


def _conv2d_backward(node: Node, grad: np.ndarray):
    params: ConvParams = node.params
    x = node.inputs[0]
    n, c, h, w = x.shape
    k, s, d, p = params.kernel, params.stride, params.dilation, params.padding
    oh, ow = grad.shape[2:]
    flat = grad.transpose(0, 2, 3, 1).reshape(-1, params.c_out)

    _accumulate(params, "grad_weight", (flat.T @ node.ctx["columns"]).reshape(params.weight.shape))
    _accumulate(params, "grad_bias", flat.sum(axis=0))

    dcols = (flat @ params.weight.astype(np.float64).reshape(params.c_out, -1)).reshape(n, oh, ow, c, k, k)
    padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            rows = slice(i * d, i * d + s * (oh - 1) + 1, s)
            cols = slice(j * d, j * d + s * (ow - 1) + 1, s)
            padded[:, :, rows, cols] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return (padded[:, :, p : p + h, p : p + w],)


def group_norm(input: Tensor, params: GroupNormParams, graph: Optional[Graph] = None, name: str = "") -> Tensor:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta over each (sample, group) slice."""
    n, c, h, w = input.shape
    if c != params.channels or c % params.groups:
        raise ContractError(
            f"group norm '{name}': input shape {input.shape} incompatible with {params.channels} channels "
            f"in {params.groups} groups"
        )
    grouped = input.data.astype(np.float64).reshape(n, params.groups, -1)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + params.eps)
    normalized = ((grouped - mean) * inv_std).reshape(n, c, h, w)
    out = normalized * params.gamma.astype(np.float64)[None, :, None, None] + params.beta.astype(np.float64)[None, :, None, None]
    return _record(
        graph, "group_norm", name, (input,), Tensor(out, input.dtype, name), params,
        normalized=normalized, inv_std=inv_std,
    )


def _group_norm_backward(node: Node, grad: np.ndarray):
    params: GroupNormParams = node.params
    normalized, inv_std = node.ctx["normalized"], node.ctx["inv_std"]
    n, c, h, w = grad.shape
    _accumulate(params, "grad_gamma", (grad * normalized).sum(axis=(0, 2, 3)))
    _accumulate(params, "grad_beta", grad.sum(axis=(0, 2, 3)))

    dnorm = (grad * params.gamma.astype(np.float64)[None, :, None, None]).reshape(n, params.groups, -1)
    xhat = normalized.reshape(n, params.groups, -1)
    dx = inv_std * (dnorm - dnorm.mean(axis=2, keepdims=True) - xhat * (dnorm * xhat).mean(axis=2, keepdims=True))
    return (dx.reshape(n, c, h, w),)


def relu(input: Tensor, graph: Optional[Graph] = None, name: str = "") -> Tensor:
    return _record(graph, "relu", name, (input,), Tensor(np.maximum(input.data, 0), input.dtype, name))


def _relu_backward(node: Node, grad: np.ndarray):
    return (grad * (node.inputs[0].data > 0),)


def bilinear_upsample(input: Tensor, factor: int, graph: Optional[Graph] = None, name: str = "") -> Tensor:
    """Resize by an integer factor (2 or 4) with half-pixel-center bilinear sampling."""
    if factor not in SUPPORTED_FACTORS:
        raise ContractError(f"upsample factor must be one of {SUPPORTED_FACTORS}, got {factor}")
    rows = interpolation_matrix(input.h, factor)
    cols = interpolation_matrix(input.w, factor)
    out = np.matmul(np.matmul(rows, input.data.astype(np.float64)), cols.T)
    return _record(graph, "bilinear_upsample", name, (input,), Tensor(out, input.dtype, name), factor=factor)


def _bilinear_backward(node: Node, grad: np.ndarray):
    x = node.inputs[0]
    factor = node.ctx["factor"]
    rows = interpolation_matrix(x.h, factor)
    cols = interpolation_matrix(x.w, factor)
    return (np.matmul(np.matmul(rows.T, grad), cols),)


def elementwise_sum(inputs: Sequence[Tensor], graph: Optional[Graph] = None, name: str = "") -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ContractError(f"elementwise_sum '{name}' needs at least one input")
    for tensor in inputs[1:]:
        if tensor.shape != inputs[0].shape:
            raise ContractError(f"elementwise_sum '{name}': shape {tensor.shape} does not match {inputs[0].shape}")
    total = inputs[0].data.copy()
    for tensor in inputs[1:]:
        total = total + tensor.data
    return _record(graph, "elementwise_sum", name, inputs, Tensor(total, inputs[0].dtype, name))


def _sum_backward(node: Node, grad: np.ndarray):
    return tuple(grad for _ in node.inputs)


def channel_concat(inputs: Sequence[Tensor], graph: Optional[Graph] = None, name: str = "") -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ContractError(f"channel_concat '{name}' needs at least one input")
    n, _, h, w = inputs[0].shape
    for tensor in inputs[1:]:
        if (tensor.n, tensor.h, tensor.w) != (n, h, w):
            raise ContractError(f"channel_concat '{name}': shape {tensor.shape} does not match {inputs[0].shape}")
    out = np.concatenate([tensor.data for tensor in inputs], axis=1)
    return _record(graph, "channel_concat", name, inputs, Tensor(out, inputs[0].dtype, name))


def _concat_backward(node: Node, grad: np.ndarray):
    bounds = np.cumsum([tensor.c for tensor in node.inputs])[:-1]
    return tuple(np.split(grad, bounds, axis=1))


def softmax_channels(input: Tensor, graph: Optional[Graph] = None, name: str = "") -> Tensor:
    """Per-pixel softmax across channels, max-subtracted, evaluated in float64."""
    logits = input.data.astype(np.float64)
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    return _record(graph, "softmax_channels", name, (input,), Tensor(probs, input.dtype, name), probs=probs)


def _softmax_backward(node: Node, grad: np.ndarray):
    probs = node.ctx["probs"]
    return (probs * (grad - (grad * probs).sum(axis=1, keepdims=True)),)


_BACKWARD = {
    "conv2d": _conv2d_backward,
    "group_norm": _group_norm_backward,
    "relu": _relu_backward,
    "bilinear_upsample": _bilinear_backward,
    "elementwise_sum": _sum_backward,
    "channel_concat": _concat_backward,
    "softmax_channels": _softmax_backward,
}


def backward(graph: Graph, loss_grad, output: Optional[Tensor] = None) -> None:
    """Functional form of `Graph.backward`."""
    graph.backward(loss_grad, output=output)
