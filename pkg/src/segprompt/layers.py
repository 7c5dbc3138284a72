"""Neural building blocks: linear, layer norm, attention, a small ResNet stem.

Every layer exposes ``parameters()`` as an ordered list of (name, Tensor)
pairs with stable dotted names; the freezing policy and the optimizer key
off those names, so construction order must stay deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor
from .util import truncated_normal

Params = list[tuple[str, Tensor]]


def prefixed(prefix: str, params: Params) -> Params:
    return [(f"{prefix}.{name}", t) for name, t in params]


def set_trainable(params: Params, flag: bool) -> None:
    for _, t in params:
        t.requires_grad = flag


class Linear:
    """y = x · Wᵀ + b with weight of shape [d_out, d_in].

    Weights default to Xavier-scaled truncated normal; the tiny 0.02 init
    used for prompt tokens is too small to break symmetry when training
    this desk-scale stack from scratch.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 std: float | None = None):
        self.d_in = d_in
        self.d_out = d_out
        if std is None:
            std = math.sqrt(2.0 / (d_in + d_out))
        self.weight = Tensor(truncated_normal(rng, (d_out, d_in), std), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(
                f"linear: input {x.shape} does not end in d_in={self.d_in}"
            )
        return T.add(T.matmul(x, T.transpose(self.weight)), self.bias)

    def parameters(self) -> Params:
        return [("weight", self.weight), ("bias", self.bias)]


class LayerNorm:
    """Normalize the last axis to zero mean, unit variance, then affine."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self) -> Params:
        return [("gamma", self.gamma), ("beta", self.beta)]


class MultiHeadAttention:
    """Multi-head self-attention over a token sequence.

    Accepts [n_tokens, d] or a batched [batch, n_tokens, d]; the output shape
    matches the input. The last forward's attention weights are kept on
    ``last_weights`` (plain numpy) so tests can check row-stochasticity.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if dim % num_heads:
            raise ConfigurationError(
                f"attention dim {dim} is not divisible by num_heads {num_heads}"
            )
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split_heads(self, x: Tensor, lead: tuple[int, ...], n: int) -> Tensor:
        x = T.reshape(x, lead + (n, self.num_heads, self.head_dim))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return T.transpose(x, axes)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.dim:
            raise DimensionError(f"attention: token dim {z.shape} != {self.dim}")
        lead, n = z.shape[:-2], z.shape[-2]
        # 1/sqrt(head_dim) is applied to q up front; scaling the scores after
        # the matmul would touch an n x n array instead
        q = self._split_heads(T.scale(self.w_q.forward(z), 1.0 / math.sqrt(self.head_dim)),
                              lead, n)
        k = self._split_heads(self.w_k.forward(z), lead, n)
        v = self._split_heads(self.w_v.forward(z), lead, n)
        scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        mixed = T.matmul(weights, v)
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        merged = T.reshape(T.transpose(mixed, axes), lead + (n, self.dim))
        return self.w_o.forward(merged)

    def parameters(self) -> Params:
        out: Params = []
        for name, layer in (("w_q", self.w_q), ("w_k", self.w_k),
                            ("w_v", self.w_v), ("w_o", self.w_o)):
            out.extend(prefixed(name, layer.parameters()))
        return out


def mha_forward(attn: MultiHeadAttention, z: Tensor) -> Tensor:
    return attn.forward(z)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer.forward(x)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch, stable via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} incompatible with {labels.shape[0] if labels.ndim else '?'} labels"
        )
    n, c = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"cross_entropy: label out of range [0,{c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - lse
    loss_val = -log_probs[np.arange(n), labels].mean()
    out = Tensor(loss_val, requires_grad=logits.requires_grad)

    def rule(g: np.ndarray) -> None:
        probs = np.exp(log_probs)
        probs[np.arange(n), labels] -= 1.0
        T._accumulate(logits, probs * (g.reshape(()).item() / n))

    T._record((logits,), out, rule)
    return out


def softmax_probs(logits: Tensor) -> np.ndarray:
    """Row softmax as plain numpy, for turning logits into reported scores."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Conv2d:
    """Thin conv wrapper owning a kernel (he-normal init) and optional bias."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        self.stride = stride
        self.padding = padding
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = Tensor(rng.normal(0.0, std, (c_out, c_in, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = T.add(out, T.reshape(self.bias, (self.bias.shape[0], 1, 1)))
        return out

    def parameters(self) -> Params:
        out: Params = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


class ChannelAffine:
    """Trainable per-channel scale and shift, standing in for batch norm."""

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        c = self.gamma.shape[0]
        g = T.reshape(self.gamma, (c, 1, 1))
        b = T.reshape(self.beta, (c, 1, 1))
        return T.add(T.mul(x, g), b)

    def parameters(self) -> Params:
        return [("gamma", self.gamma), ("beta", self.beta)]


class BasicBlock:
    """Residual block: two convs with affines; projection skip when the shape
    changes. Downsampling uses 2x2 stride-2 kernels because the conv contract
    demands exactly integral output sizes (no floor) on even inputs."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        if stride == 1:
            self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=1, padding=1)
        else:
            self.conv1 = Conv2d(c_in, c_out, 2, rng, stride=stride, padding=0)
        self.aff1 = ChannelAffine(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1)
        self.aff2 = ChannelAffine(c_out)
        if stride != 1 or c_in != c_out:
            kernel = 1 if stride == 1 else 2
            self.proj: Conv2d | None = Conv2d(c_in, c_out, kernel, rng, stride=stride)
            self.proj_aff: ChannelAffine | None = ChannelAffine(c_out)
        else:
            self.proj = None
            self.proj_aff = None

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.aff1.forward(self.conv1.forward(x)))
        out = self.aff2.forward(self.conv2.forward(out))
        skip = x if self.proj is None else self.proj_aff.forward(self.proj.forward(x))
        return T.relu(T.add(out, skip))

    def parameters(self) -> Params:
        out = prefixed("conv1", self.conv1.parameters())
        out += prefixed("aff1", self.aff1.parameters())
        out += prefixed("conv2", self.conv2.parameters())
        out += prefixed("aff2", self.aff2.parameters())
        if self.proj is not None:
            out += prefixed("proj", self.proj.parameters())
            out += prefixed("proj_aff", self.proj_aff.parameters())
        return out


class ResNetStem:
    """Initial conv plus two residual stages, ResNet18-shaped at desk width.

    Default widths (16, 32) with stride-2 stages give a fixed spatial
    downsampling factor of 4.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int = 3,
                 widths: tuple[int, int] = (16, 32), strides: tuple[int, int] = (2, 2)):
        self.in_channels = in_channels
        self.widths = widths
        self.downsample = strides[0] * strides[1]
        self.conv_in = Conv2d(in_channels, widths[0], 3, rng, stride=1, padding=1)
        self.aff_in = ChannelAffine(widths[0])
        self.stage1 = BasicBlock(widths[0], widths[0], strides[0], rng)
        self.stage2 = BasicBlock(widths[0], widths[1], strides[1], rng)

    @property
    def out_channels(self) -> int:
        return self.widths[1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.in_channels:
            raise DimensionError(
                f"resnet stem: expected {self.in_channels} input channels, got {x.shape}"
            )
        h, w = x.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise DimensionError(
                f"resnet stem: spatial dims {x.shape} not divisible by factor {self.downsample}"
            )
        out = T.relu(self.aff_in.forward(self.conv_in.forward(x)))
        out = self.stage1.forward(out)
        return self.stage2.forward(out)

    def parameters(self) -> Params:
        out = prefixed("conv_in", self.conv_in.parameters())
        out += prefixed("aff_in", self.aff_in.parameters())
        out += prefixed("stage1", self.stage1.parameters())
        out += prefixed("stage2", self.stage2.parameters())
        return out


def resnet_stem_forward(stem: ResNetStem, x: Tensor) -> Tensor:
    return stem.forward(x)
