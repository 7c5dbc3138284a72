"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Data lives in contiguous row-major numpy arrays. Every differentiable op
appends one node (inputs, output, backward rule) to the ambient Tape; the
backward pass walks those nodes exactly once, in reverse recording order,
accumulating gradients additively into every tensor that requires them.
Tensors with requires_grad=False never receive a gradient, which is what
enforces backbone freezing end to end.

Broadcasting is deliberately limited to numpy's trailing-axis alignment
plus scalars. Everything is float64: this is a desk-scale engine and the
finite-difference checks need the precision.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "TapeNode", "backward",
    "matmul", "elementwise", "add", "sub", "mul", "div", "scale", "layer_norm",
    "gelu", "relu", "tanh", "softmax",
    "reduce_sum", "reduce_mean", "pow_scalar",
    "reshape", "transpose", "concat", "slice_axis", "broadcast_to",
    "conv2d", "adaptive_avg_pool",
]


class Tensor:
    """A dense n-d float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all routed through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class TapeNode(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], None]


class Tape:
    """Append-only record of ops, replayed once in reverse by backward()."""

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise ContractError("a gradient tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._active = None

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward pass")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or not any(n.output is loss for n in self.nodes):
            raise ContractError("loss is not connected to the gradient tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.rule(g)


def backward(loss: Tensor) -> None:
    """Populate d(loss)/d(tensor) for every requires_grad tensor on the tape."""
    tape = Tape._active
    if tape is None:
        raise ContractError("no active gradient tape; wrap the forward pass in `with Tape():`")
    tape.backward(loss)


def _record(inputs: tuple[Tensor, ...], output: Tensor, rule) -> None:
    tape = Tape._active
    if tape is not None and output.requires_grad:
        tape.nodes.append(TapeNode(inputs, output, rule))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # First touch adopts g by reference (rules never mutate what they pass
    # in); fan-out accumulation switches to an owned buffer before writing.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.shape == t.data.shape else g.reshape(t.data.shape)
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a, b) -> Tensor:
    """Matrix product. 2-d operands give the standard m×k by k×n product;
    extra leading axes are treated as a stack of matrices (numpy semantics)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ _swap(b.data), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(_swap(a.data) @ g, b.shape))

    _record((a, b), out, rule)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    _record((a, b), out, rule)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    _record((a, b), out, rule)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    _record((a, b), out, rule)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    out = Tensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    _record((a, b), out, rule)
    return out


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * s)

    _record((a,), out, rule)
    return out


def pow_scalar(a, p: float) -> Tensor:
    """Elementwise a**p for a fixed exponent."""
    a = _as_tensor(a)
    p = float(p)
    out = Tensor(a.data ** p, requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * p * a.data ** (p - 1.0))

    _record((a,), out, rule)
    return out


# ---------------------------------------------------------------------------
# activations

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    sq = x * x
    t = np.tanh(x * (_GELU_C + (_GELU_C * _GELU_K) * sq))
    out = Tensor(0.5 * x * (1.0 + t), requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        du = _GELU_C + (3.0 * _GELU_C * _GELU_K) * sq
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    _record((a,), out, rule)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data > 0.0))

    _record((a,), out, rule)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y, requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * (1.0 - y * y))

    _record((a,), out, rule)
    return out


_ELEMENTWISE_BINARY = {"add": add, "mul": mul, "sub": sub, "scale": scale}
_ELEMENTWISE_UNARY = {"gelu": gelu, "relu": relu, "tanh": tanh}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by op name: add|mul|sub|scale take two operands, the rest one."""
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ConfigurationError(f"elementwise '{op}' needs a second operand")
        return _ELEMENTWISE_BINARY[op](a, b)
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ConfigurationError(f"elementwise '{op}' takes a single operand")
        return _ELEMENTWISE_UNARY[op](a)
    raise ConfigurationError(f"unknown elementwise op '{op}'")


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis; slices sum to 1."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))

    _record((a,), out, rule)
    return out


def layer_norm(a, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and
    shift. Fused into one tape node because it sits on every block's path."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({d},)"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv
    out = Tensor(x_hat * gamma.data + beta.data,
                 requires_grad=a.requires_grad or gamma.requires_grad or beta.requires_grad)

    def rule(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, (g * x_hat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gg = g * gamma.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * x_hat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (gg - m1 - x_hat * m2))

    _record((a, gamma, beta), out, rule)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    _record((a,), out, rule)
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]
    out = Tensor(out_data, requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape).copy())

    _record((a,), out, rule)
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    out = Tensor(out_data, requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    _record((a,), out, rule)
    return out


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    out = Tensor(a.data.transpose(axes), requires_grad=a.requires_grad)
    inverse = np.argsort(axes)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g.transpose(inverse))

    _record((a,), out, rule)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no tensors given")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            i != (axis % len(base)) and other[i] != base[i] for i in range(len(base))
        ):
            raise DimensionError(
                f"concat: shapes {parts[0].shape} and {p.shape} disagree off axis {axis}"
            )
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        requires_grad=any(p.requires_grad for p in parts),
    )
    sizes = [p.shape[axis] for p in parts]

    def rule(g: np.ndarray) -> None:
        start = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accumulate(p, g[tuple(sl)])
            start += n

    _record(tuple(parts), out, rule)
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(a.data[tuple(sl)].copy(), requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        _accumulate(a, full)

    _record((a,), out, rule)
    return out


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot expand {a.shape} to {shape}") from None
    out = Tensor(out_data, requires_grad=a.requires_grad)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))

    _record((a,), out, rule)
    return out


# ---------------------------------------------------------------------------
# convolution and pooling

_COL_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _col_indices(c: int, hp: int, wp: int, kh: int, kw: int, stride: int,
                 oh: int, ow: int) -> np.ndarray:
    """Flat gather indices into a padded [c,hp,wp] volume, one row per output
    position, one column per (channel, kernel offset). Cached per geometry."""
    key = (c, hp, wp, kh, kw, stride, oh, ow)
    idx = _COL_INDEX_CACHE.get(key)
    if idx is None:
        ci, ui, vi = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
        patch = (ci * hp * wp + ui * wp + vi).reshape(-1)          # [c*kh*kw]
        oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        origin = (oi * stride * wp + oj * stride).reshape(-1)      # [oh*ow]
        idx = origin[:, None] + patch[None, :]
        _COL_INDEX_CACHE[key] = idx
    return idx


def _conv_geometry(x_shape, w_shape, stride: int, padding: int):
    n_axes = len(x_shape)
    if n_axes not in (3, 4):
        raise DimensionError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x_shape}")
    c_in, h, w = x_shape[-3:]
    c_out, wc_in, kh, kw = w_shape
    if wc_in != c_in:
        raise DimensionError(
            f"conv2d: input channels {x_shape} disagree with kernel {w_shape}"
        )
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ConfigurationError(
            f"conv2d: non-integral output size for input {x_shape}, kernel {w_shape}, "
            f"stride {stride}, padding {padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ConfigurationError(
            f"conv2d: empty output for input {x_shape} and kernel {w_shape}"
        )
    return c_in, h, w, c_out, kh, kw, oh, ow


def conv2d(x, w, stride: int = 1, padding: int = 0, method: str = "im2col") -> Tensor:
    """2-d cross-correlation.

    x: [C_in,H,W] or [N,C_in,H,W]; w: [C_out,C_in,kh,kw]. The im2col path is
    the fast default; the naive path is a literal nested loop kept as the
    correctness oracle. Both register full backward rules.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if method not in ("im2col", "naive"):
        raise ConfigurationError(f"conv2d: unknown method '{method}'")
    c_in, h, wdt, c_out, kh, kw, oh, ow = _conv_geometry(x.shape, w.shape, stride, padding)
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    n = xb.shape[0]

    hp, wp = h + 2 * padding, wdt + 2 * padding
    if padding:
        xp = np.zeros((n, c_in, hp, wp))
        xp[:, :, padding:padding + h, padding:padding + wdt] = xb
    else:
        xp = xb

    if method == "im2col":
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]                  # [n, c, oh, ow, kh, kw]
        cols = np.ascontiguousarray(
            windows.transpose(0, 2, 3, 1, 4, 5)
        ).reshape(n, oh * ow, c_in * kh * kw)                        # [n, oh*ow, K]
        wmat = w.data.reshape(c_out, -1)                             # [c_out, K]
        out_data = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, c_out, oh, ow)
    else:
        cols = None
        out_data = np.zeros((n, c_out, oh, ow))
        for bi in range(n):
            for co in range(c_out):
                for i in range(oh):
                    for j in range(ow):
                        patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                        out_data[bi, co, i, j] = (patch * w.data[co]).sum()

    out = Tensor(out_data if batched else out_data[0],
                 requires_grad=x.requires_grad or w.requires_grad)

    def rule(g: np.ndarray) -> None:
        gb = g if batched else g[None]
        gmat = gb.reshape(n, c_out, oh * ow).transpose(0, 2, 1)      # [n, oh*ow, c_out]
        idx_l = _col_indices(c_in, hp, wp, kh, kw, stride, oh, ow)
        cols_l = cols if cols is not None else xp.reshape(n, -1)[:, idx_l]
        if w.requires_grad:
            gw = np.tensordot(gmat, cols_l, axes=([0, 1], [0, 1])).reshape(w.shape)
            _accumulate(w, gw)
        if x.requires_grad:
            wmat_l = w.data.reshape(c_out, -1)
            dcols = gmat @ wmat_l                                    # [n, oh*ow, K]
            offsets = np.arange(n) * (c_in * hp * wp)
            flat = (idx_l[None, :, :] + offsets[:, None, None]).reshape(-1)
            acc = np.bincount(flat, weights=dcols.reshape(-1),
                              minlength=n * c_in * hp * wp)
            gx = acc.reshape(n, c_in, hp, wp)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + wdt]
            _accumulate(x, gx if batched else gx[0])

    _record((x, w), out, rule)
    return out


def _pool_bins(size: int, out_size: int) -> list[tuple[int, int]]:
    # floor/ceil boundary rule: bin i covers [i*size//out, ceil((i+1)*size/out))
    return [
        (i * size // out_size, -(-((i + 1) * size) // out_size))
        for i in range(out_size)
    ]


def adaptive_avg_pool(x, out_h: int, out_w: int) -> Tensor:
    """Average each floor/ceil bin of the spatial grid down to out_h × out_w."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"adaptive_avg_pool: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    if out_h <= 0 or out_w <= 0:
        raise ConfigurationError(f"adaptive_avg_pool: output size {out_h}x{out_w} must be positive")
    if out_h > h or out_w > w:
        raise ConfigurationError(
            f"adaptive_avg_pool: output {out_h}x{out_w} exceeds input {h}x{w}"
        )
    rows = _pool_bins(h, out_h)
    cols = _pool_bins(w, out_w)
    lead = x.shape[:-2]
    out_data = np.empty(lead + (out_h, out_w))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out_data[..., i, j] = x.data[..., r0:r1, c0:c1].mean(axis=(-1, -2))
    out = Tensor(out_data, requires_grad=x.requires_grad)

    def rule(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[..., r0:r1, c0:c1] += g[..., i:i + 1, j:j + 1] / area
        _accumulate(x, gx)

    _record((x,), out, rule)
    return out
