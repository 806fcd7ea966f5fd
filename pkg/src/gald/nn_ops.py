"""Differentiable primitives on NCHW float64 arrays.

Every op returns ``(output, backward)``.  ``backward(grad_out)`` returns a
tuple of gradients, one per differentiable argument in call order (for
convolutions: input, kernel, bias).  Backward closures never mutate their
arguments, and accumulation runs in a fixed order so results are
bit-reproducible.

Composite modules are built on :class:`Graph`, a reverse-mode tape with a
named parameter store.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .tensor_core import ShapeError, as_tensor

BackwardFn = Callable[[np.ndarray], tuple]


# ---------------------------------------------------------------------------
# operation counting

class MacCounter:
    """Counts multiply-accumulates issued by instrumented ops.

    Only the affinity products are instrumented (:func:`batched_matmul` and
    the local attention kernel); 1x1 projections and convolutions are not.
    """

    def __init__(self) -> None:
        self.count = 0

    def add(self, macs: int) -> None:
        self.count += int(macs)

    def __repr__(self) -> str:
        return f"MacCounter(count={self.count})"


_active_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar("mac_counters", default=())


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Attach a fresh counter for the duration of the block.  Counters nest."""
    counter = MacCounter()
    token = _active_counters.set(_active_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _active_counters.reset(token)


def record_macs(macs: int) -> None:
    for counter in _active_counters.get():
        counter.add(macs)


# ---------------------------------------------------------------------------
# convolution

@dataclass(frozen=True)
class ConvWeights:
    kernel: np.ndarray                 # (c_out, c_in // groups, kh, kw)
    bias: Optional[np.ndarray] = None  # (c_out,)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        c_out = self.kernel.shape[0]
        if self.groups < 1 or c_out % self.groups:
            raise ShapeError(f"c_out={c_out} not divisible by groups={self.groups}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"bad stride/dilation/padding {self.stride}/{self.dilation}/{self.padding}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({c_out},)")


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, w: ConvWeights) -> tuple[np.ndarray, BackwardFn]:
    """Zero-padded grouped cross-correlation (no kernel flip)."""
    x = as_tensor(x)
    n, c, h, wd = x.shape
    c_out, cig, kh, kw = w.kernel.shape
    g, s, d, p = w.groups, w.stride, w.dilation, w.padding
    if c != cig * g:
        raise ShapeError(f"input has {c} channels, kernel expects {cig} x {g} groups")
    ho = conv_output_size(h, kh, s, p, d)
    wo = conv_output_size(wd, kw, s, p, d)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"non-positive output size {ho}x{wo} for input {h}x{wd}")

    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    xg = xp.reshape(n, g, cig, h + 2 * p, wd + 2 * p)
    cog, taps, m = c_out // g, cig * kh * kw, n * ho * wo
    kmat = w.kernel.reshape(g, cog, taps)

    def window(i, j):
        return (slice(None), slice(None), slice(None),
                slice(i * d, i * d + s * (ho - 1) + 1, s),
                slice(j * d, j * d + s * (wo - 1) + 1, s))

    # im2col: cols[group, (ci, ky, kx), (n, yo, xo)]
    patches = np.empty((n, g, cig, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patches[:, :, :, i, j] = xg[window(i, j)]
    cols = patches.transpose(1, 2, 3, 4, 0, 5, 6).reshape(g, taps, m)
    out = (kmat @ cols).reshape(g, cog, n, ho, wo).transpose(2, 0, 1, 3, 4).reshape(n, c_out, ho, wo)
    if w.bias is not None:
        out += w.bias[None, :, None, None]

    def backward(grad):
        gmat = grad.reshape(n, g, cog, ho, wo).transpose(1, 2, 0, 3, 4).reshape(g, cog, m)
        gk = (gmat @ cols.transpose(0, 2, 1)).reshape(w.kernel.shape)
        gpatches = (kmat.transpose(0, 2, 1) @ gmat).reshape(g, cig, kh, kw, n, ho, wo)
        gpatches = gpatches.transpose(4, 0, 1, 2, 3, 5, 6)
        gxp = np.zeros_like(xg)
        for i in range(kh):
            for j in range(kw):
                gxp[window(i, j)] += gpatches[:, :, :, i, j]
        gx = gxp.reshape(n, c, h + 2 * p, wd + 2 * p)
        if p:
            gx = gx[:, :, p:p + h, p:p + wd]
        if w.bias is None:
            return gx, gk, None
        return gx, gk, grad.sum(axis=(0, 2, 3))

    return out, backward


def depthwise_conv2d(x, w: ConvWeights) -> tuple[np.ndarray, BackwardFn]:
    """Per-channel convolution; requires ``groups == c_in == c_out``."""
    x = as_tensor(x)
    c = x.shape[1]
    if w.groups != c or w.kernel.shape[0] != c or w.kernel.shape[1] != 1:
        raise ShapeError(f"depthwise conv needs kernel (c, 1, kh, kw) and groups=c={c}; "
                         f"got kernel {w.kernel.shape}, groups={w.groups}")
    return conv2d(x, w)


# ---------------------------------------------------------------------------
# resampling (all separable linear maps: out = R_h @ x @ R_w^T)

@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, source coordinate clamped to [0, n_in - 1]
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    # window i spans [floor(i*n_in/n_out), floor((i+1)*n_in/n_out))
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = (i * n_in) // n_out, ((i + 1) * n_in) // n_out
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def _separable(x, rh: np.ndarray, rw: np.ndarray) -> tuple[np.ndarray, BackwardFn]:
    out = rh @ x @ rw.T

    def backward(grad):
        return (rh.T @ grad @ rw,)

    return out, backward


def bilinear_resize(x, out_h: int, out_w: int) -> tuple[np.ndarray, BackwardFn]:
    """Bilinear resampling in either direction (no anti-aliasing)."""
    x = as_tensor(x)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    return _separable(x, _bilinear_matrix(h, out_h), _bilinear_matrix(w, out_w))


def bilinear_upsample(x, out_h: int, out_w: int) -> tuple[np.ndarray, BackwardFn]:
    x = as_tensor(x)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    if out_h < x.shape[2] or out_w < x.shape[3]:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {x.shape[2:]}")
    return bilinear_resize(x, out_h, out_w)


def avg_pool_adaptive(x, bins: int) -> tuple[np.ndarray, BackwardFn]:
    x = as_tensor(x)
    h, w = x.shape[2:]
    if bins < 1 or bins > min(h, w):
        raise ShapeError(f"bins={bins} must lie in [1, {min(h, w)}]")
    return _separable(x, _pool_matrix(h, bins), _pool_matrix(w, bins))


def avg_pool(x, factor: int) -> tuple[np.ndarray, BackwardFn]:
    """Non-overlapping ``factor`` x ``factor`` average pooling."""
    x = as_tensor(x)
    h, w = x.shape[2:]
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"pool factor {factor} does not divide {h}x{w}")
    return _separable(x, _pool_matrix(h, h // factor), _pool_matrix(w, w // factor))


# ---------------------------------------------------------------------------
# pointwise and reductions

def sigmoid(x) -> tuple[np.ndarray, BackwardFn]:
    x = np.asarray(x, dtype=np.float64)
    # split branches keep exp() from overflowing
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(grad):
        return (grad * y * (1.0 - y),)

    return y, backward


def relu(x) -> tuple[np.ndarray, BackwardFn]:
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0

    def backward(grad):
        return (grad * mask,)

    return x * mask, backward


def softmax_lastdim(x) -> tuple[np.ndarray, BackwardFn]:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def backward(grad):
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)

    return y, backward


def batched_matmul(a, b) -> tuple[np.ndarray, BackwardFn]:
    """(B, m, p) @ (B, p, q); records B*m*p*q MACs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"cannot batch-multiply {a.shape} by {b.shape}")
    bsz, m, p = a.shape
    record_macs(bsz * m * p * b.shape[2])
    out = a @ b

    def backward(grad):
        return grad @ b.transpose(0, 2, 1), a.transpose(0, 2, 1) @ grad

    return out, backward


def add(a, b) -> tuple[np.ndarray, BackwardFn]:
    return a + b, lambda grad: (grad, grad)


def mul(a, b) -> tuple[np.ndarray, BackwardFn]:
    """Element-wise product of equal-shape arrays."""
    if a.shape != b.shape:
        raise ShapeError(f"element-wise product of {a.shape} and {b.shape}")
    return a * b, lambda grad: (grad * b, grad * a)


def scale(a, factor: float) -> tuple[np.ndarray, BackwardFn]:
    return a * factor, lambda grad: (grad * factor,)


def concat(*xs) -> tuple[np.ndarray, BackwardFn]:
    """Channel concatenation of any number of NCHW arrays."""
    ref = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0],) + x.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"cannot concat {ref} and {x.shape}: n/h/w differ")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(grad):
        return tuple(grad[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return np.concatenate(xs, axis=1), backward


def reshape(x, shape) -> tuple[np.ndarray, BackwardFn]:
    orig = x.shape
    return x.reshape(shape), lambda grad: (grad.reshape(orig),)


def to_rows(x) -> tuple[np.ndarray, BackwardFn]:
    """(n, c, h, w) -> (n, h*w, c): one row per spatial position."""
    n, c, h, w = x.shape

    def backward(grad):
        return (grad.transpose(0, 2, 1).reshape(n, c, h, w),)

    return x.reshape(n, c, h * w).transpose(0, 2, 1), backward


def from_rows(x, h: int, w: int) -> tuple[np.ndarray, BackwardFn]:
    """Inverse of :func:`to_rows`."""
    n, _, c = x.shape

    def backward(grad):
        return (grad.reshape(n, c, h * w).transpose(0, 2, 1),)

    return x.transpose(0, 2, 1).reshape(n, c, h, w), backward


# ---------------------------------------------------------------------------
# composition

def _conv_op(x, kernel, bias=None, *, stride=1, padding=0, dilation=1, groups=1):
    out, back = conv2d(x, ConvWeights(kernel, bias, stride, padding, dilation, groups))
    if bias is None:
        return out, lambda grad: back(grad)[:2]
    return out, back


class Tape:
    """Reverse-mode record of primitive applications.  Nodes are ints."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self._ops: list[tuple[int, tuple[int, ...], BackwardFn]] = []

    def leaf(self, value) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def apply(self, fn, *nodes: int, **kwargs) -> int:
        out, back = fn(*(self.values[i] for i in nodes), **kwargs)
        idx = self.leaf(out)
        self._ops.append((idx, nodes, back))
        return idx

    def backward(self, node: int, grad) -> list[Optional[np.ndarray]]:
        grads: list[Optional[np.ndarray]] = [None] * len(self.values)
        grads[node] = np.asarray(grad, dtype=np.float64)
        for out, ins, back in reversed(self._ops):
            g = grads[out]
            if g is None:
                continue
            for i, gi in zip(ins, back(g)):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        return grads


class Graph:
    """A :class:`Tape` plus a named parameter store.

    Parameters are looked up lazily by name, so a module only touches the
    entries it needs.  Gradients for untouched parameters come back as zeros.
    """

    def __init__(self, params: Mapping[str, np.ndarray]) -> None:
        self.tape = Tape()
        self.params = params
        self._param_nodes: dict[str, int] = {}

    def input(self, value) -> int:
        return self.tape.leaf(value)

    def param(self, name: str) -> int:
        if name not in self._param_nodes:
            if name not in self.params:
                raise KeyError(f"missing parameter {name!r}")
            self._param_nodes[name] = self.tape.leaf(self.params[name])
        return self._param_nodes[name]

    def value(self, node: int) -> np.ndarray:
        return self.tape.values[node]

    def op(self, fn, *nodes: int, **kwargs) -> int:
        return self.tape.apply(fn, *nodes, **kwargs)

    def conv(self, x: int, name: str, **conv_kwargs) -> int:
        nodes = [x, self.param(name + ".w")]
        if name + ".b" in self.params:
            nodes.append(self.param(name + ".b"))
        return self.op(_conv_op, *nodes, **conv_kwargs)

    def gradients(self, out: int, grad, inputs: Sequence[int]):
        grads = self.tape.backward(out, grad)
        gin = tuple(np.zeros_like(self.value(i)) if grads[i] is None else grads[i] for i in inputs)
        gparams = {}
        for name, value in self.params.items():
            node = self._param_nodes.get(name)
            g = None if node is None else grads[node]
            gparams[name] = np.zeros_like(value) if g is None else g
        return gin, gparams


def run_graph(build, inputs: Sequence[np.ndarray], params: Mapping[str, np.ndarray]):
    """Evaluate ``build(graph, *input_nodes) -> output_node``.

    Returns ``(output, backward)`` where ``backward(grad)`` yields
    ``(*input_grads, param_grads)`` with ``param_grads`` keyed like ``params``.
    """
    graph = Graph(params)
    nodes = [graph.input(as_tensor(x)) for x in inputs]
    out = build(graph, *nodes)

    def backward(grad):
        gin, gparams = graph.gradients(out, grad, nodes)
        return (*gin, gparams)

    return graph.value(out), backward


def init_params(shapes: Mapping[str, tuple], seed: int) -> dict[str, np.ndarray]:
    """Seeded uniform(-s, s) init with ``s = 1/sqrt(fan_in)``.

    ``shapes`` maps ``<layer>.w`` / ``<layer>.b`` names to shapes; a bias
    borrows the fan-in of its layer's kernel.  Draws happen in key order
    from a single stream.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            kshape = shapes[name[:-2] + ".w"]
            fan_in = int(np.prod(kshape[1:]))
        else:
            fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params
