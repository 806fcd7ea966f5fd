"""Global aggregation heads: PSP, ASPP, non-local and grouped compact non-local.

Each head maps ``(n, c, h, w) -> (n, c, h, w)``.  Heads can run on a grid
average-pooled by ``internal_downsample`` and bilinearly upsampled back.

Parameter names (kernels ``.w``, biases ``.b``) for ``c`` channels and
``c' = reduced_channels``:

* psp:      ``psp{i}.w`` (c', c, 1, 1) per bin, ``fuse.w`` (c, c + nb*c', 1, 1), ``fuse.b``
* aspp:     ``aspp_1x1.w`` (c', c, 1, 1), ``aspp{i}.w`` (c', c, 3, 3) per rate,
            ``aspp_pool.w`` (c', c, 1, 1), ``fuse.w`` (c, (nr + 2)*c', 1, 1), ``fuse.b``
* nonlocal: ``theta.w``, ``phi.w``, ``g.w`` (c', c, 1, 1), ``out.w`` (c, c', 1, 1)
* cgnl:     as nonlocal but grouped: ``theta.w`` (c', c/G, 1, 1), ``out.w`` (c, c'/G, 1, 1)

Attention heads carry no biases, so a zero value projection leaves only
the residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn_ops as ops
from .nn_ops import Graph, init_params, run_graph
from .tensor_core import ShapeError

GA_KINDS = ("psp", "aspp", "nonlocal", "cgnl")


@dataclass(frozen=True)
class GaConfig:
    kind: str = "nonlocal"
    reduced_channels: int = 8
    psp_bins: tuple[int, ...] = (1, 2, 3, 6)
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    cgnl_groups: int = 1
    internal_downsample: Optional[int] = None  # None: 2 for attention heads, 1 for psp/aspp

    def __post_init__(self):
        if self.kind not in GA_KINDS:
            raise ValueError(f"unknown GA kind {self.kind!r}; expected one of {GA_KINDS}")
        if self.reduced_channels < 1:
            raise ValueError("reduced_channels must be positive")
        if self.internal_downsample not in (None, 1, 2):
            raise ValueError(f"internal_downsample must be 1 or 2, got {self.internal_downsample}")
        if self.cgnl_groups < 1:
            raise ValueError("cgnl_groups must be positive")
        if any(r < 1 for r in self.aspp_rates):
            raise ValueError(f"aspp rates must be >= 1, got {self.aspp_rates}")

    @property
    def downsample(self) -> int:
        if self.internal_downsample is not None:
            return self.internal_downsample
        return 2 if self.kind in ("nonlocal", "cgnl") else 1


def ga_param_shapes(cfg: GaConfig, channels: int, prefix: str = "") -> dict[str, tuple]:
    c, cr = channels, cfg.reduced_channels
    if cr > c:
        raise ValueError(f"reduced_channels {cr} exceeds input channels {c}")
    shapes: dict[str, tuple] = {}
    if cfg.kind == "psp":
        for i, _ in enumerate(cfg.psp_bins):
            shapes[f"psp{i}.w"] = (cr, c, 1, 1)
        shapes["fuse.w"] = (c, c + len(cfg.psp_bins) * cr, 1, 1)
        shapes["fuse.b"] = (c,)
    elif cfg.kind == "aspp":
        shapes["aspp_1x1.w"] = (cr, c, 1, 1)
        for i, _ in enumerate(cfg.aspp_rates):
            shapes[f"aspp{i}.w"] = (cr, c, 3, 3)
        shapes["aspp_pool.w"] = (cr, c, 1, 1)
        shapes["fuse.w"] = (c, (len(cfg.aspp_rates) + 2) * cr, 1, 1)
        shapes["fuse.b"] = (c,)
    else:
        groups = cfg.cgnl_groups if cfg.kind == "cgnl" else 1
        if c % groups or cr % groups:
            raise ShapeError(f"channels {c} and reduced {cr} must both divide by groups={groups}")
        for name in ("theta", "phi", "g"):
            shapes[f"{name}.w"] = (cr, c // groups, 1, 1)
        shapes["out.w"] = (c, cr // groups, 1, 1)
    return {prefix + k: v for k, v in shapes.items()}


def init_ga_params(cfg: GaConfig, channels: int, seed: int = 0, prefix: str = "") -> dict[str, np.ndarray]:
    return init_params(ga_param_shapes(cfg, channels, prefix), seed)


# ---------------------------------------------------------------------------
# graph builders (shared with ld_modules and the toy model)

def _resampled(g: Graph, x: int, factor: int, body) -> int:
    if factor == 1:
        return body(x)
    h, w = g.value(x).shape[2:]
    if h % factor or w % factor:
        raise ShapeError(f"internal downsample {factor} does not divide {h}x{w}")
    y = body(g.op(ops.avg_pool, x, factor=factor))
    return g.op(ops.bilinear_upsample, y, out_h=h, out_w=w)


def _psp(g: Graph, x: int, cfg: GaConfig, p: str) -> int:
    h, w = g.value(x).shape[2:]
    for b in cfg.psp_bins:
        if b < 1 or b > min(h, w):
            raise ShapeError(f"psp bin {b} does not fit a {h}x{w} grid")
    branches = [x]
    for i, b in enumerate(cfg.psp_bins):
        pooled = g.op(ops.avg_pool_adaptive, x, bins=b)
        proj = g.conv(pooled, f"{p}psp{i}")
        branches.append(g.op(ops.bilinear_upsample, proj, out_h=h, out_w=w))
    return g.conv(g.op(ops.concat, *branches), f"{p}fuse")


def _aspp(g: Graph, x: int, cfg: GaConfig, p: str) -> int:
    h, w = g.value(x).shape[2:]
    branches = [g.conv(x, f"{p}aspp_1x1")]
    for i, rate in enumerate(cfg.aspp_rates):
        # off-centre taps would only ever read zero padding
        if rate >= min(h, w):
            raise ShapeError(f"aspp rate {rate} too large for a {h}x{w} grid")
        branches.append(g.conv(x, f"{p}aspp{i}", padding=rate, dilation=rate))
    pooled = g.conv(g.op(ops.avg_pool_adaptive, x, bins=1), f"{p}aspp_pool")
    branches.append(g.op(ops.bilinear_upsample, pooled, out_h=h, out_w=w))
    return g.conv(g.op(ops.concat, *branches), f"{p}fuse")


def attend_dense(g: Graph, q: int, k: int, v: int) -> int:
    """softmax(Q K^T) V over all positions of an NCHW grid."""
    n, cr, h, w = g.value(q).shape
    q_rows = g.op(ops.to_rows, q)                       # (n, N, c')
    k_cols = g.op(ops.reshape, k, shape=(n, cr, h * w))  # (n, c', N)
    logits = g.op(ops.batched_matmul, q_rows, k_cols)
    affinity = g.op(ops.softmax_lastdim, logits)
    out = g.op(ops.batched_matmul, affinity, g.op(ops.to_rows, v))
    return g.op(ops.from_rows, out, h=h, w=w)


def _nonlocal(g: Graph, x: int, cfg: GaConfig, p: str) -> int:
    def body(xd):
        q, k, v = (g.conv(xd, f"{p}{name}") for name in ("theta", "phi", "g"))
        return g.conv(attend_dense(g, q, k, v), f"{p}out")

    return g.op(ops.add, x, _resampled(g, x, cfg.downsample, body))


def attend_grouped_linear(g: Graph, q: int, k: int, v: int, groups: int) -> int:
    """Per channel group, flatten (channel, space) to length L and return q * (k . v) / L.

    This is the dot-product kernel of compact generalized non-local, evaluated
    right-to-left so the cost is linear in the number of positions.
    """
    n, cr, h, w = g.value(q).shape
    if cr % groups:
        raise ShapeError(f"{cr} channels not divisible by groups={groups}")
    length = (cr // groups) * h * w
    shape_col = (n * groups, length, 1)
    q_col = g.op(ops.reshape, q, shape=shape_col)
    k_row = g.op(ops.reshape, k, shape=(n * groups, 1, length))
    v_col = g.op(ops.reshape, v, shape=shape_col)
    stat = g.op(ops.scale, g.op(ops.batched_matmul, k_row, v_col), factor=1.0 / length)
    out = g.op(ops.batched_matmul, q_col, stat)
    return g.op(ops.reshape, out, shape=(n, cr, h, w))


def _cgnl(g: Graph, x: int, cfg: GaConfig, p: str) -> int:
    c = g.value(x).shape[1]
    groups = cfg.cgnl_groups
    if c % groups:
        raise ShapeError(f"{c} channels not divisible by cgnl_groups={groups}")

    def body(xd):
        q, k, v = (g.conv(xd, f"{p}{name}", groups=groups) for name in ("theta", "phi", "g"))
        return g.conv(attend_grouped_linear(g, q, k, v, groups), f"{p}out", groups=groups)

    return g.op(ops.add, x, _resampled(g, x, cfg.downsample, body))


def build_ga(g: Graph, x: int, cfg: GaConfig, prefix: str = "") -> int:
    if cfg.kind in ("psp", "aspp"):
        inner = _psp if cfg.kind == "psp" else _aspp
        return _resampled(g, x, cfg.downsample, lambda xd: inner(g, xd, cfg, prefix))
    if cfg.kind == "nonlocal":
        return _nonlocal(g, x, cfg, prefix)
    return _cgnl(g, x, cfg, prefix)


# ---------------------------------------------------------------------------
# public entry points: (x, cfg, params) -> (X_g, backward)
# backward(grad) -> (grad_x, {param name: grad})

def _run_head(kind: str, x, cfg: GaConfig, params):
    if cfg.kind != kind:
        raise ValueError(f"config is for {cfg.kind!r}, not {kind!r}")
    return run_graph(lambda g, xn: build_ga(g, xn, cfg), [x], params)


def ga_psp(x, cfg: GaConfig, params):
    return _run_head("psp", x, cfg, params)


def ga_aspp(x, cfg: GaConfig, params):
    return _run_head("aspp", x, cfg, params)


def ga_nonlocal(x, cfg: GaConfig, params):
    return _run_head("nonlocal", x, cfg, params)


def ga_cgnl(x, cfg: GaConfig, params):
    return _run_head("cgnl", x, cfg, params)


def ga_forward(x, cfg: GaConfig, params):
    return run_graph(lambda g, xn: build_ga(g, xn, cfg), [x], params)


def dense_attention(q, k, v):
    """Dense softmax attention on projected NCHW features; backward -> (gq, gk, gv, {})."""
    return run_graph(attend_dense, [q, k, v], {})
