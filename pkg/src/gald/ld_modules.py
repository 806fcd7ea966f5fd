"""Local distribution modules and the GA/LD arrangements.

LDv1 predicts a per-channel, per-position sigmoid mask from the aggregated
features on a grid downsampled by ``d`` and applies it residually:
``X_gald = M * X_g + X_g``.

LDv2 replaces the mask with attention restricted to ``k x k`` neighbours
sampled with dilation ``r``.  Queries, keys and values are 1x1 projections
of ``concat(X_g, X_l)``; the attended features are projected back to ``c``
channels, concatenated with ``X_l`` and fused by a 1x1 conv.

Parameter names (``c`` input channels, ``c'`` reduced):

* LDv1 depthwise strategy: ``dw{i}.w`` (c, 1, 3, 3), one per stride-2 layer
* LDv2: ``theta.w``/``phi.w``/``g.w`` (c', 2c, 1, 1), ``proj.w`` (c, c', 1, 1),
  ``fuse.w`` (c, 2c, 1, 1), ``fuse.b`` (c,)
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from . import nn_ops as ops
from .ga_heads import GaConfig, build_ga, ga_param_shapes
from .nn_ops import Graph, init_params, record_macs, run_graph
from .tensor_core import ShapeError, as_tensor

LDV1_STRATEGIES = ("depthwise_conv", "bilinear", "avg_pool")
BORDER_MODES = ("masked_softmax", "zero_pad_keys")
ARRANGEMENTS = ("gald", "ldga", "parallel")


@dataclass(frozen=True)
class Ldv1Config:
    downsample_ratio: int = 8
    strategy: str = "depthwise_conv"
    stack_depth: Optional[int] = None  # derived from the ratio when None

    def __post_init__(self):
        if self.strategy not in LDV1_STRATEGIES:
            raise ValueError(f"unknown LDv1 strategy {self.strategy!r}; expected one of {LDV1_STRATEGIES}")
        d = self.downsample_ratio
        if d < 1:
            raise ValueError("downsample_ratio must be positive")
        if self.strategy == "depthwise_conv":
            if d & (d - 1):
                raise ValueError(f"depthwise strategy needs a power-of-two ratio, got {d}")
            if self.stack_depth is not None and 2 ** self.stack_depth != d:
                raise ValueError(f"{self.stack_depth} stride-2 layers give ratio {2 ** self.stack_depth}, not {d}")

    @property
    def depth(self) -> int:
        if self.strategy != "depthwise_conv":
            return 0
        return self.downsample_ratio.bit_length() - 1


@dataclass(frozen=True)
class Ldv2Config:
    kernel: int = 5
    dilation: int = 3
    reduced_channels: int = 8
    border_mode: str = "masked_softmax"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.reduced_channels < 1:
            raise ValueError("reduced_channels must be positive")
        if self.border_mode not in BORDER_MODES:
            raise ValueError(f"unknown border mode {self.border_mode!r}; expected one of {BORDER_MODES}")


LdConfig = Union[Ldv1Config, Ldv2Config]


def ld_param_shapes(cfg: Optional[LdConfig], channels: int, prefix: str = "") -> dict[str, tuple]:
    c = channels
    shapes: dict[str, tuple] = {}
    if isinstance(cfg, Ldv1Config):
        for i in range(cfg.depth):
            shapes[f"dw{i}.w"] = (c, 1, 3, 3)
    elif isinstance(cfg, Ldv2Config):
        cr = cfg.reduced_channels
        for name in ("theta", "phi", "g"):
            shapes[f"{name}.w"] = (cr, 2 * c, 1, 1)
        shapes["proj.w"] = (c, cr, 1, 1)
        shapes["fuse.w"] = (c, 2 * c, 1, 1)
        shapes["fuse.b"] = (c,)
    elif cfg is not None:
        raise TypeError(f"expected Ldv1Config or Ldv2Config, got {type(cfg).__name__}")
    return {prefix + k: v for k, v in shapes.items()}


def init_ld_params(cfg: LdConfig, channels: int, seed: int = 0, prefix: str = "") -> dict[str, np.ndarray]:
    return init_params(ld_param_shapes(cfg, channels, prefix), seed)


# ---------------------------------------------------------------------------
# LDv1

def _ldv1_mask(g: Graph, xg: int, cfg: Ldv1Config, p: str) -> int:
    c, h, w = g.value(xg).shape[1:]
    d = cfg.downsample_ratio
    if h % d or w % d:
        raise ShapeError(f"downsample ratio {d} does not divide {h}x{w}")
    if cfg.strategy == "depthwise_conv":
        y = xg
        for i in range(cfg.depth):
            y = g.conv(y, f"{p}dw{i}", stride=2, padding=1, groups=c)
    elif cfg.strategy == "bilinear":
        y = g.op(ops.bilinear_resize, xg, out_h=h // d, out_w=w // d)
    else:
        y = g.op(ops.avg_pool, xg, factor=d)
    return g.op(ops.sigmoid, g.op(ops.bilinear_upsample, y, out_h=h, out_w=w))


def _residual_mask(xg, m):
    if xg.shape != m.shape:
        raise ShapeError(f"mask shape {m.shape} != feature shape {xg.shape}")
    return m * xg + xg, lambda grad: (grad * m + grad, grad * xg)


def ldv1_mask(x_g, cfg: Ldv1Config, params):
    """``M = sigmoid(upsample(downsample(X_g)))``; backward -> (grad_x_g, param grads)."""
    return run_graph(lambda g, xn: _ldv1_mask(g, xn, cfg, ""), [x_g], params)


def ldv1_apply(x_g, m):
    """``X_gald = M * X_g + X_g``; backward -> (grad_x_g, grad_m)."""
    return _residual_mask(as_tensor(x_g), as_tensor(m))


def _ldv1(g: Graph, xg: int, cfg: Ldv1Config, p: str) -> int:
    return g.op(_residual_mask, xg, _ldv1_mask(g, xg, cfg, p))


# ---------------------------------------------------------------------------
# neighbour sampling and local attention

def neighbor_offsets(k: int, r: int) -> list[tuple[int, int]]:
    """Offsets ``r * (dy, dx)`` for ``dy, dx`` in ``[-(k-1)/2, (k-1)/2]``, row-major."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    if r < 1:
        raise ValueError(f"dilation must be >= 1, got {r}")
    half = (k - 1) // 2
    return [(r * dy, r * dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)]


@lru_cache(maxsize=64)
def _validity_cached(offsets: tuple, h: int, w: int) -> np.ndarray:
    ys, xs = np.arange(h), np.arange(w)
    valid = np.empty((len(offsets), h, w), dtype=bool)
    for j, (dy, dx) in enumerate(offsets):
        valid[j] = ((ys + dy >= 0) & (ys + dy < h))[:, None] & ((xs + dx >= 0) & (xs + dx < w))[None, :]
    valid.flags.writeable = False
    return valid


def _validity(offsets, h: int, w: int) -> np.ndarray:
    return _validity_cached(tuple(offsets), h, w)


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def _gather(x: np.ndarray, offsets, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = _padded(x, pad)
    out = np.empty((n, len(offsets), c, h, w))
    for j, (dy, dx) in enumerate(offsets):
        out[:, j] = xp[:, :, pad + dy:pad + dy + h, pad + dx:pad + dx + w]
    return out


def sample_neighbors(x, k: int, r: int, border_mode: str = "masked_softmax"):
    """Dilated ``k x k`` neighbourhood of every position.

    Returns ``(samples, valid)`` with ``samples[n, j, c, y, x] = x[n, c, y + dy_j, x + dx_j]``
    (zero when out of bounds) and ``valid[j, y, x]`` marking in-bounds samples.
    Both border modes sample identically; they differ in how attention treats
    the padded entries.
    """
    if border_mode not in BORDER_MODES:
        raise ValueError(f"unknown border mode {border_mode!r}")
    x = as_tensor(x)
    offsets = neighbor_offsets(k, r)
    pad = r * (k - 1) // 2
    return _gather(x, offsets, pad), _validity(offsets, *x.shape[2:])


# Below this many positions one indexed gather plus two einsums is cheapest;
# above it the (n, c, K, N) buffers fall out of cache and a loop over
# shifted windows wins.  Both give the same result.
STACKED_MAX_POSITIONS = 128


@lru_cache(maxsize=64)
def _neg_mask(offsets: tuple, h: int, w: int) -> np.ndarray:
    # 0 where the neighbour exists, -inf where it falls off the grid
    mask = np.where(_validity_cached(offsets, h, w), 0.0, -np.inf)
    mask.flags.writeable = False
    return mask


def _softmax_offsets(logits, offsets, border_mode):
    """In-place softmax over axis 1 of ``(n, K, h, w)`` logits."""
    if border_mode == "masked_softmax":
        logits += _neg_mask(tuple(offsets), *logits.shape[2:])
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


@lru_cache(maxsize=64)
def _flat_index(offsets: tuple, h: int, w: int, pad: int) -> np.ndarray:
    # idx[j, y * w + x] points at (y + dy_j, x + dx_j) in the padded, flattened grid
    wp = w + 2 * pad
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    idx = np.stack([((ys + dy + pad) * wp + xs + dx + pad).ravel() for dy, dx in offsets])
    idx.flags.writeable = False
    return idx


def _attend_stacked(q, kp, vp, offsets, pad, border_mode):
    n, c, h, w = q.shape
    idx = _flat_index(tuple(offsets), h, w, pad)
    # idx is in range by construction; "clip" skips the bounds check
    sk = np.take(kp.reshape(n, c, -1), idx, axis=2, mode="clip")  # (n, c, K, N)
    sv = np.take(vp.reshape(n, c, -1), idx, axis=2, mode="clip")
    logits = np.einsum("ncp,ncjp->njp", q.reshape(n, c, h * w), sk).reshape(n, len(offsets), h, w)
    a = _softmax_offsets(logits, offsets, border_mode)
    out = np.einsum("njp,ncjp->ncp", a.reshape(n, len(offsets), h * w), sv)
    return a, out.reshape(n, c, h, w)


def _windows(offsets, pad: int, h: int, w: int) -> list:
    return [(slice(None), slice(None), slice(pad + dy, pad + dy + h), slice(pad + dx, pad + dx + w))
            for dy, dx in offsets]


def _attend_shifted(q, kp, vp, offsets, pad, border_mode):
    n, _, h, w = q.shape
    win = _windows(offsets, pad, h, w)
    logits = np.empty((n, len(win), h, w))
    for j, s in enumerate(win):
        np.einsum("ncyx,ncyx->nyx", q, kp[s], out=logits[:, j])
    a = _softmax_offsets(logits, offsets, border_mode)
    out = np.zeros_like(q)
    for j, s in enumerate(win):
        out += a[:, j, None] * vp[s]
    return a, out


def local_affinity(q, key, k: int, r: int, border_mode: str = "masked_softmax"):
    """Attention weights ``(n, K, h, w)`` of every position over its sampled neighbours."""
    q = as_tensor(q)
    sk, valid = sample_neighbors(key, k, r, border_mode)
    return _softmax_offsets(np.einsum("ncyx,njcyx->njyx", q, sk), neighbor_offsets(k, r), border_mode), valid


def local_attention(q, key, value, k: int, r: int, border_mode: str = "masked_softmax"):
    """``out(i) = sum_n softmax_n(q(i) . key(i + dr_n)) value(i + dr_n)``.

    ``q``, ``key``, ``value`` are projected NCHW features of equal shape.
    Records ``2 * n * c' * N * K`` MACs.  backward -> (grad_q, grad_key, grad_value).
    """
    q, key, value = as_tensor(q), as_tensor(key), as_tensor(value)
    if not q.shape == key.shape == value.shape:
        raise ShapeError(f"q/key/value shapes differ: {q.shape}, {key.shape}, {value.shape}")
    if border_mode not in BORDER_MODES:
        raise ValueError(f"unknown border mode {border_mode!r}")
    n, cr, h, w = q.shape
    offsets = neighbor_offsets(k, r)
    pad = r * (k - 1) // 2
    kp, vp = _padded(key, pad), _padded(value, pad)
    record_macs(2 * n * cr * h * w * len(offsets))
    attend = _attend_stacked if h * w <= STACKED_MAX_POSITIONS else _attend_shifted
    a, out = attend(q, kp, vp, offsets, pad, border_mode)

    def backward(grad):
        win = _windows(offsets, pad, h, w)
        ga = np.empty_like(a)
        for j, s in enumerate(win):
            ga[:, j] = np.einsum("ncyx,ncyx->nyx", grad, vp[s])
        glogits = a * (ga - (a * ga).sum(axis=1, keepdims=True))
        gq = np.zeros_like(q)
        gkp, gvp = np.zeros_like(kp), np.zeros_like(vp)
        for j, s in enumerate(win):
            gq += glogits[:, j, None] * kp[s]
            gkp[s] += glogits[:, j, None] * q
            gvp[s] += a[:, j, None] * grad
        inner = (slice(None), slice(None), slice(pad, pad + h), slice(pad, pad + w))
        return gq, gkp[inner], gvp[inner]

    return out, backward


# ---------------------------------------------------------------------------
# LDv2

def _ldv2_attend(g: Graph, xg: int, xl: int, cfg: Ldv2Config, p: str) -> int:
    if g.value(xg).shape != g.value(xl).shape:
        raise ShapeError(f"X_g {g.value(xg).shape} and X_l {g.value(xl).shape} differ")
    x = g.op(ops.concat, xg, xl)
    q, key, value = (g.conv(x, f"{p}{name}") for name in ("theta", "phi", "g"))
    return g.op(local_attention, q, key, value, k=cfg.kernel, r=cfg.dilation, border_mode=cfg.border_mode)


def _ldv2(g: Graph, xg: int, xl: int, cfg: Ldv2Config, p: str) -> int:
    refined = g.conv(_ldv2_attend(g, xg, xl, cfg, p), f"{p}proj")
    return g.conv(g.op(ops.concat, refined, xl), f"{p}fuse")


def ldv2_attention(x_g, x_l, cfg: Ldv2Config, params):
    """Attended features before projection and fusion, ``(n, c', h, w)``."""
    return run_graph(lambda g, a, b: _ldv2_attend(g, a, b, cfg, ""), [x_g, x_l], params)


def ldv2_forward(x_g, x_l, cfg: Ldv2Config, params):
    """backward -> (grad_x_g, grad_x_l, param grads)."""
    return run_graph(lambda g, a, b: _ldv2(g, a, b, cfg, ""), [x_g, x_l], params)


# ---------------------------------------------------------------------------
# arrangements

def _local(g: Graph, xg: int, xl: int, cfg: LdConfig, p: str) -> int:
    if isinstance(cfg, Ldv1Config):
        return _ldv1(g, xg, cfg, p)
    return _ldv2(g, xg, xl, cfg, p)


def build_gald(g: Graph, x: int, ga: GaConfig, ld: Optional[LdConfig], arrangement: str = "gald",
               prefix: str = "") -> int:
    """Head output ``X_o`` with ``2c`` channels.

    With ``ld=None`` the head is GA only: ``concat(GA(x), x)``.
    """
    if arrangement not in ARRANGEMENTS:
        raise ValueError(f"unknown arrangement {arrangement!r}; expected one of {ARRANGEMENTS}")
    pga, pld = prefix + "ga.", prefix + "ld."
    if ld is None:
        return g.op(ops.concat, build_ga(g, x, ga, pga), x)
    if arrangement == "gald":
        xg = build_ga(g, x, ga, pga)
        return g.op(ops.concat, _local(g, xg, x, ld, pld), x)
    if arrangement == "ldga":
        return g.op(ops.concat, build_ga(g, _local(g, x, x, ld, pld), ga, pga), x)
    return g.op(ops.concat, _local(g, x, x, ld, pld), build_ga(g, x, ga, pga))


def gald_param_shapes(ga: GaConfig, ld: Optional[LdConfig], channels: int, prefix: str = "") -> dict[str, tuple]:
    shapes = ga_param_shapes(ga, channels, prefix + "ga.")
    shapes.update(ld_param_shapes(ld, channels, prefix + "ld."))
    return shapes


def init_gald_params(ga: GaConfig, ld: Optional[LdConfig], channels: int, seed: int = 0) -> dict[str, np.ndarray]:
    return init_params(gald_param_shapes(ga, ld, channels), seed)


def gald_forward(x, ga: GaConfig, ld: Optional[LdConfig], arrangement: str, params):
    """``X_o`` of shape ``(n, 2c, h, w)``; backward -> (grad_x, param grads).

    * gald:     ``concat(LD(GA(x)), x)``
    * ldga:     ``concat(GA(LD(x)), x)``
    * parallel: ``concat(LD(x), GA(x))``

    LDv2 takes ``X_l = x`` throughout; where LD runs on ``x`` directly it
    also takes ``X_g = x``.
    """
    return run_graph(lambda g, xn: build_gald(g, xn, ga, ld, arrangement), [x], params)


@dataclass(frozen=True)
class GaldConfig:
    """A full head: GA choice, optional LD choice and their arrangement."""

    ga: GaConfig = GaConfig(kind="aspp")
    ld: Optional[LdConfig] = Ldv2Config()
    arrangement: str = "gald"

    def __post_init__(self):
        if self.arrangement not in ARRANGEMENTS:
            raise ValueError(f"unknown arrangement {self.arrangement!r}; expected one of {ARRANGEMENTS}")

    @property
    def label(self) -> str:
        if self.ld is None:
            return f"{self.ga.kind}"
        ld = "ldv1" if isinstance(self.ld, Ldv1Config) else "ldv2"
        return f"{self.ga.kind}+{ld}/{self.arrangement}"
