"""Brute-force references and finite-difference gradient checking.

Nothing here calls into the kernels it is used to check; the references
are plain scalar loops over Python floats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

MAX_ORACLE_POSITIONS = 64


class OracleRefusal(ValueError):
    """Problem too large for a brute-force reference."""


def _matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w.reshape(w.shape[0], -1) if w.ndim == 4 else w


def dense_attention_oracle(x, w_theta, w_phi, w_g) -> np.ndarray:
    """Non-local attention with an explicit N x N affinity, in scalar loops.

    ``x`` is (n, c, h, w); the projections are (c', c) or (c', c, 1, 1).
    Returns ``softmax(X_theta X_phi^T) X_g`` laid out as (n, c', h, w).
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    npos = h * w
    if npos > MAX_ORACLE_POSITIONS:
        raise OracleRefusal(f"{npos} positions exceeds the oracle limit of {MAX_ORACLE_POSITIONS}")
    wt, wp, wv = (_matrix(m).tolist() for m in (w_theta, w_phi, w_g))
    cr = len(wt)
    out = np.zeros((n, len(wv), h, w))
    for b in range(n):
        feats = [[float(x[b, ch, i // w, i % w]) for ch in range(c)] for i in range(npos)]

        def project(weights, vec):
            return [sum(weights[o][ch] * vec[ch] for ch in range(c)) for o in range(len(weights))]

        theta = [project(wt, f) for f in feats]
        phi = [project(wp, f) for f in feats]
        val = [project(wv, f) for f in feats]
        for i in range(npos):
            logits = [sum(theta[i][o] * phi[j][o] for o in range(cr)) for j in range(npos)]
            top = max(logits)
            expo = [math.exp(v - top) for v in logits]
            total = sum(expo)
            for o in range(len(wv)):
                acc = 0.0
                for j in range(npos):
                    acc += expo[j] / total * val[j][o]
                out[b, o, i // w, i % w] = acc
    return out


def naive_conv_oracle(x, w) -> np.ndarray:
    """Direct loop evaluation of zero-padded grouped cross-correlation.

    ``w`` is any object with ``kernel``, ``bias``, ``stride``, ``padding``,
    ``dilation`` and ``groups`` attributes.
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, wd = x.shape
    kernel = np.asarray(w.kernel, dtype=np.float64)
    c_out, cig, kh, kw = kernel.shape
    s, p, d, g = w.stride, w.padding, w.dilation, w.groups
    if c != cig * g or c_out % g:
        raise ValueError(f"channels {c} incompatible with kernel {kernel.shape} and groups {g}")
    ho = (h + 2 * p - d * (kh - 1) - 1) // s + 1
    wo = (wd + 2 * p - d * (kw - 1) - 1) // s + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive output size {ho}x{wo}")
    per_group = c_out // g
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            grp = o // per_group
            for yo in range(ho):
                for xo in range(wo):
                    acc = 0.0 if w.bias is None else float(w.bias[o])
                    for ci in range(cig):
                        for ky in range(kh):
                            yi = yo * s - p + ky * d
                            if yi < 0 or yi >= h:
                                continue
                            for kx in range(kw):
                                xi = xo * s - p + kx * d
                                if 0 <= xi < wd:
                                    acc += float(kernel[o, ci, ky, kx]) * float(x[b, grp * cig + ci, yi, xi])
                    out[b, o, yo, xo] = acc
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`` per element."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective while perturbing element {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


@dataclass
class TensorCheck:
    max_rel_error: float
    max_abs_error: float
    argmax: tuple


@dataclass
class GradReport:
    tol: float
    checks: dict[str, TensorCheck] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def failures(self) -> list[str]:
        return [name for name, c in self.checks.items() if c.max_rel_error >= self.tol]

    def lines(self) -> list[str]:
        return [f"{name}: max_rel={c.max_rel_error:.3e} max_abs={c.max_abs_error:.3e} at {c.argmax}"
                for name, c in self.checks.items()]


def compare_gradients(analytic, numeric, floor: float = 1e-3) -> TensorCheck:
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero gradients, where finite differences are pure
    round-off, from dominating the relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    nmr = np.asarray(numeric, dtype=np.float64)
    if a.shape != nmr.shape:
        raise ValueError(f"gradient shape {a.shape} != expected {nmr.shape}")
    if a.size == 0:
        return TensorCheck(0.0, 0.0, ())
    diff = np.abs(a - nmr)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(nmr)), floor)
    idx = np.unravel_index(int(np.argmax(rel)), a.shape)
    return TensorCheck(float(rel.max()), float(diff.max()), tuple(int(i) for i in idx))


def gradcheck(op, inputs: Sequence, params: Optional[Mapping[str, np.ndarray]] = None,
              eps: float = 1e-5, tol: float = 1e-6, cotangent_seed: Optional[int] = None,
              names: Optional[Sequence[str]] = None) -> GradReport:
    """Check ``op``'s backward against central differences of a scalarised output.

    Without ``params``: ``op(*inputs) -> (out, backward)`` and ``backward(g)``
    yields one gradient per input.  With ``params``: ``op(*inputs, params)``
    and ``backward(g)`` yields ``(*input_grads, {name: grad})``.

    The scalar is ``sum(cot * out)`` with ``cot`` all ones, or uniform
    random from ``cotangent_seed`` when given.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    params = None if params is None else {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]

    def call(xs, ps):
        return op(*xs, ps) if ps is not None else op(*xs)

    out, backward = call(inputs, params)
    out = np.asarray(out, dtype=np.float64)
    if cotangent_seed is None:
        cot = np.ones_like(out)
    else:
        cot = np.random.default_rng(cotangent_seed).uniform(-1.0, 1.0, size=out.shape)
    grads = backward(cot)

    report = GradReport(tol=tol)
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            xs = list(inputs)
            xs[i] = xi
            return float(np.sum(cot * call(xs, params)[0]))
        report.checks[names[i]] = compare_gradients(grads[i], finite_diff_grad(f, x, eps))
    if params is not None:
        gparams = grads[len(inputs)]
        for name, value in params.items():
            def f(pv, name=name):
                ps = dict(params)
                ps[name] = pv
                return float(np.sum(cot * call(inputs, ps)[0]))
            report.checks[name] = compare_gradients(gparams[name], finite_diff_grad(f, value, eps))
    return report
