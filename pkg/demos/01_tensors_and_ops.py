"""
Tensors, ops and the tape
=========================

Tensors are plain float64 NCHW arrays. Every op returns its output plus a
closure that maps an upstream gradient to input gradients.
"""
import numpy as np

from gald import nn_ops as ops
from gald.nn_ops import ConvWeights, Graph, count_macs, init_params
from gald.tensor_core import create, from_bytes, to_bytes

x = create((1, 2, 4, 4), "seeded_uniform", seed=0, lo=-1, hi=1)
print("input", x.shape, x.dtype)

# a 3x3 convolution and its backward
w = ConvWeights(create((3, 2, 3, 3), "seeded_uniform", seed=1), bias=np.zeros(3), padding=1)
y, back = ops.conv2d(x, w)
gx, gk, gb = back(np.ones_like(y))
print("conv out", y.shape, "| grad shapes", gx.shape, gk.shape, gb.shape)

# the binary file format round-trips bit for bit
assert from_bytes(to_bytes(y)).tobytes() == y.tobytes()

# only the matmul-style kernels report multiply-accumulates
with count_macs() as c:
    ops.batched_matmul(np.ones((2, 3, 4)), np.ones((2, 4, 5)))
print("batched matmul MACs:", c.count)

# the tape: named parameters, forward by construction, reverse for gradients
params = init_params({"l.w": (3, 2, 1, 1), "l.b": (3,)}, seed=2)
g = Graph(params)
xin = g.input(x)
out = g.op(ops.relu, g.conv(xin, "l"))
(gx,), grads = g.gradients(out, np.ones_like(g.value(out)), [xin])
print("parameter grads:", {k: v.shape for k, v in grads.items()})
