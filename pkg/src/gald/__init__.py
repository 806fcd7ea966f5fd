"""Global aggregation and local distribution (GALD) heads in NumPy.

Submodules
----------
tensor_core    NCHW float64 tensors, comparison, binary file format
nn_ops         differentiable primitives, MAC counter, reverse-mode tape
ga_heads       PSP, ASPP, non-local and grouped compact non-local heads
ld_modules     LDv1 mask, LDv2 local attention, GA/LD arrangements
oracles        brute-force references and finite-difference gradcheck
metrics        mIoU and boundary F-score
toy_pipeline   synthetic segmentation task, OHEM loss, SGD training
bench_harness  MAC cost model, timing sweeps, scaling-exponent fits
"""
from .ga_heads import GaConfig, ga_aspp, ga_cgnl, ga_nonlocal, ga_psp
from .ld_modules import (
    GaldConfig, Ldv1Config, Ldv2Config, gald_forward, ldv1_apply, ldv1_mask,
    ldv2_forward, sample_neighbors,
)
from .nn_ops import ConvWeights, MacCounter, count_macs

__version__ = "0.1.0"
