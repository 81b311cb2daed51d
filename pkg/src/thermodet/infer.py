"""Float32 reference executor: kernel dispatch, inference-mode
batchnorm, BN folding and the sequential forward pass."""

import numpy as np

from . import kernels
from .errors import DimensionError
from .graph import (
    BN_EPS,
    CONV3X3,
    DEPTHWISE3X3,
    LayerParams,
    copy_graph,
)


def relu6(x):
    return np.clip(x, 0.0, 6.0)


def batchnorm_inference(x, gamma, beta, mean, var, eps=BN_EPS):
    scale = gamma.astype(np.float64) / np.sqrt(var.astype(np.float64) + eps)
    shift = beta.astype(np.float64) - mean.astype(np.float64) * scale
    y = x * scale[:, None, None].astype(x.dtype) + shift[:, None, None].astype(x.dtype)
    return y


def fold_batchnorm(graph):
    """Fold every BN into its preceding conv; forward output is
    preserved to ~1e-5."""
    out = copy_graph(graph)
    for i, (desc, p) in enumerate(zip(out.layers, out.params)):
        if not desc.batchnorm:
            continue
        scale = p.bn_gamma.astype(np.float64) / np.sqrt(
            p.bn_var.astype(np.float64) + BN_EPS
        )
        w64 = p.w.astype(np.float64)
        if desc.kind == CONV3X3:
            w64 *= scale[:, None, None, None]
        elif desc.kind == DEPTHWISE3X3:
            w64 *= scale[:, None, None]
        else:
            w64 *= scale[:, None]
        b64 = p.bn_beta.astype(np.float64) + (
            p.b.astype(np.float64) - p.bn_mean.astype(np.float64)
        ) * scale
        out.params[i] = LayerParams(
            w=w64.astype(np.float32), b=b64.astype(np.float32)
        )
        desc.batchnorm = False
    out.validate()
    return out


def run_layer(desc, p, x):
    if desc.kind == CONV3X3:
        y = kernels.conv3x3(x, p.w, p.b, desc.stride)
    elif desc.kind == DEPTHWISE3X3:
        y = kernels.depthwise3x3(x, p.w, p.b, desc.stride)
    else:
        y = kernels.pointwise(x, p.w, p.b)
    if desc.batchnorm:
        y = batchnorm_inference(y, p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var)
    if desc.activation == "relu6":
        y = relu6(y)
    return y


def _check_input(graph, x):
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None, :, :]
    if x.ndim != 3 or x.shape[0] != graph.input_channels:
        raise DimensionError(
            f"input must have {graph.input_channels} channels, got shape {x.shape}"
        )
    return x


def forward(graph, x):
    """Run the graph on one (C, H, W) image; returns the raw head tensor."""
    x = _check_input(graph, x)
    for desc, p in zip(graph.layers, graph.params):
        x = run_layer(desc, p, x)
    return x


def forward_collect(graph, x):
    """forward() that also returns every activation (input included),
    in execution order; used for quantization calibration."""
    x = _check_input(graph, x)
    acts = [x]
    for desc, p in zip(graph.layers, graph.params):
        x = run_layer(desc, p, x)
        acts.append(x)
    return x, acts
