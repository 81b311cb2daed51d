"""Batched training-mode forward/backward passes.

Convolutions run per sample through the kernel backends; batchnorm uses
batch statistics across (N, H, W) per channel, so gradients couple the
whole batch. Gradients for conv bias under training-mode BN come out
zero, as they must.
"""

import numpy as np

from . import kernels
from .graph import BN_EPS, CONV3X3, DEPTHWISE3X3, RELU6

BN_MOMENTUM = 0.1


def _layer_forward(desc, p, x):
    if desc.kind == CONV3X3:
        return kernels.conv3x3(x, p.w, p.b, desc.stride)
    if desc.kind == DEPTHWISE3X3:
        return kernels.depthwise3x3(x, p.w, p.b, desc.stride)
    return kernels.pointwise(x, p.w, p.b)


def _layer_backward(desc, p, x, gy):
    if desc.kind == CONV3X3:
        return kernels.conv3x3_bwd(x, p.w, gy, desc.stride)
    if desc.kind == DEPTHWISE3X3:
        return kernels.depthwise3x3_bwd(x, p.w, gy, desc.stride)
    return kernels.pointwise_bwd(x, p.w, gy)


def forward_train(graph, xb, update_stats=True):
    """Run a (N, C, H, W) batch in training mode; returns the head batch
    and the per-layer caches backward_train needs."""
    caches = []
    cur = xb
    for desc, p in zip(graph.layers, graph.params):
        cache = {"x": cur}
        cur = np.stack([_layer_forward(desc, p, cur[s]) for s in range(cur.shape[0])])
        if desc.batchnorm:
            mu = cur.mean(axis=(0, 2, 3))
            var = cur.var(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (cur - mu[None, :, None, None]) * inv[None, :, None, None]
            cur = (
                p.bn_gamma[None, :, None, None] * xhat
                + p.bn_beta[None, :, None, None]
            )
            cache["bn"] = (xhat, inv)
            if update_stats:
                p.bn_mean[:] = (1.0 - BN_MOMENTUM) * p.bn_mean + BN_MOMENTUM * mu
                p.bn_var[:] = (1.0 - BN_MOMENTUM) * p.bn_var + BN_MOMENTUM * var
        if desc.activation == RELU6:
            cache["mask"] = (cur > 0.0) & (cur < 6.0)
            cur = np.clip(cur, 0.0, 6.0)
        caches.append(cache)
    return cur, caches


def backward_train(graph, caches, g_head):
    """Backpropagate the head gradient; returns per-layer dicts with the
    gradients of every trainable array."""
    g = g_head
    grads = [None] * len(graph.layers)
    for idx in range(len(graph.layers) - 1, -1, -1):
        desc, p, cache = graph.layers[idx], graph.params[idx], caches[idx]
        layer_grads = {}
        if desc.activation == RELU6:
            g = g * cache["mask"]
        if desc.batchnorm:
            xhat, inv = cache["bn"]
            layer_grads["bn_gamma"] = (g * xhat).sum(axis=(0, 2, 3))
            layer_grads["bn_beta"] = g.sum(axis=(0, 2, 3))
            g_mean = g.mean(axis=(0, 2, 3))
            gx_mean = (g * xhat).mean(axis=(0, 2, 3))
            g = (p.bn_gamma * inv)[None, :, None, None] * (
                g - g_mean[None, :, None, None] - xhat * gx_mean[None, :, None, None]
            )
        xb = cache["x"]
        gw = np.zeros_like(p.w)
        gb = np.zeros_like(p.b)
        gx = np.empty_like(xb)
        for s in range(xb.shape[0]):
            gxs, gws, gbs = _layer_backward(desc, p, xb[s], np.ascontiguousarray(g[s]))
            gw += gws
            gb += gbs
            gx[s] = gxs
        layer_grads["w"] = gw
        layer_grads["b"] = gb
        grads[idx] = layer_grads
        g = gx
    return grads
