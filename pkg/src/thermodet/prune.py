"""Iterative structured channel pruning.

Each step removes the globally lowest-saliency output channels (L2 norm
normalized by filter element count) from the first conv and every
non-head pointwise conv, propagating the removal through the dependent
depthwise channel and the next layer's input slice. The campaign
fine-tunes only while the validation loss sits above the early-stop
tolerance.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PruneError
from .graph import (
    CONV3X3,
    DEPTHWISE3X3,
    POINTWISE1X1,
    LayerParams,
    copy_graph,
    count_macs,
    count_params,
)
from .train import dataset_loss, fit


@dataclass
class PruneConfig:
    fraction_per_iter: float = 0.05
    loss_tolerance: float = 1.03
    max_iterations: int = 60
    finetune_max_iters: int = 10_000
    finetune_lr: float = 0.0001
    finetune_lr_drop_at: int = 5000
    finetune_lr_drop_factor: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.fraction_per_iter < 1.0:
            raise ConfigError("fraction_per_iter must be in (0, 1)")
        if self.loss_tolerance < 1.0:
            raise ConfigError("loss_tolerance must be >= 1")
        if self.max_iterations <= 0 or self.finetune_max_iters < 0:
            raise ConfigError("iteration budgets must be positive")


@dataclass
class PruneRecord:
    iteration: int
    removed: list
    params: int
    macs: int
    val_loss: float = None
    finetune_iters: int = 0
    ap: float = None
    f1: float = None


def prunable_layers(graph):
    """Indices whose output channels may be removed: the first conv and
    every pointwise except the head."""
    head = graph.head_index
    return [
        i
        for i, d in enumerate(graph.layers)
        if (d.kind == CONV3X3 or d.kind == POINTWISE1X1) and i != head
    ]


def saliency(graph):
    """(layer, out_channel) -> L2 norm / sqrt(filter element count);
    normalization makes 3x3xC and 1x1xC filters comparable."""
    scores = {}
    for i in prunable_layers(graph):
        w = graph.params[i].w.astype(np.float64)
        flat = w.reshape(w.shape[0], -1)
        norms = np.sqrt((flat**2).sum(axis=1) / flat.shape[1])
        for c, s in enumerate(norms):
            scores[(i, c)] = float(s)
    return scores


def _slice_out(p, keep, bn):
    kw = {"w": p.w[keep], "b": p.b[keep]}
    if bn:
        kw.update(
            bn_gamma=p.bn_gamma[keep],
            bn_beta=p.bn_beta[keep],
            bn_mean=p.bn_mean[keep],
            bn_var=p.bn_var[keep],
        )
    return LayerParams(**kw)


def _slice_in(p, keep, kind):
    if kind == CONV3X3:
        w = p.w[:, keep, :, :]
    else:
        w = p.w[:, keep]
    return LayerParams(
        w=w,
        b=p.b,
        bn_gamma=p.bn_gamma,
        bn_beta=p.bn_beta,
        bn_mean=p.bn_mean,
        bn_var=p.bn_var,
    )


def prune_step(graph, fraction):
    """Remove floor(fraction * prunable filters), at least 1, keeping
    every layer at >= 1 channel. Returns (new graph, removed list)."""
    scores = saliency(graph)
    if not scores:
        raise PruneError("graph has no prunable layers")
    total = len(scores)
    n_remove = max(1, int(fraction * total))
    remaining = {}
    for i, _ in scores:
        remaining[i] = graph.layers[i].out_channels
    selected = []
    for (i, c), _ in sorted(scores.items(), key=lambda kv: (kv[1], kv[0])):
        if len(selected) == n_remove:
            break
        if remaining[i] <= 1:
            continue
        remaining[i] -= 1
        selected.append((i, c))
    if len(selected) < n_remove:
        raise PruneError(
            f"cannot remove {n_remove} filters without emptying a layer "
            f"(only {len(selected)} removable)"
        )

    out = copy_graph(graph)
    drop_by_layer = {}
    for i, c in selected:
        drop_by_layer.setdefault(i, []).append(c)
    for i, drop in drop_by_layer.items():
        keep = np.array(
            [c for c in range(graph.layers[i].out_channels) if c not in set(drop)]
        )
        out.params[i] = _slice_out(out.params[i], keep, out.layers[i].batchnorm)
        out.layers[i].out_channels = len(keep)
        # propagate: dependent depthwise channels, then the input slice
        # of the next cross-channel layer
        j = i + 1
        while out.layers[j].kind == DEPTHWISE3X3:
            out.params[j] = _slice_out(out.params[j], keep, out.layers[j].batchnorm)
            out.layers[j].in_channels = len(keep)
            out.layers[j].out_channels = len(keep)
            j += 1
        out.params[j] = _slice_in(out.params[j], keep, out.layers[j].kind)
        out.layers[j].in_channels = len(keep)
    out.validate()
    return out, sorted(selected)


def _finetune(graph, train_ds, val_ds, tcfg, pcfg, stop_loss):
    from dataclasses import replace

    cfg = replace(
        tcfg,
        max_iters=pcfg.finetune_max_iters,
        base_lr=pcfg.finetune_lr,
        warmup_iters=0,
    )

    def lr_fn(iteration, val_history, c):
        if iteration >= pcfg.finetune_lr_drop_at:
            return pcfg.finetune_lr / pcfg.finetune_lr_drop_factor
        return pcfg.finetune_lr

    def stop_fn(iteration, val_loss):
        return val_loss <= stop_loss

    return fit(graph, train_ds, val_ds, cfg, lr_fn=lr_fn, stop_fn=stop_fn)


def prune_campaign(
    graph,
    train_ds=None,
    val_ds=None,
    prune_cfg=None,
    train_cfg=None,
    eval_fn=None,
    checkpoint_fn=None,
):
    """Run up to max_iterations of prune -> (maybe) fine-tune.

    Without datasets the campaign is structural only (no loss tracking,
    no fine-tuning). Fine-tuning is skipped whenever the current
    validation loss is already within loss_tolerance * L_start, and
    otherwise stops the moment it gets there; the campaign itself never
    aborts on accuracy. Returns (records, final graph).
    """
    pcfg = prune_cfg or PruneConfig()
    structural = train_ds is None
    l_start = None
    if not structural:
        if val_ds is None or train_cfg is None:
            raise ConfigError("fine-tuning campaigns need val_ds and train_cfg")
        l_start = dataset_loss(graph, val_ds, train_cfg)
    records = []
    current = graph
    for iteration in range(1, pcfg.max_iterations + 1):
        try:
            current, removed = prune_step(current, pcfg.fraction_per_iter)
        except PruneError:
            break
        record = PruneRecord(
            iteration=iteration,
            removed=removed,
            params=count_params(current),
            macs=count_macs(current),
        )
        if not structural:
            stop_loss = pcfg.loss_tolerance * l_start
            val_loss = dataset_loss(current, val_ds, train_cfg)
            if val_loss > stop_loss and pcfg.finetune_max_iters > 0:
                result = _finetune(
                    current, train_ds, val_ds, train_cfg, pcfg, stop_loss
                )
                current = result.graph
                record.finetune_iters = result.iterations
                val_loss = min(val_loss, result.best_val_loss)
            record.val_loss = val_loss
            if eval_fn is not None:
                record.ap, record.f1 = eval_fn(current)
        if checkpoint_fn is not None:
            checkpoint_fn(iteration, current)
        records.append(record)
    return records, current


def write_prune_csv(records, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["iteration", "params", "macs", "val_loss", "finetune_iters", "ap", "f1"]
        )
        for r in records:
            writer.writerow(
                [
                    r.iteration,
                    r.params,
                    r.macs,
                    "" if r.val_loss is None else f"{r.val_loss:.6f}",
                    r.finetune_iters,
                    "" if r.ap is None else f"{r.ap:.4f}",
                    "" if r.f1 is None else f"{r.f1:.4f}",
                ]
            )
