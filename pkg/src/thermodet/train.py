"""Hand-rolled detector training: single-class YOLOv2-style loss, SGD
with momentum + weight decay, exponential warm-up, reduce-on-plateau,
augmentation and validation-loss checkpoint selection."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import infer
from .backprop import backward_train, forward_train
from .background import init_background, subtract, update_background
from .errors import ConfigError, TrainingDivergedError
from .graph import DOWNSAMPLE, copy_graph
from .thermal_io import DEFAULT_DIFF_STRIDE, diff_image, normalize

AUG_CONTRAST = (0.8, 1.2)
AUG_BRIGHTNESS = (-0.1, 0.1)


@dataclass
class TrainConfig:
    max_iters: int = 50_000
    base_lr: float = 0.001
    warmup_iters: int = 1000
    plateau_patience: int = 5000
    lr_decay_factor: float = 10.0
    weight_decay: float = 0.03
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    val_cadence: int = 1000
    lambda_coord: float = 5.0
    lambda_obj: float = 1.0
    lambda_noobj: float = 0.5
    ignore_iou: float = 0.6
    augment: bool = True

    def __post_init__(self):
        if self.max_iters <= 0 or self.batch_size <= 0 or self.val_cadence <= 0:
            raise ConfigError("iteration counts and batch size must be positive")
        if self.base_lr <= 0 or self.lr_decay_factor <= 1:
            raise ConfigError("base_lr must be > 0 and lr_decay_factor > 1")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("bad weight_decay/momentum")
        if self.warmup_iters < 0 or self.plateau_patience <= 0:
            raise ConfigError("bad warmup/patience")


# --- loss --------------------------------------------------------------


def _sigmoid(t):
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _shape_iou(w, h, anchors):
    inter = np.minimum(w, anchors[:, 0]) * np.minimum(h, anchors[:, 1])
    return inter / (w * h + anchors[:, 0] * anchors[:, 1] - inter)


def build_targets(gt_boxes, anchors, grid_hw, cell=DOWNSAMPLE):
    """Assign each ground-truth box to the best-shaped anchor in the
    cell holding the box center; first box wins on collisions."""
    grid_h, grid_w = grid_hw
    n_anchors = len(anchors)
    resp = np.zeros((n_anchors, grid_h, grid_w), dtype=bool)
    tgt = np.zeros((n_anchors, 4, grid_h, grid_w), dtype=np.float64)
    for x, y, w, h in gt_boxes:
        cx, cy = x + w / 2.0, y + h / 2.0
        j = min(grid_w - 1, max(0, int(cx / cell)))
        i = min(grid_h - 1, max(0, int(cy / cell)))
        a = int(np.argmax(_shape_iou(w, h, anchors)))
        if resp[a, i, j]:
            continue
        resp[a, i, j] = True
        tgt[a, :, i, j] = (
            cx / cell - j,
            cy / cell - i,
            math.log(w / anchors[a, 0]),
            math.log(h / anchors[a, 1]),
        )
    return resp, tgt


def _best_gt_iou(px, py, pw, ph, gt_boxes):
    best = np.zeros_like(px)
    x0, y0 = px - pw / 2.0, py - ph / 2.0
    for gx, gy, gw, gh in gt_boxes:
        iw = np.minimum(x0 + pw, gx + gw) - np.maximum(x0, gx)
        ih = np.minimum(y0 + ph, gy + gh) - np.maximum(y0, gy)
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = pw * ph + gw * gh - inter
        np.maximum(best, inter / union, out=best)
    return best


def yolo_loss(raw, gt_boxes, anchors, cfg):
    """Single-class YOLOv2 loss on one head tensor.

    Returns (loss, gradient w.r.t. raw). Coordinate MSE lives in sigmoid
    space for x/y and log space for w/h; non-responsible anchors whose
    predicted box overlaps a ground truth above ignore_iou contribute
    nothing.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    c, grid_h, grid_w = raw.shape
    n_anchors = c // 5
    r = raw.reshape(n_anchors, 5, grid_h, grid_w).astype(np.float64)
    resp, tgt = build_targets(gt_boxes, anchors, (grid_h, grid_w))

    sx, sy = _sigmoid(r[:, 0]), _sigmoid(r[:, 1])
    so = _sigmoid(r[:, 4])

    cols = np.arange(grid_w)[None, None, :]
    rows = np.arange(grid_h)[None, :, None]
    # tw/th are clipped for the ignore-IoU computation only
    pw = anchors[:, 0, None, None] * np.exp(np.clip(r[:, 2], -10, 10))
    ph = anchors[:, 1, None, None] * np.exp(np.clip(r[:, 3], -10, 10))
    best_iou = _best_gt_iou(
        (cols + sx) * DOWNSAMPLE, (rows + sy) * DOWNSAMPLE, pw, ph, gt_boxes
    )
    noobj = (~resp) & (best_iou < cfg.ignore_iou)

    dx, dy = sx - tgt[:, 0], sy - tgt[:, 1]
    dw, dh = r[:, 2] - tgt[:, 2], r[:, 3] - tgt[:, 3]
    loss = (
        cfg.lambda_coord * np.sum(resp * (dx**2 + dy**2 + dw**2 + dh**2))
        + cfg.lambda_obj * np.sum(resp * (so - 1.0) ** 2)
        + cfg.lambda_noobj * np.sum(noobj * so**2)
    )

    grad = np.zeros_like(r)
    grad[:, 0] = resp * cfg.lambda_coord * 2.0 * dx * sx * (1.0 - sx)
    grad[:, 1] = resp * cfg.lambda_coord * 2.0 * dy * sy * (1.0 - sy)
    grad[:, 2] = resp * cfg.lambda_coord * 2.0 * dw
    grad[:, 3] = resp * cfg.lambda_coord * 2.0 * dh
    dso = so * (1.0 - so)
    grad[:, 4] = (
        resp * cfg.lambda_obj * 2.0 * (so - 1.0) * dso
        + noobj * cfg.lambda_noobj * 2.0 * so * dso
    )
    return float(loss), grad.reshape(raw.shape).astype(raw.dtype)


# --- learning-rate schedule ---------------------------------------------


def learning_rate(iteration, val_history, cfg):
    """Exponential warm-up from base_lr/100, then divide by the decay
    factor at every plateau of plateau_patience iterations without a
    validation-loss improvement."""
    if iteration < cfg.warmup_iters:
        return cfg.base_lr * 10.0 ** (-2.0 * (1.0 - iteration / cfg.warmup_iters))
    decays = 0
    best = math.inf
    anchor = None
    for it, loss in val_history:
        if anchor is None:
            anchor = it
        if loss < best:
            best = loss
            anchor = it
        elif it - anchor >= cfg.plateau_patience:
            decays += 1
            anchor = it
    return cfg.base_lr / cfg.lr_decay_factor**decays


# --- augmentation --------------------------------------------------------


def flip_horizontal(image, boxes):
    w = image.shape[-1]
    return image[..., ::-1].copy(), [(w - x - bw, y, bw, bh) for x, y, bw, bh in boxes]


def flip_vertical(image, boxes):
    h = image.shape[-2]
    return (
        image[..., ::-1, :].copy(),
        [(x, h - y - bh, bw, bh) for x, y, bw, bh in boxes],
    )


def adjust_pixels(image, gain, offset, value_range=(0.0, 1.0)):
    out = image * gain + offset
    return np.clip(out, value_range[0], value_range[1]).astype(image.dtype)


def augment(image, boxes, rng, value_range=(0.0, 1.0)):
    """Random contrast, brightness, horizontal and vertical flips, each
    with probability 0.5; boxes are remapped exactly under flips."""
    gain, offset = 1.0, 0.0
    if rng.random() < 0.5:
        gain = rng.uniform(*AUG_CONTRAST)
    if rng.random() < 0.5:
        offset = rng.uniform(*AUG_BRIGHTNESS)
    image = adjust_pixels(image, gain, offset, value_range)
    boxes = list(boxes)
    if rng.random() < 0.5:
        image, boxes = flip_horizontal(image, boxes)
    if rng.random() < 0.5:
        image, boxes = flip_vertical(image, boxes)
    return image, boxes


# --- dataset preparation ---------------------------------------------------


@dataclass
class DetectionDataset:
    inputs: np.ndarray
    boxes: list
    value_range: tuple = (0.0, 1.0)

    def __len__(self):
        return len(self.inputs)


def build_dataset(
    frames,
    annotations,
    use_bg_sub=False,
    use_diff=False,
    lo=None,
    hi=None,
    bg_alpha=0.99,
    bg_update_period=25,
    diff_stride=DEFAULT_DIFF_STRIDE,
):
    """Turn a frame sequence + annotations into network inputs.

    With use_bg_sub the first channel is I0 - B where B is driven by the
    ground-truth boxes, exactly as at deployment but with perfect masks.
    """
    kwargs = {}
    if lo is not None:
        kwargs["lo"] = lo
    if hi is not None:
        kwargs["hi"] = hi
    norm = [normalize(f, **kwargs) for f in frames]
    boxes_by_frame = {}
    for b in annotations:
        boxes_by_frame.setdefault(b.frame_index, []).append(b.as_xywh())

    if use_bg_sub:
        if len(norm) < 3:
            raise ConfigError("background subtraction needs at least 3 frames")
        state = init_background(norm[:3], alpha=bg_alpha, update_period=bg_update_period)

    inputs, boxes = [], []
    for t, img in enumerate(norm):
        frame_boxes = boxes_by_frame.get(t, [])
        if use_bg_sub:
            base = subtract(img, state)
            update_background(state, img, frame_boxes)
        else:
            base = img
        channels = [base]
        if use_diff:
            if t >= diff_stride:
                channels.append(diff_image(img, norm[t - diff_stride]))
            else:
                channels.append(np.zeros_like(img))
        inputs.append(np.stack(channels).astype(np.float32))
        boxes.append(frame_boxes)
    value_range = (-1.0, 1.0) if (use_bg_sub or use_diff) else (0.0, 1.0)
    return DetectionDataset(
        inputs=np.stack(inputs), boxes=boxes, value_range=value_range
    )


def concat_datasets(parts):
    """Merge independently built per-sequence datasets (each keeps its
    own background history)."""
    if not parts:
        raise ConfigError("no datasets to concatenate")
    if len({p.value_range for p in parts}) != 1:
        raise ConfigError("datasets have mixed value ranges")
    return DetectionDataset(
        inputs=np.concatenate([p.inputs for p in parts]),
        boxes=[b for p in parts for b in p.boxes],
        value_range=parts[0].value_range,
    )


def build_multi_dataset(sequences, **kwargs):
    """Build one dataset from several (frames, annotations) sequences."""
    return concat_datasets(
        [build_dataset(frames, ann, **kwargs) for frames, ann in sequences]
    )


# --- optimization ----------------------------------------------------------


def dataset_loss(graph, ds, cfg):
    """Mean loss over a dataset, inference-mode forward."""
    total = 0.0
    for x, bxs in zip(ds.inputs, ds.boxes):
        head = infer.forward(graph, x)
        loss, _ = yolo_loss(head, bxs, graph.anchors, cfg)
        total += loss
    return total / len(ds)


def _sgd_step(graph, grads, bufs, lr, cfg):
    for p, g, buf in zip(graph.params, grads, bufs):
        for name, arr in p.trainable():
            g_eff = g[name]
            if name == "w" and cfg.weight_decay > 0:
                g_eff = g_eff + cfg.weight_decay * arr
            buf[name] = cfg.momentum * buf[name] + g_eff
            arr -= lr * buf[name]


@dataclass
class FitResult:
    graph: object
    log: list
    best_val_loss: float
    iterations: int


def fit(graph, train_ds, val_ds, cfg, lr_fn=learning_rate, stop_fn=None):
    """Core SGD loop; deterministic given cfg.seed. Checkpoints at every
    validation and returns the lowest-validation-loss weights."""
    if not len(train_ds) or not len(val_ds):
        raise ConfigError("datasets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    bufs = [
        {name: np.zeros_like(arr) for name, arr in p.trainable()}
        for p in graph.params
    ]
    best_val = math.inf
    best_graph = copy_graph(graph)
    val_history, log = [], []
    n = len(train_ds)
    iterations = 0
    for it in range(cfg.max_iters):
        lr = lr_fn(it, val_history, cfg)
        idx = rng.integers(0, n, size=cfg.batch_size)
        xs, bs = [], []
        for s in idx:
            img, bxs = train_ds.inputs[s], train_ds.boxes[s]
            if cfg.augment:
                img, bxs = augment(img, bxs, rng, train_ds.value_range)
            xs.append(img)
            bs.append(bxs)
        xb = np.stack(xs)
        head, caches = forward_train(graph, xb)
        total = 0.0
        g_head = np.empty_like(head)
        for s in range(len(xs)):
            loss_s, g_s = yolo_loss(head[s], bs[s], graph.anchors, cfg)
            total += loss_s
            g_head[s] = g_s
        train_loss = total / len(xs)
        if not math.isfinite(train_loss) or not np.all(np.isfinite(g_head)):
            raise TrainingDivergedError(
                f"loss {train_loss} at iteration {it + 1} (lr {lr:.2e})"
            )
        # exploding activations can surface as inf/nan in the gradients
        # one step before the loss itself goes non-finite
        with np.errstate(invalid="ignore", over="ignore"):
            grads = backward_train(graph, caches, g_head / len(xs))
        for g in grads:
            for arr in g.values():
                if not np.all(np.isfinite(arr)):
                    raise TrainingDivergedError(
                        f"non-finite gradient at iteration {it + 1} (lr {lr:.2e})"
                    )
        _sgd_step(graph, grads, bufs, lr, cfg)
        iterations = it + 1
        row = {"iter": iterations, "lr": lr, "train_loss": train_loss, "val_loss": None}
        if iterations % cfg.val_cadence == 0 or iterations == cfg.max_iters:
            val_loss = dataset_loss(graph, val_ds, cfg)
            val_history.append((iterations, val_loss))
            row["val_loss"] = val_loss
            if val_loss < best_val:
                best_val = val_loss
                best_graph = copy_graph(graph)
            log.append(row)
            if stop_fn is not None and stop_fn(iterations, val_loss):
                break
            continue
        log.append(row)
    return FitResult(
        graph=best_graph, log=log, best_val_loss=best_val, iterations=iterations
    )


def train(graph, train_ds, val_ds, cfg):
    """Full training recipe; returns (best model, training log)."""
    result = fit(graph, train_ds, val_ds, cfg)
    return result.graph, result.log


def save_log_csv(log, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "lr", "train_loss", "val_loss"])
        for row in log:
            writer.writerow(
                [
                    row["iter"],
                    f"{row['lr']:.8f}",
                    f"{row['train_loss']:.6f}",
                    "" if row["val_loss"] is None else f"{row['val_loss']:.6f}",
                ]
            )
