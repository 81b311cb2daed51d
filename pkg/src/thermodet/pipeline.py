"""Deployment-shaped frame loop.

Ingest -> normalize -> background subtract (+ optional difference
channel) -> forward (f32 or int8) -> decode -> NMS -> background update
with the detector's own boxes. Frames are consumed strictly one at a
time; the first three only initialize the background.
"""

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import infer
from .background import (
    DEFAULT_ALPHA,
    DEFAULT_UPDATE_PERIOD,
    init_background,
    subtract,
    update_background,
)
from .detect import decode, nms
from .errors import ConfigError
from .quantize import QuantizedModel, forward_int8, quantize_tensor
from .thermal_io import (
    DEFAULT_DIFF_STRIDE,
    NORMALIZE_HI_C,
    NORMALIZE_LO_C,
    ThermalFrame,
    denormalize,
    diff_image,
    normalize,
    write_frame,
)

BG_INIT_FRAMES = 3
STAGES = ("normalize_bg_sub", "inference", "decode_nms", "bg_update")


@dataclass
class PipelineConfig:
    conf_threshold: float = 0.5
    nms_threshold: float = 0.3
    bg_alpha: float = DEFAULT_ALPHA
    bg_update_period: int = DEFAULT_UPDATE_PERIOD
    use_bg_sub: bool = True
    use_diff: bool = False
    diff_stride: int = DEFAULT_DIFF_STRIDE
    normalize_lo: float = NORMALIZE_LO_C
    normalize_hi: float = NORMALIZE_HI_C
    dump_bg_every: int = 0
    dump_bg_dir: str = None

    def __post_init__(self):
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ConfigError("conf_threshold must be in [0, 1]")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ConfigError("nms_threshold must be in [0, 1]")
        if self.dump_bg_every and not self.dump_bg_dir:
            raise ConfigError("dump_bg_every needs dump_bg_dir")


@dataclass
class PipelineResult:
    detections: list  # one list per input frame
    timings: list  # one dict per processed frame, seconds per stage

    def stage_totals(self):
        totals = dict.fromkeys(STAGES, 0.0)
        for row in self.timings:
            for stage in STAGES:
                totals[stage] += row[stage]
        return totals


def _model_channels(model):
    return model.input_channels


def run(frames, model, cfg=None):
    """Run the detector over a frame stream (iterable of ThermalFrame).

    `model` is either a BN-folded ModelGraph (f32 executor) or a
    QuantizedModel (int8 executor).
    """
    cfg = cfg or PipelineConfig()
    is_int8 = isinstance(model, QuantizedModel)
    if not is_int8 and model.has_batchnorm():
        model = infer.fold_batchnorm(model)
    expect_channels = 2 if cfg.use_diff else 1
    if _model_channels(model) != expect_channels:
        raise ConfigError(
            f"model expects {_model_channels(model)} input channels, pipeline "
            f"produces {expect_channels} (use_diff={cfg.use_diff})"
        )

    detections, timings = [], []
    init_buffer, history = [], []
    state = None
    n_seen = 0
    if cfg.dump_bg_dir:
        Path(cfg.dump_bg_dir).mkdir(parents=True, exist_ok=True)

    for frame in frames:
        n_seen += 1
        img = normalize(frame, cfg.normalize_lo, cfg.normalize_hi)
        if state is None:
            init_buffer.append(img)
            history.append(img)
            detections.append([])
            if len(init_buffer) == BG_INIT_FRAMES:
                state = init_background(
                    init_buffer,
                    alpha=cfg.bg_alpha,
                    update_period=cfg.bg_update_period,
                )
            continue

        t0 = time.perf_counter()
        base = subtract(img, state) if cfg.use_bg_sub else img
        channels = [base]
        if cfg.use_diff:
            if len(history) >= cfg.diff_stride:
                channels.append(diff_image(img, history[-cfg.diff_stride]))
            else:
                channels.append(np.zeros_like(img))
        x = np.stack(channels).astype(np.float32)
        t1 = time.perf_counter()

        if is_int8:
            xq = quantize_tensor(x, model.input_qp)
            _, raw = forward_int8(model, xq)
        else:
            raw = infer.forward(model, x)
        t2 = time.perf_counter()

        dets = nms(
            decode(raw, model.anchors, cfg.conf_threshold), cfg.nms_threshold
        )
        t3 = time.perf_counter()

        update_background(state, img, dets)
        t4 = time.perf_counter()

        if cfg.dump_bg_every and n_seen % cfg.dump_bg_every == 0:
            temps = denormalize(
                state.background, cfg.normalize_lo, cfg.normalize_hi
            )
            bg_frame = ThermalFrame(temps=temps, index=n_seen)
            write_frame(bg_frame, Path(cfg.dump_bg_dir) / f"bg_{n_seen:06d}.tiff")

        history.append(img)
        detections.append(dets)
        timings.append(
            {
                "frame": n_seen - 1,
                "normalize_bg_sub": t1 - t0,
                "inference": t2 - t1,
                "decode_nms": t3 - t2,
                "bg_update": t4 - t3,
            }
        )

    if n_seen < BG_INIT_FRAMES:
        raise ConfigError(
            f"stream has {n_seen} frames; background init needs {BG_INIT_FRAMES}"
        )
    return PipelineResult(detections=detections, timings=timings)


def write_timing_csv(result, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame"] + list(STAGES))
        for row in result.timings:
            writer.writerow(
                [row["frame"]] + [f"{row[s]:.9f}" for s in STAGES]
            )
