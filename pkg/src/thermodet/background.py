"""Stationary-feature background model.

Keeps an exponential-moving-average image of the scene, frozen under
(enlarged) person boxes so people never leak into the background, and
produces the background-subtracted network input. During training the
boxes come from ground truth, at inference from the detector's own
post-NMS output; both paths share this implementation.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

DEFAULT_ALPHA = 0.99
DEFAULT_UPDATE_PERIOD = 25
BOX_ENLARGE_PX = 1


@dataclass
class BackgroundState:
    background: np.ndarray
    alpha: float = DEFAULT_ALPHA
    update_period: int = DEFAULT_UPDATE_PERIOD
    frames_since_update: int = 0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.update_period < 1:
            raise ConfigError("update_period must be >= 1")
        if self.background.min() < 0.0 or self.background.max() > 1.0:
            raise ConfigError("background values must lie in [0, 1]")


def init_background(frames, alpha=DEFAULT_ALPHA, update_period=DEFAULT_UPDATE_PERIOD):
    """Average exactly three consecutive normalized frames into the
    initial background (assumes nobody is present at startup)."""
    frames = list(frames)
    if len(frames) != 3:
        raise ConfigError(f"background init needs exactly 3 frames, got {len(frames)}")
    shapes = {np.asarray(f).shape for f in frames}
    if len(shapes) != 1:
        raise DimensionError(f"init frames have mixed shapes: {shapes}")
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in frames])
    return BackgroundState(
        background=stack.mean(axis=0), alpha=alpha, update_period=update_period
    )


def _box_corners(box):
    if hasattr(box, "as_xywh"):
        return box.as_xywh()
    x, y, w, h = box
    return (float(x), float(y), float(w), float(h))


def boxes_to_mask(boxes, shape, enlarge=BOX_ENLARGE_PX):
    """Binary mask that is 1 under any box enlarged by `enlarge` px on
    all four sides, clipped to the image bounds."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for box in boxes:
        x, y, bw, bh = _box_corners(box)
        x0 = max(0, int(math.floor(x)) - enlarge)
        y0 = max(0, int(math.floor(y)) - enlarge)
        x1 = min(w, int(math.ceil(x + bw)) + enlarge)
        y1 = min(h, int(math.ceil(y + bh)) + enlarge)
        if x1 > x0 and y1 > y0:
            mask[y0:y1, x0:x1] = True
    return mask


def apply_update(state, image, boxes):
    """Unconditional background update: blend the detection-masked
    candidate into the EMA."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != state.background.shape:
        raise DimensionError(
            f"image shape {image.shape} != background {state.background.shape}"
        )
    mask = boxes_to_mask(boxes, image.shape)
    # Delta form of B* = alpha*B + (1-alpha)*Bhat keeps masked pixels
    # bit-identical to B.
    delta = np.where(mask, 0.0, image - state.background)
    state.background = np.clip(
        state.background + (1.0 - state.alpha) * delta, 0.0, 1.0
    )
    return state


def update_background(state, image, boxes):
    """Per-frame entry point: counts frames and runs the full update
    once every update_period frames."""
    state.frames_since_update += 1
    if state.frames_since_update < state.update_period:
        return state
    state.frames_since_update = 0
    return apply_update(state, image, boxes)


def subtract(image, state):
    """Background-subtracted network input, values in [-1, 1]."""
    image = np.asarray(image)
    if image.shape != state.background.shape:
        raise DimensionError(
            f"image shape {image.shape} != background {state.background.shape}"
        )
    return (image.astype(np.float64) - state.background).astype(np.float32)
